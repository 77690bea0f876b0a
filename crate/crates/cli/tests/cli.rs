use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use logsam_core::detect2seg::Mask;
use logsam_core::grounder::GrounderModel;
use logsam_core::tensor::Checkpoint;
use serde_json::Value;

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn logsam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logsam"))
        .args(args)
        .env_remove("LOGSAM_RULES_DIR")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Every file under `dir`, relative path → bytes.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn run_golden(out_dir: &Path, extra: &[&str]) -> Output {
    let cfg = golden().join("config.json");
    let mut args = vec!["run", "--config", s(&cfg), "--paths.out_dir", s(out_dir)];
    args.extend_from_slice(extra);
    logsam(&args)
}

#[test]
fn golden_run_reproduces_committed_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&run_golden(tmp.path(), &[]));
    let got = tree(tmp.path());
    let want = tree(&golden().join("expected"));
    assert_eq!(
        got.iter().map(|(p, _)| p).collect::<Vec<_>>(),
        want.iter().map(|(p, _)| p).collect::<Vec<_>>()
    );
    for ((p, a), (_, b)) in got.iter().zip(&want) {
        assert!(a == b, "{} differs", p.display());
    }
}

#[test]
fn run_equals_composed_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let (whole, parts) = (tmp.path().join("run"), tmp.path().join("parts"));
    ok(&run_golden(&whole, &[]));

    let g = golden();
    let p = |n: &str| parts.join(n);
    ok(&logsam(&[
        "extract-prompts",
        "--transcripts",
        s(&g.join("transcripts.jsonl")),
        "--out",
        s(&p("prompts.jsonl")),
    ]));
    ok(&logsam(&[
        "detect",
        "--checkpoint",
        s(&g.join("model.bin")),
        "--prompts",
        s(&p("prompts.jsonl")),
        "--images",
        s(&g.join("images")),
        "--out",
        s(&p("detections.jsonl")),
    ]));
    ok(&logsam(&[
        "filter",
        "--detections",
        s(&p("detections.jsonl")),
        "--tau",
        "0.3",
        "--out",
        s(&p("filtered.jsonl")),
    ]));
    ok(&logsam(&[
        "segment",
        "--detections",
        s(&p("filtered.jsonl")),
        "--masks-out",
        s(&p("masks")),
    ]));
    ok(&logsam(&[
        "evaluate",
        "--annotations",
        s(&g.join("annotations.jsonl")),
        "--gt-masks",
        s(&g.join("gt_masks")),
        "--prompts",
        s(&p("prompts.jsonl")),
        "--detections",
        s(&p("filtered.jsonl")),
        "--masks",
        s(&p("masks")),
        "--out",
        s(&p("report.json")),
    ]));
    fs::write(p("failures.jsonl"), "").unwrap();
    assert_eq!(tree(&whole), tree(&parts));
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&run_golden(tmp.path(), &[]));
    let first = tree(tmp.path());
    ok(&run_golden(tmp.path(), &[]));
    assert_eq!(first, tree(tmp.path()));
}

#[test]
fn dictation_prompts_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p.jsonl");
    ok(&logsam(&[
        "extract-prompts",
        "--transcripts",
        s(&golden().join("transcripts.jsonl")),
        "--out",
        s(&out),
    ]));
    let got = jsonl(&out);
    let want = jsonl(&core_fixture("dictation_examples_expected.jsonl"));
    assert_eq!(got.len(), 6);
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g["schema_version"], 1);
        for key in ["case_id", "class", "evidence"] {
            assert_eq!(g[key], w[key], "{key} of {}", w["case_id"]);
        }
    }
}

#[test]
fn empty_transcripts_give_empty_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (inp, out) = (tmp.path().join("t.jsonl"), tmp.path().join("p.jsonl"));
    fs::write(&inp, "").unwrap();
    ok(&logsam(&[
        "extract-prompts",
        "--transcripts",
        s(&inp),
        "--out",
        s(&out),
    ]));
    assert_eq!(fs::read(&out).unwrap(), b"");
}

#[test]
fn broken_json_line_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let (inp, out) = (tmp.path().join("t.jsonl"), tmp.path().join("p.jsonl"));
    fs::write(
        &inp,
        "{\"case_id\":\"a\",\"text\":\"glioma\"}\n{\"case_id\":\"b\",\"text\":\"normal\"}\n{\"case_id\":\"c\",\"text\n",
    )
    .unwrap();
    let r = logsam(&["extract-prompts", "--transcripts", s(&inp), "--out", s(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 3"));
    assert!(!out.exists());
}

#[test]
fn missing_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg: Value = serde_json::from_slice(&fs::read(golden().join("config.json")).unwrap()).unwrap();
    cfg["paths"].as_object_mut().unwrap().remove("checkpoint");
    let path = tmp.path().join("c.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let r = logsam(&["run", "--config", s(&path)]);
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("checkpoint") && err.contains("paths"), "{err}");

    cfg["paths"]["checkpoint"] = "model.bin".into();
    cfg.as_object_mut().unwrap().remove("tau");
    fs::write(&path, cfg.to_string()).unwrap();
    let err = String::from_utf8_lossy(&logsam(&["run", "--config", s(&path)]).stderr).into_owned();
    assert!(err.contains("tau"), "{err}");
}

#[test]
fn tau_outside_unit_interval_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run_golden(tmp.path(), &["--tau", "1.5"]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("tau"));
}

#[test]
fn missing_image_is_a_per_case_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("images");
    fs::create_dir(&images).unwrap();
    for e in fs::read_dir(golden().join("images")).unwrap() {
        let p = e.unwrap().path();
        if !p.ends_with("gg_227.pgm") {
            fs::copy(&p, images.join(p.file_name().unwrap())).unwrap();
        }
    }
    let out = tmp.path().join("d.jsonl");
    let r = logsam(&[
        "detect",
        "--checkpoint",
        s(&golden().join("model.bin")),
        "--prompts",
        s(&golden().join("expected/prompts.jsonl")),
        "--images",
        s(&images),
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    let failure: Value = serde_json::from_str(String::from_utf8_lossy(&r.stderr).lines().next().unwrap()).unwrap();
    assert_eq!(failure["case_id"], "gg_227");
    assert_eq!(failure["stage"], "detect");
    let got = jsonl(&out);
    assert_eq!(got.len(), 5);
    assert!(got.iter().all(|d| d["case_id"] != "gg_227"));
}

#[test]
fn healthy_prompt_gives_zero_boxes() {
    let dets = jsonl(&golden().join("expected/detections.jsonl"));
    let prompts = jsonl(&golden().join("expected/prompts.jsonl"));
    for (d, p) in dets.iter().zip(&prompts) {
        assert_eq!(d["case_id"], p["case_id"]);
        let n = d["boxes"].as_array().unwrap().len();
        assert_eq!(n == 0, p["prompt"] == "healthy");
    }
}

fn write_dets(path: &Path, scores: &[f64]) {
    let boxes: Vec<Value> = scores
        .iter()
        .enumerate()
        .map(|(i, &sc)| {
            serde_json::json!({"x1": i as f64, "y1": 0.0, "x2": i as f64 + 4.0, "y2": 5.0, "score": sc, "label": "glioma"})
        })
        .collect();
    let rec = serde_json::json!({"schema_version": 1, "case_id": "a", "width": 16, "height": 8, "boxes": boxes});
    fs::write(path, format!("{rec}\n")).unwrap();
}

#[test]
fn filter_threshold_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    write_dets(&p("d.jsonl"), &[0.1, 0.3, 0.29999, 0.9, 0.0]);
    let filter = |inp: &str, tau: &str, out: &str| {
        ok(&logsam(&[
            "filter",
            "--detections",
            s(&p(inp)),
            "--tau",
            tau,
            "--out",
            s(&p(out)),
        ]))
    };

    filter("d.jsonl", "0", "zero.jsonl");
    assert_eq!(jsonl(&p("zero.jsonl")), jsonl(&p("d.jsonl")));

    filter("d.jsonl", "0.3", "f.jsonl");
    let kept: Vec<f64> = jsonl(&p("f.jsonl"))[0]["boxes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["score"].as_f64().unwrap())
        .collect();
    assert_eq!(kept, [0.3, 0.9]);

    filter("f.jsonl", "0.3", "ff.jsonl");
    assert_eq!(fs::read(p("f.jsonl")).unwrap(), fs::read(p("ff.jsonl")).unwrap());
}

#[test]
fn segment_box_fill_and_empty_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    write_dets(&p("d.jsonl"), &[0.5, 0.6]);
    let empty = serde_json::json!({"schema_version": 1, "case_id": "b", "width": 16, "height": 8, "boxes": []});
    let mut text = fs::read_to_string(p("d.jsonl")).unwrap();
    text.push_str(&format!("{empty}\n"));
    fs::write(p("d.jsonl"), text).unwrap();

    ok(&logsam(&[
        "segment",
        "--detections",
        s(&p("d.jsonl")),
        "--masks-out",
        s(&p("m")),
    ]));
    let m0 = Mask::load(&p("m/a__0.pgm")).unwrap();
    assert_eq!(m0.count(), 4 * 5);
    let merged = Mask::load(&p("m/a.pgm")).unwrap();
    // boxes at x∈[0,4) and x∈[1,5), both y∈[0,5)
    assert_eq!(merged.count(), 5 * 5);
    let b = Mask::load(&p("m/b.pgm")).unwrap();
    assert_eq!((b.dims(), b.count()), ((16, 8), 0));
}

#[test]
fn segment_external_passthrough_and_missing_mask() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    write_dets(&p("d.jsonl"), &[0.5, 0.6]);
    fs::create_dir(p("ext")).unwrap();
    let mut m = Mask::empty(16, 8);
    m.bits[3] = true;
    m.bits[20] = true;
    m.save(&p("ext/a__0.pgm")).unwrap();

    let r = logsam(&[
        "segment",
        "--detections",
        s(&p("d.jsonl")),
        "--segmenter",
        "external",
        "--external-masks",
        s(&p("ext")),
        "--masks-out",
        s(&p("out")),
    ]);
    // box 1 has no external mask
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(
        fs::read(p("out/a__0.pgm")).unwrap(),
        fs::read(p("ext/a__0.pgm")).unwrap()
    );
    assert!(!p("out/a__1.pgm").exists());
    assert_eq!(Mask::load(&p("out/a.pgm")).unwrap(), m);
}

#[test]
fn ground_truth_scores_perfectly_against_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let g = golden();
    let anns = jsonl(&g.join("annotations.jsonl"));
    let mut dets = String::new();
    let mut prompts = String::new();
    for a in &anns {
        let boxes: Vec<Value> = a["boxes_yolo"]
            .as_array()
            .unwrap()
            .iter()
            .map(|b| {
                let v: Vec<f64> = b.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
                let (w, h) = (32.0, 32.0);
                serde_json::json!({
                    "x1": (v[0] - v[2] / 2.0) * w, "y1": (v[1] - v[3] / 2.0) * h,
                    "x2": (v[0] + v[2] / 2.0) * w, "y2": (v[1] + v[3] / 2.0) * h,
                    "score": 1.0, "label": a["class"],
                })
            })
            .collect();
        dets += &format!(
            "{}\n",
            serde_json::json!({"schema_version": 1, "case_id": a["case_id"], "width": 32, "height": 32, "boxes": boxes})
        );
        prompts += &format!(
            "{}\n",
            serde_json::json!({"schema_version": 1, "case_id": a["case_id"], "class": a["class"], "prompt": a["class"]})
        );
    }
    fs::write(tmp.path().join("d.jsonl"), dets).unwrap();
    fs::write(tmp.path().join("p.jsonl"), prompts).unwrap();
    let out = tmp.path().join("r.json");
    ok(&logsam(&[
        "evaluate",
        "--annotations",
        s(&g.join("annotations.jsonl")),
        "--gt-masks",
        s(&g.join("gt_masks")),
        "--prompts",
        s(&tmp.path().join("p.jsonl")),
        "--detections",
        s(&tmp.path().join("d.jsonl")),
        "--masks",
        s(&g.join("gt_masks")),
        "--out",
        s(&out),
    ]));
    let r: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    for key in ["map50", "mean_iou", "mean_dice", "case_accuracy"] {
        assert!((r[key].as_f64().unwrap() - 1.0).abs() < 1e-12, "{key} = {}", r[key]);
    }
    assert!(r["conventions"].is_object());
}

#[test]
fn suite_case_accuracy_is_eleven_of_twelve() {
    let tmp = tempfile::tempdir().unwrap();
    let suite = core_fixture("case_suite.jsonl");
    let prompts = tmp.path().join("p.jsonl");
    ok(&logsam(&[
        "extract-prompts",
        "--transcripts",
        s(&suite),
        "--out",
        s(&prompts),
    ]));
    let anns: String = jsonl(&suite)
        .iter()
        .map(|c| {
            format!(
                "{}\n",
                serde_json::json!({"schema_version": 1, "case_id": c["case_id"], "class": c["class"], "width": 32, "height": 32, "boxes_yolo": []})
            )
        })
        .collect();
    fs::write(tmp.path().join("a.jsonl"), anns).unwrap();
    let out = tmp.path().join("r.json");
    ok(&logsam(&[
        "evaluate",
        "--annotations",
        s(&tmp.path().join("a.jsonl")),
        "--prompts",
        s(&prompts),
        "--out",
        s(&out),
    ]));
    let r: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(r["case_accuracy"].as_f64().unwrap(), 11.0 / 12.0);
    assert_eq!(format!("{:.4}", r["case_accuracy"].as_f64().unwrap()), "0.9167");
}

#[test]
fn healthy_only_run() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    let cases = "{\"case_id\":\"h1\",\"class\":\"healthy\"}\n{\"case_id\":\"h2\",\"class\":\"healthy\"}\n";
    fs::write(p("cases.jsonl"), cases).unwrap();
    fs::write(
        p("t.jsonl"),
        "{\"case_id\":\"h1\",\"text\":\"Normal study.\"}\n{\"case_id\":\"h2\",\"text\":\"No evidence of tumor.\"}\n",
    )
    .unwrap();
    let cfg = golden().join("config.json");
    let paths = ["img", "a.jsonl", "gt", "t.jsonl", "out", "cases.jsonl"].map(p);
    let keys = [
        "--paths.images",
        "--paths.annotations",
        "--paths.gt_masks",
        "--paths.transcripts",
        "--paths.out_dir",
        "--data.cases",
    ];
    let common: Vec<&str> = keys.iter().zip(&paths).flat_map(|(k, v)| [*k, s(v)]).collect();
    let mut args = vec!["gen-data", "--config", s(&cfg)];
    args.extend_from_slice(&common);
    ok(&logsam(&args));
    args[0] = "run";
    ok(&logsam(&args));
    let r: Value = serde_json::from_slice(&fs::read(p("out/report.json")).unwrap()).unwrap();
    assert_eq!(r["counts"]["pred_boxes"], 0);
    assert_eq!(r["counts"]["gt_boxes"], 0);
    assert_eq!(r["map50"], Value::Null);
    assert_eq!(r["mean_iou"], Value::Null);
    // both masks empty on both sides
    assert_eq!(r["mean_dice"], 1.0);
    assert_eq!(r["case_accuracy"], 1.0);
}

#[test]
fn gen_data_reproduces_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    let cfg = golden().join("config.json");
    ok(&logsam(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--paths.images",
        s(&p("images")),
        "--paths.annotations",
        s(&p("annotations.jsonl")),
        "--paths.gt_masks",
        s(&p("gt_masks")),
    ]));
    assert_eq!(tree(&p("images")), tree(&golden().join("images")));
    assert_eq!(tree(&p("gt_masks")), tree(&golden().join("gt_masks")));
    assert_eq!(
        fs::read(p("annotations.jsonl")).unwrap(),
        fs::read(golden().join("annotations.jsonl")).unwrap()
    );
}

#[test]
fn ablation_table_structure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("a.csv");
    ok(&logsam(&[
        "ablate",
        "--config",
        s(&golden().join("config.json")),
        "--ablate.out",
        s(&out),
    ]));
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<String>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 9);
    let count = |set: &str, r: &str| -> usize {
        rows.iter().find(|x| x[0] == set && x[2] == r).unwrap()[3]
            .parse()
            .unwrap()
    };
    for set in ["visual", "visual_enhancer", "all"] {
        let pct: Vec<f64> = rows
            .iter()
            .filter(|x| x[0] == set)
            .map(|x| x[5].parse().unwrap())
            .collect();
        assert!(pct.windows(2).all(|w| w[0] < w[1]), "{set}: {pct:?}");
        assert_eq!(count(set, "128"), 4 * count(set, "32"));
    }
    for r in ["32", "64", "128"] {
        assert!(count("visual_enhancer", r) > count("visual", r));
    }
}

#[test]
fn train_toy_modes_determinism_and_freezing() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    let cfg = golden().join("config.json");
    let train = |mode: &str, ck: &Path, csv: &Path| {
        let r = logsam(&[
            "train-toy",
            "--config",
            s(&cfg),
            "--train.mode",
            mode,
            "--train.lr",
            "0.003",
            "--train.epochs",
            "50",
            "--train.n_train",
            "32",
            "--train.n_val",
            "8",
            "--train.lora",
            r#"{"rank": 4, "alpha": 4, "sites": "all"}"#,
            "--paths.checkpoint",
            s(ck),
            "--train.loss_csv",
            s(csv),
        ]);
        ok(&r);
        serde_json::from_slice::<Value>(&r.stdout).unwrap()
    };
    let lora = train("lora", &p("lora.bin"), &p("lora.csv"));
    let lora_again = train("lora", &p("lora2.bin"), &p("lora2.csv"));
    let full = train("full_finetune", &p("full.bin"), &p("full.csv"));
    assert_eq!(lora["steps"], 100);
    assert_eq!(fs::read(p("lora.bin")).unwrap(), fs::read(p("lora2.bin")).unwrap());
    assert_eq!(lora, lora_again);
    assert!(full["trainable_params"].as_u64() > lora["trainable_params"].as_u64());

    // the config's seed 0 is the model seed
    let init = GrounderModel::new(0).unwrap().to_checkpoint();
    let trained = Checkpoint::load(&p("lora.bin")).unwrap();
    for (name, value) in &init.tensors {
        assert!(trained.get(name).unwrap().bitwise_eq(value), "{name} moved");
    }
    let full_ck = Checkpoint::load(&p("full.bin")).unwrap();
    assert!(init.tensors.iter().any(|(n, v)| !full_ck.get(n).unwrap().bitwise_eq(v)));

    for csv in ["lora.csv", "full.csv"] {
        let losses: Vec<f64> = fs::read_to_string(p(csv))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(losses.len(), 50);
        assert!(losses[49] < 0.5 * losses[0], "{csv}: {} vs {}", losses[49], losses[0]);
    }
}
