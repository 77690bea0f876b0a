//! Synthetic data, toy-model training and the LoRA parameter ablation.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use logsam_core::detect2seg::merged_mask_path;
use logsam_core::grounder::{
    evaluate_iou, gen_synthetic, render_sample, train, GrounderModel, ImageSample, TrainConfig, TrainMode, CLASSES,
};
use logsam_core::lora::{parse_site_set, trainable_fraction, LoraConfig, Site};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::records::{check_case_id, read_jsonl, to_jsonl, write_atomic, AnnotationLine, CaseLine, SCHEMA_VERSION};
use crate::stages::load_model;

/// Writes `<images>/<case>.pgm`, the annotation JSONL and a ground-truth
/// mask for every case (all zero for healthy ones).
pub fn gen_data(cfg: &RunConfig) -> Result<usize> {
    let data = cfg.data.as_ref().context("config has no `data` section")?;
    let samples: Vec<ImageSample> = match &data.cases {
        Some(path) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            read_jsonl::<CaseLine>(path)?
                .iter()
                .map(|c| {
                    if !CLASSES.contains(&c.class.as_str()) {
                        bail!("case `{}` has unknown class `{}`", c.case_id, c.class);
                    }
                    Ok(render_sample(&c.case_id, &c.class, &data.style, &mut rng))
                })
                .collect::<Result<_>>()?
        }
        None => gen_synthetic(data.n, cfg.seed, &data.style, &data.prefix),
    };
    let mut annotations = Vec::with_capacity(samples.len());
    for s in &samples {
        check_case_id(&s.case_id)?;
        write_atomic(
            &cfg.paths.images.join(format!("{}.pgm", s.case_id)),
            &s.to_image().encode(),
        )?;
        if let Some(dir) = &cfg.paths.gt_masks {
            write_atomic(&merged_mask_path(dir, &s.case_id), &s.mask.to_image().encode())?;
        }
        let img = s.to_image();
        annotations.push(AnnotationLine {
            schema_version: SCHEMA_VERSION,
            case_id: s.case_id.clone(),
            class: s.gt_class.clone(),
            width: img.width,
            height: img.height,
            boxes_yolo: if s.present { vec![s.gt_box] } else { Vec::new() },
        });
    }
    write_atomic(&cfg.paths.annotations, &to_jsonl(&annotations)?)?;
    Ok(samples.len())
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub mode: TrainMode,
    pub steps: usize,
    pub clipped_steps: usize,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
    pub val_mean_iou: f64,
    pub trainable_params: usize,
    pub host_params: usize,
}

/// Trains on freshly generated data, writes the checkpoint and a per-epoch
/// loss CSV.
pub fn train_toy(cfg: &RunConfig) -> Result<TrainSummary> {
    let t = cfg.train.as_ref().context("config has no `train` section")?;
    let seeds = cfg.seeds();
    let lora = match (&t.lora, t.mode) {
        (Some(l), TrainMode::Lora) => Some(LoraConfig {
            rank: l.rank,
            alpha: l.alpha,
            sites: parse_site_set(&l.sites)?,
            seed: seeds.lora,
        }),
        (None, TrainMode::Lora) => bail!("train.lora is required in lora mode"),
        (_, TrainMode::FullFinetune) => None,
    };
    let train_cfg = TrainConfig {
        lr: t.lr,
        epochs: t.epochs,
        warmup_frac: t.warmup_frac,
        max_grad_norm: t.max_grad_norm,
        batch_size: t.batch_size,
        weight_decay: t.weight_decay,
        mode: t.mode,
        lora,
        seed: seeds.shuffle,
    };
    let mut model = match &t.init_checkpoint {
        Some(p) => load_model(p)?,
        None => GrounderModel::new(seeds.model)?,
    };
    let data = gen_synthetic(t.n_train, seeds.train_data, &t.style, "train_");
    let val = gen_synthetic(t.n_val, seeds.val_data, &t.style, "val_");
    let report = train(&mut model, &data, &train_cfg)?;

    let mut csv = String::from("epoch,mean_loss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        writeln!(csv, "{},{l}", i + 1)?;
    }
    write_atomic(&t.loss_csv, csv.as_bytes())?;
    write_atomic(&cfg.paths.checkpoint, &model.to_checkpoint().encode())?;

    Ok(TrainSummary {
        schema_version: SCHEMA_VERSION,
        mode: t.mode,
        steps: report.steps,
        clipped_steps: report.clipped_steps,
        first_epoch_loss: report.epoch_losses.first().copied().unwrap_or(f64::NAN),
        last_epoch_loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        val_mean_iou: if val.is_empty() {
            f64::NAN
        } else {
            evaluate_iou(&model, &val)?
        },
        trainable_params: model.store.trainable_element_count(),
        host_params: model.host_param_count(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub site_set: String,
    pub sites: Vec<Site>,
    pub rank: usize,
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
    /// Whether the toy layers are wide enough to actually take this rank.
    pub injectable: bool,
}

/// Adapter parameter budget for every (site set, rank) pair, from the
/// layer shapes alone. Nothing is trained, so ranks beyond the toy model's
/// layer width are still counted.
pub fn ablation(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let a = cfg.ablate.as_ref().context("config has no `ablate` section")?;
    if a.ranks.is_empty() || a.site_sets.is_empty() {
        bail!("ablate.ranks and ablate.site_sets must be non-empty");
    }
    let model = GrounderModel::new(cfg.seeds().model)?;
    let mut rows = Vec::new();
    for spec in &a.site_sets {
        let (name, sites) = spec
            .split_once('=')
            .with_context(|| format!("site set `{spec}` should look like name=site+site"))?;
        let sites = parse_site_set(sites)?;
        let max_rank = model.registry.max_rank(&sites).unwrap_or(0);
        for &rank in &a.ranks {
            if rank == 0 {
                bail!("ranks must be at least 1");
            }
            let lora = LoraConfig::new(rank, 0).with_sites(sites.iter().copied());
            let b = trainable_fraction(&model.registry, model.host_param_count(), &lora);
            rows.push(AblationRow {
                site_set: name.to_string(),
                sites: sites.iter().copied().collect(),
                rank,
                trainable: b.trainable,
                total: b.total,
                fraction: b.fraction,
                injectable: rank <= max_rank,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("site_set,sites,rank,trainable_params,total_params,trainable_percent,injectable\n");
    for r in rows {
        let sites: Vec<&str> = r.sites.iter().map(|s| s.name()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.4},{}",
            r.site_set,
            sites.join("+"),
            r.rank,
            r.trainable,
            r.total,
            100.0 * r.fraction,
            r.injectable
        );
    }
    out
}
