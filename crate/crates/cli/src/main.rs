//! `logsam`: transcript → prompt → detect → filter → segment → evaluate.
//!
//! Exit status is 0 on success, 1 when some cases failed (outputs for the
//! other cases are still written) and 2 on a fatal error.

mod config;
mod records;
mod stages;
mod toy;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use logsam_core::detect2seg::DEFAULT_TAU;

use config::SegmenterKind;
use records::{to_jsonl, write_atomic, Failure};
use stages::EvalInputs;

#[derive(Parser)]
#[command(
    name = "logsam",
    version,
    about = "Speech-prompted tumor detection and segmentation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// A config file followed by optional `--dotted.key value` overrides.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Transcripts JSONL → prompt records.
    ExtractPrompts {
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory with vocabulary.json and negation.json.
        #[arg(long, env = config::RULES_DIR_ENV)]
        rules_dir: Option<PathBuf>,
    },
    /// Prompt records + images → one detection record per case.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keeps boxes with score ≥ tau.
    Filter {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Box prompts → per-box and merged PGM masks.
    Segment {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, value_enum, default_value = "box-fill")]
        segmenter: SegmenterKind,
        /// Precomputed per-box masks for the external segmenter.
        #[arg(long)]
        external_masks: Option<PathBuf>,
        #[arg(long)]
        masks_out: PathBuf,
    },
    /// Predictions vs ground truth → metrics report JSON.
    Evaluate {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        gt_masks: Option<PathBuf>,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes a synthetic dataset (images, annotations, gt masks).
    GenData(ConfigArgs),
    /// Trains the toy grounder; writes checkpoint and loss CSV.
    TrainToy(ConfigArgs),
    /// Adapter parameter counts over ranks and site sets, as CSV.
    Ablate(ConfigArgs),
    /// The whole chain into `paths.out_dir`.
    Run(ConfigArgs),
}

fn report_failures(failures: &[Failure]) -> Result<bool> {
    for f in failures {
        eprintln!("{}", serde_json::to_string(f)?);
    }
    Ok(failures.is_empty())
}

fn run(cfg: &config::RunConfig) -> Result<bool> {
    let out = &cfg.paths.out_dir;
    let p = |name: &str| out.join(name);
    let rules = cfg.rules_dir();
    stages::extract_prompts(&cfg.paths.transcripts, rules.as_deref(), &p("prompts.jsonl"))?;
    let mut failures = stages::detect(
        &cfg.paths.checkpoint,
        &p("prompts.jsonl"),
        &cfg.paths.images,
        &p("detections.jsonl"),
    )?;
    stages::filter(&p("detections.jsonl"), cfg.tau, &p("filtered.jsonl"))?;
    let segmenter = stages::make_segmenter(cfg.segmenter.kind, cfg.segmenter.masks_dir.as_deref())?;
    failures.extend(stages::segment(&p("filtered.jsonl"), segmenter.as_ref(), &p("masks"))?);
    let report = stages::evaluate(&EvalInputs {
        annotations: cfg.paths.annotations.clone(),
        gt_masks: cfg.paths.gt_masks.clone(),
        prompts: Some(p("prompts.jsonl")),
        detections: Some(p("filtered.jsonl")),
        masks: Some(p("masks")),
    })?;
    write_atomic(&p("report.json"), &stages::report_bytes(&report)?)?;
    write_atomic(&p("failures.jsonl"), &to_jsonl(&failures)?)?;
    report_failures(&failures)
}

fn load(args: &ConfigArgs) -> Result<config::RunConfig> {
    config::load(&args.config, &args.overrides)
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::ExtractPrompts {
            transcripts,
            out,
            rules_dir,
        } => stages::extract_prompts(&transcripts, rules_dir.as_deref(), &out).map(|_| true),
        Command::Detect {
            checkpoint,
            prompts,
            images,
            out,
        } => report_failures(&stages::detect(&checkpoint, &prompts, &images, &out)?),
        Command::Filter { detections, tau, out } => stages::filter(&detections, tau, &out).map(|_| true),
        Command::Segment {
            detections,
            segmenter,
            external_masks,
            masks_out,
        } => {
            let s = stages::make_segmenter(segmenter, external_masks.as_deref())?;
            report_failures(&stages::segment(&detections, s.as_ref(), &masks_out)?)
        }
        Command::Evaluate {
            annotations,
            gt_masks,
            prompts,
            detections,
            masks,
            out,
        } => {
            let report = stages::evaluate(&EvalInputs {
                annotations,
                gt_masks,
                prompts,
                detections,
                masks,
            })?;
            write_atomic(&out, &stages::report_bytes(&report)?)?;
            Ok(true)
        }
        Command::GenData(args) => {
            let n = toy::gen_data(&load(&args)?)?;
            eprintln!("wrote {n} cases");
            Ok(true)
        }
        Command::TrainToy(args) => {
            let summary = toy::train_toy(&load(&args)?)?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(true)
        }
        Command::Ablate(args) => {
            let cfg = load(&args)?;
            let rows = toy::ablation(&cfg)?;
            let out: &Path = &cfg.ablate.as_ref().expect("checked by ablation").out;
            write_atomic(out, toy::ablation_csv(&rows).as_bytes())?;
            Ok(true)
        }
        Command::Run(args) => run(&load(&args)?),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
