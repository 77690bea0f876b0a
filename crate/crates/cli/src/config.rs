//! Run configuration: one JSON file plus `--dotted.key value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use logsam_core::grounder::{SyntheticStyle, TrainMode};
use serde::Deserialize;
use serde_json::Value;

use crate::records::SCHEMA_VERSION;

/// Names the rule-pack directory used when the config has none.
pub const RULES_DIR_ENV: &str = "LOGSAM_RULES_DIR";

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Every stage derives its randomness from this.
    pub seed: u64,
    pub tau: f64,
    pub segmenter: SegmenterConfig,
    pub paths: Paths,
    pub data: Option<DataSection>,
    pub train: Option<TrainSection>,
    pub ablate: Option<AblateSection>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    pub kind: SegmenterKind,
    /// Per-box masks for `external`.
    pub masks_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterKind {
    BoxFill,
    External,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub transcripts: PathBuf,
    pub rules_dir: Option<PathBuf>,
    pub images: PathBuf,
    pub annotations: PathBuf,
    pub gt_masks: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

/// Synthetic dataset written by `gen-data`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Number of random cases; ignored when `cases` is set.
    pub n: usize,
    pub prefix: String,
    pub style: SyntheticStyle,
    /// JSONL of `{case_id, class}` to render instead of random cases.
    pub cases: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lora: Option<LoraSection>,
    pub n_train: usize,
    pub n_val: usize,
    pub style: SyntheticStyle,
    /// Start from this checkpoint instead of a fresh seeded model.
    pub init_checkpoint: Option<PathBuf>,
    pub loss_csv: PathBuf,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
    /// `all` or a `+`/`,` separated site list.
    pub sites: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub ranks: Vec<usize>,
    /// `name=sites` pairs, e.g. `visual=ffn+box_head_first`.
    pub site_sets: Vec<String>,
    pub out: PathBuf,
}

/// Seeds of the individual stages, all derived from the global one.
pub struct Seeds {
    pub model: u64,
    pub train_data: u64,
    pub val_data: u64,
    pub shuffle: u64,
    pub lora: u64,
}

impl RunConfig {
    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        Seeds {
            model: s,
            train_data: s.wrapping_add(1),
            val_data: s.wrapping_add(2),
            shuffle: s.wrapping_add(3),
            lora: s.wrapping_add(4),
        }
    }

    /// Rule-pack directory: config, then the environment, else built-ins.
    pub fn rules_dir(&self) -> Option<PathBuf> {
        self.paths.rules_dir.clone().or_else(env_rules_dir)
    }

    fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            );
        }
        if !(0.0..=1.0).contains(&self.tau) {
            bail!("tau must lie in [0, 1], got {}", self.tau);
        }
        if self.segmenter.kind == SegmenterKind::External && self.segmenter.masks_dir.is_none() {
            bail!("segmenter.masks_dir is required for the external segmenter");
        }
        Ok(())
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        for path in [
            &mut p.transcripts,
            &mut p.images,
            &mut p.annotations,
            &mut p.checkpoint,
            &mut p.out_dir,
        ] {
            fix(path);
        }
        for path in [&mut p.rules_dir, &mut p.gt_masks, &mut self.segmenter.masks_dir]
            .into_iter()
            .flatten()
        {
            fix(path);
        }
        if let Some(d) = &mut self.data {
            if let Some(c) = &mut d.cases {
                fix(c);
            }
        }
        if let Some(t) = &mut self.train {
            fix(&mut t.loss_csv);
            if let Some(c) = &mut t.init_checkpoint {
                fix(c);
            }
        }
        if let Some(a) = &mut self.ablate {
            fix(&mut a.out);
        }
    }
}

pub fn env_rules_dir() -> Option<PathBuf> {
    std::env::var_os(RULES_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

/// Turns `--a.b value` / `--a.b=value` pairs into `(path, value)`. A value
/// that parses as JSON is taken as such, anything else as a string.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(Vec<String>, Value)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            bail!("unexpected argument `{arg}`; overrides look like --dotted.key value");
        };
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => (
                key,
                it.next()
                    .with_context(|| format!("override --{key} needs a value"))?
                    .clone(),
            ),
        };
        if key.is_empty() || key.split('.').any(str::is_empty) {
            bail!("malformed override key `{key}`");
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        out.push((key.split('.').map(str::to_string).collect(), value));
    }
    Ok(out)
}

fn apply_override(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut node = root;
    for (i, key) in path.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!(
                "cannot override `{}`: `{}` is not an object",
                path.join("."),
                path[..i].join(".")
            );
        };
        if i + 1 == path.len() {
            map.insert(key.clone(), value);
            return Ok(());
        }
        node = map
            .entry(key.clone())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    unreachable!("override path is never empty")
}

/// Reads, overrides, type-checks and validates a config. Relative paths
/// are taken against the config file's directory.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut root: Value =
        serde_json::from_str(&text).with_context(|| format!("config {} is not valid JSON", path.display()))?;
    for (key, value) in parse_overrides(overrides)? {
        apply_override(&mut root, &key, value)?;
    }
    let mut cfg: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let at = e.path().to_string();
        if at == "." {
            anyhow::anyhow!("config {}: {}", path.display(), e.inner())
        } else {
            anyhow::anyhow!("config {}: at `{at}`: {}", path.display(), e.inner())
        }
    })?;
    cfg.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.resolve(base);
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_parse_json_or_string() {
        let args: Vec<String> = ["--tau", "0.5", "--paths.out_dir=x/y", "--train.lora", "null"]
            .map(String::from)
            .to_vec();
        let got = parse_overrides(&args).unwrap();
        assert_eq!(got[0], (vec!["tau".into()], json!(0.5)));
        assert_eq!(got[1], (vec!["paths".into(), "out_dir".into()], json!("x/y")));
        assert_eq!(got[2].1, Value::Null);
        assert!(parse_overrides(&["--tau".to_string()]).is_err());
        assert!(parse_overrides(&["tau".to_string()]).is_err());
    }

    #[test]
    fn override_creates_nested_keys() {
        let mut v = json!({"paths": {"a": 1}, "train": null});
        apply_override(&mut v, &["paths".into(), "b".into()], json!(2)).unwrap();
        apply_override(&mut v, &["train".into(), "lr".into()], json!(0.1)).unwrap();
        assert_eq!(v, json!({"paths": {"a": 1, "b": 2}, "train": {"lr": 0.1}}));
        assert!(apply_override(&mut v, &["paths".into(), "a".into(), "c".into()], json!(0)).is_err());
    }
}
