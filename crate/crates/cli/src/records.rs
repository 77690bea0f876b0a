//! On-disk record types and JSONL / file helpers.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Prepends `schema_version` to any record.
#[derive(Debug, Serialize)]
pub struct Versioned<T> {
    pub schema_version: u32,
    #[serde(flatten)]
    pub record: T,
}

impl<T> Versioned<T> {
    pub fn new(record: T) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            record,
        }
    }
}

/// Input transcript line. `schema_version` is optional so raw ASR dumps
/// can be fed in directly.
#[derive(Debug, Deserialize)]
pub struct TranscriptLine {
    pub schema_version: Option<u32>,
    pub case_id: String,
    pub text: String,
}

/// The part of a prompt record that later stages read.
#[derive(Debug, Deserialize)]
pub struct PromptLine {
    pub schema_version: u32,
    pub case_id: String,
    pub class: String,
    pub prompt: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionLine {
    pub schema_version: u32,
    pub case_id: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<logsam_core::detect2seg::BBox>,
}

impl DetectionLine {
    pub fn into_set(self) -> logsam_core::detect2seg::DetectionSet {
        logsam_core::detect2seg::DetectionSet {
            case_id: self.case_id,
            width: self.width,
            height: self.height,
            boxes: self.boxes,
        }
    }
}

/// Ground truth of one case; boxes are normalized `(cx, cy, w, h)`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationLine {
    pub schema_version: u32,
    pub case_id: String,
    pub class: String,
    pub width: usize,
    pub height: usize,
    pub boxes_yolo: Vec<[f64; 4]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseLine {
    pub case_id: String,
    pub class: String,
}

/// A case a stage could not process. The rest of the batch still runs.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub stage: &'static str,
    pub case_id: String,
    pub error: String,
}

pub trait HasVersion {
    fn version(&self) -> Option<u32>;
}

macro_rules! versioned {
    ($($t:ty),*) => {$(
        impl HasVersion for $t {
            fn version(&self) -> Option<u32> {
                Some(self.schema_version)
            }
        }
    )*};
}
versioned!(PromptLine, DetectionLine, AnnotationLine);

impl HasVersion for TranscriptLine {
    fn version(&self) -> Option<u32> {
        self.schema_version
    }
}

impl HasVersion for CaseLine {
    fn version(&self) -> Option<u32> {
        None
    }
}

/// Parses JSONL, skipping blank lines. Errors name the 1-based line.
pub fn read_jsonl<T: DeserializeOwned + HasVersion>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        if let Some(v) = rec.version() {
            if v != SCHEMA_VERSION {
                bail!("{}: line {}: unsupported schema_version {v}", path.display(), i + 1);
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Writes through a sibling temp file and a rename, so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path
        .file_name()
        .with_context(|| format!("{} has no file name", path.display()))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Case ids become file names; refuse anything that could escape the
/// output directory.
pub fn check_case_id(case_id: &str) -> Result<()> {
    if case_id.is_empty()
        || case_id.starts_with('.')
        || !case_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
    {
        bail!("case id `{case_id}` is not a safe file name");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        fs::write(
            &p,
            "{\"case_id\":\"a\",\"text\":\"x\"}\n\n{\"case_id\":\"b\",\"text\":}\n",
        )
        .unwrap();
        let err = read_jsonl::<TranscriptLine>(&p).unwrap_err();
        assert!(format!("{err:#}").contains("line 3"), "{err:#}");
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        fs::write(&p, "{\"schema_version\":2,\"case_id\":\"a\",\"text\":\"x\"}\n").unwrap();
        assert!(read_jsonl::<TranscriptLine>(&p).is_err());
    }

    #[test]
    fn unsafe_case_ids() {
        assert!(check_case_id("brisc2025_test_00013_gl_ax_t1").is_ok());
        for bad in ["", "../x", "a/b", ".hidden", "a b"] {
            assert!(check_case_id(bad).is_err(), "{bad}");
        }
    }
}
