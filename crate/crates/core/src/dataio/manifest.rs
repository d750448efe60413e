use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("line {line}: expected 5 tab-separated fields, found {found}")]
    BadFieldCount { line: usize, found: usize },
    #[error("line {line}: unknown split {value:?}")]
    UnknownSplit { line: usize, value: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One dataset entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub robot_id: String,
    pub split: Split,
    /// Filled in by denoising.
    pub error_rate: Option<f64>,
}

/// Parses TSV lines `sample_id, image_path, mask_path, robot_id, split`.
/// Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<SampleRecord>, ManifestError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(ManifestError::BadFieldCount { line: line_no, found: fields.len() });
        }
        let split = fields[4]
            .trim()
            .parse()
            .map_err(|_| ManifestError::UnknownSplit { line: line_no, value: fields[4].to_string() })?;
        out.push(SampleRecord {
            sample_id: fields[0].to_string(),
            image_path: base.join(fields[1]),
            mask_path: base.join(fields[2]),
            robot_id: fields[3].to_string(),
            split,
            error_rate: None,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>, ManifestError> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

fn rel<'a>(p: &'a Path, base: &Path) -> &'a Path {
    p.strip_prefix(base).unwrap_or(p)
}

/// Writes records as TSV; paths under the manifest's directory are written
/// relative to it.
pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<(), ManifestError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut text = String::from("# sample_id\timage\tmask\trobot\tsplit\n");
    for r in records {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.sample_id,
            rel(&r.image_path, base).display(),
            rel(&r.mask_path, base).display(),
            r.robot_id,
            r.split
        ));
    }
    fs::write(path, text)?;
    Ok(())
}
