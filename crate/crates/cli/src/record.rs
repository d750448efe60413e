//! `run.json`: what ran, with which resolved settings, on which bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// A resolved config file, embedded so the run does not depend on the
/// original file staying unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedConfig {
    /// The flag that takes the config path.
    pub flag: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the binary name, as given.
    pub argv: Vec<String>,
    /// Working directory the arguments are relative to.
    pub cwd: String,
    pub config: Option<EmbeddedConfig>,
    pub seeds: BTreeMap<String, String>,
    pub threads: usize,
    /// The `--out` value; a directory or a single file.
    pub out: String,
    pub out_is_dir: bool,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory (or the output file's parent).
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::at(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Digest keyed by absolute path.
pub fn digest(path: &Path) -> CliResult<FileDigest> {
    let abs = std::path::absolute(path).map_err(|e| CliError::at(path, e))?;
    Ok(FileDigest { path: abs.display().to_string(), sha256: sha256_file(path)? })
}

/// Seeds are every resolved key whose name mentions one.
pub fn seeds_from(config_text: &str) -> BTreeMap<String, String> {
    config_text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| k.contains("seed"))
        .collect()
}

pub struct Recorder {
    pub record: RunRecord,
    root: PathBuf,
}

impl Recorder {
    pub fn new(command: &str, argv: Vec<String>, out: &Path, out_is_dir: bool) -> Self {
        let root = if out_is_dir { out.to_path_buf() } else { out.parent().unwrap_or(Path::new(".")).to_path_buf() };
        Self {
            record: RunRecord {
                tool: "segkit".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: command.into(),
                argv,
                cwd: std::env::current_dir().map(|d| d.display().to_string()).unwrap_or_default(),
                config: None,
                seeds: BTreeMap::new(),
                threads: rayon::current_num_threads(),
                out: out.display().to_string(),
                out_is_dir,
                inputs: Vec::new(),
                outputs: Vec::new(),
            },
            root,
        }
    }

    pub fn config(&mut self, flag: &str, text: String) {
        self.record.seeds = seeds_from(&text);
        self.record.config = Some(EmbeddedConfig { flag: flag.into(), text });
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.record.inputs.push(digest(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> CliResult<()> {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        self.record.outputs.push(FileDigest { path: rel.display().to_string(), sha256: sha256_file(path)? });
        Ok(())
    }

    /// Records every file under the output directory, in path order.
    pub fn output_tree(&mut self) -> CliResult<()> {
        let mut files = Vec::new();
        walk(&self.root.clone(), &mut files)?;
        files.sort();
        let own = self.root.join("run.json");
        for f in files.into_iter().filter(|f| *f != own) {
            self.output(&f)?;
        }
        Ok(())
    }

    /// Writes `run.json` into the output directory, or `<file>.run.json`
    /// next to a single output file.
    pub fn finish(self) -> CliResult<PathBuf> {
        let path = if self.record.out_is_dir {
            self.root.join("run.json")
        } else {
            PathBuf::from(format!("{}.run.json", self.record.out))
        };
        let text = serde_json::to_string_pretty(&self.record).expect("serializable record");
        fs::write(&path, text + "\n").map_err(|e| CliError::at(&path, e))?;
        Ok(path)
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    for entry in fs::read_dir(dir).map_err(|e| CliError::at(dir, e))? {
        let path = entry.map_err(|e| CliError::at(dir, e))?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> CliResult<RunRecord> {
    let text = fs::read_to_string(path).map_err(|e| CliError::at(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: not a run record: {e}", path.display())))
}
