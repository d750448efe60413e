mod csec;
mod data;
mod gradcheck;
mod model;
mod replay;

use std::fs;
use std::path::{Path, PathBuf};

use segkit::dataio::{load_manifest, SampleRecord, Split};
use segkit::kv::KvConfig;

use crate::error::{CliError, CliResult};
use crate::Command;

pub fn dispatch(command: Command, argv: Vec<String>) -> CliResult<()> {
    match command {
        Command::Synth(a) => data::synth(a, argv),
        Command::Filter(a) => data::filter(a, argv),
        Command::Train(a) => model::train(a, argv),
        Command::Eval(a) => model::eval(a, argv),
        Command::Predict(a) => model::predict(a, argv),
        Command::TrainCsec(a) => csec::train_csec(a, argv),
        Command::Correct(a) => csec::correct(a, argv),
        Command::Gradcheck(a) => gradcheck::gradcheck(a, argv),
        Command::Replay(a) => replay::replay(a),
    }
}

pub(crate) fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::at(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::at(path, e))
}

pub(crate) fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::at(path, e))
}

/// Parses a config file (if any) and applies `key=value` overrides.
pub(crate) fn read_config(path: Option<&Path>, overrides: &[String]) -> CliResult<KvConfig> {
    let mut kv: KvConfig = match path {
        Some(p) => read_text(p)?.parse().map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?,
        None => KvConfig::new(),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| CliError::usage(format!("--set expects key=value, got {o:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

/// Loads a manifest with its paths made absolute, so records stay valid
/// when rewritten elsewhere.
pub(crate) fn load_records(path: &Path) -> CliResult<Vec<SampleRecord>> {
    let abs = absolute(path)?;
    Ok(load_manifest(&abs)?)
}

pub(crate) fn absolute(path: &Path) -> CliResult<PathBuf> {
    std::path::absolute(path).map_err(|e| CliError::at(path, e))
}

pub(crate) fn of_split(records: &[SampleRecord], split: Split) -> Vec<SampleRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}
