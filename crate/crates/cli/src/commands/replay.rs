use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{absolute, create_dir, write_text};
use crate::error::{CliError, CliResult};
use crate::record::{self, sha256_file};
use crate::ReplayArgs;

#[derive(Serialize)]
struct FileCheck {
    path: String,
    expected: String,
    actual: Option<String>,
    matched: bool,
}

#[derive(Serialize)]
struct ReplayReport {
    run: String,
    command: String,
    argv: Vec<String>,
    matched: bool,
    files: Vec<FileCheck>,
}

/// Drops every occurrence of `flag` (both `--flag v` and `--flag=v`).
fn strip_flag(argv: &[String], flag: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(argv.len());
    let mut skip = false;
    for a in argv {
        if skip {
            skip = false;
        } else if a == flag {
            skip = true;
        } else if !a.starts_with(&format!("{flag}=")) {
            out.push(a.clone());
        }
    }
    out
}

/// Restores the working directory even if the rerun fails.
struct Cwd(PathBuf);

impl Drop for Cwd {
    fn drop(&mut self) {
        let _ = std::env::set_current_dir(&self.0);
    }
}

pub fn replay(a: ReplayArgs) -> CliResult<()> {
    let run = record::load(&a.run)?;
    if run.tool != "segkit" {
        return Err(CliError::usage(format!("{}: recorded by {:?}", a.run.display(), run.tool)));
    }
    for input in &run.inputs {
        let actual = sha256_file(Path::new(&input.path))?;
        if actual != input.sha256 {
            return Err(CliError::usage(format!("input {} changed since the run was recorded", input.path)));
        }
    }
    let dir = absolute(&a.out)?;
    create_dir(&dir)?;
    let out = if run.out_is_dir {
        dir.join("out")
    } else {
        dir.join(Path::new(&run.out).file_name().ok_or_else(|| CliError::usage("recorded output has no file name"))?)
    };

    let mut argv = strip_flag(&strip_flag(&run.argv, "--out"), "--set");
    if let Some(cfg) = &run.config {
        let path = dir.join("config.txt");
        write_text(&path, &cfg.text)?;
        argv = strip_flag(&argv, &cfg.flag);
        argv.extend([cfg.flag.clone(), path.display().to_string()]);
    }
    argv.extend(["--out".to_string(), out.display().to_string()]);

    let outcome = {
        let _restore = Cwd(std::env::current_dir()?);
        std::env::set_current_dir(&run.cwd).map_err(|e| CliError::io(format!("{}: {e}", run.cwd)))?;
        crate::run(argv.clone())
    };
    outcome.map_err(|e| CliError { code: e.code, message: format!("replayed command failed: {e}") })?;

    let root = if run.out_is_dir { out.clone() } else { dir.clone() };
    let files: Vec<FileCheck> = run
        .outputs
        .iter()
        .map(|f| {
            let actual = sha256_file(&root.join(&f.path)).ok();
            FileCheck { path: f.path.clone(), matched: actual.as_deref() == Some(&f.sha256), expected: f.sha256.clone(), actual }
        })
        .collect();
    let matched = files.iter().all(|f| f.matched);
    let report = ReplayReport {
        run: a.run.display().to_string(),
        command: run.command.clone(),
        argv,
        matched,
        files,
    };
    write_text(&dir.join("replay_report.json"), &(serde_json::to_string_pretty(&report).expect("serializable") + "\n"))?;
    let bad: Vec<&str> = report.files.iter().filter(|f| !f.matched).map(|f| f.path.as_str()).collect();
    if bad.is_empty() {
        println!("replayed {}: all {} outputs identical", run.command, report.files.len());
        Ok(())
    } else {
        Err(CliError::check(format!("replay differs in: {}", bad.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_both_flag_forms() {
        let v: Vec<String> = ["train", "--out", "a", "--set=x=1", "--data", "d", "--set", "y=2"].map(String::from).into();
        assert_eq!(strip_flag(&strip_flag(&v, "--out"), "--set"), ["train", "--data", "d"]);
    }
}
