//! `segkit`: synthetic data, training, evaluation, color correction,
//! gradient checks, and run replay.

mod commands;
mod error;
mod plot;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::{code, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "segkit", version, about = "Toy segmentation pipeline with label denoising and color correction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a spec file.
    Synth(SynthArgs),
    /// Train a segmentation model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Predict a mask for one image.
    Predict(PredictArgs),
    /// Train the color-correction stage on clean images.
    TrainCsec(TrainCsecArgs),
    /// Color-correct one image.
    Correct(CorrectArgs),
    /// Score training samples and drop the highest-error ones.
    Filter(FilterArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Rerun a recorded run and compare its outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Manifest; `train` rows are fitted, `val` rows scored per epoch.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Drop high-error samples and retrain (overrides `denoise = none`).
    #[arg(long)]
    pub denoise: bool,
    /// Run images through a color-correction stage first.
    #[arg(long)]
    pub use_csec: bool,
    /// Trained stage for `--use-csec`; without it the stage is built from
    /// the config's `csec_*` keys at its identity initialization.
    #[arg(long, requires = "use_csec")]
    pub csec: Option<PathBuf>,
    /// Override one config key, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Also write loss and mIoU curves as SVG.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Weighting {
    Goose,
    Uniform,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "goose")]
    pub weights: Weighting,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Classes left out of every mean, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<usize>,
    #[arg(long, default_value_t = segkit::dataio::IGNORE_INDEX)]
    pub ignore_index: u8,
    /// Report directory; defaults to `eval/` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output P5 mask of class ids.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainCsecArgs {
    /// `csec_*` keys; all optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest of clean images; `train` rows fit, `val` rows are held out.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CorrectArgs {
    /// Color-stage or full model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Clean image; PSNR before and after goes to stderr.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("scorer").required(true).args(["checkpoint", "predictions"])))]
pub struct FilterArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Score with this model's predictions.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score with precomputed masks named `<sample_id>.pgm`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, default_value_t = 0.975)]
    pub quantile: f64,
    #[arg(long, default_value_t = segkit::dataio::IGNORE_INDEX)]
    pub ignore_index: u8,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// all, tensor, rope, csec or segnet.
    #[arg(long, default_value = "all")]
    pub module: String,
    /// Scale one op's analytic gradient by a wrong factor.
    #[arg(long = "break", value_name = "OP")]
    pub broken: Option<String>,
    /// Directory for `gradcheck.tsv` and `run.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("SEGKIT_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| CliError::usage(format!("SEGKIT_THREADS={v:?} is not a count")))?;
    // a second init (replay in the same process) keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(argv: Vec<String>) -> CliResult<()> {
    let cli = match Cli::try_parse_from(std::iter::once("segkit".to_string()).chain(argv.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::usage(e.render().to_string().trim_end())),
    };
    commands::dispatch(cli.command, argv)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match init_threads().and_then(|()| run(argv)) {
        Ok(()) => ExitCode::from(code::OK),
        Err(e) => {
            eprintln!("segkit: {e}");
            ExitCode::from(e.code)
        }
    }
}
