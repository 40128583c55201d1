//! `vinet` command line: synthetic data, training, evaluation, inference,
//! ablations, the audio probe and self-checks.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use vinet_core::model::{FusionMode, Preset};

pub use config::{resolve, FlagOverrides, RunConfig, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "vinet", version, about = "Video saliency prediction with ViNet and AViNet")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config with optional `model`, `train`, `eval` and `synth` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory that receives every output file.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    #[arg(long, global = true)]
    pub clip_size: Option<usize>,
    #[arg(long, global = true)]
    pub fusion: Option<FusionMode>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset root; a synthetic set is generated under the output directory when absent.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Validation dataset root.
    #[arg(long, global = true)]
    pub val_data: Option<PathBuf>,
    /// Config override such as `train.max_steps=200`; repeatable.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset to the output directory.
    Synth,
    /// Train a model and save the best checkpoint.
    Train,
    /// Score a model with CC, SIM, AUC-Judd, sAUC, NSS and KL.
    Eval,
    /// Write one grayscale PNG saliency map per frame.
    Infer,
    /// Train one model per clip length and tabulate CC, SIM and NSS.
    AblateClip {
        /// Comma-separated clip lengths, e.g. 8,16,32,48.
        sizes: String,
    },
    /// Train with and without the decoder hierarchy and compare.
    AblateHierarchy,
    /// Compare predictions under real, zeroed and swapped audio.
    ProbeAudio,
    /// Finite-difference check of every op and of the model's first layer.
    Gradcheck,
    /// Print the symbolic shape of every stage.
    Shapes,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    match s {
        "paper" => Ok(Preset::Paper),
        "toy" => Ok(Preset::Toy),
        other => Err(format!("unknown preset '{other}' (expected paper or toy)")),
    }
}

/// Problems with the invocation itself (exit 1) versus failures while doing the work (exit 2).
#[derive(Debug)]
pub enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

pub(crate) trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .try_init();
    match commands::execute(&cli) {
        Ok(()) => 0,
        Err(f) => {
            let (Failure::Invalid(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            f.code()
        }
    }
}
