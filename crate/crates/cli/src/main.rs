//! `mot`: generate problems, run teachers, pre-train a base, distill under
//! STD, MTD or merge rounds, evaluate, probe and report.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "mot", version, about = "Merge-of-thought distillation experiments")]
pub struct Cli {
    /// Experiment config (TOML); defaults are used for anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root of the run directories; defaults to $MOT_RUN_ROOT, then ./runs.
    #[arg(long, global = true)]
    pub run_root: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw problem splits and the retention family.
    Gen(GenArgs),
    /// Sample teacher traces and build the filtered corpora.
    Teach(TeachArgs),
    /// Pre-train a base student on arithmetic drills and retention problems.
    Pretrain(PretrainArgs),
    /// Distill a student under one regime.
    Distill(DistillArgs),
    /// Accuracy of checkpoints on a split.
    Eval(EvalArgs),
    /// Reverse-merge probe between a base and a checkpoint.
    Probe(ProbeArgs),
    /// Comparison table over finished runs.
    Report(ReportArgs),
    /// Use a trained student as the teacher for a fresh base.
    Selfdistill(SelfDistillArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub run_id: String,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub validation: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub retention: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TeachArgs {
    /// Data run created by `gen`; corpora are written next to the problems.
    #[arg(long)]
    pub run_id: String,
    /// Only this teacher (repeatable); all configured teachers by default.
    #[arg(long = "teacher")]
    pub teachers: Vec<String>,
    /// Keep wrong traces instead of discarding them.
    #[arg(long)]
    pub no_filter: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub run_id: String,
    /// Data directory holding `retention.jsonl`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Std,
    Mtd,
    Mot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    PerBranch,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SelectArg {
    Validation,
    Test,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[arg(long)]
    pub run_id: String,
    #[arg(long, value_enum, required_unless_present = "manifest")]
    pub regime: Option<RegimeArg>,
    /// Data directory with `corpus-<teacher>.jsonl` files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Starting checkpoint; a fresh initialization when omitted.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Teacher corpus for `--regime std`.
    #[arg(long)]
    pub teacher: Option<String>,
    /// Comma-separated teachers for `mot` and `mtd`.
    #[arg(long, value_delimiter = ',')]
    pub pool: Vec<String>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub steps_per_branch: Option<usize>,
    #[arg(long)]
    pub total_steps: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, value_enum)]
    pub schedule_scope: Option<ScopeArg>,
    /// Permit a baseline budget that differs from rounds x steps per branch.
    #[arg(long)]
    pub allow_unfair: bool,
    /// Re-run the run described by this manifest and check its digests.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Continue an interrupted run in the same run directory.
    #[arg(long)]
    pub resume: bool,
    /// Teacher whose corpus is used for the fixed probe loss.
    #[arg(long)]
    pub probe_corpus: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub probe_every: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory whose checkpoints are all evaluated.
    #[arg(long, conflicts_with = "ckpt")]
    pub run: Option<PathBuf>,
    /// A single checkpoint file.
    #[arg(long, required_unless_present = "run")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Split used to pick the best checkpoint of a run.
    #[arg(long, value_enum, default_value = "validation")]
    pub select_on: SelectArg,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub run_id: String,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 11)]
    pub grid: usize,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "validation")]
    pub split: String,
    #[arg(long, default_value_t = 8)]
    pub runs: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories to compare.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "validation")]
    pub select_on: SelectArg,
    /// Emit JSON records instead of a markdown table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct SelfDistillArgs {
    #[arg(long)]
    pub run_id: String,
    /// Trained student acting as teacher.
    #[arg(long)]
    pub student: PathBuf,
    /// Fresh base the new student starts from.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub total_steps: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let err = CliError::usage(e.kind().to_string());
            eprintln!("{}", e.render());
            eprintln!("{}", err.record());
            return ExitCode::from(err.code as u8);
        }
    };
    match commands::run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", err.record());
            ExitCode::from(err.code as u8)
        }
    }
}
