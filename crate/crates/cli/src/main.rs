//! `reasongraph`: run the pipeline stage by stage, explain images and run
//! the experiments.
//!
//! Exit codes: 0 success, 1 usage or runtime error, 2 an experiment ran but
//! missed one of its thresholds.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use reasongraph::harness::OUT_DIR_ENV;

#[derive(Parser, Debug)]
#[command(name = "reasongraph", version, about = "Concept-graph explanations for a synthetic image classifier")]
pub struct Cli {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    /// JSON config file; omitted keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (or a file path for single-document commands).
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "reasongraph-out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum)]
    pub format: Option<OutFormat>,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutFormat {
    Json,
    Csv,
    Dot,
    Svg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WorldName {
    ThreeClass,
    PoseBiased,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic datasets to `<out>/world/{train,test}`.
    GenWorld {
        #[arg(long, value_enum, default_value_t = Split::Both)]
        split: Split,
        /// Built-in world replacing the configured one.
        #[arg(long, value_enum)]
        world: Option<WorldName>,
    },
    /// Train the CNN teacher.
    TrainTeacher {
        /// Dataset directory; rendered on the fly when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Discover one concept bank per class.
    ExtractConcepts {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Build the concept graphs (one per class) of a single image.
    BuildScg {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        banks: Option<PathBuf>,
    },
    /// Distill the graph network from the teacher.
    Distill {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        banks: Option<PathBuf>,
    },
    /// Every stage end to end, plus the fidelity report.
    Pipeline,
    /// Why / why-not explanation of one image.
    Explain {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        banks: Option<PathBuf>,
        /// Defaults to `teacher.json` beside the model directory.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Learned class-specific edge weights.
    ExportEdgeWeights {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Only this class; all classes when omitted.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Guided versus control image edits on teacher mistakes.
    ExpLogic {
        /// Pipeline artifacts; built into `<out>` when missing.
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
    /// Node and edge score responses to appearance and layout edits.
    ExpSensitivity {
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
    /// Pose-bias diagnosis and retraining comparison.
    ExpBias,
    /// Summarize every report found in `<out>`.
    Report,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(commands::Outcome::Passed) => ExitCode::SUCCESS,
        Ok(commands::Outcome::ThresholdFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
