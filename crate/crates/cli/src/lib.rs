//! `stemsim` command line: one subcommand per pipeline stage, all writing into a
//! shared run directory.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod rundir;

/// Failure of a CLI invocation, mapped to the exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(stemsim::Error),
}

impl From<stemsim::Error> for CliError {
    fn from(e: stemsim::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stemsim", version, about = "Instrument-focused music similarity pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config with flat dotted keys, e.g. {"train.lambda": 0.1}.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Run directory to use. Defaults to a new run (gen-data, ingest) or the newest run.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Parent of run directories [env: STEMSIM_RUN_ROOT, default: ./runs].
    #[arg(long, global = true)]
    pub run_root: Option<PathBuf>,
    /// Seed for data synthesis and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite an existing stage.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Basic,
    #[value(name = "aux+basic")]
    AuxBasic,
    #[value(name = "aux+basic+add")]
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Pca,
    Tsne,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a multi-stem dataset.
    GenData {
        /// Total number of pieces; all go to the train split unless --test-pieces is given.
        #[arg(long)]
        pieces: Option<usize>,
        #[arg(long)]
        test_pieces: Option<usize>,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Import `<source>/<piece>/<stem>.wav` folders.
    Ingest {
        #[arg(long)]
        source: PathBuf,
    },
    /// Render the pseudo-mix corpus of a split.
    MakePseudomix {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Train the individual instrument encoders.
    PretrainIndividual,
    /// Pretrain the main encoder on the auxiliary loss alone.
    PretrainMain,
    /// Sample basic and interchanged triplets.
    BuildTriplets {
        #[arg(long)]
        n_triplets: Option<usize>,
        #[arg(long)]
        interchange_ratio: Option<f64>,
    },
    /// Main training on triplets plus the auxiliary loss.
    Train {
        #[arg(long, value_enum, default_value = "aux+basic+add")]
        variant: VariantArg,
    },
    /// kNN music-ID accuracy per subspace on the test pieces.
    EvalKnn {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pseudo-mix subspace evaluation with the exclusion rule.
    EvalSubspace {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// 2-D projection of test-segment embeddings.
    ExportViz {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "tsne")]
        method: MethodArg,
        /// Condition name (drums, bass, piano, guitar, others) or `all`.
        #[arg(long, default_value = "all")]
        subspace: String,
    },
    /// Listening-test stimulus sets with answer key.
    ExportListening {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Parses `argv` and runs one subcommand. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match commands::execute(&cli) {
        Ok(path) => {
            println!("{}", path.display());
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
