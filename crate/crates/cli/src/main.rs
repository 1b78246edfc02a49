mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "photoqa", version, about = "Photo quality assessment pipeline, evaluation and capture service")]
pub struct Cli {
    /// Output format for reports written to stdout or --out.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Pipeline config (TOML or JSON); for `serve`, the server config. Flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every randomized stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum LearnerArg {
    Logistic,
    LinearSvm,
    RandomForest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GroupingArg {
    Fst,
    Age,
    Sex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PowerMethod {
    /// Normal quantiles only.
    Normal,
    /// Normal start refined with t quantiles at n - 1 degrees of freedom.
    T,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the skin/non-skin mixture models from a B G R label text file.
    FitSkin {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        components: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute both feature groups for every manifest image.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        skin: PathBuf,
        #[arg(long)]
        max_side: Option<u32>,
        /// Output directory for the two feature containers.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate and fit every member model on the train split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        skin: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long, value_enum, value_delimiter = ',')]
        learners: Vec<LearnerArg>,
        /// Trees per forest (overrides the grid).
        #[arg(long)]
        forest_trees: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit per-head stacking weights on out-of-fold train scores.
    FitEnsemble {
        #[arg(long)]
        trained: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// CSV with image_id,channel,score columns.
        #[arg(long)]
        external: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose head thresholds on the validation split.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        external: Option<PathBuf>,
        #[arg(long)]
        fpr_cap: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-split AUC, ROC and subgroup comparisons.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        external: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["fst", "age", "sex"])]
        subgroups: Vec<GroupingArg>,
        /// Directory for per-head ROC curve CSVs.
        #[arg(long)]
        roc_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assess one image and print its verdict.
    Assess {
        #[arg(long)]
        model: PathBuf,
        image: PathBuf,
        /// External channel score as channel=score; repeatable.
        #[arg(long = "external")]
        external: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the capture HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        storage_dir: Option<PathBuf>,
        #[arg(long)]
        event_log: Option<PathBuf>,
        #[arg(long)]
        attempt_cap: Option<u32>,
        #[arg(long)]
        fpr_cap: Option<f64>,
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Per-stratum improvement report from a service event log and grades.
    PilotReport {
        #[arg(long)]
        log: PathBuf,
        /// CSV with session_id,attempt_number,quality columns.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample size for a paired before/after comparison.
    Power {
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        sd: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0.8)]
        power: f64,
        #[arg(long)]
        prevalence: f64,
        /// Skip the power calculation and scale this count by prevalence.
        #[arg(long)]
        n_affected: Option<u64>,
        #[arg(long, value_enum, default_value_t = PowerMethod::Normal)]
        method: PowerMethod,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus: clean photos with blurred, darkened and
    /// optionally zoomed-out variants, a manifest and a skin label file.
    MakeCorpus {
        #[arg(long, default_value_t = 200)]
        n_base: usize,
        #[arg(long, default_value_t = 160)]
        width: u32,
        #[arg(long, default_value_t = 120)]
        height: u32,
        #[arg(long)]
        zoom: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
