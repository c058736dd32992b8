mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use cbnet::bench::ModelVariant;
use cbnet::data::DatasetId;
use cbnet::nn::Activation;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cbnet", version, about = "Train, label, convert and benchmark early-exit classifiers")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Directory holding `<dataset>/{train,t10k}-*-idx*-ubyte[.gz]`; falls back to CBNET_DATA_ROOT.
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<DatasetId>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint directory (default `artifacts`).
    #[arg(long, global = true)]
    pub artifacts: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    #[arg(long, global = true, value_parser = ["gci", "pi4"], conflicts_with = "power_trace")]
    pub power_preset: Option<String>,
    /// CSV with `timestamp_s,power_w` rows.
    #[arg(long, global = true)]
    pub power_trace: Option<PathBuf>,
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Worker threads for accuracy-only evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassifierKind {
    Lenet,
    Branchynet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

/// Images a threshold is tuned on; `validation` is the training hold-out
/// used for early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TuneSplit {
    Validation,
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputActivation {
    Sigmoid,
    Softmax,
}

impl From<OutputActivation> for Activation {
    fn from(a: OutputActivation) -> Self {
        match a {
            OutputActivation::Sigmoid => Activation::Sigmoid,
            OutputActivation::Softmax => Activation::Softmax,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train LeNet or BranchyNet-LeNet on the training split.
    TrainClassifier {
        #[arg(value_enum)]
        kind: ClassifierKind,
        /// Use only the first N training images.
        #[arg(long)]
        limit: Option<usize>,
        /// Held-out images for early stopping (default: 5000, or a tenth under --limit).
        #[arg(long)]
        validation: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Flag each image easy (takes exit 1) or hard with the trained BranchyNet.
    LabelHardness {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// BranchyNet checkpoint (default `<artifacts>/<dataset>/branchy.cbnt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the converting autoencoder toward easy same-class targets.
    TrainAutoencoder {
        /// Layer-width profile name (default: the dataset's).
        #[arg(long)]
        profile: Option<String>,
        #[arg(long, value_enum, default_value = "sigmoid")]
        output_activation: OutputActivation,
        /// Training-split hardness labels (default `<artifacts>/<dataset>/hardness-train.json`).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        validation: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Truncate a trained BranchyNet to its early-exit path.
    ExtractLightweight {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Epochs of further training on autoencoder outputs (0 keeps the copied weights).
        #[arg(long, default_value_t = 0)]
        fine_tune_epochs: usize,
    },
    /// Accuracy and exit statistics of a trained model.
    Eval {
        #[arg(long)]
        model: ModelVariant,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Timed sequential inference with energy accounting.
    Bench {
        #[arg(long)]
        model: Option<ModelVariant>,
        /// Earlier report whose energy is the savings baseline.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        subset_ratio: Option<f64>,
    },
    /// Benchmarks on stratified subsets of increasing size.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "lenet,branchynet,cbnet")]
        models: Vec<ModelVariant>,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1.0")]
        ratios: Vec<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Largest entropy threshold within an accuracy budget.
    TuneThreshold {
        /// Allowed accuracy drop in percentage points.
        #[arg(long, default_value_t = 0.5)]
        budget: f64,
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, value_enum, default_value = "validation")]
        split: TuneSplit,
    },
    /// Speedups and energy savings of reports against the first.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        baseline: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
