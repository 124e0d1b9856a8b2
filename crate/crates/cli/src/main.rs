mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fspool::exec::Execution;
use fspool::fspool::WeightInit;
use fspool::models::PoolKind;
use fspool::sortops::SortMode;
use fspool::train::{LossKind, ModelChoice, Regime, Task};
use serde::de::DeserializeOwned;

/// Parses a kebab-case name through the type's serde representation.
fn named<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unrecognised value {s:?}"))
}

#[derive(Parser, Debug)]
#[command(
    name = "fspool",
    version,
    about = "Set autoencoders and classifiers with featurewise sort pooling"
)]
struct Cli {
    /// Run per-example work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// More log output (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an autoencoder, or a classifier with --classify.
    Train(TrainArgs),
    /// Reconstruction losses (or accuracy) of a checkpoint on fresh data.
    Eval(EvalArgs),
    /// Rotation sweep of a polygon checkpoint.
    Probe(ProbeArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Scatter plot of input, target and reconstruction.
    Plot(PlotArgs),
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// JSON run configuration (for example a resolved-config.json); flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// polygon | mnist
    #[arg(long, value_parser = named::<Task>)]
    pub task: Option<Task>,
    /// fspool-ae | baseline
    #[arg(long, value_parser = named::<ModelChoice>)]
    pub model: Option<ModelChoice>,
    /// direct | chamfer | hungarian
    #[arg(long, value_parser = named::<LossKind>)]
    pub loss: Option<LossKind>,
    /// Polygon size.
    #[arg(long = "n")]
    pub n_points: Option<usize>,
    /// fspool | sum | mean | max
    #[arg(long, value_parser = named::<PoolKind>)]
    pub pool: Option<PoolKind>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Calibrator knots.
    #[arg(long)]
    pub knots: Option<usize>,
    /// ones | gaussian
    #[arg(long, value_parser = named::<WeightInit>)]
    pub w_init: Option<WeightInit>,
    /// hard | relaxed
    #[arg(long, value_parser = named::<SortMode>)]
    pub sort: Option<SortMode>,
    /// Relaxed-sort temperature (start value when decaying).
    #[arg(long)]
    pub tau: Option<f64>,
    /// Decay the temperature linearly to --tau-floor.
    #[arg(long)]
    pub tau_decay: bool,
    #[arg(long)]
    pub tau_floor: Option<f64>,
    /// Polygon training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// MNIST epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pad MNIST sets and append the mask as a feature.
    #[arg(long)]
    pub mask_feature: bool,
    /// Permute only the first m elements in the equivariant decoder.
    #[arg(long)]
    pub perm_subset: Option<usize>,
    /// Feed a zero latent to the decoder.
    #[arg(long)]
    pub zero_latent: bool,
    /// Polygons drawn for the final evaluation.
    #[arg(long)]
    pub eval_samples: Option<usize>,
    /// Also report the Hungarian loss on MNIST (slow).
    #[arg(long)]
    pub mnist_hungarian: bool,
    /// Train a classifier instead of an autoencoder.
    #[arg(long)]
    pub classify: bool,
    /// frozen | unfrozen | random-init
    #[arg(long, value_parser = named::<Regime>)]
    pub regime: Option<Regime>,
    /// Autoencoder checkpoint whose encoder initialises the classifier.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// MNIST directory (default $MNIST_DIR, then data/mnist).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// polygon | mnist (default: inferred from the checkpoint)
    #[arg(long, value_parser = named::<Task>)]
    pub task: Option<Task>,
    /// Polygon size (default: the checkpoint's).
    #[arg(long = "n")]
    pub n_points: Option<usize>,
    #[arg(long, default_value_t = 1024)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long)]
    pub hungarian: bool,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub test_size: usize,
    /// Also write the table to this CSV file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Polygon size (default: the checkpoint's).
    #[arg(long = "n")]
    pub n_points: Option<usize>,
    #[arg(long, default_value_t = 1024)]
    pub steps: usize,
    /// Directory for probe.csv and probe.svg.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// autodiff | sortops | fspool | losses | models | all
    #[arg(long, default_value = "all")]
    pub suite: Vec<String>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "reconstruction.svg")]
    pub out: PathBuf,
    /// Polygon size (default: the checkpoint's).
    #[arg(long = "n")]
    pub n_points: Option<usize>,
    /// MNIST test example to plot.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

/// Usage errors exit with 2, everything else with 1.
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a, exec),
        Command::Eval(a) => commands::eval(a, exec),
        Command::Probe(a) => commands::probe(a, exec),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Plot(a) => commands::plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
