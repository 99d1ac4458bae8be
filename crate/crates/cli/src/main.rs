use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

mod commands;

/// Conditional hierarchical-VAE super-resolution: training, inference and
/// benchmark evaluation.
#[derive(Parser, Debug)]
#[command(name = "vdvae-sr", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the unconditional model on a folder of HR images.
    TrainBase(TrainBaseArgs),
    /// Fine-tune an LR-conditioned model, optionally from a pretrained base.
    TrainSr(TrainSrArgs),
    /// Super-resolve one image with a trained conditional model.
    SuperResolve(SuperResolveArgs),
    /// Score a method on a folder of HR images.
    Evaluate(EvaluateArgs),
    /// Evaluate at several sampling temperatures.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML run configuration ([model], [sr], [train], [eval]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.learning_rate=1e-4`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Preset {
    Toy32,
    Toy64,
    Tiny16,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Folder of HR training images.
    #[arg(long)]
    data_dir: PathBuf,
    /// Output directory for config, metrics, checkpoints and samples.
    #[arg(long)]
    run_dir: PathBuf,
    /// Architecture preset replacing the [model] section.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    sample_every: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct TrainBaseArgs {
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct TrainSrArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Unconditional checkpoint to import encoder and decoder weights from.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// prior_and_posterior or posterior_only.
    #[arg(long)]
    condition_mode: Option<String>,
    #[arg(long)]
    scale_factor: Option<usize>,
    /// none or encoder_frozen.
    #[arg(long)]
    freeze_policy: Option<String>,
}

#[derive(Args, Debug)]
struct InferenceArgs {
    #[arg(long)]
    temperature: Option<f64>,
    /// LR patch size; must equal the model's LR input size.
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// mean or sample.
    #[arg(long)]
    decode: Option<String>,
}

#[derive(Args, Debug)]
struct SuperResolveArgs {
    /// Conditional checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    inference: InferenceArgs,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    /// A trained conditional checkpoint (--model).
    Sr,
    Bicubic,
    /// Returns the reference image.
    Identity,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_enum, default_value = "sr")]
    method: Method,
    /// Conditional checkpoint directory (method sr).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Folder of HR images.
    #[arg(long)]
    dataset: PathBuf,
    /// Folder of paired LR images, matched by file name.
    #[arg(long)]
    lr_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    shave: Option<usize>,
    /// Scale factor for methods without a checkpoint.
    #[arg(long)]
    scale_factor: Option<usize>,
    #[command(flatten)]
    inference: InferenceArgs,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Comma-separated temperatures in [0, 1].
    #[arg(long, value_delimiter = ',')]
    temps: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::TrainBase(a) => commands::train_base(a),
        Command::TrainSr(a) => commands::train_sr(a),
        Command::SuperResolve(a) => commands::super_resolve(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            eprintln!("Run with --help for details.");
            ExitCode::from(2)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
