//! `ragan`: dataset building, training, ageing and evaluation runs.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use run::CliError;

const ABOUT: &str =
    "Race-aware face ageing: dataset building, training, transformation and evaluation.\n\n\
Config keys come from built-in defaults, then the --config file, then RAGAN_<KEY> environment \
variables (e.g. RAGAN_LAMBDA_RACE=2), then command-line flags.";

#[derive(Parser, Debug)]
#[command(name = "ragan", version = env!("RAGAN_GIT_DESCRIBE"), about = ABOUT)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Backbone weights, `race|pyramid|identity|age=<file>|toy`; repeatable.
    #[arg(long = "backbone", global = true)]
    pub backbones: Vec<String>,
    /// Generator weights, `<file>` or `toy`.
    #[arg(long, global = true, default_value = "toy")]
    pub generator: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw the race-balanced train/test manifest from coded filenames.
    BuildDataset(commands::BuildDatasetArgs),
    /// Validate a kinship benchmark tree and write mirror-padded crops.
    PrepKinface(commands::PrepKinfaceArgs),
    /// Train the encoders and mixer on a dataset manifest.
    Train(commands::TrainArgs),
    /// Age images to a list of target ages.
    Transform(commands::TransformArgs),
    /// Race-classification accuracy of aged test images per age group.
    EvalRace(commands::EvalArgs),
    /// Identity similarity between test images and their aged versions.
    EvalIdentity(commands::EvalArgs),
    /// Age error of aged test images per age group.
    EvalAge(commands::EvalAgeArgs),
    /// Five-fold kinship verification on original and aged images.
    KinshipRun(commands::KinshipArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::BuildDataset(_) => "build-dataset",
            Self::PrepKinface(_) => "prep-kinface",
            Self::Train(_) => "train",
            Self::Transform(_) => "transform",
            Self::EvalRace(_) => "eval-race",
            Self::EvalIdentity(_) => "eval-identity",
            Self::EvalAge(_) => "eval-age",
            Self::KinshipRun(_) => "kinship-run",
        }
    }
}

fn dispatch(cli: &Cli) -> Result<run::Outcome, CliError> {
    let g = &cli.global;
    let name = cli.command.name();
    match &cli.command {
        Command::BuildDataset(a) => commands::build_dataset(g, name, a),
        Command::PrepKinface(a) => commands::prep_kinface(g, name, a),
        Command::Train(a) => commands::train(g, name, a),
        Command::Transform(a) => commands::transform(g, name, a),
        Command::EvalRace(a) => commands::eval_race(g, name, a),
        Command::EvalIdentity(a) => commands::eval_identity(g, name, a),
        Command::EvalAge(a) => commands::eval_age(g, name, a),
        Command::KinshipRun(a) => commands::kinship_run(g, name, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return CliError::usage(e.to_string().trim().to_string()).report(None),
    };
    match dispatch(&cli) {
        Ok(run::Outcome::Complete) => ExitCode::SUCCESS,
        Ok(run::Outcome::Partial(n)) => {
            eprintln!(
                "{}",
                serde_json::json!({ "partial_failures": n, "command": cli.command.name() })
            );
            ExitCode::from(3)
        }
        Err(e) => e.report(Some(cli.command.name())),
    }
}
