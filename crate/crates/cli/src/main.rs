mod commands;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geossl::config::parse_encoder_tag;
use geossl::data::DatasetMode;
use geossl::{FeatureToggles, ModelConfig, Preset};

/// Why a command stopped; each kind maps to a stable exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(geossl::Error),
    Csv(PathBuf, csv::Error),
    Cell { id: String, source: Box<Failure> },
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(geossl::Error::NonFinite(_)) => 3,
            Failure::Core(e) if e.is_data_error() || matches!(e, geossl::Error::Domain(_)) => 2,
            Failure::Core(_) => 1,
            Failure::Csv(..) => 2,
            Failure::Cell { source, .. } => source.exit_code(),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Csv(path, e) => write!(f, "{}: {e}", path.display()),
            Failure::Cell { id, source } => write!(f, "ablation cell {id} failed: {source}"),
        }
    }
}

impl From<geossl::Error> for Failure {
    fn from(e: geossl::Error) -> Self {
        Failure::Core(e)
    }
}

pub type CliResult<T> = Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "geossl", version, about = "Contrastive image/climate pretraining and soil carbon regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Contrastive pretraining on every record of a dataset.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning on the labelled records.
    Finetune(FinetuneArgs),
    /// Run the encoder by feature-group grid.
    Ablate(AblateArgs),
    /// Constant and nearest-neighbour reference predictors.
    Baseline(BaselineArgs),
    /// Merge prediction files into a comparison table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value = "lucas-like")]
    pub mode: DatasetMode,
    #[arg(long, default_value_t = 200)]
    pub labeled: usize,
    #[arg(long, default_value_t = 0)]
    pub unlabeled: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    /// Encoder pair: vit-trans, vit-lstm or cnn-trans.
    #[arg(long = "config", default_value = "vit-trans")]
    pub encoders: String,
    /// Feature groups as four bits: bands+indices, topography, primary and secondary climate.
    #[arg(long, default_value = "1111")]
    pub toggles: FeatureToggles,
    #[arg(long)]
    pub temperature: Option<f64>,
}

impl ModelArgs {
    pub fn model_config(&self) -> CliResult<ModelConfig> {
        let (img, ser) = parse_encoder_tag(&self.encoders)?;
        let mut cfg = ModelConfig::preset(self.preset).with_encoders(img, ser).with_toggles(self.toggles);
        if let Some(t) = self.temperature {
            cfg.temperature = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug, Clone)]
pub struct PlanArgs {
    #[arg(long)]
    pub folds: Option<usize>,
    /// Train only the regression head.
    #[arg(long)]
    pub freeze_encoders: bool,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub plan: PlanArgs,
    /// Checkpoint directory to start from, or `none` for random initialisation.
    #[arg(long, default_value = "none")]
    pub init: String,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[command(flatten)]
    pub plan: PlanArgs,
    /// Pretraining epochs for the self-supervised cells.
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Constant to predict; defaults to the mean for lucas-like data and the median for raca-like data.
    #[arg(long)]
    pub statistic: Option<geossl::baselines::Statistic>,
    /// Neighbours for the nearest-neighbour regressor.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Prediction CSV files written by finetune, ablate or baseline.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Baseline(a) => commands::baseline(&a),
        Command::Report(a) => commands::report(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
