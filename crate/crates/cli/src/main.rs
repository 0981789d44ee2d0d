//! `cu`: corpus generation, label simulation, both training stages,
//! evaluation and the ablation/robustness grids.

mod commands;
mod grid;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cu_core::dataio::LabelDistribution;
use cu_core::evalkit::ReportFormat;
use cu_core::losses::LossFlags;

#[derive(Parser, Debug)]
#[command(name = "cu", version, about = "Contrast-unity partially-supervised temporal sentence grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic planted-event corpus
    Gen(GenArgs),
    /// Attach simulated clip labels to a corpus
    Label(LabelArgs),
    /// Train the implicit stage on a labelled corpus
    TrainImplicit(TrainImplicitArgs),
    /// Export pseudo-labels from an implicit-stage checkpoint
    ExportPseudo(ExportArgs),
    /// Train the explicit stage on pseudo-labels
    TrainExplicit(TrainExplicitArgs),
    /// Predict intervals with an explicit-stage checkpoint, without labels
    Infer(InferArgs),
    /// Label, train both stages, infer on a test corpus and evaluate
    RunTwoStage(TwoStageArgs),
    /// Score predicted intervals against ground truth
    Eval(EvalArgs),
    /// Pseudo-label quality of ablation rows A1-A6 over several seeds
    Ablate(GridArgs),
    /// Pseudo-label quality under different label distributions and durations
    Robustness(GridArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output corpus directory
    #[arg(long)]
    out: PathBuf,
    /// Generator settings as TOML; other flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of samples
    #[arg(long)]
    samples: Option<usize>,
    /// Frames per video
    #[arg(long)]
    frames: Option<usize>,
    /// Number of planted query clusters
    #[arg(long)]
    clusters: Option<usize>,
    /// Feature noise standard deviation
    #[arg(long)]
    noise: Option<f64>,
    /// Numeric suffix of the first sample id
    #[arg(long)]
    id_offset: Option<usize>,
    /// Generator seed
    #[arg(long)]
    seed: Option<u64>,
    /// Extra samples drawn after the main ones, written to --holdout-out
    #[arg(long, requires = "holdout_out")]
    holdout: Option<usize>,
    /// Output corpus directory for the held-out samples
    #[arg(long, requires = "holdout")]
    holdout_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dist {
    Uniform,
    Gaussian,
}

impl From<Dist> for LabelDistribution {
    fn from(d: Dist) -> Self {
        match d {
            Dist::Uniform => LabelDistribution::Uniform,
            Dist::Gaussian => LabelDistribution::Gaussian,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Records,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Table => ReportFormat::Table,
            Format::Records => ReportFormat::Records,
        }
    }
}

#[derive(Args, Debug)]
struct LabelArgs {
    /// Input corpus (directory or manifest)
    #[arg(long)]
    corpus: PathBuf,
    /// Output corpus directory
    #[arg(long)]
    out: PathBuf,
    /// Distribution of the clip center inside the event
    #[arg(long, value_enum, default_value = "uniform")]
    dist: Dist,
    /// Clip duration in seconds; 0 gives single-frame labels
    #[arg(long, default_value_t = 0.0)]
    dur: f64,
    /// Label seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Training settings shared by the training subcommands.
#[derive(Args, Debug, Clone)]
struct TrainOpts {
    /// Training settings as TOML; other flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs of the stage being trained (the implicit stage for run-two-stage)
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainImplicitArgs {
    /// Labelled training corpus
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Enabled contrastive losses, comma-separated from raml,raun,erml,erun
    #[arg(long, value_parser = parse_flags)]
    flags: Option<LossFlags>,
    /// Write the per-epoch log here as JSON lines
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Implicit-stage checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Labelled corpus the checkpoint was trained on
    #[arg(long)]
    corpus: PathBuf,
    /// Output pseudo-label file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainExplicitArgs {
    /// Training corpus
    #[arg(long)]
    corpus: PathBuf,
    /// Pseudo-label file with one interval per corpus sample
    #[arg(long)]
    pseudo: PathBuf,
    /// Output checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Write the per-epoch log here as JSON lines
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Explicit-stage checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus to predict; labels and ground truth are ignored
    #[arg(long)]
    corpus: PathBuf,
    /// Output prediction file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TwoStageArgs {
    /// Training corpus with ground truth
    #[arg(long)]
    train: PathBuf,
    /// Held-out corpus with ground truth
    #[arg(long)]
    test: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Distribution of the simulated clip center
    #[arg(long, value_enum, default_value = "uniform")]
    dist: Dist,
    /// Simulated clip duration in seconds
    #[arg(long, default_value_t = 0.0)]
    dur: f64,
    /// Label simulation seed
    #[arg(long, default_value_t = 0)]
    label_seed: u64,
    /// Enabled contrastive losses, comma-separated from raml,raun,erml,erun
    #[arg(long, value_parser = parse_flags)]
    flags: Option<LossFlags>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predicted or pseudo-label interval file
    #[arg(long)]
    pred: PathBuf,
    /// Corpus holding the ground truth
    #[arg(long)]
    gt: PathBuf,
    /// IoU thresholds, comma-separated
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
    thresholds: Vec<f64>,
    /// Report tag
    #[arg(long, default_value = "eval")]
    tag: String,
    /// Output format
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Corpus with ground truth; labels are simulated per cell
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory; finished cells are reused
    #[arg(long)]
    out: PathBuf,
    /// Number of seeds per row; cell i trains and labels with seed i
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Training settings as TOML; other flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Implicit-stage epochs per cell
    #[arg(long)]
    epochs: Option<usize>,
}

impl GridArgs {
    fn train_opts(&self) -> TrainOpts {
        TrainOpts {
            config: self.config.clone(),
            seed: None,
            epochs: self.epochs,
        }
    }
}

fn parse_flags(s: &str) -> Result<LossFlags, String> {
    let f: LossFlags = s.parse().map_err(|e: cu_core::Error| e.to_string())?;
    if !f.any() {
        return Err("at least one loss must be enabled".into());
    }
    Ok(f)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
