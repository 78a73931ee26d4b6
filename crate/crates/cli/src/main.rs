mod commands;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dtop_core::config::FusionMethod;
use dtop_core::retrieval::Protocol;

#[derive(Parser, Debug)]
#[command(name = "dtop", version, about = "Deep token pooling image retrieval tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create a seeded random-weight model file.
    InitModel(InitModelArgs),
    /// Extract unit descriptors for PPM images into a database.
    Extract(ExtractArgs),
    /// Build a search index from a descriptor database, optionally whitened.
    Index(IndexArgs),
    /// Rank an index against query descriptors.
    Search(SearchArgs),
    /// Score queries against ground truth and write a CSV report.
    Evaluate(EvaluateArgs),
    /// Layer-by-layer CKA heatmap over a set of images.
    Cka(CkaArgs),
    /// Class-token attention map of one image at one layer.
    Attention(AttentionArgs),
    /// Plan aspect-ratio grouped training batches.
    PlanBatches(PlanBatchesArgs),
    /// Run the built-in oracle checks.
    Selftest,
}

#[derive(Args, Debug)]
struct InitModelArgs {
    /// Model configuration JSON; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fusion: Option<FusionMethod>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ImageInputs {
    /// Directory whose `.ppm` files are read in name order.
    #[arg(long)]
    image_dir: Option<PathBuf>,
    /// Individual PPM files, in the given order.
    images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    inputs: ImageInputs,
    /// Comma-separated scales overriding the model configuration.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f32>>,
    /// Worker threads; 0 picks one per core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Output database basename.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct IndexArgs {
    /// Input descriptor database basename.
    #[arg(long)]
    db: PathBuf,
    /// JSON object mapping database ids to class labels; enables whitening.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Configuration whose `pipeline.whitening` switch is honoured.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    /// Query descriptor database basename.
    #[arg(long)]
    queries: PathBuf,
    /// Results kept per query.
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// CSV output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    index: PathBuf,
    /// Ground-truth JSON.
    #[arg(long)]
    gt: PathBuf,
    /// Precomputed query descriptor database, aligned by query id.
    #[arg(long, conflicts_with_all = ["model", "query_dir"])]
    queries: Option<PathBuf>,
    /// Model used to extract query descriptors from `<query-dir>/<id>.ppm`.
    #[arg(long, requires = "query_dir")]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    query_dir: Option<PathBuf>,
    #[arg(long, default_value = "medium")]
    protocol: Protocol,
    /// Use whole query images instead of the ground-truth boxes.
    #[arg(long)]
    no_crop: bool,
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f32>>,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// CSV report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CkaArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    inputs: ImageInputs,
    /// Leave the class token out of the per-layer mean.
    #[arg(long)]
    patch_only: bool,
    /// Average CKA over consecutive chunks of this many images.
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Output basename for `.dtt`, `.labels.txt` and `.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AttentionArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// 1-based layer; the last layer when absent.
    #[arg(long)]
    layer: Option<usize>,
    /// Output basename for `.dtt` and `.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlanBatchesArgs {
    /// JSON array of `{"id", "width", "height"}` records.
    #[arg(long)]
    metas: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = dtop_core::sampler::DEFAULT_BASE_AREA)]
    base_area: usize,
    #[arg(long, default_value_t = dtop_core::sampler::DEFAULT_RATIO_BINS)]
    ratio_bins: usize,
    /// Use one fixed `WxH` size for every batch instead of grouping.
    #[arg(long)]
    fixed: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DTOP_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let text = text.strip_prefix("error: ").unwrap_or(&text);
            eprint!("usage error: {text}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::InitModel(a) => commands::init_model(a),
        Command::Extract(a) => commands::extract(a),
        Command::Index(a) => commands::index(a),
        Command::Search(a) => commands::search(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Cka(a) => commands::cka(a),
        Command::Attention(a) => commands::attention(a),
        Command::PlanBatches(a) => commands::plan_batches(a),
        Command::Selftest => selftest::run(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
