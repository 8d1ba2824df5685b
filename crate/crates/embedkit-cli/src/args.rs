//! Command-line surface.

use std::path::PathBuf;

use clap::{Args as ClapArgs, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "embedkit",
    version,
    about = "Truncated-SVD embedding compression, slotted ensemble composition, \
             tied-map refinement, and bias-free probe evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a truncated SVD and write the compressed embedding.
    Compress(CompressArgs),
    /// Score candidate compression dimensions for one embedding.
    Quality(QualityArgs),
    /// Exhaustive per-model compression-rate search under a dimension budget.
    Search(SearchArgs),
    /// Train the season-tied linear map on clustering pseudolabels.
    Refine(RefineArgs),
    /// Assemble compressed slots into the final fixed-width embedding.
    Compose(ComposeArgs),
    /// Probe downstream tasks and aggregate scores.
    Evaluate(EvaluateArgs),
    /// Expand first-layer conv weights to a new input channel count.
    Adapt(AdaptArgs),
    /// Emit geospatial caption strings from a metadata table.
    Caption(CaptionArgs),
    /// Run the full compress/refine/compose pipeline from a config file.
    Pipeline(PipelineArgs),
}

#[derive(ClapArgs, Debug)]
pub struct CompressArgs {
    /// Input EMB1 embedding file.
    #[arg(long = "in", visible_alias = "input")]
    pub input: PathBuf,
    /// Target dimension.
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub seed: u64,
    /// Output EMB1 file for the compressed embedding.
    #[arg(long = "out", visible_alias = "output")]
    pub output: PathBuf,
    /// Where to write the fitted SVD model (default: <out>.svd1).
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    /// Where to write the JSON quality record (default: <out>.quality.json).
    #[arg(long)]
    pub quality_out: Option<PathBuf>,
    /// Cluster count for the optional silhouette in the quality record.
    #[arg(long)]
    pub clusters: Option<usize>,
    /// L2-normalize input rows before fitting.
    #[arg(long)]
    pub normalize_input: bool,
}

#[derive(ClapArgs, Debug)]
pub struct QualityArgs {
    #[arg(long = "in", visible_alias = "input")]
    pub input: PathBuf,
    /// Comma-separated target dimensions, e.g. 16,32,64.
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<usize>,
    #[arg(long)]
    pub clusters: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long = "out", visible_alias = "output")]
    pub output: PathBuf,
}

#[derive(ClapArgs, Debug)]
pub struct SearchArgs {
    /// Manifest of per-model embedding files.
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON file mapping slot key -> candidate dimension list.
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub budget: usize,
    #[arg(long)]
    pub clusters: usize,
    #[arg(long)]
    pub seed: u64,
    /// Weight of the normalized-MSE term in the search objective.
    #[arg(long, default_value_t = 1.0)]
    pub mse_weight: f64,
    #[arg(long = "out", visible_alias = "output")]
    pub output: PathBuf,
}

#[derive(ClapArgs, Debug)]
pub struct RefineArgs {
    /// Manifest holding the four season-tagged entries of one model.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model id whose four seasons get refined.
    #[arg(long, default_value = "georsclip")]
    pub model: String,
    /// Pseudolabel cluster count. The default of 32 is a working guess; the
    /// upstream procedure does not state one.
    #[arg(long, default_value_t = 32)]
    pub clusters: usize,
    #[arg(long, default_value = "ward")]
    pub linkage: String,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    #[arg(long)]
    pub seed: u64,
    /// Hold out this fraction of rows for loss reporting only.
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Output path for the trained map (kind "map1").
    #[arg(long)]
    pub map_out: PathBuf,
    /// Per-epoch loss trace, one JSON record per line.
    #[arg(long)]
    pub trace_out: PathBuf,
    /// Directory to write the mapped seasons into (optional).
    #[arg(long)]
    pub apply_out_dir: Option<PathBuf>,
}

#[derive(ClapArgs, Debug)]
pub struct ComposeArgs {
    /// Manifest mapping slot keys to compressed EMB1 files.
    #[arg(long)]
    pub manifest: PathBuf,
    /// "table1" or a path to a layout JSON file.
    #[arg(long, default_value = "table1")]
    pub layout: String,
    /// L2-normalize each slot's rows before composing.
    #[arg(long)]
    pub normalize_slots: bool,
    #[arg(long = "out", visible_alias = "output")]
    pub output: PathBuf,
}

#[derive(ClapArgs, Debug)]
pub struct EvaluateArgs {
    /// JSON array of task descriptors.
    #[arg(long)]
    pub tasks: PathBuf,
    /// Leaderboard JSON for task-balanced scoring.
    #[arg(long)]
    pub leaderboard: Option<PathBuf>,
    /// Team name used when appending our scores to the leaderboard.
    #[arg(long, default_value = "ours")]
    pub team_name: String,
    #[arg(long, default_value_t = 1e-4)]
    pub ridge: f64,
    #[arg(long, default_value_t = 300)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "out", visible_alias = "output")]
    pub output: PathBuf,
}

#[derive(ClapArgs, Debug)]
pub struct AdaptArgs {
    /// Input conv weight container (kind "cw4d").
    #[arg(long = "in", visible_alias = "input")]
    pub input: PathBuf,
    #[arg(long)]
    pub target_in: usize,
    /// none | preserve_sum
    #[arg(long, default_value = "none")]
    pub policy: String,
    #[arg(long = "out", visible_alias = "output")]
    pub output: PathBuf,
}

#[derive(ClapArgs, Debug)]
pub struct CaptionArgs {
    /// Metadata CSV (sample_id,lat,lon,forest_cover,elevation,nightlights,population).
    #[arg(long)]
    pub metadata: PathBuf,
    /// latlon | regression
    #[arg(long)]
    pub kind: String,
    /// Use corrected spellings instead of the verbatim training templates.
    #[arg(long)]
    pub corrected: bool,
    #[arg(long, default_value_t = 4)]
    pub decimals: usize,
    #[arg(long = "out", visible_alias = "output")]
    pub output: PathBuf,
}

#[derive(ClapArgs, Debug)]
pub struct PipelineArgs {
    /// Pipeline config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory (default also honors EMBEDKIT_OUT_DIR).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}
