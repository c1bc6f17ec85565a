use std::net::IpAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use viewfield::analysis::RegionConfig;
use viewfield::dataset::EYE_HEIGHT;
use viewfield::query::InverseConfig;
use viewfield::raster::CameraConfig;
use viewfield::scene::CityParams;
use viewfield::train::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "viewfield", version, about = "Neural view-distribution fields over 3D urban scenes")]
pub struct Cli {
    /// Print indented JSON or human-readable tables instead of JSON lines.
    #[arg(long, global = true)]
    pub pretty: bool,

    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "NVF_THREADS")]
    pub threads: Option<usize>,

    /// Progress logging on stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    /// Only log errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn log_level(&self) -> &'static str {
        if self.quiet {
            "error"
        } else if self.verbose {
            "info"
        } else {
            "warn"
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural city and write it as scene JSON.
    GenScene(GenSceneArgs),
    /// Sample viewpoints in a scene and render their ground-truth distributions to CSV.
    GenData(GenDataArgs),
    /// Train a model on a dataset CSV and write a checkpoint plus report.json.
    Train(TrainArgs),
    /// Score a model on a dataset, or compare against nearest-neighbour baselines.
    Eval(EvalArgs),
    /// Per-region prediction error over a scene grid.
    RegionError(RegionErrorArgs),
    /// Predict distributions for given viewpoints.
    Query(QueryArgs),
    /// Search for viewpoints whose predicted distribution meets a target.
    Inverse(InverseArgs),
    /// Average predictions over the facade tiles of one building.
    Facade(FacadeArgs),
    /// Render a false-color ground-truth image as PNG.
    Render(RenderArgs),
    /// Serve the HTTP/JSON API.
    Serve(ServeArgs),
}

fn city() -> CityParams {
    CityParams::default()
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    /// Random seed for the layout.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output scene JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Blocks per side of the city grid.
    #[arg(long, default_value_t = city().grid)]
    pub grid: usize,
    /// Side of one block, meters.
    #[arg(long, default_value_t = city().block_size)]
    pub block_size: f64,
    /// Street width, meters.
    #[arg(long, default_value_t = city().street_width)]
    pub street_width: f64,
    /// Probability that a parcel is built on.
    #[arg(long, default_value_t = city().building_density)]
    pub building_density: f64,
    /// Tallest building, meters.
    #[arg(long, default_value_t = city().max_height)]
    pub max_height: f64,
    /// Probability that a tree slot holds a tree.
    #[arg(long, default_value_t = city().tree_density)]
    pub tree_density: f64,
    /// Probability that an unbuilt parcel is a pond.
    #[arg(long, default_value_t = city().water_fraction)]
    pub water_fraction: f64,
    /// Relabel buildings as brick or glass, with this fraction brick.
    #[arg(long)]
    pub brick_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    /// Anywhere outside buildings between two heights.
    Uniform,
    /// Eye height over roads and sidewalks.
    StreetLevel,
    /// Just in front of facades, looking outward.
    Facade,
}

/// Camera flags shared by commands that render.
#[derive(Debug, Args)]
pub struct CameraArgs {
    /// Image width in pixels.
    #[arg(long, default_value_t = CameraConfig::default().width)]
    pub width: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = CameraConfig::default().height)]
    pub height: usize,
    /// Vertical field of view, degrees.
    #[arg(long, default_value_t = CameraConfig::default().vertical_fov_deg)]
    pub fov: f64,
}

impl CameraArgs {
    pub fn config(&self) -> CameraConfig {
        CameraConfig {
            vertical_fov_deg: self.fov,
            ..CameraConfig::default().with_size(self.width, self.height)
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Scene JSON.
    #[arg(long)]
    pub scene: PathBuf,
    /// Number of views.
    #[arg(long)]
    pub n: usize,
    /// Where viewpoints are drawn from.
    #[arg(long, value_enum, default_value_t = Strategy::StreetLevel)]
    pub strategy: Strategy,
    /// Viewing directions per sampled position.
    #[arg(long, default_value_t = 1)]
    pub directions: usize,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; metadata goes to `<out>.meta.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Lowest camera height for uniform sampling (default: eye height).
    #[arg(long)]
    pub z_min: Option<f64>,
    /// Highest camera height for uniform sampling (default: scene top).
    #[arg(long)]
    pub z_max: Option<f64>,
    /// Lowest pitch for uniform sampling, degrees.
    #[arg(long, default_value_t = -30.0, allow_negative_numbers = true)]
    pub pitch_min: f64,
    /// Highest pitch for uniform sampling, degrees.
    #[arg(long, default_value_t = 30.0, allow_negative_numbers = true)]
    pub pitch_max: f64,
    /// Bin the scene's scalar layer at these comma-separated edges instead of by class.
    #[arg(long, value_delimiter = ',')]
    pub scalar_bins: Option<Vec<f64>>,
    #[command(flatten)]
    pub camera: CameraArgs,
}

fn train_defaults() -> TrainConfig {
    TrainConfig::default()
}

/// Optimizer flags shared by `train` and `eval --fractions`.
#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Passes over the training set.
    #[arg(long, default_value_t = train_defaults().epochs)]
    pub epochs: usize,
    /// Mini-batch size.
    #[arg(long, default_value_t = train_defaults().batch_size)]
    pub batch_size: usize,
    /// Adam step size.
    #[arg(long, default_value_t = train_defaults().learning_rate)]
    pub lr: f64,
    /// Seed for weight initialization and shuffling.
    #[arg(long, default_value_t = train_defaults().seed)]
    pub seed: u64,
}

impl TrainFlags {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training CSV with its `.meta.json` sidecar.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out CSV scored after training.
    #[arg(long, conflicts_with = "test_fraction")]
    pub test_data: Option<PathBuf>,
    /// Hold out this fraction of `--data` for testing, split with `--seed`.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training report path (default: report.json next to the checkpoint).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Test CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to score.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Training CSV for nearest-neighbour baselines.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Neighbour counts to evaluate, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "5")]
    pub knn: Vec<usize>,
    /// Train fresh models on these nested fractions of `--train-data` and tabulate.
    #[arg(long, value_delimiter = ',', requires = "train_data")]
    pub fractions: Option<Vec<f64>>,
    /// Seed for the nested subsets.
    #[arg(long, default_value_t = 0)]
    pub subset_seed: u64,
    #[command(flatten)]
    pub train: TrainFlags,
}

fn region() -> RegionConfig {
    RegionConfig::default()
}

#[derive(Debug, Args)]
pub struct RegionErrorArgs {
    /// Scene JSON.
    #[arg(long)]
    pub scene: PathBuf,
    /// Checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Also score a nearest-neighbour baseline built from this CSV.
    #[arg(long)]
    pub knn_data: Option<PathBuf>,
    /// Neighbours for the baseline.
    #[arg(long, default_value_t = 5)]
    pub knn: usize,
    /// Region side, meters.
    #[arg(long, default_value_t = region().side)]
    pub side: f64,
    /// Error threshold per class.
    #[arg(long, default_value_t = region().threshold)]
    pub threshold: f64,
    /// Camera height above the ground, meters.
    #[arg(long, default_value_t = EYE_HEIGHT)]
    pub eye_height: f64,
    /// Horizontal viewing directions per region.
    #[arg(long, default_value_t = region().directions)]
    pub directions: usize,
    #[command(flatten)]
    pub camera: CameraArgs,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// `x,y,z,yaw,pitch` with angles in radians; repeatable.
    #[arg(long = "viewpoint", allow_hyphen_values = true)]
    pub viewpoints: Vec<String>,
    /// File with one `x,y,z,yaw,pitch` per line, or a dataset CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Perception metric: `walkability`, `name=expression` or an expression.
    #[arg(long)]
    pub metric: Option<String>,
}

fn inverse() -> InverseConfig {
    InverseConfig::default()
}

#[derive(Debug, Args)]
pub struct InverseArgs {
    /// Checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// `tree:0.2-0.4,sky:0.3-0.5` (ranges) or `tree=0.3` (exact).
    #[arg(long, conflicts_with = "metric")]
    pub target: Option<String>,
    /// Metric target instead of `--target`; needs `--value`.
    #[arg(long, requires = "value")]
    pub metric: Option<String>,
    /// Desired metric value.
    #[arg(long, allow_negative_numbers = true)]
    pub value: Option<f64>,
    /// Restrict positions to a plane: `p=x,y,z;v1=..;v2=..;l=..;L=..`.
    #[arg(long, conflicts_with = "region")]
    pub plane: Option<String>,
    /// Restrict positions to a plane, `sphere:c=x,y,z;r=..` or `hemisphere:c=..;r=..`.
    #[arg(long)]
    pub region: Option<String>,
    /// Fix the view direction: `yaw,pitch` in radians.
    #[arg(long, allow_hyphen_values = true)]
    pub direction: Option<String>,
    /// Restarts, one result each.
    #[arg(long, default_value_t = inverse().restarts)]
    pub n: usize,
    /// Step size in normalized coordinates.
    #[arg(long, default_value_t = inverse().learning_rate)]
    pub lr: f64,
    /// Iteration cap per restart.
    #[arg(long, default_value_t = inverse().max_iterations)]
    pub max_iterations: usize,
    /// Stop a restart once its loss is at most this.
    #[arg(long, default_value_t = inverse().tolerance)]
    pub tolerance: f64,
    /// Seed for starting points.
    #[arg(long, default_value_t = inverse().seed)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FacadeArgs {
    /// Checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Scene JSON.
    #[arg(long)]
    pub scene: PathBuf,
    /// Building id.
    #[arg(long)]
    pub building: u32,
    /// Tile edge, meters.
    #[arg(long, default_value_t = 2.5)]
    pub patch_size: f64,
    /// Samples averaged per tile.
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
    /// Component name or metric whose value is reported per tile.
    #[arg(long)]
    pub theme: Option<String>,
    /// Random seed for sample placement.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Scene JSON.
    #[arg(long)]
    pub scene: PathBuf,
    /// `x,y,z,yaw,pitch` with angles in radians.
    #[arg(long, allow_hyphen_values = true)]
    pub viewpoint: String,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Image width in pixels.
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    /// Vertical field of view, degrees.
    #[arg(long, default_value_t = CameraConfig::default().vertical_fov_deg)]
    pub fov: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Scene JSON.
    #[arg(long)]
    pub scene: PathBuf,
    /// Checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Ground-truth CSV for the parallel coordinates and latent views.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Extra perception metrics as `name=expression`; repeatable.
    #[arg(long = "metric")]
    pub metrics: Vec<String>,
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Port to listen on (0 picks a free one).
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Per-request timeout, seconds.
    #[arg(long, default_value_t = 30.0)]
    pub timeout: f64,
    /// Concurrent compute jobs (default: the thread count).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Browser origin allowed by CORS (default: any).
    #[arg(long)]
    pub cors_origin: Option<String>,
}
