use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Value-taking global flags, for locating the subcommand in raw argv.
pub const GLOBAL_VALUE_FLAGS: [&str; 3] = ["--seed", "--out-dir", "--config"];

#[derive(Debug, Parser)]
#[command(name = "skybench", version, about = "Synthetic cross-view sites, curriculum samplers, a toy masked-attention model and pose metrics")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Directory outputs are written to.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,

    /// TOML file supplying flag values. Top-level keys are global flags; a
    /// table named after the subcommand holds its flags. Flags given on the
    /// command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic site: manifest plus one depth raster per view.
    GenSite(GenSiteArgs),
    /// Draw a batch of view ids with a curriculum sampler.
    Sample(SampleArgs),
    /// Run the model on manifest views and score it against ground truth.
    Forward(ForwardArgs),
    /// Pairwise rotation/translation accuracy of predicted cameras.
    Eval(EvalArgs),
    /// Download and stitch a square block of map tiles.
    FetchTiles(FetchTilesArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSite(_) => "gen-site",
            Command::Sample(_) => "sample",
            Command::Forward(_) => "forward",
            Command::Eval(_) => "eval",
            Command::FetchTiles(_) => "fetch-tiles",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenSiteArgs {
    /// Identifier recorded in the manifest.
    #[arg(long, default_value = "site_000")]
    pub site_id: String,
    /// Ground views on the circle around the landmark.
    #[arg(long, default_value_t = 150)]
    pub ground_n: usize,
    /// Ground camera height above terrain, meters.
    #[arg(long, default_value_t = 5.0)]
    pub ground_altitude: f64,
    /// Ground circle radius around the landmark, meters.
    #[arg(long, default_value_t = 110.0)]
    pub ground_radius: f64,
    /// Rig frames per band, high,medium,low.
    #[arg(long, value_delimiter = ',', default_values_t = [60, 120, 180])]
    pub aerial_frames: Vec<usize>,
    /// Nadir satellite views on a jittered grid.
    #[arg(long, default_value_t = 120)]
    pub satellite_n: usize,
    /// Satellite altitude above the scene base, meters.
    #[arg(long, default_value_t = 1500.0)]
    pub satellite_altitude: f64,
    /// Write the manifest only.
    #[arg(long)]
    pub skip_depth: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SampleMode {
    Cacs,
    Pvs,
    Composed,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Site directory or manifest file.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SampleMode::Cacs)]
    pub mode: SampleMode,
    /// Fraction of the training schedule elapsed, in [0, 1].
    #[arg(long, default_value_t = 0.0, value_parser = parse_tau)]
    pub tau: f64,
    /// Views to draw.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Anchor view id. Defaults to a seeded choice among ground views.
    #[arg(long)]
    pub anchor: Option<String>,
    /// Translation weight of the pair distance.
    #[arg(long, default_value_t = 0.5)]
    pub lambda_t: f64,
    /// Distance cache file; read if present, otherwise built and written.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Print a JSON object instead of one id per line.
    #[arg(long)]
    pub json: bool,
}

fn parse_tau(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    /// Site directory or manifest file.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated view ids; the first is the reference frame.
    #[arg(long, value_delimiter = ',', required_unless_present = "ids_file", conflicts_with = "ids_file")]
    pub ids: Vec<String>,
    /// File with one view id per line.
    #[arg(long)]
    pub ids_file: Option<PathBuf>,
    /// Model configuration (TOML or JSON). Its seed is replaced by --seed.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Weight file written by a previous run; overrides --model-config.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Weight of the ground/aerial camera loss.
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f64,
    /// Also write the generated weight bank to the output directory.
    #[arg(long)]
    pub save_weights: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BucketRuleArg {
    Pair,
    ImageAnchored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TranslationArg {
    Angular,
    Metric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StyleArg {
    Full,
    Compact,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted cameras (forward output or manifest). Repeat for several sites.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    /// Ground-truth manifest or camera file, one per --pred.
    #[arg(long, required = true)]
    pub gt: Vec<PathBuf>,
    /// Threshold for both rotation and translation.
    #[arg(long, default_value_t = 5.0)]
    pub threshold: f64,
    /// Rotation threshold in degrees; defaults to --threshold.
    #[arg(long)]
    pub rot_threshold: Option<f64>,
    /// Translation threshold (degrees, or meters when metric); defaults to --threshold.
    #[arg(long)]
    pub trans_threshold: Option<f64>,
    #[arg(long, value_enum, default_value_t = BucketRuleArg::Pair)]
    pub bucket_rule: BucketRuleArg,
    #[arg(long, value_enum, default_value_t = TranslationArg::Angular)]
    pub translation: TranslationArg,
    #[arg(long, value_enum, default_value_t = StyleArg::Full)]
    pub style: StyleArg,
}

#[derive(Debug, Args)]
pub struct FetchTilesArgs {
    /// Latitude of the center tile, degrees.
    #[arg(long, allow_hyphen_values = true)]
    pub lat: f64,
    /// Longitude of the center tile, degrees.
    #[arg(long, allow_hyphen_values = true)]
    pub lon: f64,
    /// Web-Mercator zoom level.
    #[arg(long, default_value_t = 18)]
    pub zoom: u8,
    /// Tiles per side; must be odd.
    #[arg(long, default_value_t = 3)]
    pub grid: u32,
    /// Tile cache directory; defaults to <out-dir>/tiles.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Tile server base URL; the quadkey URL suffix is appended.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Use cached tiles only.
    #[arg(long)]
    pub offline: bool,
    /// Stitched PNG path; defaults to <out-dir>/stitched.png.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Per-request timeout.
    #[arg(long, default_value_t = 30)]
    pub timeout_secs: u64,
    /// Fail when any tile is missing.
    #[arg(long)]
    pub strict: bool,
}
