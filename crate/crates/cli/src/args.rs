use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use probelight_core::inpaint::{CloserIs, ImputeLevel};
use probelight_core::PipelineKind;
use serde::de::DeserializeOwned;

/// Chrome-ball light probe estimation with pluggable denoisers.
#[derive(Debug, Parser)]
#[command(name = "probelight", version, propagate_version = true)]
pub struct Cli {
    /// Worker threads for all parallel work [default: logical cores]
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: Option<u16>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate an HDR environment map from one LDR image
    Estimate(EstimateArgs),
    /// Re-run an estimate from its manifest
    Replay(ReplayArgs),
    /// Collect run directories into one CSV/JSON table and an SVG chart
    Report(ReportArgs),
    /// Score predicted environment maps against ground truth
    Evaluate(EvaluateArgs),
    /// Merge an exposure bracket of LDR balls into an HDR ball
    #[command(
        override_usage = "probelight merge-hdr --ev0 A.png --ev-2.5 B.png --ev-5 C.png -o ball.pfm [--gamma 2.4]",
        after_help = "Each --ev<VALUE> PATH pair adds one exposure; the bracket must include --ev0."
    )]
    MergeHdr {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "ARGS")]
        args: Vec<String>,
    },
    /// Tone-map an HDR image to a display-referred one
    Tonemap(TonemapArgs),
    /// Unwrap a mirror-ball image into an equirectangular map
    Unwrap(UnwrapArgs),
    /// Render probe spheres lit by an environment map
    RenderSpheres(RenderArgs),
    /// Cut a pinhole view out of a panorama
    #[command(allow_negative_numbers = true)]
    CropPano(CropArgs),
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct EstimateArgs {
    /// Input LDR image (.png, or .pfm/.hdr with values in [0, 1])
    pub input: PathBuf,

    /// Depth map of the input, same size (single channel, or first channel used)
    #[arg(long, conflicts_with = "flat_depth")]
    pub depth: Option<PathBuf>,

    /// Use a constant depth map instead of --depth
    #[arg(long)]
    pub flat_depth: bool,

    /// Denoiser: toy-oracle:PATH, toy-lobe:PATH:SIGMA, toy-linear:CONFIG.json,
    /// remote:HOST:PORT or remote:stdio:CMD
    #[arg(long)]
    pub denoiser: Option<String>,

    /// JSON pipeline config; flags given on the command line override it
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Run directory
    #[arg(short, long, default_value = "run")]
    pub output: PathBuf,

    /// Master seed
    #[arg(long, env = "PROBELIGHT_SEED", default_value_t = 0)]
    pub seed: u64,

    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// diffusionlight, turbo-sdedit, turbo-pred or turbo-swap
    #[arg(long, default_value_t = PipelineKind::TurboSwap)]
    pub pipeline: PipelineKind,

    /// Exposure values, descending, starting at 0
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "0,-2.5,-5"
    )]
    pub evs: Vec<f64>,

    /// Balls per median
    #[arg(long = "n", id = "n", default_value_t = 30)]
    pub n: usize,

    /// Median rounds
    #[arg(long, default_value_t = 2)]
    pub k: usize,

    /// SDEdit strength
    #[arg(long, default_value_t = 0.8)]
    pub eta: f64,

    /// Sampling steps
    #[arg(long, default_value_t = 30)]
    pub steps: usize,

    /// Fraction of T where turbo hands over to exposure
    #[arg(long, default_value_t = 0.8)]
    pub threshold: f64,

    #[arg(long, default_value_t = 5.0)]
    pub guidance: f64,

    #[arg(long, default_value_t = 0.75)]
    pub lora_scale: f32,

    /// Ball diameter in input pixels
    #[arg(long, default_value_t = 256)]
    pub ball_diameter: usize,

    /// Side of the square ball crop used for merging
    #[arg(long, default_value_t = 256)]
    pub ball_crop: usize,

    /// Environment map height; width is twice this
    #[arg(long, default_value_t = 128)]
    pub env_height: usize,

    #[arg(long, default_value_t = -5.0)]
    pub ev_min: f64,

    #[arg(long, default_value_t = 2.4)]
    pub gamma: f64,

    /// Reuse the last turbo step's noise estimate for the clean-ball prediction
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub reuse_threshold_eps: bool,

    /// as-written or t-prev-fresh-noise
    #[arg(long, default_value = "as-written", value_parser = kebab::<ImputeLevel>)]
    pub impute_level: ImputeLevel,

    /// Whether smaller or larger depth values are nearer: smaller or larger
    #[arg(long, default_value = "smaller", value_parser = kebab::<CloserIs>)]
    pub closer: CloserIs,

    /// Run the exposures concurrently
    #[arg(long)]
    pub parallel_evs: bool,
}

/// Parses a kebab-case enum through its serde representation.
fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,

    /// Where to write the replayed run [default: replay/ next to the manifest]
    #[arg(short, long)]
    pub output: Option<PathBuf>,

    /// Exit with status 1 if any artifact differs from the recorded checksum
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Completed run directories
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,

    /// Output JSON path; the CSV and SVG are written alongside
    #[arg(short, long, default_value = "report.json")]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    ThreeSpheres,
    SphereArray,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct EvaluateArgs {
    /// Directory of predicted maps
    #[arg(long)]
    pub pred: PathBuf,

    /// Directory of ground-truth maps with matching stems
    #[arg(long)]
    pub gt: PathBuf,

    #[arg(long, value_enum, default_value_t = ProtocolArg::ThreeSpheres)]
    pub protocol: ProtocolArg,

    /// Report JSON path; the CSV is written alongside
    #[arg(short, long = "out", default_value = "report.json")]
    pub out: PathBuf,

    /// Rendered sphere size for three-spheres
    #[arg(long, default_value_t = 128)]
    pub sphere_size: usize,

    /// Grid of the sphere array, ROWSxCOLS
    #[arg(long, default_value = "3x8", value_parser = parse_size)]
    pub array_grid: (usize, usize),

    /// Frame size of the sphere array, HxW
    #[arg(long, default_value = "192x512", value_parser = parse_size)]
    pub array_size: (usize, usize),

    /// Rotate predictions about the vertical axis by this many degrees
    #[arg(long = "rotate-deg", alias = "rotate", default_value_t = 0.0)]
    pub rotate: f64,

    /// Ignore pixels that are black in the ground-truth render
    #[arg(long)]
    pub mask_black: bool,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct TonemapArgs {
    pub input: PathBuf,

    #[arg(short, long)]
    pub output: PathBuf,

    #[arg(long, default_value_t = 0.0)]
    pub ev: f64,

    #[arg(long, default_value_t = 2.4)]
    pub gamma: f64,

    /// Luminance percentile mapped to --target
    #[arg(long, default_value_t = 99.0)]
    pub percentile: f64,

    #[arg(long, default_value_t = 0.9)]
    pub target: f64,
}

#[derive(Debug, Args)]
pub struct UnwrapArgs {
    pub input: PathBuf,

    #[arg(short, long)]
    pub output: PathBuf,

    /// Output size HxW
    #[arg(long, default_value = "128x256", value_parser = parse_size)]
    pub size: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum MaterialArg {
    Mirror,
    Matte,
    Diffuse,
    /// Grid of gray-diffuse spheres
    Array,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub input: PathBuf,

    #[arg(long, value_enum, default_value_t = MaterialArg::Diffuse)]
    pub material: MaterialArg,

    #[arg(short, long)]
    pub output: PathBuf,

    /// Sphere size in pixels
    #[arg(long, default_value_t = 128)]
    pub size: usize,

    /// Grid of the sphere array, ROWSxCOLS
    #[arg(long, default_value = "3x8", value_parser = parse_size)]
    pub array_grid: (usize, usize),

    /// Frame size of the sphere array, HxW
    #[arg(long, default_value = "192x512", value_parser = parse_size)]
    pub array_size: (usize, usize),
}

#[derive(Debug, Args)]
pub struct CropArgs {
    pub input: PathBuf,

    /// Vertical field of view, degrees
    #[arg(long, default_value_t = 60.0)]
    pub fov: f64,

    /// Azimuth, degrees
    #[arg(long, default_value_t = 0.0)]
    pub az: f64,

    /// Elevation, degrees
    #[arg(long, default_value_t = 0.0)]
    pub el: f64,

    /// Crop size HxW
    #[arg(long = "out", default_value = "192x256", value_parser = parse_size)]
    pub size: (usize, usize),

    #[arg(short = 'o', long = "output")]
    pub output: PathBuf,
}

pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h: usize = h
        .trim()
        .parse()
        .map_err(|_| format!("bad height in {s:?}"))?;
    let w: usize = w
        .trim()
        .parse()
        .map_err(|_| format!("bad width in {s:?}"))?;
    if h == 0 || w == 0 {
        return Err(format!("size {s:?} must be positive"));
    }
    Ok((h, w))
}
