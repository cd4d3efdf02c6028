use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::Serialize;

use dilution_core::geometry::{parse_dims, Profile};
use dilution_core::synth::{PredictionModel, ZDistribution};

#[derive(Debug, Parser)]
#[command(name = "dilution-lab", version, about = "Attention dilution and transfer diagnostics for windowed 3D transformers")]
pub struct Cli {
    /// Run every per-scan loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic cohort with simulated predictions.
    Synth(SynthArgs),
    /// Per-stage token geometry and compute estimate for a crop.
    Geometry(GeometryArgs),
    /// Run the toy encoder over a cohort and write attention dumps.
    Simulate(SimulateArgs),
    /// Attention dilution index per scan and per stage.
    Adi(AdiArgs),
    /// Tumor-localized intensity augmentation of one volume.
    Augment(AugmentArgs),
    /// Fit or apply the appearance-subtype model.
    Cluster(ClusterArgs),
    /// Layer-by-layer CKA between two activation dumps.
    Cka(CkaArgs),
    /// Segmentation metrics and paired statistics.
    Eval(EvalArgs),
    /// Join evaluation and ADI tables into summary and plot-data CSVs.
    Report(ReportArgs),
}

pub fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: dilution_core::Error| e.to_string())
}

pub fn parse_crop(s: &str) -> Result<[usize; 3], String> {
    parse_dims(s).map_err(|e| e.to_string())
}

/// `table`, `uniform:LO-HI` or `fixed:Z`.
pub fn parse_z(s: &str) -> Result<ZDistribution, String> {
    let bad = || format!("expected table, uniform:LO-HI or fixed:Z, got {s:?}");
    match s.split_once(':') {
        None if s == "table" => Ok(ZDistribution::TableLike),
        Some(("uniform", r)) => {
            let (lo, hi) = r.split_once('-').ok_or_else(bad)?;
            let lo: usize = lo.parse().map_err(|_| bad())?;
            let hi: usize = hi.parse().map_err(|_| bad())?;
            if lo == 0 || lo > hi {
                return Err(bad());
            }
            Ok(ZDistribution::Uniform { lo, hi })
        }
        Some(("fixed", z)) => Ok(ZDistribution::Fixed(z.parse().map_err(|_| bad())?)),
        _ => Err(bad()),
    }
}

/// `NAME:MISS_RATE:MAX_SHIFT`.
pub fn parse_prediction(s: &str) -> Result<PredictionModel, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || format!("expected NAME:MISS_RATE:MAX_SHIFT, got {s:?}");
    let [name, miss, shift] = parts.as_slice() else {
        return Err(bad());
    };
    let miss: f64 = miss.parse().map_err(|_| bad())?;
    if name.is_empty() || !(0.0..=1.0).contains(&miss) {
        return Err(bad());
    }
    Ok(PredictionModel::new(name, miss, shift.parse().map_err(|_| bad())?))
}

pub fn parse_range(s: &str) -> Result<[f64; 2], String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected LO,HI, got {s:?}"))?;
    let a: f64 = a.trim().parse().map_err(|_| format!("bad number in {s:?}"))?;
    let b: f64 = b.trim().parse().map_err(|_| format!("bad number in {s:?}"))?;
    Ok([a, b])
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 128)]
    pub in_plane: usize,
    /// Axial extent distribution: table, uniform:LO-HI or fixed:Z.
    #[arg(long, default_value = "table", value_parser = parse_z)]
    pub z: ZDistribution,
    /// Share of subtype B scans.
    #[arg(long, default_value_t = 0.5)]
    pub b_fraction: f64,
    /// Simulated prediction configuration, NAME:MISS_RATE:MAX_SHIFT. Repeatable.
    #[arg(long = "pred", value_parser = parse_prediction, default_values = ["base:0.2:2", "act:0.1:1"])]
    pub predictions: Vec<PredictionModel>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GeometryArgs {
    #[arg(long, value_parser = parse_profile)]
    pub profile: Profile,
    /// Crop as AxBxC; defaults to the profile's cubic crop.
    #[arg(long, value_parser = parse_crop)]
    pub crop: Option<[usize; 3]>,
    /// Channel width used by the compute estimate.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Directory for geometry.csv, compute.json and run_config.json; CSV
    /// goes to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EncoderArgs {
    #[arg(long, value_parser = parse_profile)]
    pub profile: Profile,
    #[arg(long, value_parser = parse_crop)]
    pub crop: Option<[usize; 3]>,
    /// Encoder weight seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stage-0 width of the toy encoder.
    #[arg(long, default_value_t = 12)]
    pub embed_dim: usize,
    /// Exclude padding keys from every softmax.
    #[arg(long)]
    pub mask_padding_keys: bool,
    /// Skip percentile clipping and rescaling before cropping.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AdiArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    /// Read `<scan_id>.ratt` dumps from this directory instead of simulating.
    #[arg(long)]
    pub attn_dump: Option<PathBuf>,
    /// Prediction configuration whose surface Dice is joined per scan.
    #[arg(long)]
    pub sdsc_config: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AugmentArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long, default_value = "0.5,1.5", value_parser = parse_range)]
    pub alpha: [f64; 2],
    #[arg(long, default_value = "-0.2,0.2", value_parser = parse_range, allow_hyphen_values = true)]
    pub beta: [f64; 2],
    #[arg(long, default_value_t = 0.3)]
    pub probability: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group(ArgGroup::new("mode").required(true).args(["fit", "assign"])))]
pub struct ClusterArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub fit: bool,
    #[arg(long)]
    pub assign: bool,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub k_min: usize,
    #[arg(long, default_value_t = 5)]
    pub k_max: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CkaArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// One batch over all samples instead of minibatches.
    #[arg(long)]
    pub full: bool,
    /// Biased estimator; only with --full.
    #[arg(long, requires = "full")]
    pub biased: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long = "pred-config", required = true, num_args = 1..)]
    pub pred_configs: Vec<String>,
    #[arg(long, default_value_t = dilution_core::metrics::SURFACE_TOLERANCE_MM)]
    pub tolerance_mm: f64,
    #[arg(long, default_value_t = 0.1)]
    pub penalty_sdsc: f64,
    #[arg(long, default_value_t = 10.0)]
    pub penalty_vr: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// Per-scan evaluation CSVs written by `eval`.
    #[arg(long, required = true, num_args = 1..)]
    pub eval: Vec<PathBuf>,
    /// Per-scan ADI CSV written by `adi`, for the plot-data tables.
    #[arg(long)]
    pub adi: Option<PathBuf>,
    /// Padding-fraction bin edges for the sDSC-by-pf table.
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1")]
    pub pf_edges: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub penalty_sdsc: f64,
    #[arg(long, default_value_t = 10.0)]
    pub penalty_vr: f64,
    #[arg(long)]
    pub out: PathBuf,
}
