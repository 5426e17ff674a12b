//! File-based workflows behind the `tac-npml` binary.
//!
//! Each subcommand reads a [`RunConfig`] (JSON, optional), applies flag
//! overrides, validates, and writes explicit artifacts. JSON artifacts carry
//! the config, its SHA-256 hash and the seeds; CSV artifacts (other than
//! episode data) start with a `# config_hash=<hex>` comment line.
//!
//! Exit codes: 0 success, 1 numeric failure, 2 usage or I/O error.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cv::{self, EpisodeStats, LoocvSettings, StatRow, TacPrediction};
use crate::distribution::{
    distance_report, make_grid, moments, write_cdf_csv, write_density_csv, write_marginal_csv, Axis, BetaProduct,
    DiscreteDistribution, DistanceMode, DistanceReport, DistributionFile, GridBounds, GridSpec, JointCdf, Moments,
    ParameterGrid,
};
use crate::episode::{read_manifest, resample_uniform, ColumnMap, DatasetManifest, Episode, DEFAULT_TAU_HOURS};
use crate::error::{Error, Result};
use crate::likelihood::{
    cache_dir_from_env, cached_with, residual_matrix, CacheStatus, NodeResponses, NoiseModel,
    DEFAULT_SIGMA2,
};
use crate::mle::{estimate, estimate_with_sigma2, sparsify, Algorithm, EstimatorConfig, FitReport, FitResult, SimplexWeights};
use crate::model::{assemble_galerkin, build_system, ParameterVector, MAX_MESH};
use crate::sim::convolve_response;
use crate::synthetic::{generate_dataset, input_library, write_dataset, TruthSpec, INPUT_LIBRARY};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERIC: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Grid used for real data when the config gives no bounds.
pub const DEFAULT_DATA_BOUNDS: GridBounds = GridBounds {
    q1: [0.01, 2.0],
    q2: [0.01, 2.0],
};

/// Outer rounds allowed when σ² is estimated jointly.
const SIGMA2_ROUNDS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaReference {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BetaReference {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 5.0 }
    }
}

/// Everything a run depends on. Unset fields take their defaults; `bounds`
/// and `tau_hours` are resolved from the dataset when left empty (the
/// resolved values are what gets echoed and hashed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub bounds: Option<GridBounds>,
    pub m1: usize,
    pub m2: usize,
    pub n_mesh: usize,
    pub tau_hours: Option<f64>,
    pub sigma2: f64,
    pub estimator: EstimatorConfig,
    pub sparsify: bool,
    pub estimate_sigma2: bool,
    pub seed: u64,
    pub distance_mode: DistanceMode,
    pub reference: BetaReference,
    pub truth: TruthSpec,
    pub m_values: Vec<usize>,
    pub n_samples: usize,
    pub level: f64,
    pub columns: ColumnMap,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bounds: None,
            m1: 20,
            m2: 20,
            n_mesh: 128,
            tau_hours: None,
            sigma2: DEFAULT_SIGMA2,
            estimator: EstimatorConfig::default(),
            sparsify: false,
            estimate_sigma2: false,
            seed: 0,
            distance_mode: DistanceMode::Cdf,
            reference: BetaReference::default(),
            truth: TruthSpec::default(),
            m_values: vec![9],
            n_samples: cv::DEFAULT_SAMPLES,
            level: cv::DEFAULT_LEVEL,
            columns: ColumnMap::default(),
            dataset: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.m1 == 0 || self.m2 == 0 {
            return bad(format!("grid needs m1, m2 >= 1, got {} x {}", self.m1, self.m2));
        }
        if self.n_mesh == 0 || self.n_mesh > MAX_MESH {
            return bad(format!("mesh level must be in 1..={MAX_MESH}, got {}", self.n_mesh));
        }
        if let Some(b) = self.bounds {
            make_grid(b, 1, 1)?;
        }
        if let Some(t) = self.tau_hours {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("tau_hours must be positive, got {t}"));
            }
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        self.estimator.validate()?;
        self.truth.validate()?;
        let r = self.reference;
        if !(r.alpha > 0.0 && r.beta > 0.0 && r.alpha.is_finite() && r.beta.is_finite()) {
            return bad(format!("reference Beta({}, {}) is invalid", r.alpha, r.beta));
        }
        if self.m_values.is_empty() || self.m_values.contains(&0) {
            return bad("m_values must be a nonempty list of positive counts".into());
        }
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level must lie in (0, 1), got {}", self.level));
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Parser)]
#[command(name = "tac-npml", version, about = "Nonparametric estimation of (q1, q2) distributions from BrAC/TAC episodes")]
pub struct Cli {
    /// Worker threads (1 = serial).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic datasets, or run one forward simulation with --q.
    Simulate(SimulateArgs),
    /// Fit grid weights to a dataset.
    Estimate(EstimateArgs),
    /// Distances and moments of fitted distributions against a reference.
    Metrics(MetricsArgs),
    /// Leave-one-out prediction bands and coverage.
    Loocv(LoocvArgs),
    /// Prediction bands for one episode from a fitted distribution.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub m1: Option<usize>,
    #[arg(long)]
    pub m2: Option<usize>,
    /// q1_lo,q1_hi,q2_lo,q2_hi
    #[arg(long, value_parser = parse_bounds)]
    pub bounds: Option<GridBounds>,
    /// Galerkin mesh level N.
    #[arg(long)]
    pub mesh: Option<usize>,
    #[arg(long)]
    pub tau_hours: Option<f64>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Header names for time, BrAC and TAC, comma separated.
    #[arg(long, value_parser = parse_columns)]
    pub columns: Option<ColumnMap>,
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long, value_parser = |s: &str| s.parse::<Algorithm>().map_err(|e| e.to_string()))]
    pub algorithm: Option<Algorithm>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub prune_eps: Option<f64>,
    /// Likelihood cache directory (default: $TAC_NPML_CACHE_DIR).
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Episode counts; several values write one dataset per count.
    #[arg(long, value_delimiter = ',')]
    pub m: Option<Vec<usize>>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Measurement noise variance of the generated TAC.
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub truth_mesh: Option<usize>,
    #[arg(long)]
    pub tau_hours: Option<f64>,
    #[arg(long)]
    pub horizon_hours: Option<f64>,
    /// Forward mode: simulate this single q1,q2 without noise.
    #[arg(long, value_parser = parse_pair)]
    pub q: Option<[f64; 2]>,
    /// Forward mode input: index into the bundled BrAC library.
    #[arg(long, conflicts_with = "input_csv")]
    pub input_index: Option<usize>,
    /// Forward mode input: episode CSV whose BrAC column is used.
    #[arg(long)]
    pub input_csv: Option<PathBuf>,
    /// Forward mode mesh level.
    #[arg(long)]
    pub mesh: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Dataset manifest.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reduce the support to at most m nodes when that costs nothing.
    #[arg(long)]
    pub sparsify: bool,
    /// Estimate σ² jointly with the weights.
    #[arg(long)]
    pub estimate_sigma2: bool,
}

#[derive(Debug, Clone, Args)]
pub struct MetricsArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Fit files (`fit.json`) to evaluate, one table row each.
    #[arg(long, required = true, num_args = 1..)]
    pub fit: Vec<PathBuf>,
    /// Reference Beta(alpha, beta) product measure, as alpha,beta.
    #[arg(long, value_parser = parse_pair, conflicts_with = "reference_fit")]
    pub reference_beta: Option<[f64; 2]>,
    /// Use another fitted distribution (fit or distribution JSON) as the reference.
    #[arg(long)]
    pub reference_fit: Option<PathBuf>,
    #[arg(long, value_parser = |s: &str| s.parse::<DistanceMode>().map_err(|e| e.to_string()))]
    pub mode: Option<DistanceMode>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct LoocvArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fit file produced by `estimate`.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Episode id within the dataset (optional when it holds one episode).
    #[arg(long)]
    pub episode: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
}

fn parse_numbers(s: &str, n: usize) -> std::result::Result<Vec<f64>, String> {
    let values = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if values.len() != n {
        return Err(format!("expected {n} comma-separated numbers, got {}", values.len()));
    }
    Ok(values)
}

fn parse_pair(s: &str) -> std::result::Result<[f64; 2], String> {
    let v = parse_numbers(s, 2)?;
    Ok([v[0], v[1]])
}

fn parse_bounds(s: &str) -> std::result::Result<GridBounds, String> {
    let v = parse_numbers(s, 4)?;
    Ok(GridBounds {
        q1: [v[0], v[1]],
        q2: [v[2], v[3]],
    })
}

fn parse_columns(s: &str) -> std::result::Result<ColumnMap, String> {
    let names: Vec<&str> = s.split(',').map(str::trim).collect();
    match names.as_slice() {
        [t, b, a] if !t.is_empty() && !b.is_empty() && !a.is_empty() => Ok(ColumnMap {
            time: t.to_string(),
            brac: b.to_string(),
            tac: a.to_string(),
        }),
        _ => Err("expected three column names: time,brac,tac".into()),
    }
}

fn base_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

impl GridArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.m1 {
            cfg.m1 = v;
        }
        if let Some(v) = self.m2 {
            cfg.m2 = v;
        }
        if let Some(v) = self.bounds {
            cfg.bounds = Some(v);
        }
        if let Some(v) = self.mesh {
            cfg.n_mesh = v;
        }
        if let Some(v) = self.tau_hours {
            cfg.tau_hours = Some(v);
        }
        if let Some(v) = self.sigma2 {
            cfg.sigma2 = v;
        }
        if let Some(v) = &self.columns {
            cfg.columns = v.clone();
        }
    }
}

impl SolverArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let e = &mut cfg.estimator;
        if let Some(v) = self.algorithm {
            e.algorithm = v;
        }
        if let Some(v) = self.tol {
            e.tol = v;
        }
        if let Some(v) = self.max_iter {
            e.max_iter = v;
        }
        if let Some(v) = self.prune_eps {
            e.prune_eps = v;
        }
    }

    fn cache_dir(&self) -> Option<PathBuf> {
        self.cache_dir.clone().or_else(cache_dir_from_env)
    }
}

fn required(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::InvalidArgument(format!("no {what} given (flag or config)")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a CSV whose first line is the config-hash comment.
fn write_stamped_csv(
    path: &Path,
    hash: &str,
    body: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        writeln!(out, "# config_hash={hash}")?;
        body(out)?;
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Fills in τ and grid bounds from the manifest when the config leaves them
/// open. Synthetic manifests (with ground-truth q) default to the unit box.
fn resolve_dataset(cfg: &mut RunConfig, manifest: &DatasetManifest) {
    if cfg.tau_hours.is_none() {
        cfg.tau_hours = Some(manifest.tau_hours.unwrap_or(DEFAULT_TAU_HOURS));
    }
    if cfg.bounds.is_none() {
        let synthetic = !manifest.episodes.is_empty() && manifest.episodes.iter().all(|e| e.truth_q.is_some());
        cfg.bounds = Some(if synthetic { GridBounds::unit() } else { DEFAULT_DATA_BOUNDS });
    }
}

fn log_cache(status: CacheStatus, hash: &str) {
    match status {
        CacheStatus::Hit => eprintln!("likelihood cache hit: {hash}"),
        CacheStatus::Stored => eprintln!("likelihood cache miss, stored: {hash}"),
        CacheStatus::Disabled => {}
    }
}

/// Contents of `fit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub config_hash: String,
    pub config: RunConfig,
    pub seed: u64,
    pub episode_ids: Vec<String>,
    pub n_episodes: usize,
    pub n_mesh: usize,
    pub tau_hours: f64,
    pub sigma2: f64,
    /// Content hash of the likelihood matrix the fit was computed from.
    pub likelihood_hash: String,
    pub fit: FitReport,
}

impl FitFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn distribution(&self) -> Result<DiscreteDistribution> {
        DiscreteDistribution::from_file(&DistributionFile {
            grid: self.fit.grid.clone(),
            weights: self.fit.weights.clone(),
        })
    }
}

/// `distribution.json`: the measure itself plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StampedDistribution {
    pub config_hash: String,
    pub seed: u64,
    pub grid: GridSpec,
    pub weights: Vec<f64>,
}

fn read_distribution(path: &Path) -> Result<DiscreteDistribution> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let file: DistributionFile = match value.get("fit") {
        Some(fit) => {
            let report: FitReport = serde_json::from_value(fit.clone())?;
            DistributionFile {
                grid: report.grid,
                weights: report.weights,
            }
        }
        None => serde_json::from_value(value)?,
    };
    DiscreteDistribution::from_file(&file)
}

fn write_distribution_outputs(dir: &Path, d: &DiscreteDistribution, hash: &str, seed: u64) -> Result<()> {
    write_json(
        &dir.join("distribution.json"),
        &StampedDistribution {
            config_hash: hash.to_string(),
            seed,
            grid: d.grid.spec(),
            weights: d.weights.as_slice().to_vec(),
        },
    )?;
    write_stamped_csv(&dir.join("cdf.csv"), hash, |w| write_cdf_csv(d, w))?;
    write_stamped_csv(&dir.join("density.csv"), hash, |w| write_density_csv(d, w))?;
    write_stamped_csv(&dir.join("marginal_q1.csv"), hash, |w| write_marginal_csv(d, Axis::Q1, w))?;
    write_stamped_csv(&dir.join("marginal_q2.csv"), hash, |w| write_marginal_csv(d, Axis::Q2, w))
}

/// Parses `args` (including the program name) and runs the command; returns
/// the process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_usage() {
        EXIT_USAGE
    } else {
        EXIT_NUMERIC
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let dispatch = move || match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Estimate(a) => cmd_estimate(&a),
        Command::Metrics(a) => cmd_metrics(&a),
        Command::Loocv(a) => cmd_loocv(&a),
        Command::Predict(a) => cmd_predict(&a),
    };
    match cli.threads {
        Some(0) => Err(Error::InvalidArgument("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(dispatch),
        None => dispatch(),
    }
}

/// `output.csv` of a forward simulation: `step,time_hours,tac` for
/// `k = 1..n`.
fn write_output_csv(path: &Path, hash: &str, y: &[f64], tau: f64) -> Result<()> {
    write_stamped_csv(path, hash, |w| {
        writeln!(w, "step,time_hours,tac")?;
        for (k, v) in y.iter().enumerate() {
            writeln!(w, "{},{},{}", k + 1, (k + 1) as f64 * tau, v)?;
        }
        Ok(())
    })
}

#[derive(Debug, Serialize)]
struct ForwardRecord<'a> {
    config_hash: &'a str,
    config: &'a RunConfig,
    q: [f64; 2],
    n_mesh: usize,
    tau_hours: f64,
    input: String,
    steps: usize,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg = base_config(&args.cfg)?;
    if let Some(v) = &args.m {
        cfg.m_values = v.clone();
    }
    let t = &mut cfg.truth;
    if let Some(v) = args.alpha {
        t.alpha = v;
    }
    if let Some(v) = args.beta {
        t.beta = v;
    }
    if let Some(v) = args.sigma2 {
        t.sigma2 = v;
    }
    if let Some(v) = args.truth_mesh {
        t.n_truth_mesh = v;
    }
    if let Some(v) = args.tau_hours {
        t.tau_hours = v;
    }
    if let Some(v) = args.horizon_hours {
        t.horizon_hours = v;
    }
    if let Some(v) = args.mesh {
        cfg.n_mesh = v;
    }
    if args.out.is_some() {
        cfg.out = args.out.clone();
    }
    let out = required(&cfg.out, "output directory (--out)")?;
    cfg.validate()?;
    if cfg.truth.n_truth_mesh == 0 || cfg.truth.n_truth_mesh > MAX_MESH {
        return Err(Error::InvalidArgument(format!(
            "truth mesh level must be in 1..={MAX_MESH}, got {}",
            cfg.truth.n_truth_mesh
        )));
    }
    match args.q {
        Some(q) => simulate_forward(args, &cfg, &out, q),
        None => simulate_datasets(&cfg, &out),
    }
}

fn simulate_forward(args: &SimulateArgs, cfg: &RunConfig, out: &Path, q: [f64; 2]) -> Result<()> {
    let q = ParameterVector::new(q[0], q[1])?;
    let tau = cfg.truth.tau_hours;
    let (brac, input) = match (&args.input_csv, args.input_index) {
        (Some(path), _) => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            let raw = crate::episode::parse_episode_csv("input", std::io::BufReader::new(file), &cfg.columns)?;
            (resample_uniform(&raw, tau)?.brac, path.display().to_string())
        }
        (None, index) => {
            let k = index.unwrap_or(0);
            if k >= INPUT_LIBRARY.len() {
                return Err(Error::InvalidArgument(format!(
                    "input index {k} outside the library of {}",
                    INPUT_LIBRARY.len()
                )));
            }
            (input_library(&cfg.truth).swap_remove(k), format!("library:{k}"))
        }
    };
    let g = assemble_galerkin(cfg.n_mesh)?;
    let sys = build_system(&g, &q, tau)?;
    let y = convolve_response(&sys.impulse_response(brac.len()), &brac);
    create_dir(out)?;
    let hash = cfg.hash();
    write_output_csv(&out.join("output.csv"), &hash, &y, tau)?;
    write_json(
        &out.join("simulation.json"),
        &ForwardRecord {
            config_hash: &hash,
            config: cfg,
            q: q.as_array(),
            n_mesh: cfg.n_mesh,
            tau_hours: tau,
            input,
            steps: y.len(),
        },
    )?;
    eprintln!("wrote {} output steps to {}", y.len(), out.display());
    Ok(())
}

fn simulate_datasets(cfg: &RunConfig, out: &Path) -> Result<()> {
    let hash = cfg.hash();
    let library = input_library(&cfg.truth);
    let largest = *cfg.m_values.iter().max().expect("validated nonempty");
    // Smaller datasets are prefixes of the largest one.
    let all = generate_dataset(largest, &library, &cfg.truth, cfg.seed)?;
    let batch = cfg.m_values.len() > 1;
    for &m in &cfg.m_values {
        let dir = if batch { out.join(format!("m{m}")) } else { out.to_path_buf() };
        write_dataset(&dir, &all[..m], &cfg.truth, cfg.seed, Some(hash.clone()))?;
        write_json(
            &dir.join("config.json"),
            &serde_json::json!({ "config_hash": hash, "config": cfg }),
        )?;
        eprintln!("wrote {m} episodes to {}", dir.display());
    }
    Ok(())
}

struct LoadedData {
    episodes: Vec<Episode>,
    grid: ParameterGrid,
    noise: NoiseModel,
    tau: f64,
}

fn load_data(cfg: &mut RunConfig) -> Result<LoadedData> {
    let dataset = required(&cfg.dataset, "dataset (--dataset)")?;
    let manifest = read_manifest(&dataset)?;
    resolve_dataset(cfg, &manifest);
    cfg.validate()?;
    let tau = cfg.tau_hours.expect("resolved");
    let episodes = manifest.load(tau, &cfg.columns)?;
    let grid = make_grid(cfg.bounds.expect("resolved"), cfg.m1, cfg.m2)?;
    let noise = NoiseModel::gaussian(cfg.sigma2)?;
    Ok(LoadedData {
        episodes,
        grid,
        noise,
        tau,
    })
}

fn warn_unconverged(what: &str, fit: &FitResult) {
    if !fit.converged {
        eprintln!(
            "warning: {what} did not meet the stopping rule after {} iterations (optimality gap {:e}); outputs written anyway",
            fit.iterations, fit.optimality_gap
        );
    }
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    let mut cfg = base_config(&args.cfg)?;
    args.grid.apply(&mut cfg);
    args.solver.apply(&mut cfg);
    if args.dataset.is_some() {
        cfg.dataset = args.dataset.clone();
    }
    if args.out.is_some() {
        cfg.out = args.out.clone();
    }
    cfg.sparsify |= args.sparsify;
    cfg.estimate_sigma2 |= args.estimate_sigma2;
    let out = required(&cfg.out, "output directory (--out)")?;
    let data = load_data(&mut cfg)?;
    let hash = cfg.hash();

    let (l, fit, sigma2, likelihood_hash) = if cfg.estimate_sigma2 {
        let residuals = residual_matrix(&data.episodes, &data.grid, cfg.n_mesh)?;
        let (fit, sigma2) = estimate_with_sigma2(&residuals, &cfg.estimator, cfg.sigma2, SIGMA2_ROUNDS)?;
        let noise = NoiseModel::gaussian(sigma2)?;
        let lh = crate::likelihood::content_hash(&data.episodes, &data.grid, cfg.n_mesh, &noise);
        (residuals.log_likelihood(&noise), fit, sigma2, lh)
    } else {
        let cache = args.solver.cache_dir();
        let (l, status, lh) = cached_with(cache.as_deref(), &data.episodes, &data.grid, cfg.n_mesh, &data.noise, || {
            crate::likelihood::log_node_likelihoods(&data.episodes, &data.grid, cfg.n_mesh, &data.noise)
        })?;
        log_cache(status, &lh);
        let fit = estimate(&l, &cfg.estimator, None)?;
        (l, fit, cfg.sigma2, lh)
    };
    warn_unconverged("estimation", &fit);

    let (fit, outcome) = if cfg.sparsify {
        let (f, o) = sparsify(&fit, &l, 1e-6, &cfg.estimator)?;
        (f, Some(o))
    } else {
        (fit, None)
    };

    let mut report = fit.report(&cfg.estimator, Some(cfg.seed));
    report.sigma2 = Some(sigma2);
    report.sparsify = outcome;
    create_dir(&out)?;
    write_json(
        &out.join("fit.json"),
        &FitFile {
            config_hash: hash.clone(),
            config: cfg.clone(),
            seed: cfg.seed,
            episode_ids: data.episodes.iter().map(|e| e.id.clone()).collect(),
            n_episodes: data.episodes.len(),
            n_mesh: cfg.n_mesh,
            tau_hours: data.tau,
            sigma2,
            likelihood_hash,
            fit: report,
        },
    )?;
    write_distribution_outputs(&out, &fit.distribution, &hash, cfg.seed)?;
    eprintln!(
        "log-likelihood {} after {} iterations, support {} of {} nodes",
        fit.final_loglik,
        fit.iterations,
        fit.support_size,
        data.grid.len()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ReferenceSpec {
    BetaProduct { alpha: f64, beta: f64 },
    Fit { path: String },
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub fit: String,
    pub fit_config_hash: String,
    pub seed: u64,
    /// Number of episodes.
    pub m: usize,
    /// Number of grid nodes.
    #[serde(rename = "M")]
    pub nodes: usize,
    /// Galerkin mesh level.
    #[serde(rename = "N")]
    pub n_mesh: usize,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "D_bar_M")]
    pub d_bar_m: f64,
    #[serde(rename = "D_bar_N")]
    pub d_bar_n: f64,
    pub support_size: usize,
    pub moments: Moments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    pub config: RunConfig,
    pub reference: ReferenceSpec,
    pub mode: DistanceMode,
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_COLUMNS: [&str; 6] = ["m", "M", "N", "D", "D_bar_M", "D_bar_N"];

pub fn cmd_metrics(args: &MetricsArgs) -> Result<()> {
    let mut cfg = base_config(&args.cfg)?;
    if let Some(m) = args.mode {
        cfg.distance_mode = m;
    }
    if let Some([a, b]) = args.reference_beta {
        cfg.reference = BetaReference { alpha: a, beta: b };
    }
    if args.out.is_some() {
        cfg.out = args.out.clone();
    }
    let out = required(&cfg.out, "output directory (--out)")?;
    cfg.validate()?;

    let (reference, spec): (Box<dyn JointCdf>, ReferenceSpec) = match &args.reference_fit {
        Some(path) => (
            Box::new(read_distribution(path)?),
            ReferenceSpec::Fit {
                path: path.display().to_string(),
            },
        ),
        None => (
            Box::new(BetaProduct::iid(cfg.reference.alpha, cfg.reference.beta)?),
            ReferenceSpec::BetaProduct {
                alpha: cfg.reference.alpha,
                beta: cfg.reference.beta,
            },
        ),
    };
    let hash = cfg.hash();
    let rows = args
        .fit
        .iter()
        .map(|path| {
            let file = FitFile::read(path)?;
            let d = file.distribution()?;
            let DistanceReport {
                d: dv,
                d_bar_m,
                d_bar_n,
                nodes,
                n_mesh,
                ..
            } = distance_report(&d, reference.as_ref(), cfg.distance_mode, file.n_mesh);
            Ok(MetricsRow {
                fit: path.display().to_string(),
                fit_config_hash: file.config_hash.clone(),
                seed: file.seed,
                m: file.n_episodes,
                nodes,
                n_mesh,
                d: dv,
                d_bar_m,
                d_bar_n,
                support_size: file.fit.support_size,
                moments: moments(&d),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    create_dir(&out)?;
    write_stamped_csv(&out.join("table.csv"), &hash, |w| {
        writeln!(w, "{}", METRICS_COLUMNS.join(","))?;
        for r in &rows {
            writeln!(w, "{},{},{},{},{},{}", r.m, r.nodes, r.n_mesh, r.d, r.d_bar_m, r.d_bar_n)?;
        }
        Ok(())
    })?;
    let moments_only: Vec<_> = rows
        .iter()
        .map(|r| serde_json::json!({ "fit": r.fit, "m": r.m, "moments": r.moments }))
        .collect();
    write_json(
        &out.join("moments.json"),
        &serde_json::json!({ "config_hash": hash, "seed": cfg.seed, "fits": moments_only }),
    )?;
    write_json(
        &out.join("metrics.json"),
        &MetricsFile {
            config_hash: hash.clone(),
            config: cfg.clone(),
            reference: spec,
            mode: cfg.distance_mode,
            rows,
        },
    )
}

pub const PREDICTION_COLUMNS: [&str; 6] = ["step", "time_hours", "mean", "lower", "upper", "measured"];
pub const TABLE_COLUMNS: [&str; 5] = ["episode", "measured", "estimated", "lower", "upper"];

pub fn write_prediction_csv(path: &Path, hash: &str, pred: &TacPrediction, measured: &[f64]) -> Result<()> {
    if measured.len() != pred.mean.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} measured values for a {}-step prediction",
            measured.len(),
            pred.mean.len()
        )));
    }
    write_stamped_csv(path, hash, |w| {
        writeln!(w, "{}", PREDICTION_COLUMNS.join(","))?;
        for (k, obs) in measured.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                k + 1,
                pred.times[k],
                pred.mean[k],
                pred.lower[k],
                pred.upper[k],
                obs
            )?;
        }
        Ok(())
    })
}

/// Per-episode stats JSON: the three table rows plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub config_hash: String,
    pub seed: u64,
    pub level: f64,
    pub n_samples: usize,
    #[serde(flatten)]
    pub stats: EpisodeStats,
}

pub fn write_stat_table(path: &Path, hash: &str, rows: &[EpisodeStats], pick: fn(&EpisodeStats) -> &StatRow) -> Result<()> {
    write_stamped_csv(path, hash, |w| {
        writeln!(w, "{}", TABLE_COLUMNS.join(","))?;
        for r in rows {
            let s = pick(r);
            writeln!(w, "{},{},{},{},{}", r.episode, s.measured, s.estimated, s.lower, s.upper)?;
        }
        Ok(())
    })
}

pub fn cmd_loocv(args: &LoocvArgs) -> Result<()> {
    let mut cfg = base_config(&args.cfg)?;
    args.grid.apply(&mut cfg);
    args.solver.apply(&mut cfg);
    if args.dataset.is_some() {
        cfg.dataset = args.dataset.clone();
    }
    if args.out.is_some() {
        cfg.out = args.out.clone();
    }
    if let Some(v) = args.samples {
        cfg.n_samples = v;
    }
    if let Some(v) = args.level {
        cfg.level = v;
    }
    let out = required(&cfg.out, "output directory (--out)")?;
    let data = load_data(&mut cfg)?;
    let hash = cfg.hash();

    let horizon = data.episodes.iter().map(Episode::n).max().unwrap_or(0);
    let responses = NodeResponses::compute(&data.grid, cfg.n_mesh, data.tau, horizon)?;
    let cache = args.solver.cache_dir();
    let (l, status, lh) = cached_with(cache.as_deref(), &data.episodes, &data.grid, cfg.n_mesh, &data.noise, || {
        Ok(responses.residuals(&data.episodes)?.log_likelihood(&data.noise))
    })?;
    log_cache(status, &lh);
    let settings = LoocvSettings {
        n_samples: cfg.n_samples,
        level: cfg.level,
        seed: cfg.seed,
    };
    let result = cv::run_loocv(&data.episodes, &l, &responses, &cfg.estimator, &settings)?;

    create_dir(&out)?;
    let folds_dir = out.join("folds");
    for fold in &result.folds {
        let episode = &data.episodes[fold.test_index];
        warn_unconverged(&format!("fold {} ({})", fold.test_index + 1, episode.id), &fold.fit);
        let dir = folds_dir.join(format!("{:02}_{}", fold.test_index + 1, episode.id));
        create_dir(&dir)?;
        write_prediction_csv(&dir.join("prediction.csv"), &hash, &fold.prediction, &episode.tac)?;
        write_json(
            &dir.join("stats.json"),
            &StatsFile {
                config_hash: hash.clone(),
                seed: crate::rng::derive_seed(cfg.seed, fold.test_index as u64),
                level: cfg.level,
                n_samples: cfg.n_samples,
                stats: fold.stats.clone(),
            },
        )?;
        let mut report = fold.fit.report(&cfg.estimator, None);
        report.sigma2 = Some(cfg.sigma2);
        write_json(
            &dir.join("fit.json"),
            &serde_json::json!({
                "config_hash": hash,
                "seed": cfg.seed,
                "held_out": episode.id,
                "fit": report,
            }),
        )?;
    }
    let rows: Vec<EpisodeStats> = result.folds.iter().map(|f| f.stats.clone()).collect();
    write_stat_table(&out.join("table_peak_tac.csv"), &hash, &rows, |r| &r.peak_tac)?;
    write_stat_table(&out.join("table_peak_time.csv"), &hash, &rows, |r| &r.peak_time)?;
    write_stat_table(&out.join("table_auc.csv"), &hash, &rows, |r| &r.auc)?;
    write_json(
        &out.join("stats.json"),
        &serde_json::json!({ "config_hash": hash, "seed": cfg.seed, "episodes": rows }),
    )?;
    write_json(
        &out.join("coverage.json"),
        &serde_json::json!({
            "config_hash": hash,
            "config": cfg,
            "seed": cfg.seed,
            "likelihood_hash": lh,
            "coverage": result.coverage,
        }),
    )?;
    let c = &result.coverage;
    eprintln!(
        "{} folds; coverage peak {:.3}, peak time {:.3}, AUC {:.3}",
        result.folds.len(),
        c.peak_tac,
        c.peak_time,
        c.auc
    );
    Ok(())
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let file = FitFile::read(&args.fit)?;
    let mut cfg = file.config.clone();
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if args.dataset.is_some() {
        cfg.dataset = args.dataset.clone();
    }
    if args.out.is_some() {
        cfg.out = args.out.clone();
    }
    if let Some(v) = args.samples {
        cfg.n_samples = v;
    }
    if let Some(v) = args.level {
        cfg.level = v;
    }
    cfg.tau_hours = Some(file.tau_hours);
    let out = required(&cfg.out, "output directory (--out)")?;
    let dataset = required(&cfg.dataset, "dataset (--dataset)")?;
    cfg.validate()?;
    let manifest = read_manifest(&dataset)?;
    let entry = match &args.episode {
        Some(id) => manifest
            .episodes
            .iter()
            .find(|e| &e.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("episode {id:?} not in {}", dataset.display())))?,
        None if manifest.episodes.len() == 1 => &manifest.episodes[0],
        None => {
            return Err(Error::InvalidArgument(format!(
                "{} holds {} episodes; pick one with --episode",
                dataset.display(),
                manifest.episodes.len()
            )))
        }
    };
    let single = DatasetManifest {
        episodes: vec![entry.clone()],
        tau_hours: manifest.tau_hours,
        root: manifest.root.clone(),
    };
    let episode = single.load(file.tau_hours, &cfg.columns)?.remove(0);
    let hash = cfg.hash();

    let d = file.distribution()?;
    let responses = NodeResponses::compute(&d.grid, file.n_mesh, file.tau_hours, episode.n())?;
    let pred = cv::predict_with(&responses, &d, &episode.brac, cfg.n_samples, cfg.level, cfg.seed)?;
    let stats = cv::episode_stats(&episode, &pred)?;
    create_dir(&out)?;
    write_prediction_csv(&out.join("prediction.csv"), &hash, &pred, &episode.tac)?;
    write_json(
        &out.join("stats.json"),
        &StatsFile {
            config_hash: hash,
            seed: cfg.seed,
            level: cfg.level,
            n_samples: cfg.n_samples,
            stats,
        },
    )
}

/// Point-mass fit file on `grid` at `node`; handy for scripted checks.
pub fn point_mass_fit(grid: ParameterGrid, node: usize, n_mesh: usize, tau_hours: f64) -> Result<FitFile> {
    let cfg = RunConfig {
        bounds: Some(grid.spec().bounds),
        m1: grid.m1,
        m2: grid.m2,
        n_mesh,
        tau_hours: Some(tau_hours),
        ..RunConfig::default()
    };
    let weights = SimplexWeights::vertex(grid.len(), node)?;
    let d = DiscreteDistribution::new(grid, weights)?;
    let fit = FitResult {
        final_loglik: 0.0,
        iterations: 0,
        converged: true,
        support_size: 1,
        optimality_gap: 0.0,
        trace: Vec::new(),
        distribution: d,
    };
    Ok(FitFile {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        episode_ids: Vec::new(),
        n_episodes: 0,
        n_mesh,
        tau_hours,
        sigma2: cfg.sigma2,
        likelihood_hash: String::new(),
        fit: fit.report(&cfg.estimator, None),
        config: cfg,
    })
}
