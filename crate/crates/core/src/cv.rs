//! Leave-one-out cross-validation with ensemble TAC prediction: fit on all
//! but one episode, sample parameters from the fitted distribution, simulate
//! the held-out BrAC and summarize the ensemble with a mean curve, percentile
//! bands and peak / peak-time / AUC statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distribution::{sample_indices, DiscreteDistribution};
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::likelihood::{LogLikelihoodMatrix, NodeResponses};
use crate::mle::{estimate, EstimatorConfig, FitResult};
use crate::rng::derive_seed;

pub const DEFAULT_SAMPLES: usize = 100;
pub const DEFAULT_LEVEL: f64 = 0.95;

/// One leave-one-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub test_index: usize,
    pub train: Vec<Episode>,
    pub test: Episode,
}

pub fn loocv_splits(episodes: &[Episode]) -> Result<Vec<Fold>> {
    if episodes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-out needs at least 2 episodes, got {}",
            episodes.len()
        )));
    }
    Ok((0..episodes.len())
        .map(|i| Fold {
            test_index: i,
            train: episodes
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != i)
                .map(|(_, e)| e.clone())
                .collect(),
            test: episodes[i].clone(),
        })
        .collect())
}

/// Empirical quantile by linear interpolation between order statistics
/// (`h = (n − 1)p`). `sorted` must be ascending and nonempty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean that returns `x` exactly for a constant sample and always lies in
/// `[min, max]`.
fn stable_mean(values: &[f64]) -> f64 {
    let x0 = values[0];
    let mean = x0 + values.iter().map(|v| v - x0).sum::<f64>() / values.len() as f64;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    mean.clamp(lo, hi)
}

fn interval(values: &[f64], level: f64) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    (percentile(&sorted, tail), percentile(&sorted, 1.0 - tail))
}

/// Ensemble forecast of a held-out TAC signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TacPrediction {
    /// Observation times `kτ`, `k = 1..n`.
    pub times: Vec<f64>,
    pub tau: f64,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<Vec<Vec<f64>>>,
}

/// Simulates `n_samples` parameter draws from `d` through precomputed node
/// responses; each distinct node is simulated once.
pub fn predict_with(
    responses: &NodeResponses,
    d: &DiscreteDistribution,
    brac: &[f64],
    n_samples: usize,
    level: f64,
    seed: u64,
) -> Result<TacPrediction> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if brac.is_empty() {
        return Err(Error::EmptyInput("empty BrAC input".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("band level {level} must be in (0, 1)")));
    }
    if responses.grid != d.grid {
        return Err(Error::DimensionMismatch("distribution and node responses use different grids".into()));
    }
    let draws = sample_indices(d, n_samples, seed);
    let mut distinct = draws.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let curves: Vec<(usize, Vec<f64>)> = distinct
        .par_iter()
        .map(|&j| Ok((j, responses.simulate(j, brac)?)))
        .collect::<Result<_>>()?;
    let lookup = |j: usize| &curves[curves.binary_search_by_key(&j, |c| c.0).expect("simulated node")].1;
    let ensemble: Vec<Vec<f64>> = draws.iter().map(|&j| lookup(j).clone()).collect();

    let n = brac.len();
    let mut mean = Vec::with_capacity(n);
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    let mut column = vec![0.0; n_samples];
    for k in 0..n {
        for (c, curve) in column.iter_mut().zip(&ensemble) {
            *c = curve[k];
        }
        mean.push(stable_mean(&column));
        let (lo, hi) = interval(&column, level);
        lower.push(lo);
        upper.push(hi);
    }
    let tau = responses.tau;
    Ok(TacPrediction {
        times: (1..=n).map(|k| k as f64 * tau).collect(),
        tau,
        mean,
        lower,
        upper,
        level,
        n_samples,
        ensemble: Some(ensemble),
    })
}

/// [`predict_with`] after discretizing every grid node.
pub fn predict_tac(
    d: &DiscreteDistribution,
    brac: &[f64],
    n_samples: usize,
    n_mesh: usize,
    tau: f64,
    seed: u64,
) -> Result<TacPrediction> {
    let responses = NodeResponses::compute(&d.grid, n_mesh, tau, brac.len())?;
    predict_with(&responses, d, brac, n_samples, DEFAULT_LEVEL, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveStats {
    pub peak_tac: f64,
    /// Hours; earliest time of the maximum.
    pub peak_time: f64,
    /// Trapezoidal area, concentration·hours.
    pub auc: f64,
}

/// Statistics of a curve sampled at `t = kτ`, `k = 0, 1, …`.
pub fn summary_stats(curve: &[f64], tau: f64) -> Result<CurveStats> {
    if curve.is_empty() {
        return Err(Error::EmptyInput("empty curve".into()));
    }
    let (mut best, mut at) = (curve[0], 0);
    for (k, &v) in curve.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            at = k;
        }
    }
    let auc = curve.windows(2).map(|w| 0.5 * tau * (w[0] + w[1])).sum();
    Ok(CurveStats {
        peak_tac: best,
        peak_time: at as f64 * tau,
        auc,
    })
}

/// Statistics of an output series observed at `τ, 2τ, …`, anchored at the
/// zero initial condition at `t = 0`.
pub fn output_stats(y: &[f64], tau: f64) -> Result<CurveStats> {
    let mut curve = Vec::with_capacity(y.len() + 1);
    curve.push(0.0);
    curve.extend_from_slice(y);
    summary_stats(&curve, tau)
}

/// Point estimate with its band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Banded {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Banded {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub peak_tac: Banded,
    pub peak_time: Banded,
    pub auc: Banded,
}

/// Estimates from the ensemble-mean curve; bands from the percentiles of
/// the per-member statistics.
pub fn band_stats(pred: &TacPrediction) -> Result<BandStats> {
    let ensemble = pred
        .ensemble
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("prediction has no retained ensemble".into()))?;
    let point = output_stats(&pred.mean, pred.tau)?;
    let members: Vec<CurveStats> = ensemble
        .iter()
        .map(|c| output_stats(c, pred.tau))
        .collect::<Result<_>>()?;
    let band = |estimate: f64, f: fn(&CurveStats) -> f64| {
        let values: Vec<f64> = members.iter().map(f).collect();
        let (lower, upper) = interval(&values, pred.level);
        Banded { estimate, lower, upper }
    };
    Ok(BandStats {
        peak_tac: band(point.peak_tac, |s| s.peak_tac),
        peak_time: band(point.peak_time, |s| s.peak_time),
        auc: band(point.auc, |s| s.auc),
    })
}

/// One row of a peak / peak-time / AUC table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub measured: f64,
    pub estimated: f64,
    pub lower: f64,
    pub upper: f64,
}

impl StatRow {
    fn new(measured: f64, b: Banded) -> Self {
        Self {
            measured,
            estimated: b.estimate,
            lower: b.lower,
            upper: b.upper,
        }
    }

    pub fn inside(&self) -> bool {
        self.lower <= self.measured && self.measured <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: String,
    pub peak_tac: StatRow,
    pub peak_time: StatRow,
    pub auc: StatRow,
}

/// Measured statistics of `episode` against the bands of `pred`.
pub fn episode_stats(episode: &Episode, pred: &TacPrediction) -> Result<EpisodeStats> {
    let measured = output_stats(&episode.tac, episode.tau)?;
    let bands = band_stats(pred)?;
    Ok(EpisodeStats {
        episode: episode.id.clone(),
        peak_tac: StatRow::new(measured.peak_tac, bands.peak_tac),
        peak_time: StatRow::new(measured.peak_time, bands.peak_time),
        auc: StatRow::new(measured.auc, bands.auc),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldCoverage {
    pub episode: String,
    pub peak_tac: bool,
    pub peak_time: bool,
    pub auc: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub folds: Vec<FoldCoverage>,
    pub peak_tac: f64,
    pub peak_time: f64,
    pub auc: f64,
}

pub fn coverage_report(rows: &[EpisodeStats]) -> CoverageReport {
    let folds: Vec<FoldCoverage> = rows
        .iter()
        .map(|r| FoldCoverage {
            episode: r.episode.clone(),
            peak_tac: r.peak_tac.inside(),
            peak_time: r.peak_time.inside(),
            auc: r.auc.inside(),
        })
        .collect();
    let frac = |f: fn(&FoldCoverage) -> bool| {
        if folds.is_empty() {
            0.0
        } else {
            folds.iter().filter(|c| f(c)).count() as f64 / folds.len() as f64
        }
    };
    CoverageReport {
        peak_tac: frac(|c| c.peak_tac),
        peak_time: frac(|c| c.peak_time),
        auc: frac(|c| c.auc),
        folds,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoocvSettings {
    pub n_samples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for LoocvSettings {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SAMPLES,
            level: DEFAULT_LEVEL,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub test_index: usize,
    pub fit: FitResult,
    pub prediction: TacPrediction,
    pub stats: EpisodeStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoocvResult {
    pub folds: Vec<FoldResult>,
    pub coverage: CoverageReport,
}

/// Full leave-one-out run. `l` holds the log-likelihoods of all episodes
/// (rows in the same order) and `responses` the node responses used both for
/// it and for prediction. Fold `i` samples with seed `derive_seed(seed, i)`.
pub fn run_loocv(
    episodes: &[Episode],
    l: &LogLikelihoodMatrix,
    responses: &NodeResponses,
    cfg: &EstimatorConfig,
    settings: &LoocvSettings,
) -> Result<LoocvResult> {
    let splits = loocv_splits(episodes)?;
    if l.rows() != episodes.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} likelihood rows for {} episodes",
            l.rows(),
            episodes.len()
        )));
    }
    let folds: Vec<FoldResult> = splits
        .par_iter()
        .map(|fold| {
            let keep: Vec<usize> = (0..episodes.len()).filter(|&k| k != fold.test_index).collect();
            let fit = estimate(&l.select_rows(&keep)?, cfg, None)?;
            let prediction = predict_with(
                responses,
                &fit.distribution,
                &fold.test.brac,
                settings.n_samples,
                settings.level,
                derive_seed(settings.seed, fold.test_index as u64),
            )?;
            let stats = episode_stats(&fold.test, &prediction)?;
            Ok(FoldResult {
                test_index: fold.test_index,
                fit,
                prediction,
                stats,
            })
        })
        .collect::<Result<_>>()?;
    let rows: Vec<EpisodeStats> = folds.iter().map(|f| f.stats.clone()).collect();
    Ok(LoocvResult {
        coverage: coverage_report(&rows),
        folds,
    })
}
