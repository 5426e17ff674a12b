//! Per-episode, per-node Gaussian log-likelihoods and the mixture
//! log-likelihood `ℓ(p) = Σ_i log Σ_j p_j f_i(q_j)`, evaluated entirely in
//! the log domain.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distribution::{make_grid, GridBounds, GridSpec, ParameterGrid};
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::mle::SimplexWeights;
use crate::model::{assemble_galerkin, build_system};
use crate::sim::convolve_response;

/// Default measurement-error variance.
pub const DEFAULT_SIGMA2: f64 = 1e-6;

/// Environment variable naming the likelihood cache directory.
pub const CACHE_DIR_ENV: &str = "TAC_NPML_CACHE_DIR";

/// Largest exponent fed to `exp` when forming gradient entries; keeps
/// components for zero-weight nodes finite.
const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    #[default]
    Gaussian,
}

/// Additive i.i.d. measurement error with mean zero and variance `sigma2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma2: f64,
    #[serde(default)]
    pub family: NoiseFamily,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma2: DEFAULT_SIGMA2,
            family: NoiseFamily::Gaussian,
        }
    }
}

impl NoiseModel {
    pub fn gaussian(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise variance must be positive, got {sigma2}")));
        }
        Ok(Self {
            sigma2,
            family: NoiseFamily::Gaussian,
        })
    }

    pub fn log_density(&self, residual: f64) -> f64 {
        -0.5 * (2.0 * std::f64::consts::PI * self.sigma2).ln() - residual * residual / (2.0 * self.sigma2)
    }

    /// Joint log-density of `n` residuals with sum of squares `ssr`.
    pub fn log_density_sum(&self, n: usize, ssr: f64) -> f64 {
        -0.5 * n as f64 * (2.0 * std::f64::consts::PI * self.sigma2).ln() - ssr / (2.0 * self.sigma2)
    }
}

/// Sums of squared residuals `S_ij = Σ_k (ŷ_ki − y_ki(q_j))²` with the
/// observation counts `n_i`. Noise-free, so it serves any `σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMatrix {
    pub ssr: Vec<f64>,
    pub n_obs: Vec<usize>,
    pub episode_ids: Vec<String>,
    pub grid: ParameterGrid,
    pub n_mesh: usize,
    pub tau: f64,
}

impl ResidualMatrix {
    pub fn rows(&self) -> usize {
        self.n_obs.len()
    }

    pub fn cols(&self) -> usize {
        self.grid.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.ssr[i * self.cols()..(i + 1) * self.cols()]
    }

    pub fn log_likelihood(&self, noise: &NoiseModel) -> LogLikelihoodMatrix {
        let cols = self.cols();
        let values = self
            .ssr
            .iter()
            .enumerate()
            .map(|(k, &s)| noise.log_density_sum(self.n_obs[k / cols], s))
            .collect();
        LogLikelihoodMatrix {
            values,
            rows: self.rows(),
            cols,
            episode_ids: self.episode_ids.clone(),
            grid: self.grid.clone(),
        }
    }
}

/// `m × M` matrix of `log f_i(ŷ_i; q_j)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikelihoodMatrix {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    pub episode_ids: Vec<String>,
    pub grid: ParameterGrid,
}

impl LogLikelihoodMatrix {
    pub fn new(values: Vec<f64>, episode_ids: Vec<String>, grid: ParameterGrid) -> Result<Self> {
        let rows = episode_ids.len();
        let cols = grid.len();
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput("log-likelihood matrix needs episodes and nodes".into()));
        }
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite log-likelihood at ({}, {})",
                k / cols,
                k % cols
            )));
        }
        Ok(Self {
            values,
            rows,
            cols,
            episode_ids,
            grid,
        })
    }

    /// Matrix from explicit rows over a placeholder `M × 1` grid on the unit
    /// square; convenient for solver experiments.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged log-likelihood rows".into()));
        }
        let grid = make_grid(GridBounds::unit(), cols, 1)?;
        let ids = (0..rows.len()).map(|i| format!("row{i}")).collect();
        Self::new(rows.concat(), ids, grid)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// Submatrix keeping the listed rows (episodes), in order.
    pub fn select_rows(&self, keep: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(keep.len() * self.cols);
        let mut ids = Vec::with_capacity(keep.len());
        for &i in keep {
            if i >= self.rows {
                return Err(Error::InvalidArgument(format!("row {i} out of range")));
            }
            values.extend_from_slice(self.row(i));
            ids.push(self.episode_ids[i].clone());
        }
        Self::new(values, ids, self.grid.clone())
    }

    /// Submatrix keeping the listed columns over a placeholder grid.
    pub fn select_cols(&self, keep: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..self.rows)
            .map(|i| keep.iter().map(|&j| self.get(i, j)).collect())
            .collect();
        let mut sub = Self::from_rows(&rows)?;
        sub.episode_ids = self.episode_ids.clone();
        Ok(sub)
    }
}

fn common_tau(episodes: &[Episode]) -> Result<f64> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::EmptyInput("no episodes".into()))?
        .tau;
    for e in episodes {
        if (e.tau - first).abs() > 1e-12 * first {
            return Err(Error::Validation(format!(
                "episode {} has tau {} but {} was expected; resample to a common interval",
                e.id, e.tau, first
            )));
        }
    }
    Ok(first)
}

/// Markov parameters of every grid node's discrete-time system, long enough
/// for episodes of up to `horizon` steps. Depends only on the grid, mesh and
/// interval, so one set serves any number of datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeResponses {
    pub grid: ParameterGrid,
    pub n_mesh: usize,
    pub tau: f64,
    responses: Vec<Vec<f64>>,
}

impl NodeResponses {
    pub fn compute(grid: &ParameterGrid, n_mesh: usize, tau: f64, horizon: usize) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::EmptyInput("parameter grid has no nodes".into()));
        }
        let galerkin = assemble_galerkin(n_mesh)?;
        let responses = grid
            .nodes()
            .par_iter()
            .map(|q| Ok(build_system(&galerkin, q, tau)?.impulse_response(horizon)))
            .collect::<Result<_>>()?;
        Ok(Self {
            grid: grid.clone(),
            n_mesh,
            tau,
            responses,
        })
    }

    pub fn horizon(&self) -> usize {
        self.responses.first().map_or(0, Vec::len)
    }

    pub fn response(&self, node: usize) -> &[f64] {
        &self.responses[node]
    }

    /// Noise-free output of node `j` for a held input.
    pub fn simulate(&self, node: usize, brac: &[f64]) -> Result<Vec<f64>> {
        if brac.len() > self.horizon() {
            return Err(Error::InvalidArgument(format!(
                "input has {} steps but responses cover {}",
                brac.len(),
                self.horizon()
            )));
        }
        Ok(convolve_response(&self.responses[node], brac))
    }

    /// Squared-residual sums of every episode against every node.
    pub fn residuals(&self, episodes: &[Episode]) -> Result<ResidualMatrix> {
        let tau = common_tau(episodes)?;
        if (tau - self.tau).abs() > 1e-12 * self.tau {
            return Err(Error::Validation(format!(
                "episodes sampled at tau {tau}, responses at {}",
                self.tau
            )));
        }
        let cols = self.grid.len();
        let rows: Vec<Vec<f64>> = episodes
            .par_iter()
            .map(|e| {
                (0..cols)
                    .map(|j| {
                        Ok(self
                            .simulate(j, &e.brac)?
                            .iter()
                            .zip(&e.tac)
                            .map(|(y, obs)| (obs - y) * (obs - y))
                            .sum())
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        Ok(ResidualMatrix {
            ssr: rows.concat(),
            n_obs: episodes.iter().map(Episode::n).collect(),
            episode_ids: episodes.iter().map(|e| e.id.clone()).collect(),
            grid: self.grid.clone(),
            n_mesh: self.n_mesh,
            tau,
        })
    }
}

/// Simulates every episode at every node and records the squared-residual
/// sums. Each node's system is discretized once; its impulse response then
/// serves all episodes.
pub fn residual_matrix(episodes: &[Episode], grid: &ParameterGrid, n_mesh: usize) -> Result<ResidualMatrix> {
    let tau = common_tau(episodes)?;
    let horizon = episodes.iter().map(Episode::n).max().unwrap_or(0);
    NodeResponses::compute(grid, n_mesh, tau, horizon)?.residuals(episodes)
}

pub fn log_node_likelihoods(
    episodes: &[Episode],
    grid: &ParameterGrid,
    n_mesh: usize,
    noise: &NoiseModel,
) -> Result<LogLikelihoodMatrix> {
    Ok(residual_matrix(episodes, grid, n_mesh)?.log_likelihood(noise))
}

/// Per-row `lse_i(p) = log Σ_j p_j exp(L_ij)`, skipping zero weights.
pub fn row_log_sum_exp(p: &[f64], l: &LogLikelihoodMatrix) -> Vec<f64> {
    let log_p: Vec<f64> = p.iter().map(|&w| if w > 0.0 { w.ln() } else { f64::NEG_INFINITY }).collect();
    (0..l.rows)
        .map(|i| {
            let row = l.row(i);
            let shift = row
                .iter()
                .zip(&log_p)
                .filter(|(_, lp)| lp.is_finite())
                .map(|(v, lp)| v + lp)
                .fold(f64::NEG_INFINITY, f64::max);
            if shift == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            let sum: f64 = row
                .iter()
                .zip(&log_p)
                .filter(|(_, lp)| lp.is_finite())
                .map(|(v, lp)| (v + lp - shift).exp())
                .sum();
            shift + sum.ln()
        })
        .collect()
}

/// `ℓ(p)` for any nonnegative `p`, on or off the simplex.
pub fn objective(p: &[f64], l: &LogLikelihoodMatrix) -> f64 {
    row_log_sum_exp(p, l).iter().sum()
}

/// `∂ℓ/∂p_j = Σ_i exp(L_ij − lse_i(p))` for any nonnegative `p`.
pub fn objective_gradient(p: &[f64], l: &LogLikelihoodMatrix) -> Vec<f64> {
    gradient_from_lse(&row_log_sum_exp(p, l), l)
}

pub(crate) fn gradient_from_lse(lse: &[f64], l: &LogLikelihoodMatrix) -> Vec<f64> {
    let mut g = vec![0.0; l.cols];
    for (i, &s) in lse.iter().enumerate() {
        for (gj, v) in g.iter_mut().zip(l.row(i)) {
            *gj += (v - s).min(MAX_EXPONENT).exp();
        }
    }
    g
}

fn check_dims(p: &SimplexWeights, l: &LogLikelihoodMatrix) -> Result<()> {
    if p.len() != l.cols {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} grid nodes",
            p.len(),
            l.cols
        )));
    }
    SimplexWeights::check(p.as_slice())
}

pub fn log_likelihood(p: &SimplexWeights, l: &LogLikelihoodMatrix) -> Result<f64> {
    check_dims(p, l)?;
    Ok(objective(p.as_slice(), l))
}

pub fn log_likelihood_gradient(p: &SimplexWeights, l: &LogLikelihoodMatrix) -> Result<Vec<f64>> {
    check_dims(p, l)?;
    Ok(objective_gradient(p.as_slice(), l))
}

/// Header line of a cached log-likelihood matrix. The payload that follows
/// is `rows × cols` little-endian `f64` values in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub grid: GridSpec,
    pub n_mesh: usize,
    pub tau: f64,
    pub sigma2: f64,
    pub episode_ids: Vec<String>,
    pub rows: usize,
    pub cols: usize,
    /// SHA-256 of the episodes, grid, mesh, interval and noise model.
    pub content_hash: String,
}

/// Hash identifying the inputs of a likelihood assembly.
pub fn content_hash(episodes: &[Episode], grid: &ParameterGrid, n_mesh: usize, noise: &NoiseModel) -> String {
    let mut h = Sha256::new();
    h.update(b"tac-npml/loglik/v1");
    for e in episodes {
        h.update((e.id.len() as u64).to_le_bytes());
        h.update(e.id.as_bytes());
        h.update(e.tau.to_le_bytes());
        h.update((e.brac.len() as u64).to_le_bytes());
        for v in e.brac.iter().chain(&e.tac) {
            h.update(v.to_le_bytes());
        }
    }
    h.update(serde_json::to_vec(&grid.spec()).unwrap_or_default());
    h.update((n_mesh as u64).to_le_bytes());
    h.update(noise.sigma2.to_le_bytes());
    hex::encode(h.finalize())
}

pub fn write_cache(path: &Path, header: &CacheHeader, l: &LogLikelihoodMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        serde_json::to_writer(&mut *out, header)?;
        out.write_all(b"\n")?;
        for v in l.values() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<(CacheHeader, LogLikelihoodMatrix)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let mut line = String::new();
    input.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: CacheHeader = serde_json::from_str(line.trim_end())?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != header.rows * header.cols * 8 {
        return Err(Error::Validation(format!(
            "cache {} holds {} payload bytes, expected {}",
            path.display(),
            payload.len(),
            header.rows * header.cols * 8
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let grid = ParameterGrid::from_spec(&header.grid)?;
    let l = LogLikelihoodMatrix::new(values, header.episode_ids.clone(), grid)?;
    Ok((header, l))
}

/// Cache directory from [`CACHE_DIR_ENV`], if set.
pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from)
}

/// What the cache did for one lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheStatus {
    Disabled,
    Hit,
    Stored,
}

/// Loads the matrix from `cache_dir` when a file with the same content hash
/// exists, otherwise assembles it and stores it there.
pub fn cached_log_node_likelihoods(
    cache_dir: Option<&Path>,
    episodes: &[Episode],
    grid: &ParameterGrid,
    n_mesh: usize,
    noise: &NoiseModel,
) -> Result<LogLikelihoodMatrix> {
    let (l, _, _) = cached_with(cache_dir, episodes, grid, n_mesh, noise, || {
        log_node_likelihoods(episodes, grid, n_mesh, noise)
    })?;
    Ok(l)
}

/// Cache lookup with a caller-supplied assembly (e.g. from precomputed
/// [`NodeResponses`]). Returns the matrix, what happened, and the content
/// hash.
pub fn cached_with(
    cache_dir: Option<&Path>,
    episodes: &[Episode],
    grid: &ParameterGrid,
    n_mesh: usize,
    noise: &NoiseModel,
    assemble: impl FnOnce() -> Result<LogLikelihoodMatrix>,
) -> Result<(LogLikelihoodMatrix, CacheStatus, String)> {
    let hash = content_hash(episodes, grid, n_mesh, noise);
    let Some(dir) = cache_dir else {
        return Ok((assemble()?, CacheStatus::Disabled, hash));
    };
    let path = dir.join(format!("{hash}.llm"));
    if path.exists() {
        if let Ok((header, l)) = read_cache(&path) {
            if header.content_hash == hash {
                return Ok((l, CacheStatus::Hit, hash));
            }
        }
    }
    let l = assemble()?;
    if l.rows() != episodes.len() || l.cols() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "assembled {}x{} matrix for {} episodes and {} nodes",
            l.rows(),
            l.cols(),
            episodes.len(),
            grid.len()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = CacheHeader {
        grid: grid.spec(),
        n_mesh,
        tau: common_tau(episodes)?,
        sigma2: noise.sigma2,
        episode_ids: l.episode_ids.clone(),
        rows: l.rows(),
        cols: l.cols(),
        content_hash: hash.clone(),
    };
    write_cache(&path, &header, &l)?;
    Ok((l, CacheStatus::Stored, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn half_log_two_pi_sigma2() -> f64 {
        0.5 * (2.0 * std::f64::consts::PI * 1e-6).ln()
    }

    fn tiny_grid() -> ParameterGrid {
        make_grid(
            GridBounds {
                q1: [0.2, 1.0],
                q2: [0.5, 1.5],
            },
            2,
            2,
        )
        .unwrap()
    }

    #[test]
    fn zero_signal_gives_flat_rows() {
        let e = Episode::new("dry", 0.1, vec![0.0; 12], vec![0.0; 12]).unwrap();
        let l = log_node_likelihoods(&[e], &tiny_grid(), 8, &NoiseModel::default()).unwrap();
        for &v in l.row(0) {
            assert!((v - 12.0 * -half_log_two_pi_sigma2()).abs() < 1e-9);
        }
    }

    #[test]
    fn single_residual_by_hand() {
        let noise = NoiseModel::default();
        let expected = -half_log_two_pi_sigma2() - 0.5;
        assert!((noise.log_density(0.001) - expected).abs() < 1e-12);
        assert!((noise.log_density_sum(1, 1e-6) - expected).abs() < 1e-12);

        // One step with zero input: the model predicts 0, so the residual is
        // the observation itself.
        let e = Episode::new("one", 0.1, vec![0.0], vec![0.001]).unwrap();
        let l = log_node_likelihoods(&[e], &tiny_grid(), 4, &noise).unwrap();
        assert!((l.get(0, 3) - expected).abs() < 1e-9);
    }

    #[test]
    fn identical_nodes_identical_columns() {
        let grid = make_grid(
            GridBounds {
                q1: [0.5, 0.5000001],
                q2: [1.0, 1.5],
            },
            1,
            2,
        )
        .unwrap();
        let dup = make_grid(
            GridBounds {
                q1: [0.5, 0.6],
                q2: [1.0, 1.1],
            },
            1,
            1,
        )
        .unwrap();
        let e = Episode::new("a", 0.1, vec![0.05, 0.04, 0.0, 0.0], vec![0.0, 0.01, 0.02, 0.01]).unwrap();
        let a = log_node_likelihoods(std::slice::from_ref(&e), &grid, 8, &NoiseModel::default()).unwrap();
        let b = log_node_likelihoods(&[e], &dup, 8, &NoiseModel::default()).unwrap();
        assert_eq!(a.get(0, 0), b.get(0, 0));
    }

    #[test]
    fn mismatched_tau_is_rejected() {
        let a = Episode::new("a", 0.1, vec![0.0; 3], vec![0.0; 3]).unwrap();
        let b = Episode::new("b", 0.2, vec![0.0; 3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            log_node_likelihoods(&[a, b], &tiny_grid(), 4, &NoiseModel::default()),
            Err(Error::Validation(_))
        ));
        assert!(NoiseModel::gaussian(0.0).is_err());
    }

    #[test]
    fn mixture_examples() {
        let l = LogLikelihoodMatrix::from_rows(&[vec![0.2f64.ln(), 0.8f64.ln()]]).unwrap();
        let v = log_likelihood(&SimplexWeights::uniform(2), &l).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-15);

        let single = LogLikelihoodMatrix::from_rows(&[vec![-3.0], vec![-1.5]]).unwrap();
        let p = SimplexWeights::uniform(1);
        assert_eq!(log_likelihood(&p, &single).unwrap(), -4.5);
        assert_eq!(log_likelihood_gradient(&p, &single).unwrap(), vec![2.0]);

        let equal = LogLikelihoodMatrix::from_rows(&[vec![-2.0; 3], vec![-7.0; 3]]).unwrap();
        let a = log_likelihood(&SimplexWeights::uniform(3), &equal).unwrap();
        let b = log_likelihood(&SimplexWeights::new(vec![0.7, 0.0, 0.3]).unwrap(), &equal).unwrap();
        assert!((a - b).abs() < 1e-14);
        let g = log_likelihood_gradient(&SimplexWeights::new(vec![0.7, 0.0, 0.3]).unwrap(), &equal).unwrap();
        assert!(g.iter().all(|x| (x - g[0]).abs() < 1e-14));
    }

    #[test]
    fn zero_weights_are_skipped() {
        // A hugely favourable node with zero weight must not leak in.
        let l = LogLikelihoodMatrix::from_rows(&[vec![-10.0, 5000.0]]).unwrap();
        let v = log_likelihood(&SimplexWeights::vertex(2, 0).unwrap(), &l).unwrap();
        assert_eq!(v, -10.0);
        let g = log_likelihood_gradient(&SimplexWeights::vertex(2, 0).unwrap(), &l).unwrap();
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn no_underflow_at_realistic_scale() {
        // Raw likelihoods around exp(-5e4) underflow to zero; the log-domain
        // evaluation does not.
        let l = LogLikelihoodMatrix::from_rows(&[vec![-5.0e4, -5.0e4 - 2.0]]).unwrap();
        let v = log_likelihood(&SimplexWeights::uniform(2), &l).unwrap();
        let expected = -5.0e4 + (0.5 * (1.0 + (-2.0f64).exp())).ln();
        assert!((v - expected).abs() < 1e-9);
    }

    #[test]
    fn off_simplex_and_dims() {
        let l = LogLikelihoodMatrix::from_rows(&[vec![-1.0, -2.0]]).unwrap();
        assert!(log_likelihood(&SimplexWeights::uniform(3), &l).is_err());
        assert!(SimplexWeights::new(vec![0.5, 0.5 + 1e-9]).is_err());
        assert!(LogLikelihoodMatrix::from_rows(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = Episode::new("a", 0.1, vec![0.05, 0.04, 0.0, 0.0], vec![0.0, 0.01, 0.02, 0.01]).unwrap();
        let grid = tiny_grid();
        let noise = NoiseModel::default();
        let first = cached_log_node_likelihoods(Some(dir.path()), std::slice::from_ref(&e), &grid, 8, &noise).unwrap();
        let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
        let (header, stored) = read_cache(&files[0].as_ref().unwrap().path()).unwrap();
        assert_eq!(header.rows, 1);
        assert_eq!(header.content_hash, content_hash(std::slice::from_ref(&e), &grid, 8, &noise));
        assert_eq!(stored, first);
        let again = cached_log_node_likelihoods(Some(dir.path()), &[e], &grid, 8, &noise).unwrap();
        assert_eq!(again, first);
    }

    #[test]
    fn assembly_is_deterministic() {
        let e = Episode::new("a", 0.05, (0..40).map(|k| (k as f64 * 0.2).sin().abs() * 0.05).collect(), vec![0.01; 40]).unwrap();
        let grid = make_grid(GridBounds::unit(), 4, 4).unwrap();
        let a = log_node_likelihoods(std::slice::from_ref(&e), &grid, 16, &NoiseModel::default()).unwrap();
        let b = log_node_likelihoods(&[e], &grid, 16, &NoiseModel::default()).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
        (1usize..=6, 1usize..=8).prop_flat_map(|(m, k)| {
            (
                prop::collection::vec(prop::collection::vec(-20.0f64..0.0, k), m),
                prop::collection::vec(0.01f64..1.0, k),
                prop::collection::vec(0.01f64..1.0, k),
            )
        })
    }

    fn normalize(v: &[f64]) -> Vec<f64> {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn concave_along_segments((rows, a, b) in instance(), lambda in 0.01f64..0.99) {
            let l = LogLikelihoodMatrix::from_rows(&rows).unwrap();
            let (p, q) = (normalize(&a), normalize(&b));
            let mid: Vec<f64> = p.iter().zip(&q).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
            prop_assert!(objective(&mid, &l) >= lambda * objective(&p, &l) + (1.0 - lambda) * objective(&q, &l) - 1e-10);
        }

        #[test]
        fn row_shift_equivariance((rows, a, _b) in instance(), shifts in prop::collection::vec(-100.0f64..100.0, 6)) {
            let p = normalize(&a);
            let l = LogLikelihoodMatrix::from_rows(&rows).unwrap();
            let shifted: Vec<Vec<f64>> = rows.iter().zip(&shifts).map(|(r, c)| r.iter().map(|v| v + c).collect()).collect();
            let ls = LogLikelihoodMatrix::from_rows(&shifted).unwrap();
            let total: f64 = shifts[..rows.len()].iter().sum();
            let diff = objective(&p, &ls) - objective(&p, &l) - total;
            prop_assert!(diff.abs() < 1e-9 * (1.0 + total.abs()));
        }

        #[test]
        fn gradient_matches_central_differences((rows, a, _b) in instance()) {
            let p = normalize(&a);
            let l = LogLikelihoodMatrix::from_rows(&rows).unwrap();
            let g = objective_gradient(&p, &l);
            for j in 0..p.len() {
                let h = 1e-6 * p[j].max(1e-3);
                let mut up = p.clone();
                let mut down = p.clone();
                up[j] += h;
                down[j] -= h;
                let fd = (objective(&up, &l) - objective(&down, &l)) / (2.0 * h);
                prop_assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1.0), "j={} fd={} g={}", j, fd, g[j]);
            }
        }
    }
}
