//! Maximization of the mixture log-likelihood over simplex weights on a
//! fixed grid, by EM (fixed-point multiplicative update) or by projected
//! gradient ascent. The two are independent and cross-check each other.

use serde::{Deserialize, Serialize};

use crate::distribution::{DiscreteDistribution, GridSpec};
use crate::error::{Error, Result};
use crate::likelihood::{gradient_from_lse, objective, row_log_sum_exp, LogLikelihoodMatrix, NoiseModel, ResidualMatrix};

/// Tolerance on `|Σ p_j − 1|` for a weight vector to count as on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Point of the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub fn check(p: &[f64]) -> Result<()> {
        if p.is_empty() {
            return Err(Error::EmptyInput("empty weight vector".into()));
        }
        if let Some(j) = p.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Validation(format!("weight {j} is {} (must be finite and >= 0)", p[j])));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Validation(format!("weights sum to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn new(p: Vec<f64>) -> Result<Self> {
        Self::check(&p)?;
        Ok(Self(p))
    }

    /// Rescales nonnegative weights to sum to one.
    pub fn normalized(mut p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Validation("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = p.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Validation("weights sum to zero".into()));
        }
        p.iter_mut().for_each(|w| *w /= sum);
        Self::new(p)
    }

    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }

    pub fn vertex(m: usize, j: usize) -> Result<Self> {
        if j >= m {
            return Err(Error::InvalidArgument(format!("vertex {j} of a {m}-simplex")));
        }
        let mut p = vec![0.0; m];
        p[j] = 1.0;
        Ok(Self(p))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    pub fn support_size(&self, eps: f64) -> usize {
        self.0.iter().filter(|&&w| w > eps).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[default]
    Em,
    ProjectedGradient,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "em" => Ok(Self::Em),
            "projected-gradient" | "pg" => Ok(Self::ProjectedGradient),
            other => Err(Error::InvalidArgument(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub algorithm: Algorithm,
    /// Stop when `max(|Δℓ|, gap) / (1 + |ℓ|)` drops below this, where `gap`
    /// is the Frank-Wolfe bound on the remaining improvement.
    pub tol: f64,
    pub max_iter: usize,
    /// Weights above this count towards the reported support.
    pub prune_eps: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Em,
            tol: 1e-9,
            max_iter: 5000,
            prune_eps: 1e-8,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        if !(self.prune_eps >= 0.0) {
            return Err(Error::InvalidArgument("prune_eps must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub distribution: DiscreteDistribution,
    pub final_loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub support_size: usize,
    /// Frank-Wolfe bound `max_j ∂ℓ/∂p_j − m` on the distance to the optimum.
    pub optimality_gap: f64,
    /// Objective after every iteration, starting with the initial point.
    pub trace: Vec<f64>,
}

impl FitResult {
    pub fn weights(&self) -> &SimplexWeights {
        &self.distribution.weights
    }

    pub fn report(&self, config: &EstimatorConfig, seed: Option<u64>) -> FitReport {
        FitReport {
            grid: self.distribution.grid.spec(),
            weights: self.weights().as_slice().to_vec(),
            final_loglik: self.final_loglik,
            iterations: self.iterations,
            converged: self.converged,
            support_size: self.support_size,
            optimality_gap: self.optimality_gap,
            config: *config,
            seed,
            sigma2: None,
            sparsify: None,
        }
    }
}

/// Serialized form of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub grid: GridSpec,
    pub weights: Vec<f64>,
    pub final_loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub support_size: usize,
    pub optimality_gap: f64,
    pub config: EstimatorConfig,
    pub seed: Option<u64>,
    /// Noise variance, when it was estimated jointly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsify: Option<SparsifyOutcome>,
}

fn check_dims(p: &SimplexWeights, l: &LogLikelihoodMatrix) -> Result<()> {
    if p.len() != l.cols() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} grid nodes",
            p.len(),
            l.cols()
        )));
    }
    Ok(())
}

/// `p'_j = p_j · (1/m) Σ_i exp(L_ij − lse_i(p))`, computed from the
/// responsibilities `exp(log p_j + L_ij − lse_i)` so nothing overflows.
fn em_step(p: &[f64], lse: &[f64], l: &LogLikelihoodMatrix) -> Vec<f64> {
    let m = l.rows() as f64;
    let log_p: Vec<f64> = p.iter().map(|&w| if w > 0.0 { w.ln() } else { f64::NEG_INFINITY }).collect();
    let mut next = vec![0.0; p.len()];
    for (i, &s) in lse.iter().enumerate() {
        for ((n, v), lp) in next.iter_mut().zip(l.row(i)).zip(&log_p) {
            if lp.is_finite() {
                *n += (lp + v - s).exp();
            }
        }
    }
    next.iter_mut().for_each(|w| *w /= m);
    let sum: f64 = next.iter().sum();
    next.iter_mut().for_each(|w| *w /= sum);
    next
}

pub fn em_update(p: &SimplexWeights, l: &LogLikelihoodMatrix) -> Result<SimplexWeights> {
    check_dims(p, l)?;
    let lse = row_log_sum_exp(p.as_slice(), l);
    SimplexWeights::new(em_step(p.as_slice(), &lse, l))
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    let mut p: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|w| *w /= sum);
    p
}

/// By concavity `ℓ* − ℓ(p) ≤ max_j g_j − g·p`, and `g·p = m` on the simplex.
fn frank_wolfe_gap(grad: &[f64], m: usize) -> f64 {
    (grad.iter().copied().fold(f64::NEG_INFINITY, f64::max) - m as f64).max(0.0)
}

fn optimality_gap(p: &[f64], l: &LogLikelihoodMatrix) -> f64 {
    frank_wolfe_gap(&gradient_from_lse(&row_log_sum_exp(p, l), l), l.rows())
}

struct Trajectory {
    best: Vec<f64>,
    best_value: f64,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// One accelerated EM iteration (SQUAREM). Two plain updates define a
/// secant direction; the extrapolated point gets one more plain update and
/// is kept only if it beats the two-step result, so the objective never
/// decreases. The step length backs off towards the plain result until the
/// extrapolated weights stay strictly positive wherever EM keeps mass, since
/// EM can never revive a zeroed node.
fn squarem_step(p0: &[f64], lse0: &[f64], l: &LogLikelihoodMatrix) -> (Vec<f64>, Vec<f64>, f64) {
    let p1 = em_step(p0, lse0, l);
    let p2 = em_step(&p1, &row_log_sum_exp(&p1, l), l);
    let lse2 = row_log_sum_exp(&p2, l);
    let value2: f64 = lse2.iter().sum();

    let r: Vec<f64> = p1.iter().zip(p0).map(|(a, b)| a - b).collect();
    let v: Vec<f64> = p2.iter().zip(&p1).zip(p0).map(|((c, b), a)| c - 2.0 * b + a).collect();
    let norm = |x: &[f64]| x.iter().map(|y| y * y).sum::<f64>().sqrt();
    let (nr, nv) = (norm(&r), norm(&v));
    if !(nv > 0.0 && nr > 0.0) {
        return (p2, lse2, value2);
    }
    let mut alpha = (-nr / nv).min(-1.0);
    let mut candidate = None;
    for _ in 0..30 {
        let c: Vec<f64> = (0..p0.len())
            .map(|j| p0[j] - 2.0 * alpha * r[j] + alpha * alpha * v[j])
            .collect();
        if c.iter().zip(&p2).all(|(x, base)| if *base > 0.0 { *x > 0.0 } else { *x >= 0.0 }) {
            candidate = Some(c);
            break;
        }
        alpha = 0.5 * (alpha - 1.0);
    }
    let Some(mut c) = candidate else {
        return (p2, lse2, value2);
    };
    let sum: f64 = c.iter().sum();
    c.iter_mut().for_each(|x| *x /= sum);
    let p3 = em_step(&c, &row_log_sum_exp(&c, l), l);
    let lse3 = row_log_sum_exp(&p3, l);
    let value3: f64 = lse3.iter().sum();
    if value3 >= value2 && value3.is_finite() {
        (p3, lse3, value3)
    } else {
        (p2, lse2, value2)
    }
}

fn run_em(l: &LogLikelihoodMatrix, cfg: &EstimatorConfig, init: Vec<f64>) -> Trajectory {
    let mut p = init;
    let mut lse = row_log_sum_exp(&p, l);
    let mut value: f64 = lse.iter().sum();
    let mut t = Trajectory {
        best: p.clone(),
        best_value: value,
        trace: vec![value],
        iterations: 0,
        converged: false,
    };
    for it in 1..=cfg.max_iter {
        let (next_p, next_lse, next) = squarem_step(&p, &lse, l);
        p = next_p;
        lse = next_lse;
        t.iterations = it;
        t.trace.push(next);
        if next > t.best_value {
            t.best_value = next;
            t.best.clone_from(&p);
        }
        let gap = frank_wolfe_gap(&gradient_from_lse(&lse, l), l.rows());
        let change = (next - value).abs().max(gap) / (1.0 + value.abs());
        value = next;
        if change < cfg.tol {
            t.converged = true;
            break;
        }
    }
    t
}

fn run_projected_gradient(l: &LogLikelihoodMatrix, cfg: &EstimatorConfig, init: Vec<f64>) -> Trajectory {
    const ARMIJO: f64 = 1e-4;
    let mut p = init;
    let lse = row_log_sum_exp(&p, l);
    let mut value: f64 = lse.iter().sum();
    let mut grad = gradient_from_lse(&lse, l);
    let mut step = 1.0 / grad.iter().map(|g| g.abs()).fold(1.0, f64::max);
    let mut t = Trajectory {
        best: p.clone(),
        best_value: value,
        trace: vec![value],
        iterations: 0,
        converged: false,
    };
    for it in 1..=cfg.max_iter {
        t.iterations = it;
        let mut accepted = None;
        let mut s = step;
        for _ in 0..2000 {
            let trial: Vec<f64> = p.iter().zip(&grad).map(|(w, g)| w + s * g).collect();
            let candidate = project_to_simplex(&trial);
            if candidate == p {
                break;
            }
            let ascent: f64 = candidate.iter().zip(&p).zip(&grad).map(|((c, w), g)| g * (c - w)).sum();
            let cand_lse = row_log_sum_exp(&candidate, l);
            let cand_value: f64 = cand_lse.iter().sum();
            if cand_value >= value + ARMIJO * ascent {
                accepted = Some((candidate, cand_lse, cand_value));
                break;
            }
            s *= 0.5;
        }
        let Some((next_p, next_lse, next_value)) = accepted else {
            // No ascent direction left at machine precision.
            t.converged = true;
            break;
        };
        let next_grad = gradient_from_lse(&next_lse, l);
        // Barzilai-Borwein step for the next iteration; the objective is
        // concave so `dp · dg <= 0` along accepted moves.
        let (mut dpdp, mut dpdg) = (0.0, 0.0);
        for j in 0..p.len() {
            let dp = next_p[j] - p[j];
            dpdp += dp * dp;
            dpdg += dp * (next_grad[j] - grad[j]);
        }
        step = if dpdg < 0.0 && dpdp > 0.0 { (dpdp / -dpdg).clamp(1e-12, 1e12) } else { s * 2.0 };

        let gap = frank_wolfe_gap(&next_grad, l.rows());
        let change = (next_value - value).abs().max(gap) / (1.0 + value.abs());
        p = next_p;
        value = next_value;
        grad = next_grad;
        t.trace.push(value);
        if value > t.best_value {
            t.best_value = value;
            t.best.clone_from(&p);
        }
        if change < cfg.tol {
            t.converged = true;
            break;
        }
    }
    t
}

/// Maximizes `ℓ(p)` from `init` (uniform by default) with the configured
/// algorithm and returns the best iterate seen. Hitting `max_iter` is
/// reported through `converged = false`.
pub fn estimate(l: &LogLikelihoodMatrix, cfg: &EstimatorConfig, init: Option<&SimplexWeights>) -> Result<FitResult> {
    cfg.validate()?;
    let start = match init {
        Some(p) => {
            check_dims(p, l)?;
            p.as_slice().to_vec()
        }
        None => SimplexWeights::uniform(l.cols()).into_vec(),
    };
    let t = match cfg.algorithm {
        Algorithm::Em => run_em(l, cfg, start),
        Algorithm::ProjectedGradient => run_projected_gradient(l, cfg, start),
    };
    if !t.best_value.is_finite() {
        return Err(Error::Numerical(format!("final log-likelihood is {}", t.best_value)));
    }
    let weights = SimplexWeights::new(t.best)?;
    let support_size = weights.support_size(cfg.prune_eps);
    let gap = optimality_gap(weights.as_slice(), l);
    Ok(FitResult {
        distribution: DiscreteDistribution::new(l.grid.clone(), weights)?,
        final_loglik: t.best_value,
        iterations: t.iterations,
        converged: t.converged,
        support_size,
        optimality_gap: gap,
        trace: t.trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparsifyOutcome {
    /// Support was already at most `m`.
    AlreadySparse,
    /// Restricted to at most `m` nodes within tolerance.
    Sparsified,
    /// Restriction lost more than the tolerance; original fit kept.
    Rejected,
}

/// Restricts the fit to its `m` heaviest nodes, re-optimizes there and keeps
/// the result when the objective drops by less than `tol`.
pub fn sparsify(
    fit: &FitResult,
    l: &LogLikelihoodMatrix,
    tol: f64,
    cfg: &EstimatorConfig,
) -> Result<(FitResult, SparsifyOutcome)> {
    let m = l.rows();
    let weights = fit.weights().as_slice();
    if weights.iter().filter(|&&w| w > 0.0).count() <= m {
        return Ok((fit.clone(), SparsifyOutcome::AlreadySparse));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order[..m].to_vec();
    keep.sort_unstable();

    let sub = l.select_cols(&keep)?;
    let init = SimplexWeights::normalized(keep.iter().map(|&j| weights[j]).collect())?;
    let tight = EstimatorConfig {
        tol: cfg.tol.min(1e-12),
        max_iter: cfg.max_iter.max(20_000),
        ..*cfg
    };
    let restricted = estimate(&sub, &tight, Some(&init))?;
    if fit.final_loglik - restricted.final_loglik >= tol {
        return Ok((fit.clone(), SparsifyOutcome::Rejected));
    }
    let mut full = vec![0.0; weights.len()];
    for (k, &j) in keep.iter().enumerate() {
        full[j] = restricted.weights().as_slice()[k];
    }
    let weights = SimplexWeights::new(full)?;
    let value = objective(weights.as_slice(), l);
    let gap = optimality_gap(weights.as_slice(), l);
    Ok((
        FitResult {
            support_size: weights.support_size(cfg.prune_eps),
            distribution: DiscreteDistribution::new(fit.distribution.grid.clone(), weights)?,
            final_loglik: value,
            iterations: fit.iterations + restricted.iterations,
            converged: restricted.converged,
            optimality_gap: gap,
            trace: fit.trace.clone(),
        },
        SparsifyOutcome::Sparsified,
    ))
}

/// Alternates a weight fit at fixed `σ²` with the closed-form variance
/// update `σ² = Σ_ij w_ij S_ij / Σ_i n_i`, where `w_ij` are the posterior
/// node responsibilities. Returns the final fit and variance.
pub fn estimate_with_sigma2(
    residuals: &ResidualMatrix,
    cfg: &EstimatorConfig,
    sigma2_init: f64,
    max_outer: usize,
) -> Result<(FitResult, f64)> {
    let mut noise = NoiseModel::gaussian(sigma2_init)?;
    let mut init: Option<SimplexWeights> = None;
    let total_obs: usize = residuals.n_obs.iter().sum();
    if total_obs == 0 {
        return Err(Error::EmptyInput("no observations".into()));
    }
    for _ in 0..max_outer.max(1) {
        let l = residuals.log_likelihood(&noise);
        let fit = estimate(&l, cfg, init.as_ref())?;
        let p = fit.weights().as_slice();
        let lse = row_log_sum_exp(p, &l);
        let mut weighted = 0.0;
        for (i, &s) in lse.iter().enumerate() {
            for (j, &w) in p.iter().enumerate() {
                if w > 0.0 {
                    weighted += (w.ln() + l.get(i, j) - s).exp() * residuals.row(i)[j];
                }
            }
        }
        let next = (weighted / total_obs as f64).max(f64::MIN_POSITIVE);
        let done = (next - noise.sigma2).abs() <= 1e-8 * noise.sigma2;
        noise = NoiseModel::gaussian(next)?;
        init = Some(fit.weights().clone());
        if done {
            let l = residuals.log_likelihood(&noise);
            return Ok((estimate(&l, cfg, init.as_ref())?, noise.sigma2));
        }
    }
    let l = residuals.log_likelihood(&noise);
    Ok((estimate(&l, cfg, init.as_ref())?, noise.sigma2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hand_matrix() -> LogLikelihoodMatrix {
        LogLikelihoodMatrix::from_rows(&[vec![0.9f64.ln(), 0.1f64.ln()], vec![0.1f64.ln(), 0.9f64.ln()]]).unwrap()
    }

    #[test]
    fn em_hand_arithmetic() {
        let l = hand_matrix();
        let p = em_update(&SimplexWeights::uniform(2), &l).unwrap();
        assert!((p.as_slice()[0] - 0.5).abs() < 1e-15);
        let p = em_update(&SimplexWeights::new(vec![0.8, 0.2]).unwrap(), &l).unwrap();
        let expected = 0.8 * 0.5 * (0.9 / 0.74 + 0.1 / 0.26);
        assert!((p.as_slice()[0] - expected).abs() < 1e-14);
        assert!((p.as_slice()[0] - 0.640).abs() < 1e-3);
    }

    #[test]
    fn equal_columns_are_stationary() {
        let l = LogLikelihoodMatrix::from_rows(&[vec![-3.0; 4], vec![-1.0; 4]]).unwrap();
        let p = SimplexWeights::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let next = em_update(&p, &l).unwrap();
        assert!(next.total_variation(&p) < 1e-15);
    }

    #[test]
    fn single_node() {
        let l = LogLikelihoodMatrix::from_rows(&[vec![-2.0], vec![-5.0]]).unwrap();
        for algorithm in [Algorithm::Em, Algorithm::ProjectedGradient] {
            let cfg = EstimatorConfig { algorithm, ..Default::default() };
            let fit = estimate(&l, &cfg, None).unwrap();
            assert_eq!(fit.weights().as_slice(), &[1.0]);
            assert_eq!(fit.iterations, 1);
            assert!(fit.converged);
            assert_eq!(fit.final_loglik, -7.0);
        }
    }

    #[test]
    fn single_episode_goes_to_argmax_vertex() {
        let l = LogLikelihoodMatrix::from_rows(&[vec![-4.0, -1.0, -2.5, -1.2, -9.0]]).unwrap();
        let vertex = SimplexWeights::vertex(5, 1).unwrap();
        for algorithm in [Algorithm::Em, Algorithm::ProjectedGradient] {
            let cfg = EstimatorConfig { algorithm, tol: 1e-14, max_iter: 100_000, ..Default::default() };
            let fit = estimate(&l, &cfg, None).unwrap();
            assert!(fit.weights().total_variation(&vertex) < 1e-6, "{algorithm:?}: {:?}", fit.weights());
        }
        let one = em_update(&SimplexWeights::uniform(5), &l).unwrap();
        assert!(one.as_slice()[1] > 0.2);
    }

    #[test]
    fn invalid_config() {
        let l = hand_matrix();
        let bad = EstimatorConfig { tol: 0.0, ..Default::default() };
        assert!(estimate(&l, &bad, None).is_err());
        let bad = EstimatorConfig { max_iter: 0, ..Default::default() };
        assert!(estimate(&l, &bad, None).is_err());
        assert!(estimate(&l, &EstimatorConfig::default(), Some(&SimplexWeights::uniform(3))).is_err());
    }

    #[test]
    fn max_iter_reports_nonconvergence() {
        let l = LogLikelihoodMatrix::from_rows(&[vec![-1.0, -1.1, -3.0], vec![-2.0, -0.5, -1.0]]).unwrap();
        let cfg = EstimatorConfig { max_iter: 2, tol: 1e-15, ..Default::default() };
        let fit = estimate(&l, &cfg, None).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 2);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_to_simplex(&[0.2, 0.8]), vec![0.2, 0.8]);
        assert_eq!(project_to_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        let p = project_to_simplex(&[0.5, 0.5, 0.5]);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let p = project_to_simplex(&[-1.0, 0.3, 0.9]);
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 0.2).abs() < 1e-15 && (p[2] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sparsify_examples() {
        let l = LogLikelihoodMatrix::from_rows(&[vec![-4.0, -1.0, -2.5]]).unwrap();
        let cfg = EstimatorConfig::default();
        let fit = estimate(&l, &cfg, None).unwrap();
        let (sparse, outcome) = sparsify(&fit, &l, 1e-6, &cfg).unwrap();
        assert_eq!(outcome, SparsifyOutcome::Sparsified);
        assert_eq!(sparse.weights().support_size(0.0), 1);
        assert!(fit.final_loglik - sparse.final_loglik < 1e-6);

        let (same, outcome) = sparsify(&sparse, &l, 1e-6, &cfg).unwrap();
        assert_eq!(outcome, SparsifyOutcome::AlreadySparse);
        assert_eq!(same, sparse);

        // Two episodes needing two separate nodes cannot live on one.
        let l = hand_matrix();
        let fit = estimate(&l, &cfg, None).unwrap();
        assert_eq!(sparsify(&fit, &l, 1e-6, &cfg).unwrap().1, SparsifyOutcome::AlreadySparse);
    }

    #[test]
    fn sparsify_rejects_when_loss_is_large() {
        // A negative tolerance can never be met, so the original fit comes back.
        let l = LogLikelihoodMatrix::from_rows(&[vec![-1.0, -1.0, -5.0]]).unwrap();
        let cfg = EstimatorConfig::default();
        let fit = estimate(&l, &cfg, None).unwrap();
        let (kept, outcome) = sparsify(&fit, &l, -1.0, &cfg).unwrap();
        assert_eq!(outcome, SparsifyOutcome::Rejected);
        assert_eq!(kept, fit);
    }

    #[test]
    fn joint_sigma2_recovers_noise_level() {
        use crate::distribution::{make_grid, GridBounds};
        // Residual sums generated as if every episode came from node 1 with
        // variance 4e-6 and n = 200 observations each.
        let grid = make_grid(GridBounds::unit(), 3, 1).unwrap();
        let n = 200;
        let rows = 5;
        let mut ssr = Vec::new();
        for i in 0..rows {
            ssr.extend_from_slice(&[0.5 + i as f64 * 0.01, 4e-6 * n as f64, 0.3]);
        }
        let residuals = ResidualMatrix {
            ssr,
            n_obs: vec![n; rows],
            episode_ids: (0..rows).map(|i| i.to_string()).collect(),
            grid,
            n_mesh: 4,
            tau: 0.1,
        };
        let (fit, sigma2) = estimate_with_sigma2(&residuals, &EstimatorConfig::default(), 1e-6, 50).unwrap();
        assert!((sigma2 - 4e-6).abs() < 1e-9, "{sigma2}");
        assert!(fit.weights().as_slice()[1] > 1.0 - 1e-6);
    }

    fn instance(max_m: usize, max_k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=max_m, 1usize..=max_k).prop_flat_map(|(m, k)| prop::collection::vec(prop::collection::vec(-15.0f64..0.0, k), m))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn em_is_monotone_and_stays_on_simplex(rows in instance(8, 12)) {
            let l = LogLikelihoodMatrix::from_rows(&rows).unwrap();
            let cfg = EstimatorConfig { max_iter: 300, tol: 1e-15, ..Default::default() };
            let fit = estimate(&l, &cfg, None).unwrap();
            for w in fit.trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-10);
            }
            let mut p = SimplexWeights::uniform(l.cols());
            for _ in 0..20 {
                p = em_update(&p, &l).unwrap();
                prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL);
            }
        }

        #[test]
        fn algorithms_agree(rows in instance(6, 20)) {
            let l = LogLikelihoodMatrix::from_rows(&rows).unwrap();
            let em = estimate(&l, &EstimatorConfig::default(), None).unwrap();
            let pg = estimate(&l, &EstimatorConfig { algorithm: Algorithm::ProjectedGradient, ..Default::default() }, None).unwrap();
            prop_assert!((em.final_loglik - pg.final_loglik).abs() < 1e-6, "em {} pg {}", em.final_loglik, pg.final_loglik);
        }

        #[test]
        fn permutation_equivariance(rows in instance(5, 8), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let k = rows[0].len();
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut crate::rng::seeded(seed));
            let permuted: Vec<Vec<f64>> = rows.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
            // A fixed number of updates, so both runs stop at the same iterate.
            let (la, lb) = (LogLikelihoodMatrix::from_rows(&rows).unwrap(), LogLikelihoodMatrix::from_rows(&permuted).unwrap());
            let (mut a, mut b) = (SimplexWeights::uniform(k), SimplexWeights::uniform(k));
            for _ in 0..200 {
                a = em_update(&a, &la).unwrap();
                b = em_update(&b, &lb).unwrap();
            }
            for (new_j, &old_j) in perm.iter().enumerate() {
                prop_assert!((b.as_slice()[new_j] - a.as_slice()[old_j]).abs() < 1e-9);
            }
        }

        #[test]
        fn projection_lands_on_simplex(v in prop::collection::vec(-5.0f64..5.0, 1..30)) {
            let p = project_to_simplex(&v);
            prop_assert!(SimplexWeights::check(&p).is_ok());
        }
    }
}
