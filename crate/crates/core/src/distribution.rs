//! Discrete probability measures on a rectangular parameter grid: convex
//! combinations of Dirac masses at the nodes, plus the cdf, sampling,
//! moment and distance utilities used to score and use them.

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mle::SimplexWeights;
use crate::model::ParameterVector;
use crate::rng;

/// A zero lower bound is moved up to this value so every node is a valid
/// (strictly positive) parameter vector.
pub const POSITIVITY_EPS: f64 = 1e-6;

/// Node ordering tag written into every grid spec.
pub const GRID_ORDERING: &str = "row-major, q1 fastest";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridBounds {
    pub q1: [f64; 2],
    pub q2: [f64; 2],
}

impl GridBounds {
    pub fn unit() -> Self {
        Self {
            q1: [0.0, 1.0],
            q2: [0.0, 1.0],
        }
    }
}

/// Serializable description of a grid; the nodes are recomputed from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bounds: GridBounds,
    pub m1: usize,
    pub m2: usize,
    pub ordering: String,
}

/// `m1 × m2` uniform lattice of parameter nodes. Node `j = i2·m1 + i1` sits
/// at `(q1_values[i1], q2_values[i2])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGrid {
    pub bounds: GridBounds,
    pub m1: usize,
    pub m2: usize,
    q1_values: Vec<f64>,
    q2_values: Vec<f64>,
    nodes: Vec<ParameterVector>,
}

fn axis(lo: f64, hi: f64, count: usize, name: &str) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi <= lo {
        return Err(Error::InvalidArgument(format!(
            "{name} bounds [{lo}, {hi}] must satisfy 0 <= lower < upper"
        )));
    }
    if count == 0 {
        return Err(Error::InvalidArgument(format!("{name} needs at least one node")));
    }
    let lo = if lo == 0.0 { POSITIVITY_EPS } else { lo };
    if hi <= lo {
        return Err(Error::InvalidArgument(format!("{name} upper bound {hi} is not positive")));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let step = (hi - lo) / (count - 1) as f64;
    Ok((0..count)
        .map(|i| if i == count - 1 { hi } else { lo + i as f64 * step })
        .collect())
}

/// Uniform meshgrid including the endpoints of both axes.
pub fn make_grid(bounds: GridBounds, m1: usize, m2: usize) -> Result<ParameterGrid> {
    let q1_values = axis(bounds.q1[0], bounds.q1[1], m1, "q1")?;
    let q2_values = axis(bounds.q2[0], bounds.q2[1], m2, "q2")?;
    let mut nodes = Vec::with_capacity(m1 * m2);
    for &b in &q2_values {
        for &a in &q1_values {
            nodes.push(ParameterVector { q1: a, q2: b });
        }
    }
    Ok(ParameterGrid {
        bounds,
        m1,
        m2,
        q1_values,
        q2_values,
        nodes,
    })
}

impl ParameterGrid {
    pub fn from_spec(spec: &GridSpec) -> Result<Self> {
        if spec.ordering != GRID_ORDERING {
            return Err(Error::Validation(format!("unsupported grid ordering {:?}", spec.ordering)));
        }
        make_grid(spec.bounds, spec.m1, spec.m2)
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            bounds: self.bounds,
            m1: self.m1,
            m2: self.m2,
            ordering: GRID_ORDERING.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[ParameterVector] {
        &self.nodes
    }

    pub fn q1_values(&self) -> &[f64] {
        &self.q1_values
    }

    pub fn q2_values(&self) -> &[f64] {
        &self.q2_values
    }

    pub fn index(&self, i1: usize, i2: usize) -> usize {
        i2 * self.m1 + i1
    }

    /// Index of the node closest to `q` in the Euclidean metric.
    pub fn nearest(&self, q: &ParameterVector) -> usize {
        let closest = |values: &[f64], x: f64| {
            values
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - x).abs().total_cmp(&(b.1 - x).abs()))
                .map(|(i, _)| i)
                .unwrap_or(0)
        };
        self.index(closest(&self.q1_values, q.q1), closest(&self.q2_values, q.q2))
    }
}

/// A joint cdf on `(q1, q2)`.
pub trait JointCdf {
    fn joint_cdf(&self, q1: f64, q2: f64) -> f64;
}

/// Dirac mixture on the nodes of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    pub grid: ParameterGrid,
    pub weights: SimplexWeights,
}

/// On-disk form: grid spec and weight array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionFile {
    pub grid: GridSpec,
    pub weights: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(grid: ParameterGrid, weights: SimplexWeights) -> Result<Self> {
        if grid.len() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "grid has {} nodes but {} weights were given",
                grid.len(),
                weights.len()
            )));
        }
        Ok(Self { grid, weights })
    }

    pub fn point_mass(grid: ParameterGrid, node: usize) -> Result<Self> {
        let weights = SimplexWeights::vertex(grid.len(), node)?;
        Self::new(grid, weights)
    }

    pub fn to_file(&self) -> DistributionFile {
        DistributionFile {
            grid: self.grid.spec(),
            weights: self.weights.as_slice().to_vec(),
        }
    }

    pub fn from_file(file: &DistributionFile) -> Result<Self> {
        let grid = ParameterGrid::from_spec(&file.grid)?;
        Self::new(grid, SimplexWeights::new(file.weights.clone())?)
    }

    /// Nodes with weight above `eps`.
    pub fn support(&self, eps: f64) -> Vec<usize> {
        self.weights
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > eps)
            .map(|(j, _)| j)
            .collect()
    }
}

impl JointCdf for DiscreteDistribution {
    fn joint_cdf(&self, q1: f64, q2: f64) -> f64 {
        cdf(self, q1, q2)
    }
}

/// Total weight of nodes with both coordinates `<=` the given point.
pub fn cdf(d: &DiscreteDistribution, q1: f64, q2: f64) -> f64 {
    let w = d.weights.as_slice();
    let n1 = d.grid.q1_values.partition_point(|&v| v <= q1);
    let n2 = d.grid.q2_values.partition_point(|&v| v <= q2);
    let mut total = 0.0;
    for i2 in 0..n2 {
        let row = &w[i2 * d.grid.m1..i2 * d.grid.m1 + n1];
        total += row.iter().sum::<f64>();
    }
    total.min(1.0)
}

/// Node indices of `n` i.i.d. categorical draws, by inverse cdf on the
/// cumulative weights.
pub fn sample_indices(d: &DiscreteDistribution, n: usize, seed: u64) -> Vec<usize> {
    let cumulative: Vec<f64> = d
        .weights
        .as_slice()
        .iter()
        .scan(0.0, |acc, &w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().unwrap_or(&1.0);
    let last_positive = d.weights.as_slice().iter().rposition(|&w| w > 0.0).unwrap_or(0);
    let mut rng = rng::seeded(seed);
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            cumulative.partition_point(|&c| c <= u).min(last_positive)
        })
        .collect()
}

pub fn sample(d: &DiscreteDistribution, n: usize, seed: u64) -> Vec<ParameterVector> {
    sample_indices(d, n, seed)
        .into_iter()
        .map(|j| d.grid.nodes[j])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
    /// `None` when either marginal has zero variance.
    pub correlation: Option<f64>,
}

pub fn moments(d: &DiscreteDistribution) -> Moments {
    let w = d.weights.as_slice();
    let nodes = d.grid.nodes();
    let mut mean = [0.0; 2];
    for (p, q) in w.iter().zip(nodes) {
        mean[0] += p * q.q1;
        mean[1] += p * q.q2;
    }
    let mut cov = [[0.0; 2]; 2];
    for (p, q) in w.iter().zip(nodes) {
        let d = [q.q1 - mean[0], q.q2 - mean[1]];
        for a in 0..2 {
            for b in 0..2 {
                cov[a][b] += p * d[a] * d[b];
            }
        }
    }
    let scale = nodes
        .iter()
        .map(|q| q.q1.abs().max(q.q2.abs()))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let floor = f64::EPSILON * scale * scale;
    let correlation = if cov[0][0] > floor && cov[1][1] > floor {
        Some((cov[0][1] / (cov[0][0] * cov[1][1]).sqrt()).clamp(-1.0, 1.0))
    } else {
        None
    };
    Moments {
        mean,
        covariance: cov,
        correlation,
    }
}

/// How the "true" weight `b_j` at node `j` is read off a reference measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMode {
    /// Compare cdf values at the nodes.
    #[default]
    Cdf,
    /// Compare node weights with the reference mass of each node's cell.
    CellMass,
}

impl std::str::FromStr for DistanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cdf" => Ok(Self::Cdf),
            "cell-mass" => Ok(Self::CellMass),
            other => Err(Error::InvalidArgument(format!("unknown distance mode {other:?}"))),
        }
    }
}

/// Cell edges along one axis: midlines between neighbours, with the outer
/// cells left open so boundary nodes own everything beyond them.
fn cell_edges(values: &[f64]) -> Vec<f64> {
    let mut edges = Vec::with_capacity(values.len() + 1);
    edges.push(f64::NEG_INFINITY);
    edges.extend(values.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(f64::INFINITY);
    edges
}

/// Reference mass of every node's rectangular (Voronoi) cell.
pub fn cell_masses(grid: &ParameterGrid, reference: &dyn JointCdf) -> Vec<f64> {
    let e1 = cell_edges(&grid.q1_values);
    let e2 = cell_edges(&grid.q2_values);
    let f = |x: f64, y: f64| {
        if x == f64::NEG_INFINITY || y == f64::NEG_INFINITY {
            0.0
        } else {
            reference.joint_cdf(x, y)
        }
    };
    let mut masses = Vec::with_capacity(grid.len());
    for i2 in 0..grid.m2 {
        for i1 in 0..grid.m1 {
            let (x0, x1, y0, y1) = (e1[i1], e1[i1 + 1], e2[i2], e2[i2 + 1]);
            masses.push(f(x1, y1) - f(x0, y1) - f(x1, y0) + f(x0, y0));
        }
    }
    masses
}

/// Sum of squared node-wise differences between `d` and `reference`.
pub fn distance_d(d: &DiscreteDistribution, reference: &dyn JointCdf, mode: DistanceMode) -> f64 {
    match mode {
        DistanceMode::Cdf => d
            .grid
            .nodes()
            .iter()
            .map(|q| {
                let diff = cdf(d, q.q1, q.q2) - reference.joint_cdf(q.q1, q.q2);
                diff * diff
            })
            .sum(),
        DistanceMode::CellMass => cell_masses(&d.grid, reference)
            .iter()
            .zip(d.weights.as_slice())
            .map(|(b, p)| (p - b) * (p - b))
            .sum(),
    }
}

/// `D` with its node- and mesh-normalized variants `D/M` and `D/N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub mode: DistanceMode,
    pub d: f64,
    pub d_bar_m: f64,
    pub d_bar_n: f64,
    pub nodes: usize,
    pub n_mesh: usize,
}

pub fn distance_report(
    d: &DiscreteDistribution,
    reference: &dyn JointCdf,
    mode: DistanceMode,
    n_mesh: usize,
) -> DistanceReport {
    let value = distance_d(d, reference, mode);
    DistanceReport {
        mode,
        d: value,
        d_bar_m: value / d.grid.len() as f64,
        d_bar_n: value / n_mesh.max(1) as f64,
        nodes: d.grid.len(),
        n_mesh,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Q1,
    Q2,
}

/// Weights summed along the other axis, one entry per grid line.
pub fn marginal_density_weights(d: &DiscreteDistribution, axis: Axis) -> Vec<f64> {
    let g = &d.grid;
    let w = d.weights.as_slice();
    match axis {
        Axis::Q1 => (0..g.m1)
            .map(|i1| (0..g.m2).map(|i2| w[g.index(i1, i2)]).sum())
            .collect(),
        Axis::Q2 => (0..g.m2)
            .map(|i2| (0..g.m1).map(|i1| w[g.index(i1, i2)]).sum())
            .collect(),
    }
}

/// Beta(α, β) distribution on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaMarginal {
    pub alpha: f64,
    pub beta: f64,
}

fn binomial(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn as_small_integer(x: f64) -> Option<u64> {
    (x.fract() == 0.0 && (1.0..=64.0).contains(&x)).then_some(x as u64)
}

impl BetaMarginal {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "Beta parameters must be positive, got ({alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    /// Regularized incomplete beta function `I_x(α, β)`. Integer parameters
    /// use the finite binomial sum
    /// `I_x(a, b) = Σ_{j=a}^{a+b-1} C(a+b-1, j) x^j (1-x)^{a+b-1-j}`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        match (as_small_integer(self.alpha), as_small_integer(self.beta)) {
            (Some(a), Some(b)) => {
                let n = a + b - 1;
                (a..=n)
                    .map(|j| binomial(n, j) * x.powi(j as i32) * (1.0 - x).powi((n - j) as i32))
                    .sum::<f64>()
                    .min(1.0)
            }
            _ => statrs::function::beta::beta_reg(self.alpha, self.beta, x),
        }
    }
}

/// Product of two independent Beta marginals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaProduct {
    pub q1: BetaMarginal,
    pub q2: BetaMarginal,
}

impl BetaProduct {
    pub fn iid(alpha: f64, beta: f64) -> Result<Self> {
        let m = BetaMarginal::new(alpha, beta)?;
        Ok(Self { q1: m, q2: m })
    }
}

impl JointCdf for BetaProduct {
    fn joint_cdf(&self, q1: f64, q2: f64) -> f64 {
        self.q1.cdf(q1) * self.q2.cdf(q2)
    }
}

/// `q1,q2,cdf` at every node.
pub fn write_cdf_csv<W: Write>(d: &DiscreteDistribution, mut sink: W) -> std::io::Result<()> {
    writeln!(sink, "q1,q2,cdf")?;
    for q in d.grid.nodes() {
        writeln!(sink, "{},{},{}", q.q1, q.q2, cdf(d, q.q1, q.q2))?;
    }
    Ok(())
}

/// `q1,q2,weight` at every node.
pub fn write_density_csv<W: Write>(d: &DiscreteDistribution, mut sink: W) -> std::io::Result<()> {
    writeln!(sink, "q1,q2,weight")?;
    for (q, w) in d.grid.nodes().iter().zip(d.weights.as_slice()) {
        writeln!(sink, "{},{},{}", q.q1, q.q2, w)?;
    }
    Ok(())
}

/// `<axis>,weight` per grid line.
pub fn write_marginal_csv<W: Write>(d: &DiscreteDistribution, axis: Axis, mut sink: W) -> std::io::Result<()> {
    let (name, values) = match axis {
        Axis::Q1 => ("q1", d.grid.q1_values()),
        Axis::Q2 => ("q2", d.grid.q2_values()),
    };
    writeln!(sink, "{name},weight")?;
    for (v, w) in values.iter().zip(marginal_density_weights(d, axis)) {
        writeln!(sink, "{v},{w}")?;
    }
    Ok(())
}
