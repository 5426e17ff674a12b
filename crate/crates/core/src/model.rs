//! Linear-spline Galerkin approximation of the skin-layer diffusion model
//! and its exact zero-order-hold time discretization.
//!
//! The weak form on `V = H¹(0,1)` is
//!
//! ```text
//! <ẋ, ψ> + q1 ∫ x' ψ' dη + x(0) ψ(0) = q2 u ψ(1),      y = x(0)
//! ```
//!
//! Restricted to hat functions on the uniform mesh `η_i = i/N`, this is
//! `M ẋ = -(q1 K1 + E00) x + q2 e_in u`, with node 0 at the skin surface
//! (`η = 0`) and node `N` at the dermal boundary (`η = 1`).

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expm::matrix_exponential;

/// Largest mesh level accepted by [`assemble_galerkin`].
pub const MAX_MESH: usize = 512;

/// Normalized diffusivity `q1` and normalized flux gain `q2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub q1: f64,
    pub q2: f64,
}

impl ParameterVector {
    pub fn new(q1: f64, q2: f64) -> Result<Self> {
        if !(q1 > 0.0 && q1.is_finite() && q2 > 0.0 && q2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "parameters must be positive and finite, got ({q1}, {q2})"
            )));
        }
        Ok(Self { q1, q2 })
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.q1, self.q2]
    }
}

/// Mesh-level matrices of the Galerkin system. Independent of `q`, so one
/// assembly (and one mass factorization) serves every parameter node.
#[derive(Debug, Clone)]
pub struct GalerkinSystem {
    pub n_mesh: usize,
    /// `M_ij = ∫ φ_i φ_j`.
    pub mass: DMatrix<f64>,
    /// `K1_ij = ∫ φ'_i φ'_j`.
    pub stiff_diffusion: DMatrix<f64>,
    /// `E00_ij = φ_i(0) φ_j(0)`.
    pub boundary_evap: DMatrix<f64>,
    /// `φ_i(1)`.
    pub input_vec: DVector<f64>,
    /// `φ_i(0)`.
    pub output_vec: DVector<f64>,
    mass_factor: Cholesky<f64, Dyn>,
    // M⁻¹K1, M⁻¹E00 and M⁻¹e_in, each obtained by triangular solves.
    solved_diffusion: DMatrix<f64>,
    solved_evap: DMatrix<f64>,
    solved_input: DVector<f64>,
}

/// Assembles the hat-function system on `n_mesh` uniform subintervals.
pub fn assemble_galerkin(n_mesh: usize) -> Result<GalerkinSystem> {
    if n_mesh < 2 {
        return Err(Error::InvalidArgument(format!("mesh level must be at least 2, got {n_mesh}")));
    }
    if n_mesh > MAX_MESH {
        return Err(Error::InvalidArgument(format!(
            "mesh level {n_mesh} exceeds the cap of {MAX_MESH}"
        )));
    }
    let dim = n_mesh + 1;
    let h = 1.0 / n_mesh as f64;
    let mut mass = DMatrix::zeros(dim, dim);
    let mut stiff = DMatrix::zeros(dim, dim);
    // Element-by-element: each subinterval couples nodes e and e+1.
    let local_mass = [[h / 3.0, h / 6.0], [h / 6.0, h / 3.0]];
    let local_stiff = [[1.0 / h, -1.0 / h], [-1.0 / h, 1.0 / h]];
    for e in 0..n_mesh {
        for a in 0..2 {
            for b in 0..2 {
                mass[(e + a, e + b)] += local_mass[a][b];
                stiff[(e + a, e + b)] += local_stiff[a][b];
            }
        }
    }
    let mut boundary_evap = DMatrix::zeros(dim, dim);
    boundary_evap[(0, 0)] = 1.0;
    let mut input_vec = DVector::zeros(dim);
    input_vec[n_mesh] = 1.0;
    let mut output_vec = DVector::zeros(dim);
    output_vec[0] = 1.0;

    let mass_factor = Cholesky::new(mass.clone())
        .ok_or_else(|| Error::Numerical("mass matrix is not positive definite".into()))?;
    let solved_diffusion = mass_factor.solve(&stiff);
    let solved_evap = mass_factor.solve(&boundary_evap);
    let solved_input = mass_factor.solve(&input_vec);

    Ok(GalerkinSystem {
        n_mesh,
        mass,
        stiff_diffusion: stiff,
        boundary_evap,
        input_vec,
        output_vec,
        mass_factor,
        solved_diffusion,
        solved_evap,
        solved_input,
    })
}

impl GalerkinSystem {
    pub fn dim(&self) -> usize {
        self.n_mesh + 1
    }

    /// Solves `M x = rhs` with the stored factorization.
    pub fn solve_mass(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.mass_factor.solve(rhs)
    }
}

/// Continuous-time generator and input operator:
/// `A = -M⁻¹(q1 K1 + E00)`, `B = q2 M⁻¹ e_in`.
pub fn continuous_operators(g: &GalerkinSystem, q: &ParameterVector) -> (DMatrix<f64>, DVector<f64>) {
    let a = -(&g.solved_diffusion * q.q1 + &g.solved_evap);
    let b = &g.solved_input * q.q2;
    (a, b)
}

/// Zero-order-hold discretization: `Â = e^{Aτ}` and `B̂ = ∫₀^τ e^{As} B ds`,
/// both read off the exponential of the augmented matrix `[[A, B], [0, 0]]τ`.
pub fn discretize(a: &DMatrix<f64>, b: &DVector<f64>, tau: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be nonnegative, got {tau}")));
    }
    let n = a.nrows();
    if !a.is_square() || b.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "A is {}x{}, B has length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entry in A or B".into()));
    }
    let mut aug = DMatrix::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * tau));
    aug.view_mut((0, n), (n, 1)).copy_from(&(b * tau));
    let e = matrix_exponential(&aug)?;
    let a_hat = e.view((0, 0), (n, n)).into_owned();
    let b_hat = e.view((0, n), (n, 1)).column(0).into_owned();
    Ok((a_hat, b_hat))
}

/// The triple `(Â(q), B̂(q), Ĉ)` for one parameter vector and sampling interval.
#[derive(Debug, Clone)]
pub struct DiscreteTimeSystem {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DVector<f64>,
    pub c_hat: DVector<f64>,
    pub tau: f64,
    pub q: ParameterVector,
}

pub fn build_system(g: &GalerkinSystem, q: &ParameterVector, tau: f64) -> Result<DiscreteTimeSystem> {
    let (a, b) = continuous_operators(g, q);
    let (a_hat, b_hat) = discretize(&a, &b, tau)?;
    Ok(DiscreteTimeSystem {
        a_hat,
        b_hat,
        c_hat: g.output_vec.clone(),
        tau,
        q: *q,
    })
}

impl DiscreteTimeSystem {
    pub fn dim(&self) -> usize {
        self.b_hat.len()
    }

    pub fn output(&self, x: &DVector<f64>) -> f64 {
        self.c_hat.dot(x)
    }

    /// Markov parameters `h_l = Ĉ Â^l B̂` for `l = 0..len`. With a zero
    /// initial state, `y_k = Σ_{j<k} h_{k-1-j} u_j`.
    pub fn impulse_response(&self, len: usize) -> Vec<f64> {
        let mut v = self.b_hat.clone();
        let mut scratch = DVector::zeros(v.len());
        let mut h = Vec::with_capacity(len);
        for _ in 0..len {
            h.push(self.c_hat.dot(&v));
            self.a_hat.mul_to(&v, &mut scratch);
            std::mem::swap(&mut v, &mut scratch);
        }
        h
    }
}

/// Writes a matrix as plain CSV rows, for inspection.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, mut sink: W) -> std::io::Result<()> {
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(sink, "{}", line.join(","))?;
    }
    Ok(())
}
