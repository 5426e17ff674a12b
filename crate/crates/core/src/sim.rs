//! Forward simulation of the discrete-time system
//! `x_k = Â x_{k-1} + B̂ u_{k-1}`, `y_k = Ĉ x_k`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DiscreteTimeSystem, ParameterVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    /// Output at steps `1..=n`.
    pub y: Vec<f64>,
    pub x_final: Vec<f64>,
    pub q: ParameterVector,
    pub tau: f64,
}

/// Runs the recursion from `x0` over the held input sequence `u`.
pub fn simulate_tac(sys: &DiscreteTimeSystem, u: &[f64], x0: &DVector<f64>) -> Result<SimulationResult> {
    if x0.len() != sys.dim() {
        return Err(Error::DimensionMismatch(format!(
            "initial state has length {}, system has dimension {}",
            x0.len(),
            sys.dim()
        )));
    }
    if let Some(k) = u.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite input at step {k}")));
    }
    let mut x = x0.clone();
    let mut next = DVector::zeros(x.len());
    let mut y = Vec::with_capacity(u.len());
    for &uk in u {
        sys.a_hat.mul_to(&x, &mut next);
        next.axpy(uk, &sys.b_hat, 1.0);
        std::mem::swap(&mut x, &mut next);
        y.push(sys.output(&x));
    }
    Ok(SimulationResult {
        y,
        x_final: x.iter().copied().collect(),
        q: sys.q,
        tau: sys.tau,
    })
}

/// Zero-state simulation through precomputed Markov parameters
/// (see [`DiscreteTimeSystem::impulse_response`]); `impulse` must be at least
/// as long as `u`.
pub fn convolve_response(impulse: &[f64], u: &[f64]) -> Vec<f64> {
    assert!(impulse.len() >= u.len(), "impulse response shorter than input");
    (1..=u.len())
        .map(|k| (0..k).map(|j| impulse[k - 1 - j] * u[j]).sum())
        .collect()
}

/// Checks that the system responds linearly:
/// `sim(αu1 + βu2, αx0a + βx0b) = α sim(u1, x0a) + β sim(u2, x0b)` within
/// `1e-10` relative to the output scale.
#[allow(clippy::too_many_arguments)]
pub fn superposition_check(
    sys: &DiscreteTimeSystem,
    u1: &[f64],
    u2: &[f64],
    x0a: &DVector<f64>,
    x0b: &DVector<f64>,
    alpha: f64,
    beta: f64,
) -> bool {
    if u1.len() != u2.len() {
        return false;
    }
    let combined_u: Vec<f64> = u1.iter().zip(u2).map(|(a, b)| alpha * a + beta * b).collect();
    let combined_x0 = x0a * alpha + x0b * beta;
    let (Ok(lhs), Ok(r1), Ok(r2)) = (
        simulate_tac(sys, &combined_u, &combined_x0),
        simulate_tac(sys, u1, x0a),
        simulate_tac(sys, u2, x0b),
    ) else {
        return false;
    };
    let scale = r1
        .y
        .iter()
        .chain(&r2.y)
        .map(|v| v.abs())
        .fold(1.0, f64::max)
        * (alpha.abs() + beta.abs()).max(1.0);
    lhs.y
        .iter()
        .zip(r1.y.iter().zip(&r2.y))
        .all(|(l, (a, b))| (l - (alpha * a + beta * b)).abs() <= 1e-10 * scale)
}
