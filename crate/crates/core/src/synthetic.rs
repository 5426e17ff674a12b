//! Simulated datasets: parameters drawn from a product of Beta marginals,
//! pushed through the forward model on a fine "truth" mesh, plus Gaussian
//! observation noise.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::{write_episode_csv, Episode, ManifestEntry};
use crate::error::{Error, Result};
use crate::model::{assemble_galerkin, build_system, ParameterVector};
use crate::rng::{self, derive_seed};
use crate::sim::convolve_response;

/// How synthetic episodes are generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthSpec {
    /// Both parameters are i.i.d. Beta(alpha, beta).
    pub alpha: f64,
    pub beta: f64,
    pub sigma2: f64,
    /// Galerkin level used to generate data; kept distinct from the
    /// estimation mesh.
    pub n_truth_mesh: usize,
    pub tau_hours: f64,
    pub horizon_hours: f64,
}

impl Default for TruthSpec {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 5.0,
            sigma2: 1e-6,
            n_truth_mesh: 256,
            tau_hours: 5.0 / 60.0,
            horizon_hours: 12.0,
        }
    }
}

impl TruthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "Beta parameters must be positive, got ({}, {})",
                self.alpha, self.beta
            )));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise variance {} is invalid", self.sigma2)));
        }
        if !(self.tau_hours > 0.0 && self.horizon_hours >= self.tau_hours) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < tau ({}) <= horizon ({})",
                self.tau_hours, self.horizon_hours
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon_hours / self.tau_hours + 1e-9).floor() as usize
    }
}

fn beta_draw(rng: &mut rng::Rng, x: &Gamma<f64>, y: &Gamma<f64>) -> f64 {
    loop {
        let a = x.sample(rng);
        let b = y.sample(rng);
        let v = a / (a + b);
        if v > 0.0 && v < 1.0 {
            return v;
        }
    }
}

fn gammas(alpha: f64, beta: f64) -> Result<(Gamma<f64>, Gamma<f64>)> {
    let bad = |e| Error::InvalidArgument(format!("Beta({alpha}, {beta}): {e}"));
    Ok((Gamma::new(alpha, 1.0).map_err(bad)?, Gamma::new(beta, 1.0).map_err(bad)?))
}

/// `n` i.i.d. Beta(α, β) draws by the gamma-ratio method `X / (X + Y)`,
/// `X ~ Γ(α)`, `Y ~ Γ(β)`. Draws are strictly inside `(0, 1)`.
pub fn sample_beta(alpha: f64, beta: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::InvalidArgument(format!("Beta parameters must be positive, got ({alpha}, {beta})")));
    }
    let (x, y) = gammas(alpha, beta)?;
    let mut rng = rng::seeded(seed);
    Ok((0..n).map(|_| beta_draw(&mut rng, &x, &y)).collect())
}

/// Stylized BrAC drinking curve: zero until `onset`, a smooth rise to
/// `peak` over `rise` hours, then linear (zero-order) elimination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BracProfile {
    pub onset: f64,
    pub rise: f64,
    pub peak: f64,
    /// Elimination rate, concentration per hour.
    pub elimination: f64,
}

impl BracProfile {
    pub fn value(&self, t: f64) -> f64 {
        let s = t - self.onset;
        if s <= 0.0 {
            0.0
        } else if s < self.rise {
            let phase = std::f64::consts::FRAC_PI_2 * s / self.rise;
            self.peak * phase.sin().powi(2)
        } else {
            (self.peak - self.elimination * (s - self.rise)).max(0.0)
        }
    }

    /// Held input `u_k = u(kτ)`, `k = 0..steps`.
    pub fn sample(&self, tau: f64, steps: usize) -> Vec<f64> {
        (0..steps).map(|k| self.value(k as f64 * tau)).collect()
    }
}

/// The nine bundled drinking profiles.
pub const INPUT_LIBRARY: [BracProfile; 9] = [
    BracProfile { onset: 0.25, rise: 0.75, peak: 0.060, elimination: 0.016 },
    BracProfile { onset: 0.50, rise: 1.00, peak: 0.085, elimination: 0.018 },
    BracProfile { onset: 0.25, rise: 0.50, peak: 0.040, elimination: 0.015 },
    BracProfile { onset: 0.75, rise: 1.25, peak: 0.100, elimination: 0.020 },
    BracProfile { onset: 0.50, rise: 0.60, peak: 0.050, elimination: 0.017 },
    BracProfile { onset: 0.00, rise: 1.50, peak: 0.095, elimination: 0.019 },
    BracProfile { onset: 1.00, rise: 0.80, peak: 0.070, elimination: 0.015 },
    BracProfile { onset: 0.25, rise: 1.10, peak: 0.075, elimination: 0.020 },
    BracProfile { onset: 0.50, rise: 0.90, peak: 0.045, elimination: 0.016 },
];

/// The bundled profiles sampled for `spec`'s interval and horizon.
pub fn input_library(spec: &TruthSpec) -> Vec<Vec<f64>> {
    INPUT_LIBRARY
        .iter()
        .map(|p| p.sample(spec.tau_hours, spec.steps()))
        .collect()
}

/// A generated episode with the ground truth used to produce it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEpisode {
    pub episode: Episode,
    pub q: ParameterVector,
    pub seed: u64,
    pub input_index: usize,
}

fn noisy_output(clean: Vec<f64>, sigma2: f64, rng: &mut rng::Rng) -> Result<Vec<f64>> {
    if sigma2 == 0.0 {
        return Ok(clean);
    }
    let noise = Normal::new(0.0, sigma2.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(clean.into_iter().map(|y| y + noise.sample(rng)).collect())
}

/// `tac_k = y_k(q) + e_k` on the truth mesh, with noise from `seed`.
pub fn generate_episode(id: &str, brac: &[f64], q: &ParameterVector, spec: &TruthSpec, seed: u64) -> Result<Episode> {
    spec.validate()?;
    let g = assemble_galerkin(spec.n_truth_mesh)?;
    let sys = build_system(&g, q, spec.tau_hours)?;
    let clean = convolve_response(&sys.impulse_response(brac.len()), brac);
    let tac = noisy_output(clean, spec.sigma2, &mut rng::seeded(seed))?;
    Episode::new(id, spec.tau_hours, brac.to_vec(), tac)
}

/// Episode `index` of the dataset keyed by `master_seed`. Depends only on
/// `(master_seed, index)`, so smaller datasets are prefixes of larger ones.
pub fn dataset_episode(index: usize, library: &[Vec<f64>], spec: &TruthSpec, master_seed: u64) -> Result<SyntheticEpisode> {
    if library.is_empty() {
        return Err(Error::EmptyInput("input library is empty".into()));
    }
    let seed = derive_seed(master_seed, index as u64);
    let mut rng = rng::seeded(seed);
    let (x, y) = gammas(spec.alpha, spec.beta)?;
    let q = ParameterVector::new(beta_draw(&mut rng, &x, &y), beta_draw(&mut rng, &x, &y))?;
    let input_index = index % library.len();
    let brac = &library[input_index];
    let g = assemble_galerkin(spec.n_truth_mesh)?;
    let sys = build_system(&g, &q, spec.tau_hours)?;
    let clean = convolve_response(&sys.impulse_response(brac.len()), brac);
    let tac = noisy_output(clean, spec.sigma2, &mut rng)?;
    Ok(SyntheticEpisode {
        episode: Episode::new(format!("ep{:03}", index + 1), spec.tau_hours, brac.clone(), tac)?,
        q,
        seed,
        input_index,
    })
}

/// `m` episodes with fresh parameters and noise; inputs are cycled through
/// the library.
pub fn generate_dataset(m: usize, library: &[Vec<f64>], spec: &TruthSpec, master_seed: u64) -> Result<Vec<SyntheticEpisode>> {
    spec.validate()?;
    if m == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one episode".into()));
    }
    (0..m)
        .into_par_iter()
        .map(|i| dataset_episode(i, library, spec, master_seed))
        .collect()
}

/// Manifest written next to a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub master_seed: u64,
    pub truth: TruthSpec,
    pub tau_hours: f64,
    pub episodes: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Writes `manifest.json` and one CSV per episode into `dir`.
pub fn write_dataset(
    dir: &Path,
    episodes: &[SyntheticEpisode],
    spec: &TruthSpec,
    master_seed: u64,
    config_hash: Option<String>,
) -> Result<SyntheticManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(episodes.len());
    for s in episodes {
        let name = format!("{}.csv", s.episode.id);
        let path = dir.join(&name);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_episode_csv(&s.episode.to_raw(), std::io::BufWriter::new(file))?;
        entries.push(ManifestEntry {
            id: s.episode.id.clone(),
            path: name,
            truth_q: Some(s.q.as_array()),
            seed: Some(s.seed),
            input_index: Some(s.input_index),
        });
    }
    let manifest = SyntheticManifest {
        master_seed,
        truth: *spec,
        tau_hours: spec.tau_hours,
        episodes: entries,
        config_hash,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
