//! Empirical privacy-loss estimate from two models that differ only in
//! whether a probe set was in training.

use serde::{Deserialize, Serialize};

use super::generator::TrajectoryGenerator;
use super::similarity::trajectory_similarity;
use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const DEFAULT_DELTA: f64 = 1e-5;
pub const EPSILON_FORMULA: &str = "|log N(s; mu_D, sigma_D) - log N(s; mu_D', sigma_D')| at the probe's mean score under D";
pub const POOLING: &str = "one Gaussian per model over the scores of all probes and generations";

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mu: f64,
    pub sigma: f64,
}

impl Gaussian {
    /// Maximum-likelihood fit; the flag is set when sigma was floored.
    pub fn fit(values: &[f64]) -> Result<(Gaussian, bool)> {
        if values.is_empty() {
            return Err(Error::Empty("scores to fit"));
        }
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let sigma = (values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
        Ok(if sigma < SIGMA_FLOOR {
            (Gaussian { mu, sigma: SIGMA_FLOOR }, true)
        } else {
            (Gaussian { mu, sigma }, false)
        })
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mu) / self.sigma;
        -0.5 * z * z - self.sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

pub fn epsilon_at(s: f64, d: &Gaussian, d_prime: &Gaussian) -> f64 {
    (d.log_pdf(s) - d_prime.log_pdf(s)).abs()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub delta: f64,
    pub generations_per_probe: usize,
    pub seed: u64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            delta: DEFAULT_DELTA,
            generations_per_probe: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    pub delta: f64,
    pub generations_per_probe: usize,
    pub seed: u64,
    pub probes: usize,
    pub mean: f64,
    pub median: f64,
    pub p75: f64,
    pub fit_d: Gaussian,
    pub fit_d_prime: Gaussian,
    pub sigma_floored: bool,
    pub per_probe: Vec<f64>,
    pub formula: String,
    pub pooling: String,
}

/// Linearly interpolated percentile, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Similarity of each generation to its probe, `[probe][generation]`; the
/// same seeds are used for every model.
fn probe_scores(generator: &dyn TrajectoryGenerator, probes: &[Trajectory], cfg: &DpConfig) -> Result<Vec<Vec<f64>>> {
    let g = cfg.generations_per_probe;
    let mut templates = Vec::with_capacity(probes.len() * g);
    let mut seeds = Vec::with_capacity(probes.len() * g);
    for (i, p) in probes.iter().enumerate() {
        for j in 0..g {
            templates.push(p);
            seeds.push(derive_seed(cfg.seed, &format!("dp-probe-{i}"), j as u64));
        }
    }
    let out = generator.generate(&templates, &seeds)?;
    Ok(probes
        .iter()
        .enumerate()
        .map(|(i, p)| out[i * g..(i + 1) * g].iter().map(|t| trajectory_similarity(p, t)).collect())
        .collect())
}

pub fn estimate_dp_epsilon(model_d: &dyn TrajectoryGenerator, model_d_prime: &dyn TrajectoryGenerator, probes: &[Trajectory], cfg: &DpConfig) -> Result<EpsilonReport> {
    if probes.is_empty() {
        return Err(Error::Empty("probe set"));
    }
    if cfg.generations_per_probe == 0 || !(cfg.delta > 0.0 && cfg.delta < 1.0) {
        return Err(Error::Config("need at least one generation per probe and delta in (0, 1)".into()));
    }
    let sd = probe_scores(model_d, probes, cfg)?;
    let sp = probe_scores(model_d_prime, probes, cfg)?;
    let (fit_d, fd) = Gaussian::fit(&sd.concat())?;
    let (fit_d_prime, fp) = Gaussian::fit(&sp.concat())?;
    let per_probe: Vec<f64> = sd
        .iter()
        .map(|s| epsilon_at(s.iter().sum::<f64>() / s.len() as f64, &fit_d, &fit_d_prime))
        .collect();
    let mut sorted = per_probe.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(EpsilonReport {
        delta: cfg.delta,
        generations_per_probe: cfg.generations_per_probe,
        seed: cfg.seed,
        probes: probes.len(),
        mean: per_probe.iter().sum::<f64>() / per_probe.len() as f64,
        median: percentile(&sorted, 0.5),
        p75: percentile(&sorted, 0.75),
        fit_d,
        fit_d_prime,
        sigma_floored: fd || fp,
        per_probe,
        formula: EPSILON_FORMULA.into(),
        pooling: POOLING.into(),
    })
}
