//! Posterior-mean MSE, posterior-expected MSE and expected log-likelihood.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hawkes_model::{IntensityValues, LikelihoodLayout};
use crate::simulate::GroundTruth;
use crate::vi::{ModelData, VariationalState, SCHEMA_VERSION};

/// `S × N` posterior draws of a field at grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorFieldSamples {
    pub samples: Vec<Vec<f64>>,
}

impl PosteriorFieldSamples {
    pub fn new(samples: Vec<Vec<f64>>) -> Result<Self> {
        let n = samples
            .first()
            .map(|s| s.len())
            .ok_or_else(|| Error::Domain("no draws".into()))?;
        if samples.iter().any(|s| s.len() != n) {
            return Err(Error::Domain("draws have different lengths".into()));
        }
        Ok(Self { samples })
    }

    pub fn n_nodes(&self) -> usize {
        self.samples[0].len()
    }

    pub fn mean(&self) -> Vec<f64> {
        let s = self.samples.len() as f64;
        let mut m = vec![0.0; self.n_nodes()];
        for d in &self.samples {
            for (a, b) in m.iter_mut().zip(d) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= s);
        m
    }

    /// Mean over nodes of the (population) posterior variance.
    pub fn mean_variance(&self) -> f64 {
        let m = self.mean();
        let s = self.samples.len() as f64;
        let mut total = 0.0;
        for (j, mj) in m.iter().enumerate() {
            total += self.samples.iter().map(|d| (d[j] - mj).powi(2)).sum::<f64>() / s;
        }
        total / m.len() as f64
    }

    fn check(&self, truth: &[f64]) -> Result<()> {
        if truth.len() != self.n_nodes() {
            return Err(Error::Domain(format!(
                "truth has {} nodes, samples have {}",
                truth.len(),
                self.n_nodes()
            )));
        }
        Ok(())
    }
}

pub fn pm_mse(samples: &PosteriorFieldSamples, truth: &[f64]) -> Result<f64> {
    samples.check(truth)?;
    let m = samples.mean();
    Ok(m.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / m.len() as f64)
}

pub fn pe_mse(samples: &PosteriorFieldSamples, truth: &[f64]) -> Result<f64> {
    samples.check(truth)?;
    let s = samples.samples.len() as f64;
    let n = truth.len();
    let mut total = 0.0;
    for j in 0..n {
        total += samples.samples.iter().map(|d| (d[j] - truth[j]).powi(2)).sum::<f64>() / s;
    }
    Ok(total / n as f64)
}

/// Monte Carlo mean of the log-likelihood over posterior draws.
pub fn expected_log_likelihood(draws: &[IntensityValues], layout: &LikelihoodLayout) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Domain("expected log-likelihood needs at least one draw".into()));
    }
    Ok(draws.iter().map(|d| layout.log_likelihood(d)).sum::<f64>() / draws.len() as f64)
}

/// Streaming summary of posterior draws on the quadrature grids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub n_draws: usize,
    pub mu_mean: Vec<f64>,
    pub phi_mean: Vec<f64>,
    /// Per-node mean of squared draws.
    pub mu_sq: Vec<f64>,
    pub phi_sq: Vec<f64>,
    /// Per-draw spatial averages over time (μ) and time lag (φ).
    pub mu_curves: Vec<Vec<f64>>,
    pub phi_curves: Vec<Vec<f64>>,
    pub mu_norms: Vec<f64>,
    pub phi_norms: Vec<f64>,
    pub log_likelihoods: Vec<f64>,
}

struct DrawSummary {
    mu: Vec<f64>,
    phi: Vec<f64>,
    ll: f64,
}

fn draw_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

const BATCH: usize = 16;

/// Draw `n_draws` posterior intensity fields and summarise them. Draws that
/// fail (conditioning) are retried on a fresh stream.
pub fn summarise_posterior(
    state: &VariationalState,
    data: &ModelData,
    n_draws: usize,
    seed: u64,
) -> Result<PosteriorSummary> {
    if n_draws == 0 {
        return Err(Error::Domain("n_draws must be at least 1".into()));
    }
    let layout = &data.layout;
    let nm = layout.mu_grid.len();
    let np = layout.phi_grid.len();
    let mut s = PosteriorSummary {
        n_draws,
        mu_mean: vec![0.0; nm],
        phi_mean: vec![0.0; np],
        mu_sq: vec![0.0; nm],
        phi_sq: vec![0.0; np],
        mu_curves: Vec::with_capacity(n_draws),
        phi_curves: Vec::with_capacity(n_draws),
        mu_norms: Vec::with_capacity(n_draws),
        phi_norms: Vec::with_capacity(n_draws),
        log_likelihoods: Vec::with_capacity(n_draws),
    };
    let one = |k: usize| -> Result<DrawSummary> {
        let mut last = None;
        for attempt in 0..8 {
            let mut rng = draw_rng(seed, k + attempt * n_draws);
            let r = state
                .mu
                .sample_rates(&data.mu_targets, &mut rng)
                .and_then(|mu| Ok((mu, state.phi.sample_rates(&data.phi_targets, &mut rng)?)));
            match r {
                Ok((mu, phi)) => {
                    let v = layout.split(&mu, &phi);
                    let ll = layout.log_likelihood(&v);
                    return Ok(DrawSummary {
                        mu: v.mu_grid,
                        phi: v.phi_grid,
                        ll,
                    });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    };
    for start in (0..n_draws).step_by(BATCH) {
        let end = (start + BATCH).min(n_draws);
        let batch: Vec<Result<DrawSummary>> = (start..end).into_par_iter().map(one).collect();
        for d in batch {
            let d = d?;
            for (j, v) in d.mu.iter().enumerate() {
                s.mu_mean[j] += v;
                s.mu_sq[j] += v * v;
            }
            for (j, v) in d.phi.iter().enumerate() {
                s.phi_mean[j] += v;
                s.phi_sq[j] += v * v;
            }
            s.mu_curves.push(layout.mu_grid.spatial_average(&d.mu));
            s.phi_curves.push(layout.phi_grid.spatial_average(&d.phi));
            s.mu_norms.push(layout.mu_grid.integrate(&d.mu));
            s.phi_norms.push(layout.phi_grid.integrate(&d.phi));
            s.log_likelihoods.push(d.ll);
        }
    }
    let k = n_draws as f64;
    for v in s
        .mu_mean
        .iter_mut()
        .chain(s.phi_mean.iter_mut())
        .chain(s.mu_sq.iter_mut())
        .chain(s.phi_sq.iter_mut())
    {
        *v /= k;
    }
    Ok(s)
}

impl PosteriorSummary {
    pub fn ell(&self) -> f64 {
        self.log_likelihoods.iter().sum::<f64>() / self.log_likelihoods.len() as f64
    }

    fn pm(mean: &[f64], truth: &[f64]) -> f64 {
        mean.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / mean.len() as f64
    }

    fn pe(mean: &[f64], sq: &[f64], truth: &[f64]) -> f64 {
        mean.iter()
            .zip(sq)
            .zip(truth)
            .map(|((m, q), t)| q - 2.0 * m * t + t * t)
            .sum::<f64>()
            / mean.len() as f64
    }
}

/// The metrics artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub pm_mse_mu: Option<f64>,
    pub pm_mse_phi: Option<f64>,
    pub pe_mse_mu: Option<f64>,
    pub pe_mse_phi: Option<f64>,
    pub ell: f64,
    pub scaled_by_100: bool,
    pub n_draws: usize,
}

/// Truth values on the layout's quadrature grids.
pub fn truth_on_grids(truth: &GroundTruth, layout: &LikelihoodLayout) -> (Vec<f64>, Vec<f64>) {
    (
        layout.mu_grid.grid.points().iter().map(|p| (truth.mu)(p)).collect(),
        layout.phi_grid.grid.points().iter().map(|p| (truth.phi)(p)).collect(),
    )
}

pub fn metrics_report(
    summary: &PosteriorSummary,
    truth: Option<&GroundTruth>,
    layout: &LikelihoodLayout,
    scale: bool,
) -> MetricsReport {
    let f = if scale { 100.0 } else { 1.0 };
    let (pm_mu, pm_phi, pe_mu, pe_phi) = match truth {
        Some(t) => {
            let (tm, tp) = truth_on_grids(t, layout);
            (
                Some(f * PosteriorSummary::pm(&summary.mu_mean, &tm)),
                Some(f * PosteriorSummary::pm(&summary.phi_mean, &tp)),
                Some(f * PosteriorSummary::pe(&summary.mu_mean, &summary.mu_sq, &tm)),
                Some(f * PosteriorSummary::pe(&summary.phi_mean, &summary.phi_sq, &tp)),
            )
        }
        None => (None, None, None, None),
    };
    MetricsReport {
        schema_version: SCHEMA_VERSION,
        pm_mse_mu: pm_mu,
        pm_mse_phi: pm_phi,
        pe_mse_mu: pe_mu,
        pe_mse_phi: pe_phi,
        ell: summary.ell(),
        scaled_by_100: scale,
        n_draws: summary.n_draws,
    }
}
