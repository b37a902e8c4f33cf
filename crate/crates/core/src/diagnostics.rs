//! Super-thinning residuals and goodness-of-fit tests.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::grid::TensorGrid;
use crate::hawkes_model::{intensity_at, SpatioTemporalWindow};
use crate::kernels::Point;
use crate::simulate::{simulate_inhom_poisson_rng, GroundTruth};
use crate::vi::{Component, ComponentDraw, VariationalState};

/// A conditional intensity `λ(q | events before q)`.
pub trait IntensityEvaluator: Sync {
    fn window(&self) -> &SpatioTemporalWindow;
    fn background(&self, q: &Point) -> f64;
    fn trigger(&self, lag: &Point) -> f64;

    /// `events` must be sorted by time.
    fn intensity(&self, q: &Point, events: &[Point]) -> f64 {
        let w = self.window();
        let hi = events.partition_point(|e| e[0] < q[0]);
        let lo = events[..hi].partition_point(|e| e[0] < q[0] - w.t_phi);
        intensity_at(self.background(q), |l| self.trigger(l), &events[lo..hi], q, w)
    }
}

pub struct TruthIntensity<'a> {
    pub truth: &'a GroundTruth,
}

impl IntensityEvaluator for TruthIntensity<'_> {
    fn window(&self) -> &SpatioTemporalWindow {
        &self.truth.window
    }

    fn background(&self, q: &Point) -> f64 {
        (self.truth.mu)(q)
    }

    fn trigger(&self, lag: &Point) -> f64 {
        (self.truth.phi)(lag)
    }
}

/// Posterior-mean intensity from cached posterior draws.
pub struct PosteriorMeanIntensity {
    pub window: SpatioTemporalWindow,
    pub mu_draws: Vec<ComponentDraw>,
    pub phi_draws: Vec<ComponentDraw>,
}

impl PosteriorMeanIntensity {
    pub fn new(state: &VariationalState, window: SpatioTemporalWindow, n_draws: usize, seed: u64) -> Result<Self> {
        if n_draws == 0 {
            return Err(Error::Domain("n_draws must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws = |c: &Component, rng: &mut ChaCha8Rng| -> Result<Vec<ComponentDraw>> {
            let mut out = Vec::with_capacity(n_draws);
            let mut failures = 0;
            while out.len() < n_draws {
                match c.draw(rng) {
                    Ok(d) => out.push(d),
                    Err(e) => {
                        failures += 1;
                        if failures > 8 * n_draws {
                            return Err(e);
                        }
                    }
                }
            }
            Ok(out)
        };
        let mu_draws = draws(&state.mu, &mut rng)?;
        let phi_draws = draws(&state.phi, &mut rng)?;
        Ok(Self {
            window,
            mu_draws,
            phi_draws,
        })
    }
}

impl IntensityEvaluator for PosteriorMeanIntensity {
    fn window(&self) -> &SpatioTemporalWindow {
        &self.window
    }

    fn background(&self, q: &Point) -> f64 {
        self.mu_draws.iter().map(|d| d.rate_at(q)).sum::<f64>() / self.mu_draws.len() as f64
    }

    fn trigger(&self, lag: &Point) -> f64 {
        self.phi_draws.iter().map(|d| d.rate_at(lag)).sum::<f64>() / self.phi_draws.len() as f64
    }
}

/// `λ̂` over an `n³` probe grid of the window.
pub fn probe_intensities(eval: &dyn IntensityEvaluator, events: &[Point], n: usize) -> Vec<f64> {
    let g = TensorGrid::equidistant(&eval.window().domain(), [n; 3]);
    g.points().iter().map(|p| eval.intensity(p, events)).collect()
}

/// Median of `λ̂` over a 16³ probe grid.
pub fn default_target_rate(eval: &dyn IntensityEvaluator, events: &[Point]) -> f64 {
    let mut v = probe_intensities(eval, events, 16);
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualProcess {
    /// Residual points sorted by time.
    pub events: Vec<Point>,
    /// `true` for retained observed events, `false` for simulated points.
    pub retained: Vec<bool>,
    pub k: f64,
}

impl ResidualProcess {
    pub fn n_retained(&self) -> usize {
        self.retained.iter().filter(|r| **r).count()
    }

    pub fn n_simulated(&self) -> usize {
        self.retained.len() - self.n_retained()
    }
}

/// Thin observed events with probability `min(k/λ̂, 1)` and superpose a
/// Poisson process with rate `max(k − λ̂, 0)`.
pub fn super_thin(events: &[Point], eval: &dyn IntensityEvaluator, k: f64, seed: u64) -> Result<ResidualProcess> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::Domain(format!("target rate k must be positive, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(Point, bool)> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        let lam = eval.intensity(e, &events[..i]);
        let p = if lam > 0.0 { (k / lam).min(1.0) } else { 1.0 };
        if p >= 1.0 || rng.random::<f64>() < p {
            out.push((*e, true));
        }
    }
    let deficit = |q: &Point| (k - eval.intensity(q, events)).max(0.0);
    let sim = simulate_inhom_poisson_rng(&deficit, &eval.window().domain(), k, &mut rng)?;
    out.extend(sim.into_iter().map(|p| (p, false)));
    out.sort_by(|a, b| a.0[0].total_cmp(&b.0[0]));
    Ok(ResidualProcess {
        events: out.iter().map(|(p, _)| *p).collect(),
        retained: out.iter().map(|(_, r)| *r).collect(),
        k,
    })
}

/// Asymptotic Kolmogorov upper tail `P(K > z)`, series truncated at 100 terms.
pub fn kolmogorov_sf(z: f64) -> f64 {
    if z < 0.27 {
        return 1.0;
    }
    let mut s = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        let term = (-2.0 * j * j * z * z).exp();
        s += if (j as i64) % 2 == 1 { term } else { -term };
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample KS test of samples against `Exp(rate)`.
pub fn ks_exponential(samples: &[f64], rate: f64) -> Result<(f64, f64)> {
    let n = samples.len();
    if n == 0 || !(rate > 0.0) {
        return Err(Error::InsufficientData(
            "KS test needs samples and a positive rate".into(),
        ));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut d = 0.0f64;
    for (i, x) in s.iter().enumerate() {
        let f = 1.0 - (-rate * x).exp();
        d = d.max((i as f64 + 1.0) / nf - f).max(f - i as f64 / nf);
    }
    Ok((d, kolmogorov_sf(nf.sqrt() * d)))
}

/// KS test of residual inter-arrival times (from `t = 0`) against
/// `Exp(N / T_max)`.
pub fn ks_exponential_test(residual: &ResidualProcess, t_max: f64) -> Result<(f64, f64)> {
    let n = residual.events.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "KS test needs at least 2 residual events, got {n}"
        )));
    }
    let mut prev = 0.0;
    let gaps: Vec<f64> = residual
        .events
        .iter()
        .map(|e| {
            let g = e[0] - prev;
            prev = e[0];
            g
        })
        .collect();
    ks_exponential(&gaps, n as f64 / t_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratResult {
    pub chi2: f64,
    pub p_value: f64,
    pub n_grid_effective: usize,
}

/// Equal-area quadrat χ² test on residual locations. The grid is halved
/// until the expected count per cell is at least 5.
pub fn quadrat_chi2_test(
    residual: &ResidualProcess,
    window: &SpatioTemporalWindow,
    n_grid: usize,
) -> Result<QuadratResult> {
    let n = residual.events.len();
    if n == 0 {
        return Err(Error::InsufficientData(
            "quadrat test needs at least one residual event".into(),
        ));
    }
    if n_grid == 0 {
        return Err(Error::Domain("n_grid must be positive".into()));
    }
    let mut g = n_grid;
    while g > 1 && (n as f64) / ((g * g) as f64) < 5.0 {
        g /= 2;
    }
    if g != n_grid {
        warn!("quadrat grid coarsened from {n_grid} to {g} (expected count below 5)");
    }
    if g == 1 {
        return Ok(QuadratResult {
            chi2: 0.0,
            p_value: 1.0,
            n_grid_effective: 1,
        });
    }
    let mut counts = vec![0usize; g * g];
    let cell = |v: f64, ext: f64| (((v / ext) * g as f64).floor() as usize).min(g - 1);
    for e in &residual.events {
        counts[cell(e[1], window.x) * g + cell(e[2], window.y)] += 1;
    }
    let expected = n as f64 / (g * g) as f64;
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((g * g - 1) as f64).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(QuadratResult {
        chi2,
        p_value: dist.sf(chi2),
        n_grid_effective: g,
    })
}

/// The diagnostics artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub schema_version: u32,
    pub k: f64,
    pub n_retained: usize,
    pub n_simulated: usize,
    pub ks_stat: f64,
    pub ks_p: f64,
    pub chi2: f64,
    pub chi2_p: f64,
    pub n_grid_effective: usize,
}

/// Super-thin, then run both tests.
pub fn diagnose(
    events: &[Point],
    eval: &dyn IntensityEvaluator,
    k: Option<f64>,
    n_grid: usize,
    seed: u64,
) -> Result<(DiagnosticsReport, ResidualProcess)> {
    let k = k.unwrap_or_else(|| default_target_rate(eval, events));
    let r = super_thin(events, eval, k, seed)?;
    let (ks_stat, ks_p) = ks_exponential_test(&r, eval.window().t)?;
    let q = quadrat_chi2_test(&r, eval.window(), n_grid)?;
    Ok((
        DiagnosticsReport {
            schema_version: crate::vi::SCHEMA_VERSION,
            k,
            n_retained: r.n_retained(),
            n_simulated: r.n_simulated(),
            ks_stat,
            ks_p,
            chi2: q.chi2,
            chi2_p: q.p_value,
            n_grid_effective: q.n_grid_effective,
        },
        r,
    ))
}
