//! Synthetic data: thinning, cluster simulation and the built-in scenarios.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Box3, QuadratureGrid, TensorGrid};
use crate::hawkes_model::{EventSequence, SpatioTemporalWindow};
use crate::kernels::Point;

pub type RateFn = Arc<dyn Fn(&Point) -> f64 + Send + Sync>;

const PROBE: usize = 64;
const BOUND_FACTOR: f64 = 1.2;
pub const MAX_GENERATIONS: usize = 10_000;
const MAX_EVENTS: usize = 50_000_000;

/// Known background and trigger on a window.
#[derive(Clone)]
pub struct GroundTruth {
    pub scenario: Option<u8>,
    pub mu: RateFn,
    pub phi: RateFn,
    pub window: SpatioTemporalWindow,
    pub mu_bound: f64,
    pub phi_bound: f64,
}

impl std::fmt::Debug for GroundTruth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GroundTruth")
            .field("scenario", &self.scenario)
            .field("window", &self.window)
            .field("mu_bound", &self.mu_bound)
            .field("phi_bound", &self.phi_bound)
            .finish()
    }
}

/// `1.2 ×` the maximum over a 64³ probe grid of the region.
pub fn probe_bound(rate: &dyn Fn(&Point) -> f64, region: &Box3) -> Result<f64> {
    let g = TensorGrid::equidistant(region, [PROBE; 3]);
    let mut max = 0.0f64;
    for p in g.points() {
        let v = rate(&p);
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Domain(format!("rate function returned {v} at {p:?}")));
        }
        max = max.max(v);
    }
    Ok(BOUND_FACTOR * max)
}

impl GroundTruth {
    pub fn new(scenario: Option<u8>, mu: RateFn, phi: RateFn, window: SpatioTemporalWindow) -> Result<Self> {
        window.validate()?;
        let mu_bound = probe_bound(mu.as_ref(), &window.domain())?;
        let phi_bound = probe_bound(phi.as_ref(), &window.support())?;
        let t = Self {
            scenario,
            mu,
            phi,
            window,
            mu_bound,
            phi_bound,
        };
        let (_, phi_norm) = t.norms([PROBE; 3])?;
        if phi_norm >= 1.0 {
            return Err(Error::Instability(phi_norm));
        }
        Ok(t)
    }

    /// Trapezoid `(‖μ‖₁, ‖φ‖₁)` on grids with `counts` nodes per dimension.
    pub fn norms(&self, counts: [usize; 3]) -> Result<(f64, f64)> {
        let qm = QuadratureGrid::new(self.window.domain(), counts)?;
        let qp = QuadratureGrid::new(self.window.support(), counts)?;
        let mv: Vec<f64> = qm.grid.points().iter().map(|p| (self.mu)(p)).collect();
        let pv: Vec<f64> = qp.grid.points().iter().map(|p| (self.phi)(p)).collect();
        Ok((qm.integrate(&mv), qp.integrate(&pv)))
    }
}

/// Built-in synthetic scenarios on `(10,10,10)` with support `(0.5,0.3,0.3)`.
pub fn scenario(k: u8) -> Result<GroundTruth> {
    let window = SpatioTemporalWindow::new(10.0, 10.0, 10.0, 0.5, 0.3, 0.3)?;
    let (tt, xx, yy) = (window.t, window.x, window.y);
    let (tp, xp, yp) = (window.t_phi, window.x_phi, window.y_phi);
    let gaussian_decay: RateFn =
        Arc::new(|l: &Point| 5.0 * (-(l[1] * l[1] + l[2] * l[2]) / 0.02).exp() * (-l[0]).exp());
    let additive = move |p: &Point| {
        (1.5 + (2.0 * PI * p[0] / tt).sin())
            + (1.5 + (2.0 * PI * p[1] / xx).sin())
            + (1.5 + (2.0 * PI * p[2] / yy).sin())
    };
    let (mu, phi): (RateFn, RateFn) = match k {
        1 => (Arc::new(|_: &Point| 4.5), gaussian_decay),
        2 => (Arc::new(additive), gaussian_decay),
        3 => (
            Arc::new(move |p: &Point| {
                additive(p) + (2.0 * PI * p[0] / tt).sin() * (2.0 * PI * p[1] / xx).sin() * (2.0 * PI * p[2] / yy).sin()
            }),
            Arc::new(move |l: &Point| {
                let s = l[0] / tp;
                (1.0 + 10.0 * s * (1.0 - s)) * (-(l[1] * l[1] / (xp * xp) + l[2] * l[2] / (yp * yp))).exp()
            }),
        ),
        other => return Err(Error::Domain(format!("unknown scenario {other} (expected 1, 2 or 3)"))),
    };
    GroundTruth::new(Some(k), mu, phi, window)
}

fn uniform_in(region: &Box3, rng: &mut ChaCha8Rng) -> Point {
    [0, 1, 2].map(|d| region.lo[d] + region.extent(d) * rng.random::<f64>())
}

/// Thinning of a homogeneous Poisson process with intensity `bound`.
pub fn simulate_inhom_poisson_rng(
    rate: &dyn Fn(&Point) -> f64,
    region: &Box3,
    bound: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Point>> {
    if !(bound >= 0.0 && bound.is_finite()) {
        return Err(Error::Domain(format!("rate bound must be nonnegative, got {bound}")));
    }
    let mean = bound * region.volume();
    if mean == 0.0 {
        return Ok(Vec::new());
    }
    let n = Poisson::new(mean)
        .map_err(|e| Error::Domain(format!("Poisson mean {mean}: {e}")))?
        .sample(rng) as usize;
    let mut out = Vec::new();
    for _ in 0..n {
        let p = uniform_in(region, rng);
        let r = rate(&p);
        if r > bound {
            return Err(Error::BoundViolation {
                rate: r,
                bound,
                point: p,
            });
        }
        if rng.random::<f64>() * bound < r {
            out.push(p);
        }
    }
    Ok(out)
}

pub fn simulate_inhom_poisson(
    rate: &dyn Fn(&Point) -> f64,
    region: &Box3,
    bound: f64,
    seed: u64,
) -> Result<Vec<Point>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_inhom_poisson_rng(rate, region, bound, &mut rng)
}

/// In-window events with lineage, plus untruncated cluster statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub events: EventSequence,
    /// 0 for background events.
    pub generation: Vec<usize>,
    /// Index into `events` of each event's parent.
    pub parent: Vec<Option<usize>>,
    /// Size of the branching process before window truncation.
    pub cluster_size: usize,
    /// Children produced by all (in- and out-of-window) events.
    pub total_offspring: usize,
    pub n_generations: usize,
}

/// Cluster simulation. Every event (inside the window or not) spawns
/// offspring over the full support; only events whose whole ancestry lies
/// inside the window are reported, which is the same as discarding
/// out-of-window offspring together with their descendants.
pub fn simulate_hawkes(truth: &GroundTruth, seed: u64) -> Result<SimulationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = &truth.window;
    let domain = w.domain();
    let support = w.support();
    let immigrants = simulate_inhom_poisson_rng(truth.mu.as_ref(), &domain, truth.mu_bound, &mut rng)?;

    // (point, generation, parent in `all`, visible)
    let mut all: Vec<(Point, usize, Option<usize>, bool)> =
        immigrants.into_iter().map(|p| (p, 0, None, true)).collect();
    let mut frontier: Vec<usize> = (0..all.len()).collect();
    let mut generation = 0;
    let mut total_offspring = 0;
    while !frontier.is_empty() {
        generation += 1;
        if generation > MAX_GENERATIONS {
            return Err(Error::ExplosionGuard(MAX_GENERATIONS));
        }
        let mut next = Vec::new();
        for &pi in &frontier {
            let (parent, _, _, visible) = all[pi];
            let lags = simulate_inhom_poisson_rng(truth.phi.as_ref(), &support, truth.phi_bound, &mut rng)?;
            total_offspring += lags.len();
            for l in lags {
                let c = [parent[0] + l[0], parent[1] + l[1], parent[2] + l[2]];
                all.push((c, generation, Some(pi), visible && domain.contains(&c)));
                next.push(all.len() - 1);
            }
            if all.len() > MAX_EVENTS {
                return Err(Error::ExplosionGuard(generation));
            }
        }
        frontier = next;
    }

    let mut visible: Vec<usize> = (0..all.len()).filter(|&i| all[i].3).collect();
    visible.sort_by(|&a, &b| all[a].0[0].total_cmp(&all[b].0[0]).then(a.cmp(&b)));
    let mut new_index = vec![usize::MAX; all.len()];
    for (k, &i) in visible.iter().enumerate() {
        new_index[i] = k;
    }
    let events: Vec<Point> = visible.iter().map(|&i| all[i].0).collect();
    let generation_labels: Vec<usize> = visible.iter().map(|&i| all[i].1).collect();
    let parent: Vec<Option<usize>> = visible.iter().map(|&i| all[i].2.map(|p| new_index[p])).collect();
    Ok(SimulationReport {
        events: EventSequence { events },
        generation: generation_labels,
        parent,
        cluster_size: all.len(),
        total_offspring,
        n_generations: generation,
    })
}

/// Metadata written next to a simulated events CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationSidecar {
    pub schema_version: u32,
    pub scenario: Option<u8>,
    pub seed: u64,
    pub window: SpatioTemporalWindow,
    pub mu_norm: f64,
    pub phi_norm: f64,
    pub expected_total_events: f64,
    pub n_events: usize,
    pub cluster_size: usize,
    pub total_offspring: usize,
    pub generation: Vec<usize>,
    pub parent: Vec<Option<usize>>,
}

impl SimulationSidecar {
    pub fn new(truth: &GroundTruth, report: &SimulationReport, seed: u64) -> Result<Self> {
        let (mu_norm, phi_norm) = truth.norms([PROBE; 3])?;
        Ok(Self {
            schema_version: crate::vi::SCHEMA_VERSION,
            scenario: truth.scenario,
            seed,
            window: truth.window,
            mu_norm,
            phi_norm,
            expected_total_events: crate::hawkes_model::expected_total_events(mu_norm, phi_norm)?,
            n_events: report.events.len(),
            cluster_size: report.cluster_size,
            total_offspring: report.total_offspring,
            generation: report.generation.clone(),
            parent: report.parent.clone(),
        })
    }
}
