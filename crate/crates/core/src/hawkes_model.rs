//! Conditional intensity, finite-support likelihood and related quantities.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{interval_weights, Box3, QuadratureGrid};
use crate::kernels::Point;
use crate::sparse_gp::TargetSet;

/// Observation window `[0,T]×[0,X]×[0,Y]` and trigger support
/// `[0,T_φ]×[−X_φ,X_φ]×[−Y_φ,Y_φ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatioTemporalWindow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub t_phi: f64,
    pub x_phi: f64,
    pub y_phi: f64,
}

impl SpatioTemporalWindow {
    pub fn new(t: f64, x: f64, y: f64, t_phi: f64, x_phi: f64, y_phi: f64) -> Result<Self> {
        let w = Self {
            t,
            x,
            y,
            t_phi,
            x_phi,
            y_phi,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.t, self.x, self.y, self.t_phi, self.x_phi, self.y_phi];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Domain(format!("window extents must be positive: {self:?}")));
        }
        if self.t_phi > self.t || self.x_phi > self.x || self.y_phi > self.y {
            return Err(Error::Domain(format!(
                "trigger support must not exceed the window: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn domain(&self) -> Box3 {
        Box3::new([0.0; 3], [self.t, self.x, self.y])
    }

    pub fn support(&self) -> Box3 {
        Box3::new([0.0, -self.x_phi, -self.y_phi], [self.t_phi, self.x_phi, self.y_phi])
    }

    pub fn volume(&self) -> f64 {
        self.t * self.x * self.y
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.domain().contains(p)
    }

    /// Whether a lag lies in the support with strictly positive time lag.
    pub fn in_support(&self, lag: &Point) -> bool {
        lag[0] > 0.0 && lag[0] <= self.t_phi && lag[1].abs() <= self.x_phi && lag[2].abs() <= self.y_phi
    }
}

/// Time-ordered events inside a window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub events: Vec<Point>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    t: f64,
    x: f64,
    y: f64,
}

impl EventSequence {
    /// Sorts by time and perturbs tied timestamps forward by `1e-9·T`.
    pub fn new(mut events: Vec<Point>, window: &SpatioTemporalWindow) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("event {i} has non-finite coordinates")));
            }
            if !window.contains(e) {
                return Err(Error::Domain(format!("event {i} at {e:?} lies outside the window")));
            }
        }
        events.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let eps = 1e-9 * window.t;
        let mut ties = 0;
        for i in 1..events.len() {
            if events[i][0] <= events[i - 1][0] {
                events[i][0] = events[i - 1][0] + eps;
                ties += 1;
            }
        }
        if ties > 0 {
            warn!("perturbed {ties} tied timestamps by {eps:e}");
        }
        Ok(Self { events })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn read_csv(path: &Path, window: &SpatioTemporalWindow) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.iter().map(str::trim).collect::<Vec<_>>() != ["t", "x", "y"] {
            return Err(Error::Domain(format!(
                "{}: expected header `t,x,y`, found `{}`",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut events = Vec::new();
        for row in rdr.deserialize() {
            let r: CsvRow = row?;
            events.push([r.t, r.x, r.y]);
        }
        Self::new(events, window)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_points_csv(path, &self.events)
    }
}

pub fn write_points_csv(path: &Path, points: &[Point]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(CsvRow {
            t: p[0],
            x: p[1],
            y: p[2],
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LinkFunction {
    Softplus,
    Exp,
    Sigmoid { scale: f64 },
}

impl LinkFunction {
    pub fn apply(&self, v: f64) -> f64 {
        match *self {
            LinkFunction::Softplus => softplus(v),
            LinkFunction::Exp => v.exp(),
            LinkFunction::Sigmoid { scale } => scale * logistic(v),
        }
    }

    pub fn derivative(&self, v: f64) -> f64 {
        match *self {
            LinkFunction::Softplus => logistic(v),
            LinkFunction::Exp => v.exp(),
            LinkFunction::Sigmoid { scale } => {
                let s = logistic(v);
                scale * s * (1.0 - s)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LinkFunction::Softplus => "softplus",
            LinkFunction::Exp => "exp",
            LinkFunction::Sigmoid { .. } => "sigmoid",
        }
    }

    /// Sigmoid with scale ten times the crude event density.
    pub fn default_sigmoid(n_events: usize, window: &SpatioTemporalWindow) -> Self {
        let density = (n_events.max(1) as f64) / window.volume();
        LinkFunction::Sigmoid { scale: 10.0 * density }
    }
}

pub fn apply_link(link: LinkFunction, v: f64) -> f64 {
    link.apply(v)
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `μ(q) + Σ φ(q − h)` over past events whose lag lies in the support.
pub fn intensity_at(
    mu: f64,
    phi: impl Fn(&Point) -> f64,
    history: &[Point],
    q: &Point,
    window: &SpatioTemporalWindow,
) -> f64 {
    let mut total = mu;
    for h in history {
        let lag = [q[0] - h[0], q[1] - h[1], q[2] - h[2]];
        if window.in_support(&lag) {
            total += phi(&lag);
        }
    }
    total
}

/// Lag box over which an event's offspring can be observed inside the window.
/// Empty intervals collapse to zero width.
pub fn compensator_trigger_clip(event: &Point, window: &SpatioTemporalWindow) -> Box3 {
    let ext = [window.t, window.x, window.y];
    let lo = [0.0, (-window.x_phi).max(-event[1]), (-window.y_phi).max(-event[2])];
    let hi = [
        window.t_phi.min(window.t - event[0]),
        window.x_phi.min(ext[1] - event[1]),
        window.y_phi.min(ext[2] - event[2]),
    ];
    let hi = [0, 1, 2].map(|d| hi[d].max(lo[d]));
    Box3::new(lo, hi)
}

/// Latent rates (post-link) at every location the likelihood touches.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityValues {
    pub mu_grid: Vec<f64>,
    pub mu_events: Vec<f64>,
    pub phi_grid: Vec<f64>,
    pub phi_pairs: Vec<f64>,
}

/// Precomputed geometry of the log-likelihood for one event sequence.
#[derive(Debug, Clone)]
pub struct LikelihoodLayout {
    pub window: SpatioTemporalWindow,
    pub events: EventSequence,
    pub mu_grid: QuadratureGrid,
    pub phi_grid: QuadratureGrid,
    pub mu_weights: Vec<f64>,
    /// Sum over events of the clipped-support quadrature weights.
    pub phi_weights: Vec<f64>,
    /// `(target, source)` event indices with the lag inside the support.
    pub pairs: Vec<(usize, usize)>,
    pub lags: Vec<Point>,
}

impl LikelihoodLayout {
    pub fn new(
        window: SpatioTemporalWindow,
        events: EventSequence,
        mu_counts: [usize; 3],
        phi_counts: [usize; 3],
    ) -> Result<Self> {
        window.validate()?;
        let mu_grid = QuadratureGrid::new(window.domain(), mu_counts)?;
        let phi_grid = QuadratureGrid::new(window.support(), phi_counts)?;
        let mu_weights = mu_grid.flat_weights();

        let mut phi_weights = vec![0.0; phi_grid.len()];
        let [_, nx, ny] = phi_grid.shape();
        for e in &events.events {
            let clip = compensator_trigger_clip(e, &window);
            let w = [0, 1, 2].map(|d| interval_weights(&phi_grid.grid.axes[d], clip.lo[d], clip.hi[d]));
            for (i, wt) in w[0].iter().enumerate() {
                if *wt == 0.0 {
                    continue;
                }
                for (j, wx) in w[1].iter().enumerate() {
                    let a = wt * wx;
                    if a == 0.0 {
                        continue;
                    }
                    let row = &mut phi_weights[(i * nx + j) * ny..(i * nx + j + 1) * ny];
                    for (r, wy) in row.iter_mut().zip(&w[2]) {
                        *r += a * wy;
                    }
                }
            }
        }

        let ev = &events.events;
        let mut pairs = Vec::new();
        let mut lags = Vec::new();
        for i in 0..ev.len() {
            for j in (0..i).rev() {
                let lag = [ev[i][0] - ev[j][0], ev[i][1] - ev[j][1], ev[i][2] - ev[j][2]];
                if lag[0] > window.t_phi {
                    break;
                }
                if window.in_support(&lag) {
                    pairs.push((i, j));
                    lags.push(lag);
                }
            }
        }

        Ok(Self {
            window,
            events,
            mu_grid,
            phi_grid,
            mu_weights,
            phi_weights,
            pairs,
            lags,
        })
    }

    pub fn n_events(&self) -> usize {
        self.events.len()
    }

    /// Quadrature nodes followed by event locations.
    pub fn mu_targets(&self) -> TargetSet {
        TargetSet {
            grid: Some(self.mu_grid.grid.clone()),
            points: self.events.events.clone(),
        }
    }

    /// Quadrature nodes followed by pair lags.
    pub fn phi_targets(&self) -> TargetSet {
        TargetSet {
            grid: Some(self.phi_grid.grid.clone()),
            points: self.lags.clone(),
        }
    }

    /// Split latent rates laid out as in `mu_targets`/`phi_targets`.
    pub fn split(&self, mu: &[f64], phi: &[f64]) -> IntensityValues {
        let nm = self.mu_grid.len();
        let np = self.phi_grid.len();
        IntensityValues {
            mu_grid: mu[..nm].to_vec(),
            mu_events: mu[nm..].to_vec(),
            phi_grid: phi[..np].to_vec(),
            phi_pairs: phi[np..].to_vec(),
        }
    }

    /// Intensity at each event.
    pub fn event_intensities(&self, v: &IntensityValues) -> Vec<f64> {
        let mut lam = v.mu_events.clone();
        for (k, &(i, _)) in self.pairs.iter().enumerate() {
            lam[i] += v.phi_pairs[k];
        }
        lam
    }

    pub fn compensator(&self, v: &IntensityValues) -> f64 {
        dot(&self.mu_weights, &v.mu_grid) + dot(&self.phi_weights, &v.phi_grid)
    }

    /// `Σ ln λ_i − ∫μ − Σ_i ∫_{clip_i} φ`; `−∞` when any `λ_i ≤ 0`.
    pub fn log_likelihood(&self, v: &IntensityValues) -> f64 {
        let lam = self.event_intensities(v);
        let mut s = 0.0;
        for l in &lam {
            if !(*l > 0.0) {
                return f64::NEG_INFINITY;
            }
            s += l.ln();
        }
        s - self.compensator(v)
    }

    /// Log-likelihood and its gradient with respect to every rate.
    pub fn log_likelihood_grad(&self, v: &IntensityValues) -> (f64, IntensityValues) {
        let lam = self.event_intensities(v);
        let ll = self.log_likelihood(v);
        let inv: Vec<f64> = lam.iter().map(|l| 1.0 / l).collect();
        let grad = IntensityValues {
            mu_grid: self.mu_weights.iter().map(|w| -w).collect(),
            mu_events: inv.clone(),
            phi_grid: self.phi_weights.iter().map(|w| -w).collect(),
            phi_pairs: self.pairs.iter().map(|&(i, _)| inv[i]).collect(),
        };
        (ll, grad)
    }
}

/// Joint log-likelihood of independent sequences.
pub fn joint_log_likelihood(parts: &[(&LikelihoodLayout, &IntensityValues)]) -> f64 {
    parts.iter().map(|(l, v)| l.log_likelihood(v)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trapezoid integrals of μ over the window and φ over the support.
pub fn l1_norms(mu_grid_values: &[f64], phi_grid_values: &[f64], layout: &LikelihoodLayout) -> (f64, f64) {
    (
        layout.mu_grid.integrate(mu_grid_values),
        layout.phi_grid.integrate(phi_grid_values),
    )
}

/// `‖μ‖₁ / (1 − ‖φ‖₁)`.
pub fn expected_total_events(mu_norm: f64, phi_norm: f64) -> Result<f64> {
    if !(phi_norm < 1.0) {
        return Err(Error::Instability(phi_norm));
    }
    if phi_norm < 0.0 || mu_norm < 0.0 {
        return Err(Error::Domain("norms must be nonnegative".into()));
    }
    Ok(mu_norm / (1.0 - phi_norm))
}

/// Spatial average per time node (or time lag) of a field on a grid.
pub fn spatial_average(field: &[f64], grid: &QuadratureGrid) -> Vec<f64> {
    grid.spatial_average(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_window() -> SpatioTemporalWindow {
        SpatioTemporalWindow::new(10.0, 10.0, 10.0, 0.5, 0.3, 0.3).unwrap()
    }

    #[test]
    fn link_examples() {
        assert_relative_eq!(apply_link(LinkFunction::Softplus, 0.0), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(apply_link(LinkFunction::Exp, 0.0), 1.0);
        assert_eq!(apply_link(LinkFunction::Sigmoid { scale: 10.0 }, 0.0), 5.0);
    }

    #[test]
    fn links_stable_at_extremes() {
        for link in [
            LinkFunction::Softplus,
            LinkFunction::Exp,
            LinkFunction::Sigmoid { scale: 3.0 },
        ] {
            for v in [-700.0, -50.0, 50.0, 700.0] {
                let y = link.apply(v);
                assert!(y.is_finite() && y >= 0.0, "{link:?} at {v} gave {y}");
                assert!(link.derivative(v).is_finite());
            }
        }
        assert_relative_eq!(softplus(700.0), 700.0);
    }

    #[test]
    fn link_derivatives_match_fd() {
        for link in [
            LinkFunction::Softplus,
            LinkFunction::Exp,
            LinkFunction::Sigmoid { scale: 3.0 },
        ] {
            for v in [-3.0, -0.2, 0.0, 1.4, 4.0] {
                let h = 1e-6;
                let fd = (link.apply(v + h) - link.apply(v - h)) / (2.0 * h);
                assert_relative_eq!(link.derivative(v), fd, max_relative = 1e-7);
            }
        }
    }

    #[test]
    fn window_validation() {
        assert!(SpatioTemporalWindow::new(1.0, 1.0, 1.0, 2.0, 0.1, 0.1).is_err());
        assert!(SpatioTemporalWindow::new(1.0, 0.0, 1.0, 0.5, 0.1, 0.1).is_err());
    }

    #[test]
    fn ties_are_perturbed_and_sorted() {
        let w = unit_window();
        let s = EventSequence::new(vec![[2.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 2.0, 2.0]], &w).unwrap();
        assert!(s.events.windows(2).all(|p| p[1][0] > p[0][0]));
        assert_relative_eq!(s.events[1][0], 1.0 + 1e-8, epsilon = 1e-15);
        assert!(EventSequence::new(vec![[11.0, 1.0, 1.0]], &w).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let w = unit_window();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ev.csv");
        let s = EventSequence::new(vec![[0.5, 1.25, 9.0], [3.0, 0.0, 10.0]], &w).unwrap();
        s.write_csv(&path).unwrap();
        let r = EventSequence::read_csv(&path, &w).unwrap();
        assert_eq!(s, r);
    }

    #[test]
    fn intensity_examples() {
        let w = unit_window();
        let phi = |_: &Point| 0.7;
        let q = [5.0, 5.0, 5.0];
        assert_eq!(intensity_at(2.0, phi, &[], &q, &w), 2.0);
        let outside = [[5.0 - 0.5 - 1e-9, 5.0, 5.0]];
        assert_eq!(intensity_at(2.0, phi, &outside, &q, &w), 2.0);
        let hist = [[4.8, 5.1, 4.9], [4.9, 5.0, 5.2], [1.0, 5.0, 5.0]];
        let brute: f64 = 2.0
            + hist
                .iter()
                .filter(|h| {
                    let lag = [q[0] - h[0], q[1] - h[1], q[2] - h[2]];
                    lag[0] > 0.0 && lag[0] <= 0.5 && lag[1].abs() <= 0.3 && lag[2].abs() <= 0.3
                })
                .map(|_| 0.7)
                .sum::<f64>();
        assert_relative_eq!(intensity_at(2.0, phi, &hist, &q, &w), brute);
        assert_relative_eq!(brute, 3.4);
    }

    #[test]
    fn clip_examples() {
        let w = unit_window();
        let b = compensator_trigger_clip(&[10.0, 5.0, 5.0], &w);
        assert_eq!((b.lo[0], b.hi[0]), (0.0, 0.0));
        let b = compensator_trigger_clip(&[5.0, 5.0, 5.0], &w);
        assert_eq!(b, w.support());
        let b = compensator_trigger_clip(&[5.0, 0.0, 5.0], &w);
        assert_eq!(b.lo[1], 0.0);
        assert_eq!(b.hi[1], 0.3);
    }

    fn const_values(layout: &LikelihoodLayout, mu: f64, phi: f64) -> IntensityValues {
        IntensityValues {
            mu_grid: vec![mu; layout.mu_grid.len()],
            mu_events: vec![mu; layout.n_events()],
            phi_grid: vec![phi; layout.phi_grid.len()],
            phi_pairs: vec![phi; layout.pairs.len()],
        }
    }

    #[test]
    fn pure_compensator_and_homogeneous_poisson() {
        let w = unit_window();
        let empty = LikelihoodLayout::new(w, EventSequence::default(), [5, 5, 5], [4, 4, 4]).unwrap();
        assert_relative_eq!(
            empty.log_likelihood(&const_values(&empty, 1.0, 0.0)),
            -1000.0,
            epsilon = 1e-9
        );

        let ev = EventSequence::new(vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]], &w).unwrap();
        let l = LikelihoodLayout::new(w, ev, [5, 5, 5], [4, 4, 4]).unwrap();
        let c = 0.37;
        assert_relative_eq!(
            l.log_likelihood(&const_values(&l, c, 0.0)),
            3.0 * c.ln() - c * 1000.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn nonpositive_intensity_is_sentinel() {
        let w = unit_window();
        let ev = EventSequence::new(vec![[1.0, 2.0, 3.0]], &w).unwrap();
        let l = LikelihoodLayout::new(w, ev, [3, 3, 3], [3, 3, 3]).unwrap();
        assert_eq!(l.log_likelihood(&const_values(&l, 0.0, 0.0)), f64::NEG_INFINITY);
    }

    /// Multilinear fields are reproduced exactly by the trapezoid/interval
    /// weights, so the truncated likelihood must match a closed form that
    /// integrates φ over the raw window with an explicit support indicator.
    #[test]
    fn truncated_matches_untruncated_for_multilinear_fields() {
        let w = SpatioTemporalWindow::new(2.0, 1.0, 1.5, 2.0, 1.0, 1.5).unwrap();
        let ev = EventSequence::new(
            vec![
                [0.1, 0.2, 0.3],
                [0.5, 0.9, 1.2],
                [0.8, 0.4, 0.1],
                [1.3, 0.6, 0.7],
                [1.9, 0.05, 1.4],
            ],
            &w,
        )
        .unwrap();
        let mu = |p: &Point| 1.0 + 0.3 * p[0] + 0.2 * p[1] * p[2] + 0.1 * p[0] * p[1];
        let phi = |l: &Point| (0.5 - 0.1 * l[0]) * (1.2 + 0.2 * l[1]) * (1.1 - 0.3 * l[2]);
        let l = LikelihoodLayout::new(w, ev.clone(), [3, 4, 5], [5, 3, 4]).unwrap();
        let vals = IntensityValues {
            mu_grid: l.mu_grid.grid.points().iter().map(mu).collect(),
            mu_events: ev.events.iter().map(mu).collect(),
            phi_grid: l.phi_grid.grid.points().iter().map(phi).collect(),
            phi_pairs: l.lags.iter().map(phi).collect(),
        };
        let got = l.log_likelihood(&vals);

        // Closed forms.
        let e = &ev.events;
        let mut want = 0.0;
        for i in 0..e.len() {
            let mut lam = mu(&e[i]);
            for j in 0..i {
                lam += phi(&[e[i][0] - e[j][0], e[i][1] - e[j][1], e[i][2] - e[j][2]]);
            }
            want += lam.ln();
        }
        let (t, x, y) = (2.0f64, 1.0f64, 1.5f64);
        want -= t * x * y
            + 0.3 * t * t / 2.0 * x * y
            + 0.2 * t * (x * x / 2.0) * (y * y / 2.0)
            + 0.1 * (t * t / 2.0) * (x * x / 2.0) * y;
        let lin = |a: f64, b: f64, c0: f64, c1: f64| c0 * (b - a) + c1 * (b * b - a * a) / 2.0;
        for ei in e {
            want -=
                lin(0.0, t - ei[0], 0.5, -0.1) * lin(-ei[1], x - ei[1], 1.2, 0.2) * lin(-ei[2], y - ei[2], 1.1, -0.3);
        }
        assert_relative_eq!(got, want, max_relative = 1e-10);
    }

    #[test]
    fn gradient_matches_fd() {
        let w = unit_window();
        let ev = EventSequence::new(vec![[1.0, 2.0, 3.0], [1.2, 2.1, 3.1], [1.3, 2.0, 2.9]], &w).unwrap();
        let l = LikelihoodLayout::new(w, ev, [3, 3, 3], [3, 3, 3]).unwrap();
        assert_eq!(l.pairs.len(), 3);
        let v = const_values(&l, 0.8, 0.4);
        let (_, g) = l.log_likelihood_grad(&v);
        let h = 1e-6;
        let mut p = v.clone();
        p.phi_pairs[1] += h;
        let mut m = v.clone();
        m.phi_pairs[1] -= h;
        let fd = (l.log_likelihood(&p) - l.log_likelihood(&m)) / (2.0 * h);
        assert_relative_eq!(g.phi_pairs[1], fd, max_relative = 1e-6);
        let mut p = v.clone();
        p.mu_grid[4] += h;
        assert_relative_eq!(
            g.mu_grid[4],
            (l.log_likelihood(&p) - l.log_likelihood(&v)) / h,
            max_relative = 1e-5
        );
    }

    #[test]
    fn joint_is_sum() {
        let w = unit_window();
        let a = LikelihoodLayout::new(
            w,
            EventSequence::new(vec![[1.0, 2.0, 3.0]], &w).unwrap(),
            [3; 3],
            [3; 3],
        )
        .unwrap();
        let b = LikelihoodLayout::new(
            w,
            EventSequence::new(vec![[4.0, 2.0, 3.0], [4.1, 2.0, 3.0]], &w).unwrap(),
            [3; 3],
            [3; 3],
        )
        .unwrap();
        let va = const_values(&a, 0.3, 0.2);
        let vb = const_values(&b, 0.3, 0.2);
        assert_relative_eq!(
            joint_log_likelihood(&[(&a, &va), (&b, &vb)]),
            a.log_likelihood(&va) + b.log_likelihood(&vb)
        );
    }

    #[test]
    fn norms_and_expected_events() {
        let w = unit_window();
        let l = LikelihoodLayout::new(w, EventSequence::default(), [6, 6, 6], [5, 5, 5]).unwrap();
        let v = const_values(&l, 4.5, 0.0);
        let (m, p) = l1_norms(&v.mu_grid, &v.phi_grid, &l);
        assert_relative_eq!(m, 4500.0, max_relative = 1e-12);
        assert_eq!(p, 0.0);
        assert_relative_eq!(expected_total_events(100.0, 0.5).unwrap(), 200.0);
        assert_eq!(expected_total_events(42.0, 0.0).unwrap(), 42.0);
        assert_relative_eq!(
            expected_total_events(1398.0, 0.324).unwrap(),
            2068.05,
            max_relative = 1e-5
        );
        assert!(matches!(expected_total_events(1.0, 1.0), Err(Error::Instability(_))));
    }

    #[test]
    fn spatial_average_of_time_profile() {
        let g = QuadratureGrid::new(Box3::new([0.0, -0.3, -0.3], [0.5, 0.3, 0.3]), [6, 5, 5]).unwrap();
        let vals: Vec<f64> = g.grid.points().iter().map(|p| 2.0 + p[0]).collect();
        for (a, t) in spatial_average(&vals, &g).iter().zip(&g.grid.axes[0]) {
            assert_relative_eq!(*a, 2.0 + t, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn intensity_nonnegative(v in -50.0..50.0f64, lags in proptest::collection::vec((0.0..0.6f64, -0.4..0.4f64, -0.4..0.4f64), 0..6)) {
            let w = unit_window();
            let q = [5.0, 5.0, 5.0];
            let hist: Vec<Point> = lags.iter().map(|(a, b, c)| [q[0] - a, q[1] - b, q[2] - c]).collect();
            for link in [LinkFunction::Softplus, LinkFunction::Exp, LinkFunction::Sigmoid { scale: 2.0 }] {
                let lam = intensity_at(link.apply(v), |l| link.apply(v - l[0]), &hist, &q, &w);
                prop_assert!(lam >= 0.0);
            }
        }

        #[test]
        fn support_truncation_removes_exactly_one_term(dx in -0.29..0.29f64, dy in -0.29..0.29f64, dt in 0.01..0.49f64) {
            let w = unit_window();
            let q = [5.0, 5.0, 5.0];
            let phi = |l: &Point| 1.0 + l[0] + l[1] * l[1];
            let other = [4.9, 5.1, 4.95];
            let inside = [q[0] - dt, q[1] - dx, q[2] - dy];
            let moved = [q[0] - 0.5 - 1e-7, q[1] - dx, q[2] - dy];
            let a = intensity_at(1.0, phi, &[other, inside], &q, &w);
            let b = intensity_at(1.0, phi, &[other, moved], &q, &w);
            prop_assert!((a - b - phi(&[dt, dx, dy])).abs() < 1e-12);
        }
    }
}
