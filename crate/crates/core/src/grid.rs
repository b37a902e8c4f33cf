//! Regular tensor grids and trapezoidal quadrature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Point;

/// Axis-aligned box `[lo, hi]` in (t, x, y).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub lo: Point,
    pub hi: Point,
}

impl Box3 {
    pub fn new(lo: Point, hi: Point) -> Self {
        Self { lo, hi }
    }

    pub fn extent(&self, d: usize) -> f64 {
        (self.hi[d] - self.lo[d]).max(0.0)
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|d| self.extent(d)).product()
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|d| p[d] >= self.lo[d] && p[d] <= self.hi[d])
    }
}

/// `n` equidistant nodes spanning `[lo, hi]`; a single node sits at the centre.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => {
            let h = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { hi } else { lo + h * i as f64 })
                .collect()
        }
    }
}

/// Cartesian product of three node vectors, flattened with `y` fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorGrid {
    pub axes: [Vec<f64>; 3],
}

impl TensorGrid {
    pub fn new(axes: [Vec<f64>; 3]) -> Self {
        Self { axes }
    }

    pub fn equidistant(domain: &Box3, counts: [usize; 3]) -> Self {
        Self {
            axes: [0, 1, 2].map(|d| linspace(domain.lo[d], domain.hi[d], counts[d])),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.axes[0].len(), self.axes[1].len(), self.axes[2].len()]
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat_index(&self, i: usize, j: usize, k: usize) -> usize {
        let [_, n1, n2] = self.shape();
        (i * n1 + j) * n2 + k
    }

    pub fn point(&self, flat: usize) -> Point {
        let [_, n1, n2] = self.shape();
        let k = flat % n2;
        let j = (flat / n2) % n1;
        let i = flat / (n1 * n2);
        [self.axes[0][i], self.axes[1][j], self.axes[2][k]]
    }

    pub fn points(&self) -> Vec<Point> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }
}

/// Composite trapezoid weights for (possibly non-uniform) sorted nodes.
pub fn trapezoid_weights(nodes: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    let mut w = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let h = nodes[i + 1] - nodes[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

/// Weights that integrate the piecewise-linear interpolant of node values
/// over `[a, b]`. Over the full node range these are the trapezoid weights.
/// An empty or inverted interval gives zero weights.
pub fn interval_weights(nodes: &[f64], a: f64, b: f64) -> Vec<f64> {
    let n = nodes.len();
    let mut w = vec![0.0; n];
    if n < 2 || !(b > a) {
        return w;
    }
    for i in 0..n - 1 {
        let (x0, x1) = (nodes[i], nodes[i + 1]);
        let c = a.max(x0);
        let d = b.min(x1);
        if d <= c {
            continue;
        }
        let h = x1 - x0;
        w[i] += ((x1 - c).powi(2) - (x1 - d).powi(2)) / (2.0 * h);
        w[i + 1] += ((d - x0).powi(2) - (c - x0).powi(2)) / (2.0 * h);
    }
    w
}

/// Tensor trapezoid rule over a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub domain: Box3,
    pub grid: TensorGrid,
    pub weights: [Vec<f64>; 3],
}

impl QuadratureGrid {
    pub fn new(domain: Box3, counts: [usize; 3]) -> Result<Self> {
        if counts.iter().any(|&c| c < 2) {
            return Err(Error::Domain(format!(
                "quadrature needs at least 2 nodes per dimension (got {counts:?})"
            )));
        }
        if (0..3).any(|d| !(domain.hi[d] > domain.lo[d])) {
            return Err(Error::Domain(format!("degenerate quadrature domain {domain:?}")));
        }
        let grid = TensorGrid::equidistant(&domain, counts);
        let weights = [0, 1, 2].map(|d| trapezoid_weights(&grid.axes[d]));
        Ok(Self { domain, grid, weights })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.grid.shape()
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        outer3(&self.weights[0], &self.weights[1], &self.weights[2])
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        contract3(&self.weights[0], &self.weights[1], &self.weights[2], values)
    }

    /// Per-axis weights for integrating the multilinear interpolant over a
    /// sub-box (clamped to the grid domain).
    pub fn clipped_weights(&self, sub: &Box3) -> [Vec<f64>; 3] {
        [0, 1, 2].map(|d| interval_weights(&self.grid.axes[d], sub.lo[d], sub.hi[d]))
    }

    /// Per-time-node integral over space divided by the spatial area.
    pub fn spatial_average(&self, values: &[f64]) -> Vec<f64> {
        let [nt, nx, ny] = self.shape();
        let area = self.domain.extent(1) * self.domain.extent(2);
        (0..nt)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..nx {
                    let row = &values[(i * nx + j) * ny..(i * nx + j + 1) * ny];
                    let inner: f64 = row.iter().zip(&self.weights[2]).map(|(v, w)| v * w).sum();
                    s += self.weights[1][j] * inner;
                }
                s / area
            })
            .collect()
    }
}

pub(crate) fn outer3(a: &[f64], b: &[f64], c: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len() * c.len());
    for &x in a {
        for &y in b {
            let xy = x * y;
            out.extend(c.iter().map(|&z| xy * z));
        }
    }
    out
}

pub(crate) fn contract3(a: &[f64], b: &[f64], c: &[f64], values: &[f64]) -> f64 {
    let (nb, nc) = (b.len(), c.len());
    let mut total = 0.0;
    for (i, &wa) in a.iter().enumerate() {
        if wa == 0.0 {
            continue;
        }
        let mut s = 0.0;
        for (j, &wb) in b.iter().enumerate() {
            if wb == 0.0 {
                continue;
            }
            let row = &values[(i * nb + j) * nc..(i * nb + j + 1) * nc];
            s += wb * row.iter().zip(c).map(|(v, w)| v * w).sum::<f64>();
        }
        total += wa * s;
    }
    total
}
