//! Inducing-point representation of a latent GP.
//!
//! Inducing locations sit on an equidistant tensor grid. Latent values at
//! target locations are the DTC projection `K_TZ K_ZZ⁻¹ u`. Targets are a
//! tensor grid (quadrature nodes) followed by scattered points (events or
//! event-pair lags); grid targets are handled with per-factor Kronecker
//! products so the full `K_TZ` is never formed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Box3, TensorGrid};
use crate::kernels::{cholesky_with_jitter, eval_with_log_grad, Factor, FactorKind, Family, KernelSpec, Point, Term};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingGrid {
    pub domain: Box3,
    pub counts: [usize; 3],
    pub grid: TensorGrid,
}

impl InducingGrid {
    pub fn new(domain: Box3, counts: [usize; 3]) -> Result<Self> {
        if counts.contains(&0) {
            return Err(Error::Domain(format!("inducing counts must be positive: {counts:?}")));
        }
        Ok(Self {
            domain,
            counts,
            grid: TensorGrid::equidistant(&domain, counts),
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn points(&self) -> Vec<Point> {
        self.grid.points()
    }
}

/// `q(u) = N(mean, factor factorᵀ)` with `factor` lower triangular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingPosterior {
    pub mean: DVector<f64>,
    pub factor: DMatrix<f64>,
}

impl InducingPosterior {
    pub fn new(mean: DVector<f64>, factor: DMatrix<f64>) -> Result<Self> {
        let m = mean.len();
        if factor.nrows() != m || factor.ncols() != m {
            return Err(Error::Domain(format!(
                "factor must be {m}x{m}, got {}x{}",
                factor.nrows(),
                factor.ncols()
            )));
        }
        for i in 0..m {
            if !(factor[(i, i)] > 0.0) {
                return Err(Error::Domain(format!(
                    "posterior factor diagonal must be positive (entry {i} = {})",
                    factor[(i, i)]
                )));
            }
            for j in i + 1..m {
                if factor[(i, j)] != 0.0 {
                    return Err(Error::Domain("posterior factor must be lower triangular".into()));
                }
            }
        }
        Ok(Self { mean, factor })
    }

    pub fn isotropic(m: usize, scale: f64) -> Self {
        Self {
            mean: DVector::zeros(m),
            factor: DMatrix::identity(m, m) * scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    pub fn sample(&self, draw: &DVector<f64>) -> DVector<f64> {
        &self.mean + &self.factor * draw
    }
}

/// Tensor-grid nodes followed by scattered points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TargetSet {
    pub grid: Option<TensorGrid>,
    pub points: Vec<Point>,
}

impl TargetSet {
    pub fn from_points(points: Vec<Point>) -> Self {
        Self { grid: None, points }
    }

    pub fn from_grid(grid: TensorGrid) -> Self {
        Self {
            grid: Some(grid),
            points: Vec::new(),
        }
    }

    pub fn n_grid(&self) -> usize {
        self.grid.as_ref().map_or(0, |g| g.len())
    }

    pub fn len(&self) -> usize {
        self.n_grid() + self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_points(&self) -> Vec<Point> {
        let mut out = self.grid.as_ref().map(|g| g.points()).unwrap_or_default();
        out.extend_from_slice(&self.points);
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseGpBlock {
    pub kernel: KernelSpec,
    pub grid: InducingGrid,
    pub posterior: InducingPosterior,
    #[serde(skip)]
    pub targets: TargetSet,
}

impl SparseGpBlock {
    pub fn new(
        kernel: KernelSpec,
        grid: InducingGrid,
        posterior: InducingPosterior,
        targets: TargetSet,
    ) -> Result<Self> {
        if posterior.dim() != grid.len() {
            return Err(Error::Domain(format!(
                "posterior dimension {} does not match {} inducing points",
                posterior.dim(),
                grid.len()
            )));
        }
        Ok(Self {
            kernel,
            grid,
            posterior,
            targets,
        })
    }
}

/// Inducing Gram matrix and its Cholesky factor for one hyperparameter value.
pub struct InducingSystem {
    pub(crate) family: Family,
    pub(crate) terms: Vec<Term>,
    pub(crate) params: Vec<f64>,
    pub(crate) grid: TensorGrid,
    pub kzz: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
    /// Nugget added to coincident points (the inducing diagonal included).
    pub jitter: f64,
}

impl InducingSystem {
    pub fn new(kernel: &KernelSpec, grid: &InducingGrid) -> Result<Self> {
        let pts = grid.points();
        let family = kernel.family;
        let terms = kernel.terms();
        let params = kernel.params();
        let m = pts.len();
        let kzz = DMatrix::from_fn(m, m, |i, j| {
            terms.iter().map(|t| t.eval(family, &params, &pts[i], &pts[j])).sum()
        });
        let (chol, jitter) = cholesky_with_jitter(&kzz)?;
        Ok(Self {
            family,
            terms,
            params,
            grid: grid.grid.clone(),
            kzz,
            chol,
            jitter,
        })
    }

    pub fn m(&self) -> usize {
        self.kzz.nrows()
    }

    /// `K_ZZ` including the jitter nugget.
    pub fn kzz_jittered(&self) -> DMatrix<f64> {
        let mut k = self.kzz.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += self.jitter;
        }
        k
    }

    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// `∂K_ZZ / ∂ log θ_p` for every hyperparameter (jitter held fixed).
    pub fn kzz_log_grads(&self) -> Vec<DMatrix<f64>> {
        let pts = self.grid.points();
        let m = pts.len();
        let np = self.params.len();
        let mut out = vec![DMatrix::zeros(m, m); np];
        let mut g = vec![0.0; np];
        for i in 0..m {
            for j in 0..=i {
                eval_with_log_grad(self.family, &self.terms, &self.params, &pts[i], &pts[j], &mut g);
                for p in 0..np {
                    out[p][(i, j)] = g[p];
                    out[p][(j, i)] = g[p];
                }
            }
        }
        out
    }

    fn inducing_index(&self, p: &Point) -> Option<usize> {
        let mut idx = [0usize; 3];
        for d in 0..3 {
            idx[d] = self.grid.axes[d].iter().position(|v| *v == p[d])?;
        }
        Some(self.grid.flat_index(idx[0], idx[1], idx[2]))
    }

    /// Dense `K_AB`-style row block between arbitrary points and the inducing
    /// points, nugget included where points coincide.
    pub fn cross_dense(&self, pts: &[Point]) -> DMatrix<f64> {
        let z = self.grid.points();
        let mut k = DMatrix::from_fn(pts.len(), z.len(), |i, j| {
            self.terms
                .iter()
                .map(|t| t.eval(self.family, &self.params, &pts[i], &z[j]))
                .sum()
        });
        for (i, p) in pts.iter().enumerate() {
            if let Some(m) = self.inducing_index(p) {
                k[(i, m)] += self.jitter;
            }
        }
        k
    }

    /// Prior covariance between arbitrary points, nugget on coincident pairs.
    pub fn prior_dense(&self, pts: &[Point]) -> DMatrix<f64> {
        let n = pts.len();
        DMatrix::from_fn(n, n, |i, j| {
            let v: f64 = self
                .terms
                .iter()
                .map(|t| t.eval(self.family, &self.params, &pts[i], &pts[j]))
                .sum();
            if pts[i] == pts[j] {
                v + self.jitter
            } else {
                v
            }
        })
    }
}

/// Dense factor matrix over a contiguous coordinate block, mapping inducing
/// sub-grid values to target sub-grid values.
struct FactorMat {
    start: usize,
    end: usize,
    n_out: usize,
    n_in: usize,
    value: Vec<f64>,
    /// `(parameter index, ∂F/∂ log ℓ)`.
    derivs: Vec<(usize, Vec<f64>)>,
}

struct TermMats {
    variance: usize,
    factors: Vec<FactorMat>,
}

fn sub_points(axes: &[Vec<f64>; 3], start: usize, end: usize) -> Vec<Point> {
    let mut out = vec![[0.0; 3]];
    for d in start..end {
        let mut next = Vec::with_capacity(out.len() * axes[d].len());
        for p in &out {
            for &v in &axes[d] {
                let mut q = *p;
                q[d] = v;
                next.push(q);
            }
        }
        out = next;
    }
    out
}

fn factor_row(
    factor: &Factor,
    family: Family,
    params: &[f64],
    p: &Point,
    zsub: &[Point],
    value: &mut [f64],
    derivs: &mut [Vec<f64>],
) {
    let mut g = [0.0; 3];
    let np = derivs.len();
    for (j, z) in zsub.iter().enumerate() {
        value[j] = factor.eval_with_grad(family, params, p, z, &mut g[..np]);
        for s in 0..np {
            derivs[s][j] = g[s];
        }
    }
}

/// Multiply `mat` (`n_out × n_in`, row-major) along the middle axis of a
/// `(pre, n_in, post)` tensor, or its transpose when `transpose`.
fn mode_apply(
    input: &[f64],
    pre: usize,
    post: usize,
    mat: &[f64],
    n_out: usize,
    n_in: usize,
    transpose: bool,
) -> Vec<f64> {
    let (rows, cols) = if transpose { (n_in, n_out) } else { (n_out, n_in) };
    let mut out = vec![0.0; pre * rows * post];
    for p in 0..pre {
        for o in 0..rows {
            let dst = &mut out[(p * rows + o) * post..(p * rows + o + 1) * post];
            for i in 0..cols {
                let a = if transpose {
                    mat[i * n_in + o]
                } else {
                    mat[o * n_in + i]
                };
                if a == 0.0 {
                    continue;
                }
                let src = &input[(p * cols + i) * post..(p * cols + i + 1) * post];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
    }
    out
}

/// Latent values at a target set for one inducing system.
pub struct Projector<'a> {
    sys: &'a InducingSystem,
    targets: &'a TargetSet,
    grid_terms: Vec<TermMats>,
    grid_coincide: Vec<(usize, usize)>,
    point_coincide: Vec<Option<usize>>,
    zsubs: Vec<Vec<Vec<Point>>>,
    fparams: Vec<Vec<Vec<usize>>>,
}

impl<'a> Projector<'a> {
    pub fn new(sys: &'a InducingSystem, targets: &'a TargetSet) -> Self {
        let zaxes = &sys.grid.axes;
        let zsubs: Vec<Vec<Vec<Point>>> = sys
            .terms
            .iter()
            .map(|t| t.factors.iter().map(|f| sub_points(zaxes, f.start, f.end)).collect())
            .collect();

        let mut grid_terms = Vec::new();
        let mut grid_coincide = Vec::new();
        if let Some(tg) = &targets.grid {
            for (ti, term) in sys.terms.iter().enumerate() {
                let mut factors = Vec::new();
                for (fi, f) in term.factors.iter().enumerate() {
                    let tsub = sub_points(&tg.axes, f.start, f.end);
                    let zsub = &zsubs[ti][fi];
                    let (n_out, n_in) = (tsub.len(), zsub.len());
                    let pidx = f.params();
                    let mut value = vec![0.0; n_out * n_in];
                    let mut derivs: Vec<Vec<f64>> = vec![vec![0.0; n_out * n_in]; pidx.len()];
                    if f.kind == FactorKind::Ones {
                        value.iter_mut().for_each(|v| *v = 1.0);
                    } else {
                        let mut rowd: Vec<Vec<f64>> = vec![vec![0.0; n_in]; pidx.len()];
                        for (o, p) in tsub.iter().enumerate() {
                            factor_row(
                                f,
                                sys.family,
                                &sys.params,
                                p,
                                zsub,
                                &mut value[o * n_in..(o + 1) * n_in],
                                &mut rowd,
                            );
                            for (s, rd) in rowd.iter().enumerate() {
                                derivs[s][o * n_in..(o + 1) * n_in].copy_from_slice(rd);
                            }
                        }
                    }
                    factors.push(FactorMat {
                        start: f.start,
                        end: f.end,
                        n_out,
                        n_in,
                        value,
                        derivs: pidx.into_iter().zip(derivs).collect(),
                    });
                }
                grid_terms.push(TermMats {
                    variance: term.variance,
                    factors,
                });
            }
            // Target nodes that coincide with inducing nodes receive the nugget.
            let maps: Vec<Vec<(usize, usize)>> = (0..3)
                .map(|d| {
                    tg.axes[d]
                        .iter()
                        .enumerate()
                        .filter_map(|(i, v)| zaxes[d].iter().position(|z| z == v).map(|j| (i, j)))
                        .collect()
                })
                .collect();
            for &(a, za) in &maps[0] {
                for &(b, zb) in &maps[1] {
                    for &(c, zc) in &maps[2] {
                        grid_coincide.push((tg.flat_index(a, b, c), sys.grid.flat_index(za, zb, zc)));
                    }
                }
            }
        }
        let point_coincide = targets.points.iter().map(|p| sys.inducing_index(p)).collect();
        Self {
            sys,
            targets,
            grid_terms,
            grid_coincide,
            point_coincide,
            zsubs,
            fparams: sys
                .terms
                .iter()
                .map(|t| t.factors.iter().map(|f| f.params()).collect())
                .collect(),
        }
    }

    fn shapes(&self) -> ([usize; 3], [usize; 3]) {
        let n = self.targets.grid.as_ref().map(|g| g.shape()).unwrap_or([0; 3]);
        (n, self.sys.grid.shape())
    }

    /// Apply one term's Kronecker product, optionally substituting a factor.
    fn grid_term_apply(
        &self,
        term: &TermMats,
        input: &[f64],
        transpose: bool,
        replace: Option<(usize, &[f64])>,
    ) -> Vec<f64> {
        let (n, m) = self.shapes();
        let (src_shape, dst_shape) = if transpose { (n, m) } else { (m, n) };
        let mut cur = input.to_vec();
        for (fi, f) in term.factors.iter().enumerate() {
            let pre: usize = dst_shape[..f.start].iter().product();
            let post: usize = src_shape[f.end..].iter().product();
            let mat = match replace {
                Some((r, m)) if r == fi => m,
                _ => &f.value[..],
            };
            cur = mode_apply(&cur, pre, post, mat, f.n_out, f.n_in, transpose);
        }
        cur
    }

    /// `K_TZ α` over all targets (grid first, then points).
    pub fn project(&self, alpha: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.targets.len()];
        let ng = self.targets.n_grid();
        if ng > 0 {
            for term in &self.grid_terms {
                let coef = self.sys.params[term.variance];
                let v = self.grid_term_apply(term, alpha, false, None);
                for (o, x) in out[..ng].iter_mut().zip(&v) {
                    *o += coef * x;
                }
            }
            for &(t, z) in &self.grid_coincide {
                out[t] += self.sys.jitter * alpha[z];
            }
        }
        let mut scratch = RowScratch::default();
        for (i, p) in self.targets.points.iter().enumerate() {
            let mut v = 0.0;
            for (ti, term) in self.sys.terms.iter().enumerate() {
                scratch.fill(self.sys, term, &self.zsubs[ti], &self.fparams[ti], p, false);
                v += self.sys.params[term.variance] * scratch.value(alpha);
            }
            if let Some(z) = self.point_coincide[i] {
                v += self.sys.jitter * alpha[z];
            }
            out[ng + i] = v;
        }
        out
    }

    /// `(K_ZT g, [gᵀ ∂K_TZ/∂log θ_p α]_p)`.
    pub fn backward(&self, g: &[f64], alpha: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.sys.m();
        let mut kzt_g = vec![0.0; m];
        let mut hyper = vec![0.0; self.sys.n_params()];
        let ng = self.targets.n_grid();
        if ng > 0 {
            let gg = &g[..ng];
            for term in &self.grid_terms {
                let coef = self.sys.params[term.variance];
                let back = self.grid_term_apply(term, gg, true, None);
                for (o, x) in kzt_g.iter_mut().zip(&back) {
                    *o += coef * x;
                }
                // gᵀ (⊗F) α = (K_ZT-term g)ᵀ α
                let base: f64 = back.iter().zip(alpha).map(|(a, b)| a * b).sum();
                hyper[term.variance] += coef * base;
                for (fi, f) in term.factors.iter().enumerate() {
                    for (p, dm) in &f.derivs {
                        let v = self.grid_term_apply(term, gg, true, Some((fi, dm)));
                        let s: f64 = v.iter().zip(alpha).map(|(a, b)| a * b).sum();
                        hyper[*p] += coef * s;
                    }
                }
            }
            for &(t, z) in &self.grid_coincide {
                kzt_g[z] += self.sys.jitter * g[t];
            }
        }
        let mut scratch = RowScratch::default();
        for (i, p) in self.targets.points.iter().enumerate() {
            let gi = g[ng + i];
            if gi == 0.0 {
                continue;
            }
            for (ti, term) in self.sys.terms.iter().enumerate() {
                let w = gi * self.sys.params[term.variance];
                let fparams = &self.fparams[ti];
                scratch.fill(self.sys, term, &self.zsubs[ti], fparams, p, true);
                scratch.expand_into(&mut kzt_g, w);
                hyper[term.variance] += w * scratch.partials(alpha);
                for (fi, ps) in fparams.iter().enumerate() {
                    for (s, &pidx) in ps.iter().enumerate() {
                        hyper[pidx] += w * dot(&scratch.drows[fi][s], &scratch.partial[fi]);
                    }
                }
            }
            if let Some(z) = self.point_coincide[i] {
                kzt_g[z] += self.sys.jitter * gi;
            }
        }
        (kzt_g, hyper)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-point factor rows for one term (at most three factors) and the
/// leave-one-out contractions of `α` against them.
#[derive(Default)]
struct RowScratch {
    nf: usize,
    rows: [Vec<f64>; 3],
    drows: [Vec<Vec<f64>>; 3],
    partial: [Vec<f64>; 3],
    inner: Vec<f64>,
    buf: Vec<f64>,
}

impl RowScratch {
    fn fill(
        &mut self,
        sys: &InducingSystem,
        term: &Term,
        zsubs: &[Vec<Point>],
        fparams: &[Vec<usize>],
        p: &Point,
        grads: bool,
    ) {
        self.nf = term.factors.len();
        let mut g = [0.0; 3];
        for (fi, f) in term.factors.iter().enumerate() {
            let zsub = &zsubs[fi];
            let n = zsub.len();
            let row = &mut self.rows[fi];
            row.resize(n, 0.0);
            let np = if grads { fparams[fi].len() } else { 0 };
            let drows = &mut self.drows[fi];
            if drows.len() < np {
                drows.resize_with(np, Vec::new);
            }
            for d in drows.iter_mut().take(np) {
                d.resize(n, 0.0);
            }
            if f.kind == FactorKind::Ones {
                row.iter_mut().for_each(|v| *v = 1.0);
                continue;
            }
            if sys.family == Family::Rbf && f.end - f.start == 1 {
                let d = f.start;
                let inv = 1.0 / sys.params[f.lengthscale[0]];
                for (j, z) in zsub.iter().enumerate() {
                    let s = (p[d] - z[d]) * inv;
                    let s2 = s * s;
                    let k = (-0.5 * s2).exp();
                    row[j] = k;
                    if np > 0 {
                        drows[0][j] = k * s2;
                    }
                }
                continue;
            }
            for (j, z) in zsub.iter().enumerate() {
                row[j] = f.eval_with_grad(sys.family, &sys.params, p, z, &mut g[..np]);
                for (s, gs) in g[..np].iter().enumerate() {
                    drows[s][j] = *gs;
                }
            }
        }
    }

    /// `(⊗ rows) · α`.
    fn value(&self, alpha: &[f64]) -> f64 {
        let r = &self.rows;
        match self.nf {
            1 => dot(&r[0], alpha),
            2 => {
                let n1 = r[1].len();
                r[0].iter()
                    .enumerate()
                    .map(|(i, a)| a * dot(&alpha[i * n1..(i + 1) * n1], &r[1]))
                    .sum()
            }
            3 => {
                let (n1, n2) = (r[1].len(), r[2].len());
                let mut v = 0.0;
                for (i, a) in r[0].iter().enumerate() {
                    let mut vi = 0.0;
                    for (j, b) in r[1].iter().enumerate() {
                        let o = (i * n1 + j) * n2;
                        vi += b * dot(&alpha[o..o + n2], &r[2]);
                    }
                    v += a * vi;
                }
                v
            }
            _ => unreachable!("terms have one to three factors"),
        }
    }

    /// Fill `partial[f]` with `α` contracted against every row except the
    /// `f`-th and return the full contraction.
    fn partials(&mut self, alpha: &[f64]) -> f64 {
        let r = &self.rows;
        let pt = &mut self.partial;
        match self.nf {
            1 => {
                pt[0].clear();
                pt[0].extend_from_slice(alpha);
            }
            2 => {
                let (n0, n1) = (r[0].len(), r[1].len());
                pt[0].clear();
                pt[0].extend((0..n0).map(|i| dot(&alpha[i * n1..(i + 1) * n1], &r[1])));
                pt[1].clear();
                pt[1].resize(n1, 0.0);
                for (i, a) in r[0].iter().enumerate() {
                    for (o, x) in pt[1].iter_mut().zip(&alpha[i * n1..(i + 1) * n1]) {
                        *o += a * x;
                    }
                }
            }
            3 => {
                let (n0, n1, n2) = (r[0].len(), r[1].len(), r[2].len());
                // inner[i, j] = Σ_k α[i, j, k] r2[k]
                self.inner.clear();
                self.inner
                    .extend((0..n0 * n1).map(|ij| dot(&alpha[ij * n2..(ij + 1) * n2], &r[2])));
                let c = &self.inner;
                pt[0].clear();
                pt[0].extend((0..n0).map(|i| dot(&c[i * n1..(i + 1) * n1], &r[1])));
                pt[1].clear();
                pt[1].resize(n1, 0.0);
                for (i, a) in r[0].iter().enumerate() {
                    for (o, x) in pt[1].iter_mut().zip(&c[i * n1..(i + 1) * n1]) {
                        *o += a * x;
                    }
                }
                pt[2].clear();
                pt[2].resize(n2, 0.0);
                for (i, a) in r[0].iter().enumerate() {
                    for (j, b) in r[1].iter().enumerate() {
                        let w = a * b;
                        let o = (i * n1 + j) * n2;
                        for (d, x) in pt[2].iter_mut().zip(&alpha[o..o + n2]) {
                            *d += w * x;
                        }
                    }
                }
            }
            _ => unreachable!("terms have one to three factors"),
        }
        dot(&self.rows[0], &self.partial[0])
    }

    /// `out += scale · (⊗ rows)`.
    fn expand_into(&mut self, out: &mut [f64], scale: f64) {
        self.buf.clear();
        self.buf.push(scale);
        for row in &self.rows[..self.nf] {
            self.inner.clear();
            for &a in &self.buf {
                self.inner.extend(row.iter().map(|r| a * r));
            }
            std::mem::swap(&mut self.buf, &mut self.inner);
        }
        for (o, v) in out.iter_mut().zip(&self.buf) {
            *o += v;
        }
    }
}

/// `K_TZ K_ZZ⁻¹ u` at the block's targets.
pub fn conditional_projection(block: &SparseGpBlock, u: &DVector<f64>) -> Result<DVector<f64>> {
    let sys = InducingSystem::new(&block.kernel, &block.grid)?;
    let alpha = sys.solve(u);
    let proj = Projector::new(&sys, &block.targets);
    Ok(DVector::from_vec(proj.project(alpha.as_slice())))
}

/// Mean and covariance of `q(f)` at the block's targets, including the
/// prior residual `K_TT − K_TZ K_ZZ⁻¹ K_ZT`.
pub fn marginal_posterior(block: &SparseGpBlock) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sys = InducingSystem::new(&block.kernel, &block.grid)?;
    let pts = block.targets.all_points();
    let ktz = sys.cross_dense(&pts);
    let ktt = sys.prior_dense(&pts);
    // A = K_TZ K_ZZ⁻¹
    let a = sys.chol.solve(&ktz.transpose()).transpose();
    let mean = &a * &block.posterior.mean;
    let s = block.posterior.covariance();
    let cov = &ktt - &a * ktz.transpose() + &a * s * a.transpose();
    Ok((mean, cov))
}

/// Prior residual `K_TT − K_TZ K_ZZ⁻¹ K_ZT` at the block's targets.
pub fn prior_residual(block: &SparseGpBlock) -> Result<DMatrix<f64>> {
    let sys = InducingSystem::new(&block.kernel, &block.grid)?;
    let pts = block.targets.all_points();
    let ktz = sys.cross_dense(&pts);
    let ktt = sys.prior_dense(&pts);
    let a = sys.chol.solve(&ktz.transpose()).transpose();
    Ok(ktt - a * ktz.transpose())
}

/// Reparameterised DTC draw: `u = mean + factor · draw`, then projection.
pub fn dtc_sample(block: &SparseGpBlock, draw: &DVector<f64>) -> Result<DVector<f64>> {
    if draw.len() != block.posterior.dim() {
        return Err(Error::Domain(format!(
            "draw length {} does not match {} inducing points",
            draw.len(),
            block.posterior.dim()
        )));
    }
    let u = block.posterior.sample(draw);
    conditional_projection(block, &u)
}

/// Spectral condition number of a symmetric matrix; infinite when the
/// smallest eigenvalue is not positive.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen().eigenvalues;
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `κ(K_ZZ)` without jitter.
pub fn kzz_condition_number(kernel: &KernelSpec, grid: &InducingGrid) -> f64 {
    let pts = grid.points();
    condition_number(&crate::kernels::gram_matrix(kernel, &pts, &pts, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram_matrix, Nu, Structure};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_box() -> Box3 {
        Box3::new([0.0; 3], [1.0; 3])
    }

    fn specs() -> Vec<KernelSpec> {
        let mut out = Vec::new();
        for fam in [
            Family::Rbf,
            Family::Matern(Nu::Half),
            Family::Matern(Nu::ThreeHalves),
            Family::Matern(Nu::FiveHalves),
        ] {
            out.push(KernelSpec::new(fam, Structure::Separable, vec![1.3], vec![0.6, 0.4, 0.8]).unwrap());
            out.push(KernelSpec::new(fam, Structure::Additive, vec![0.7, 1.1, 0.5], vec![0.5, 0.7, 0.9]).unwrap());
        }
        out
    }

    fn block(kernel: KernelSpec, counts: [usize; 3], targets: TargetSet) -> SparseGpBlock {
        let grid = InducingGrid::new(unit_box(), counts).unwrap();
        let m = grid.len();
        SparseGpBlock::new(kernel, grid, InducingPosterior::isotropic(m, 0.3), targets).unwrap()
    }

    fn random_vec(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng))
    }

    /// Dense `K_TZ K_ZZ⁻¹ u` computed from `gram_matrix`, independent of the
    /// factorised projector.
    fn dense_projection(spec: &KernelSpec, grid: &InducingGrid, targets: &[Point], u: &DVector<f64>) -> DVector<f64> {
        let z = grid.points();
        let kzz = gram_matrix(spec, &z, &z, 0.0);
        let (ch, jitter) = cholesky_with_jitter(&kzz).unwrap();
        let mut ktz = gram_matrix(spec, targets, &z, 0.0);
        for (i, p) in targets.iter().enumerate() {
            if let Some(j) = z.iter().position(|q| q == p) {
                ktz[(i, j)] += jitter;
            }
        }
        ktz * ch.solve(u)
    }

    #[test]
    fn projector_matches_dense_on_grid_and_points() {
        let tg = TensorGrid::equidistant(&unit_box(), [5, 4, 3]);
        let points = vec![[0.1, 0.9, 0.3], [0.5, 0.5, 0.5], [0.0, 0.0, 0.0], [0.77, 0.2, 0.61]];
        for spec in specs() {
            let targets = TargetSet {
                grid: Some(tg.clone()),
                points: points.clone(),
            };
            let b = block(spec.clone(), [3, 2, 2], targets.clone());
            let u = random_vec(b.grid.len(), 3);
            let got = conditional_projection(&b, &u).unwrap();
            let want = dense_projection(&spec, &b.grid, &targets.all_points(), &u);
            for i in 0..got.len() {
                assert_relative_eq!(got[i], want[i], epsilon = 1e-9, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn backward_matches_dense_transpose_and_hyper_fd() {
        let tg = TensorGrid::equidistant(&unit_box(), [4, 3, 3]);
        let points = vec![[0.15, 0.8, 0.35], [0.6, 0.45, 0.05]];
        for spec in specs() {
            let targets = TargetSet {
                grid: Some(tg.clone()),
                points: points.clone(),
            };
            let grid = InducingGrid::new(unit_box(), [3, 2, 2]).unwrap();
            let sys = InducingSystem::new(&spec, &grid).unwrap();
            let proj = Projector::new(&sys, &targets);
            let alpha = random_vec(grid.len(), 7);
            let g = random_vec(targets.len(), 11);
            let (kzt_g, hyper) = proj.backward(g.as_slice(), alpha.as_slice());

            let ktz = sys.cross_dense(&targets.all_points());
            let want = ktz.transpose() * &g;
            for i in 0..want.len() {
                assert_relative_eq!(kzt_g[i], want[i], epsilon = 1e-9, max_relative = 1e-9);
            }

            // gᵀ K_TZ(θ) α with α held fixed, differentiated in log θ.
            let params = spec.params();
            for p in 0..params.len() {
                let h = 1e-6;
                let eval = |s: f64| {
                    let mut q = params.clone();
                    q[p] *= s.exp();
                    let spec2 = spec.with_params(&q).unwrap();
                    let pts = targets.all_points();
                    let z = grid.points();
                    let k = gram_matrix(&spec2, &pts, &z, 0.0);
                    (g.transpose() * k * &alpha)[(0, 0)]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert_relative_eq!(hyper[p], fd, epsilon = 1e-6, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn identity_projection_when_targets_are_inducing_points() {
        for spec in specs() {
            let grid = InducingGrid::new(unit_box(), [3, 3, 2]).unwrap();
            let targets = TargetSet::from_grid(grid.grid.clone());
            let b = block(spec, [3, 3, 2], targets);
            let u = random_vec(b.grid.len(), 5);
            let f = conditional_projection(&b, &u).unwrap();
            for i in 0..u.len() {
                assert_relative_eq!(f[i], u[i], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn zero_inducing_values_project_to_zero() {
        let b = block(
            specs()[1].clone(),
            [2, 2, 2],
            TargetSet::from_points(vec![[0.3, 0.2, 0.9], [0.8, 0.1, 0.4]]),
        );
        let f = conditional_projection(&b, &DVector::zeros(8)).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_inducing_point_scalar_oracle() {
        let spec = specs()[0].clone();
        let grid = InducingGrid::new(unit_box(), [1, 1, 1]).unwrap();
        let z = grid.points()[0];
        let p = [0.2, 0.9, 0.1];
        let b = SparseGpBlock::new(
            spec.clone(),
            grid,
            InducingPosterior::isotropic(1, 1.0),
            TargetSet::from_points(vec![p]),
        )
        .unwrap();
        let u = 1.7;
        let f = conditional_projection(&b, &DVector::from_vec(vec![u])).unwrap();
        let kzz = spec.eval(&z, &z);
        let jitter = 1e-6 * kzz;
        assert_relative_eq!(f[0], u * spec.eval(&p, &z) / (kzz + jitter), max_relative = 1e-12);
    }

    #[test]
    fn marginal_posterior_recovers_prior_when_q_is_prior() {
        let spec = specs()[2].clone();
        let grid = InducingGrid::new(unit_box(), [2, 2, 2]).unwrap();
        let sys = InducingSystem::new(&spec, &grid).unwrap();
        let kzz = sys.kzz_jittered();
        let factor = kzz.clone().cholesky().unwrap().l();
        let targets = TargetSet::from_points(vec![[0.1, 0.2, 0.3], [0.9, 0.4, 0.6], [0.5, 0.5, 0.1]]);
        let b = SparseGpBlock::new(
            spec,
            grid,
            InducingPosterior::new(DVector::zeros(8), factor).unwrap(),
            targets,
        )
        .unwrap();
        let (mean, cov) = marginal_posterior(&b).unwrap();
        let ktt = sys.prior_dense(&b.targets.all_points());
        assert!(mean.iter().all(|v| v.abs() < 1e-14));
        assert!((cov - ktt).abs().max() < 1e-9);
    }

    #[test]
    fn marginal_posterior_matches_scalar_loop_oracle() {
        // One-dimensional toy: two inducing points along t, three targets.
        let spec = KernelSpec::new(Family::Rbf, Structure::Separable, vec![1.2], vec![0.5, 1.0, 1.0]).unwrap();
        let grid = InducingGrid::new(unit_box(), [2, 1, 1]).unwrap();
        let z = grid.points();
        let targets = vec![[0.1, 0.5, 0.5], [0.4, 0.5, 0.5], [0.95, 0.5, 0.5]];
        let mean_u = [0.3, -0.8];
        let l = [[0.5, 0.0], [0.2, 0.4]];
        let posterior = InducingPosterior::new(
            DVector::from_row_slice(&mean_u),
            DMatrix::from_row_slice(2, 2, &[l[0][0], 0.0, l[1][0], l[1][1]]),
        )
        .unwrap();
        let b = SparseGpBlock::new(spec.clone(), grid, posterior, TargetSet::from_points(targets.clone())).unwrap();
        let (mean, cov) = marginal_posterior(&b).unwrap();

        let k = |a: &Point, c: &Point| spec.eval(a, c);
        let jit = 1e-6 * 1.2;
        let kzz = [
            [k(&z[0], &z[0]) + jit, k(&z[0], &z[1])],
            [k(&z[1], &z[0]), k(&z[1], &z[1]) + jit],
        ];
        let det = kzz[0][0] * kzz[1][1] - kzz[0][1] * kzz[1][0];
        let inv = [[kzz[1][1] / det, -kzz[0][1] / det], [-kzz[1][0] / det, kzz[0][0] / det]];
        let s = [
            [l[0][0] * l[0][0], l[0][0] * l[1][0]],
            [l[1][0] * l[0][0], l[1][0] * l[1][0] + l[1][1] * l[1][1]],
        ];
        let a: Vec<[f64; 2]> = targets
            .iter()
            .map(|t| {
                let kt = [k(t, &z[0]), k(t, &z[1])];
                [
                    kt[0] * inv[0][0] + kt[1] * inv[1][0],
                    kt[0] * inv[0][1] + kt[1] * inv[1][1],
                ]
            })
            .collect();
        for i in 0..3 {
            let m = a[i][0] * mean_u[0] + a[i][1] * mean_u[1];
            assert_relative_eq!(mean[i], m, max_relative = 1e-10, epsilon = 1e-12);
            for j in 0..3 {
                let kj = [k(&targets[j], &z[0]), k(&targets[j], &z[1])];
                let mut v = k(&targets[i], &targets[j]);
                if i == j {
                    v += jit;
                }
                v -= a[i][0] * kj[0] + a[i][1] * kj[1];
                for p in 0..2 {
                    for q in 0..2 {
                        v += a[i][p] * s[p][q] * a[j][q];
                    }
                }
                assert_relative_eq!(cov[(i, j)], v, max_relative = 1e-8, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn dtc_sample_zero_draw_is_mean_projection() {
        let mut b = block(
            specs()[3].clone(),
            [2, 2, 2],
            TargetSet::from_points(vec![[0.4, 0.6, 0.2]]),
        );
        b.posterior.mean = random_vec(8, 1);
        let s = dtc_sample(&b, &DVector::zeros(8)).unwrap();
        let p = conditional_projection(&b, &b.posterior.mean).unwrap();
        assert_eq!(s, p);
    }

    #[test]
    fn dtc_sample_collapses_with_vanishing_covariance() {
        let grid = InducingGrid::new(unit_box(), [2, 2, 1]).unwrap();
        let mut b = block(specs()[0].clone(), [2, 2, 1], TargetSet::from_grid(grid.grid.clone()));
        b.posterior.mean = random_vec(4, 2);
        b.posterior.factor = DMatrix::identity(4, 4) * 1e-12;
        let s = dtc_sample(&b, &random_vec(4, 9)).unwrap();
        for i in 0..4 {
            assert_relative_eq!(s[i], b.posterior.mean[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn prior_residual_shrinks_with_nested_grids() {
        let spec = specs()[1].clone();
        let targets = TargetSet::from_points(vec![[0.13, 0.37, 0.71], [0.52, 0.88, 0.05], [0.91, 0.24, 0.46]]);
        let mut prev: Option<Vec<f64>> = None;
        for n in [2usize, 3, 5, 9] {
            let b = block(spec.clone(), [n, n, n], targets.clone());
            let diag: Vec<f64> = prior_residual(&b).unwrap().diagonal().iter().copied().collect();
            assert!(diag.iter().all(|v| *v >= -1e-9));
            if let Some(p) = &prev {
                for (a, b) in diag.iter().zip(p) {
                    assert!(*a <= b + 1e-8, "residual grew: {a} > {b}");
                }
            }
            prev = Some(diag);
        }
    }

    proptest! {
        #[test]
        fn projection_is_linear(a in -2.0..2.0f64, c in -2.0..2.0f64, s1 in 0u64..1000, s2 in 0u64..1000) {
            let targets = TargetSet {
                grid: Some(TensorGrid::equidistant(&unit_box(), [3, 3, 3])),
                points: vec![[0.3, 0.7, 0.2]],
            };
            let b = block(specs()[1].clone(), [2, 2, 2], targets);
            let u1 = random_vec(8, s1);
            let u2 = random_vec(8, s2);
            let lhs = conditional_projection(&b, &(&u1 * a + &u2 * c)).unwrap();
            let rhs = conditional_projection(&b, &u1).unwrap() * a + conditional_projection(&b, &u2).unwrap() * c;
            prop_assert!((lhs - rhs).abs().max() < 1e-9);
        }
    }

    #[test]
    fn condition_number_examples() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 0.5]));
        assert_relative_eq!(condition_number(&d), 8.0, epsilon = 1e-12);
        assert_eq!(condition_number(&DMatrix::from_element(2, 2, 1.0)), f64::INFINITY);
        let grid = InducingGrid::new(unit_box(), [1, 1, 1]).unwrap();
        assert_relative_eq!(kzz_condition_number(&specs()[0], &grid), 1.0, epsilon = 1e-12);
    }
}
