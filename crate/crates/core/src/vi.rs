//! Variational Gaussian approximation: Monte Carlo ELBO with analytic
//! reparameterisation gradients, Adam, and multi-restart selection.

use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::grid::Box3;
use crate::hawkes_model::{LikelihoodLayout, LinkFunction};
use crate::kernels::{Family, KernelSpec, Point, Structure};
use crate::sparse_gp::{InducingGrid, InducingPosterior, InducingSystem, Projector, SparseGpBlock, TargetSet};

pub const SCHEMA_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Exact multivariate normal log-density with covariance `factor factorᵀ`.
pub fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, factor: &DMatrix<f64>) -> Result<f64> {
    let d = x.len();
    if mean.len() != d || factor.nrows() != d || factor.ncols() != d {
        return Err(Error::Domain("dimension mismatch in gaussian_log_density".into()));
    }
    if x.iter().chain(mean.iter()).chain(factor.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gaussian_log_density input".into()));
    }
    let diff = x - mean;
    let z = factor
        .solve_lower_triangular(&diff)
        .ok_or_else(|| Error::Domain("singular covariance factor".into()))?;
    let log_det: f64 = factor.diagonal().iter().map(|v| v.abs().ln()).sum();
    Ok(-0.5 * d as f64 * LN_2PI - log_det - 0.5 * z.norm_squared())
}

/// Entropy of `N(·, L Lᵀ)`.
pub fn gaussian_entropy(factor: &DMatrix<f64>) -> f64 {
    let d = factor.nrows() as f64;
    0.5 * d * (LN_2PI + 1.0) + factor.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Independent Gamma priors on positive parameters, evaluated in the log
/// domain (Jacobian of the log-transform included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperPrior {
    pub shape: Vec<f64>,
    pub rate: Vec<f64>,
}

impl HyperPrior {
    pub fn new(shape: Vec<f64>, rate: Vec<f64>) -> Result<Self> {
        if shape.len() != rate.len() {
            return Err(Error::Domain("prior shape and rate lengths differ".into()));
        }
        if shape.iter().chain(&rate).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Domain("Gamma shape and rate must be positive".into()));
        }
        Ok(Self { shape, rate })
    }

    pub fn gamma(n: usize, shape: f64, rate: f64) -> Self {
        Self {
            shape: vec![shape; n],
            rate: vec![rate; n],
        }
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    /// `Σ log Gamma(θ_p) + log θ_p` at `θ = exp(a)`.
    pub fn log_density_log(&self, a: &[f64]) -> f64 {
        a.iter()
            .zip(self.shape.iter().zip(&self.rate))
            .map(|(&a, (&k, &r))| k * r.ln() - ln_gamma(k) + k * a - r * a.exp())
            .sum()
    }

    pub fn grad_log(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.shape.iter().zip(&self.rate))
            .map(|(&a, (&k, &r))| k - r * a.exp())
            .collect()
    }
}

/// Gaussian over log-hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparamPosterior {
    pub mean: DVector<f64>,
    pub factor: DMatrix<f64>,
}

impl HyperparamPosterior {
    pub fn new(mean: DVector<f64>, factor: DMatrix<f64>) -> Result<Self> {
        let p = InducingPosterior::new(mean, factor)?;
        Ok(Self {
            mean: p.mean,
            factor: p.factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Posterior mean of `θ = exp(a)`: `exp(m + diag(Σ)/2)`.
    pub fn lognormal_mean(&self) -> Vec<f64> {
        let cov = &self.factor * self.factor.transpose();
        (0..self.dim())
            .map(|i| (self.mean[i] + 0.5 * cov[(i, i)]).exp())
            .collect()
    }
}

/// GP-distributed latent function with its hyperparameter posterior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpFactor {
    pub block: SparseGpBlock,
    pub hyper: HyperparamPosterior,
    pub prior: HyperPrior,
    pub link: LinkFunction,
}

/// Which parametric rate a log-normal factor parameterises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParametricForm {
    /// A single constant rate.
    Constant,
    /// `(αβ / 2πσ_xσ_y) exp(−βΔt) exp(−Δx²/2σ_x² − Δy²/2σ_y²)`, parameters
    /// `[α, β, σ_x, σ_y]`.
    ExpGaussianTrigger,
}

impl ParametricForm {
    pub fn n_params(self) -> usize {
        match self {
            ParametricForm::Constant => 1,
            ParametricForm::ExpGaussianTrigger => 4,
        }
    }
}

/// Independent log-normal factors over positive parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricFactor {
    pub form: ParametricForm,
    pub log_mean: Vec<f64>,
    pub log_sd: Vec<f64>,
    pub prior: HyperPrior,
}

impl ParametricFactor {
    pub fn new(form: ParametricForm, init: &[f64], sd: f64, prior: HyperPrior) -> Result<Self> {
        let k = form.n_params();
        if init.len() != k || prior.len() != k {
            return Err(Error::Domain(format!("{form:?} expects {k} parameters")));
        }
        if init.iter().any(|v| !(*v > 0.0)) || !(sd > 0.0) {
            return Err(Error::Domain("parametric initial values must be positive".into()));
        }
        Ok(Self {
            form,
            log_mean: init.iter().map(|v| v.ln()).collect(),
            log_sd: vec![sd.ln(); k],
            prior,
        })
    }

    pub fn lognormal_mean(&self) -> Vec<f64> {
        self.log_mean
            .iter()
            .zip(&self.log_sd)
            .map(|(m, s)| (m + 0.5 * (2.0 * s).exp()).exp())
            .collect()
    }
}

/// Parametric exponential-Gaussian trigger value.
pub fn exp_gaussian_trigger(p: &[f64], lag: &Point) -> f64 {
    let (a, b, sx, sy) = (p[0], p[1], p[2], p[3]);
    a * b / (2.0 * std::f64::consts::PI * sx * sy)
        * (-b * lag[0] - 0.5 * (lag[1] / sx).powi(2) - 0.5 * (lag[2] / sy).powi(2)).exp()
}

fn parametric_rates(form: ParametricForm, p: &[f64], targets: &[Point]) -> Vec<f64> {
    match form {
        ParametricForm::Constant => vec![p[0]; targets.len()],
        ParametricForm::ExpGaussianTrigger => targets.iter().map(|l| exp_gaussian_trigger(p, l)).collect(),
    }
}

/// `Σ_t g_t ∂rate_t/∂log p_k`.
fn parametric_log_grad(form: ParametricForm, p: &[f64], targets: &[Point], rates: &[f64], g: &[f64]) -> Vec<f64> {
    match form {
        ParametricForm::Constant => vec![g.iter().zip(rates).map(|(g, r)| g * r).sum()],
        ParametricForm::ExpGaussianTrigger => {
            let mut out = vec![0.0; 4];
            for ((l, r), g) in targets.iter().zip(rates).zip(g) {
                let w = g * r;
                if w == 0.0 {
                    continue;
                }
                out[0] += w;
                out[1] += w * (1.0 - p[1] * l[0]);
                out[2] += w * (-1.0 + (l[1] / p[2]).powi(2));
                out[3] += w * (-1.0 + (l[2] / p[3]).powi(2));
            }
            out
        }
    }
}

/// One intensity component (background or trigger).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Component {
    Gp(GpFactor),
    Parametric(ParametricFactor),
    Absent,
}

/// A posterior draw of a component, enough to evaluate rates anywhere.
#[derive(Debug, Clone)]
pub enum ComponentDraw {
    Gp {
        kernel: KernelSpec,
        inducing: Vec<Point>,
        alpha: Vec<f64>,
        jitter: f64,
        link: LinkFunction,
    },
    Parametric {
        form: ParametricForm,
        values: Vec<f64>,
    },
    Absent,
}

impl ComponentDraw {
    pub fn rate_at(&self, p: &Point) -> f64 {
        match self {
            ComponentDraw::Gp {
                kernel,
                inducing,
                alpha,
                jitter,
                link,
            } => {
                let mut f = 0.0;
                for (z, a) in inducing.iter().zip(alpha) {
                    f += a * kernel.eval(p, z);
                    if z == p {
                        f += a * jitter;
                    }
                }
                link.apply(f)
            }
            ComponentDraw::Parametric { form, values } => parametric_rates(*form, values, std::slice::from_ref(p))[0],
            ComponentDraw::Absent => 0.0,
        }
    }
}

enum Tape {
    Gp {
        sys: InducingSystem,
        alpha: DVector<f64>,
        f: Vec<f64>,
        log_theta: Vec<f64>,
    },
    Parametric {
        values: Vec<f64>,
        rates: Vec<f64>,
    },
    Absent,
}

fn lower_len(d: usize) -> usize {
    d * (d + 1) / 2
}

fn push_gaussian(mean: &DVector<f64>, factor: &DMatrix<f64>, out: &mut Vec<f64>) {
    out.extend(mean.iter());
    let d = mean.len();
    for i in 0..d {
        for j in 0..i {
            out.push(factor[(i, j)]);
        }
        out.push(factor[(i, i)].ln());
    }
}

fn read_gaussian(p: &[f64], mean: &mut DVector<f64>, factor: &mut DMatrix<f64>) -> usize {
    let d = mean.len();
    mean.copy_from_slice(&p[..d]);
    let mut k = d;
    for i in 0..d {
        for j in 0..i {
            factor[(i, j)] = p[k];
            k += 1;
        }
        factor[(i, i)] = p[k].exp();
        k += 1;
    }
    k
}

/// Gradient of a reparameterised Gaussian draw `x = m + L ε` given `∂/∂x`,
/// in the flattened `(m, L with log-diagonal)` layout.
fn push_gaussian_grad(gx: &[f64], eps: &[f64], factor: &DMatrix<f64>, out: &mut Vec<f64>) {
    out.extend_from_slice(gx);
    let d = gx.len();
    for i in 0..d {
        for &e in &eps[..i] {
            out.push(gx[i] * e);
        }
        out.push(gx[i] * eps[i] * factor[(i, i)]);
    }
}

fn push_entropy_grad(d: usize, out: &mut Vec<f64>) {
    out.extend(std::iter::repeat_n(0.0, d));
    for i in 0..d {
        out.extend(std::iter::repeat_n(0.0, i));
        out.push(1.0);
    }
}

impl Component {
    pub fn n_params(&self) -> usize {
        match self {
            Component::Gp(g) => {
                let m = g.block.posterior.dim();
                let d = g.hyper.dim();
                m + lower_len(m) + d + lower_len(d)
            }
            Component::Parametric(p) => 2 * p.log_mean.len(),
            Component::Absent => 0,
        }
    }

    pub fn n_noise(&self) -> usize {
        match self {
            Component::Gp(g) => g.block.posterior.dim() + g.hyper.dim(),
            Component::Parametric(p) => p.log_mean.len(),
            Component::Absent => 0,
        }
    }

    pub fn flatten(&self, out: &mut Vec<f64>) {
        match self {
            Component::Gp(g) => {
                push_gaussian(&g.block.posterior.mean, &g.block.posterior.factor, out);
                push_gaussian(&g.hyper.mean, &g.hyper.factor, out);
            }
            Component::Parametric(p) => {
                out.extend_from_slice(&p.log_mean);
                out.extend_from_slice(&p.log_sd);
            }
            Component::Absent => {}
        }
    }

    pub fn unflatten(&mut self, p: &[f64]) -> usize {
        match self {
            Component::Gp(g) => {
                let mut k = read_gaussian(p, &mut g.block.posterior.mean, &mut g.block.posterior.factor);
                k += read_gaussian(&p[k..], &mut g.hyper.mean, &mut g.hyper.factor);
                let theta: Vec<f64> = g.hyper.mean.iter().map(|v| v.exp()).collect();
                if let Ok(spec) = g.block.kernel.with_params(&theta) {
                    g.block.kernel = spec;
                }
                k
            }
            Component::Parametric(f) => {
                let n = f.log_mean.len();
                f.log_mean.copy_from_slice(&p[..n]);
                f.log_sd.copy_from_slice(&p[n..2 * n]);
                2 * n
            }
            Component::Absent => 0,
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            Component::Gp(g) => gaussian_entropy(&g.block.posterior.factor) + gaussian_entropy(&g.hyper.factor),
            Component::Parametric(p) => p.log_sd.iter().map(|s| 0.5 * (LN_2PI + 1.0) + s).sum(),
            Component::Absent => 0.0,
        }
    }

    fn entropy_grad(&self, out: &mut Vec<f64>) {
        match self {
            Component::Gp(g) => {
                push_entropy_grad(g.block.posterior.dim(), out);
                push_entropy_grad(g.hyper.dim(), out);
            }
            Component::Parametric(p) => {
                let n = p.log_mean.len();
                out.extend(std::iter::repeat_n(0.0, n));
                out.extend(std::iter::repeat_n(1.0, n));
            }
            Component::Absent => {}
        }
    }

    /// Rates at `targets` for one noise draw, plus `log p(u|θ) + log p(θ)`.
    fn forward(&self, targets: &TargetSet, eps: &[f64]) -> Result<(Vec<f64>, f64, Tape)> {
        match self {
            Component::Gp(g) => {
                let m = g.block.posterior.dim();
                let (eps_u, eps_t) = eps.split_at(m);
                let eps_t = DVector::from_column_slice(eps_t);
                let log_theta = &g.hyper.mean + &g.hyper.factor * &eps_t;
                let theta: Vec<f64> = log_theta.iter().map(|v| v.exp()).collect();
                let spec = g.block.kernel.with_params(&theta)?;
                let sys = InducingSystem::new(&spec, &g.block.grid)?;
                let u = g.block.posterior.sample(&DVector::from_column_slice(eps_u));
                let alpha = sys.solve(&u);
                let f = Projector::new(&sys, targets).project(alpha.as_slice());
                let rates: Vec<f64> = f.iter().map(|v| g.link.apply(*v)).collect();
                let log_pu = -0.5 * u.dot(&alpha) - 0.5 * sys.log_det() - 0.5 * m as f64 * LN_2PI;
                let log_ptheta = g.prior.log_density_log(log_theta.as_slice());
                Ok((
                    rates,
                    log_pu + log_ptheta,
                    Tape::Gp {
                        sys,
                        alpha,
                        f,
                        log_theta: log_theta.iter().copied().collect(),
                    },
                ))
            }
            Component::Parametric(p) => {
                let log_v: Vec<f64> = (0..p.log_mean.len())
                    .map(|k| p.log_mean[k] + p.log_sd[k].exp() * eps[k])
                    .collect();
                let values: Vec<f64> = log_v.iter().map(|v| v.exp()).collect();
                let rates = parametric_rates(p.form, &values, &targets.all_points());
                let lp = p.prior.log_density_log(&log_v);
                Ok((rates.clone(), lp, Tape::Parametric { values, rates }))
            }
            Component::Absent => Ok((vec![0.0; targets.len()], 0.0, Tape::Absent)),
        }
    }

    /// Gradient of `ℓ(rates) + log p(u|θ) + log p(θ)` with respect to the
    /// flattened variational parameters, given `g = ∂ℓ/∂rates`.
    fn backward(&self, targets: &TargetSet, eps: &[f64], tape: &Tape, g_rates: &[f64], out: &mut Vec<f64>) {
        match (self, tape) {
            (
                Component::Gp(g),
                Tape::Gp {
                    sys,
                    alpha,
                    f,
                    log_theta,
                },
            ) => {
                let m = g.block.posterior.dim();
                let (eps_u, eps_t) = eps.split_at(m);
                let g_f: Vec<f64> = g_rates
                    .iter()
                    .zip(f)
                    .map(|(gr, fv)| if *gr == 0.0 { 0.0 } else { gr * g.link.derivative(*fv) })
                    .collect();
                let proj = Projector::new(sys, targets);
                let (kzt_g, hyper_c) = proj.backward(&g_f, alpha.as_slice());
                let beta = sys.solve(&DVector::from_vec(kzt_g));
                let g_u: Vec<f64> = (0..m).map(|i| beta[i] - alpha[i]).collect();
                push_gaussian_grad(&g_u, eps_u, &g.block.posterior.factor, out);

                let kinv = sys.inverse();
                let dks = sys.kzz_log_grads();
                let prior_g = g.prior.grad_log(log_theta);
                let g_theta: Vec<f64> = dks
                    .iter()
                    .enumerate()
                    .map(|(p, dk)| {
                        let dka = dk * alpha;
                        hyper_c[p] - beta.dot(&dka) + 0.5 * alpha.dot(&dka) - 0.5 * kinv.dot(dk) + prior_g[p]
                    })
                    .collect();
                push_gaussian_grad(&g_theta, eps_t, &g.hyper.factor, out);
            }
            (Component::Parametric(p), Tape::Parametric { values, rates }) => {
                let pts = targets.all_points();
                let mut g_log = parametric_log_grad(p.form, values, &pts, rates, g_rates);
                let log_v: Vec<f64> = values.iter().map(|v| v.ln()).collect();
                for (gl, pg) in g_log.iter_mut().zip(p.prior.grad_log(&log_v)) {
                    *gl += pg;
                }
                out.extend_from_slice(&g_log);
                for k in 0..g_log.len() {
                    out.push(g_log[k] * eps[k] * p.log_sd[k].exp());
                }
            }
            (Component::Absent, Tape::Absent) => {}
            _ => unreachable!("tape does not match component"),
        }
    }

    /// Draw posterior parameters for evaluation away from the fit targets.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Result<ComponentDraw> {
        let eps: Vec<f64> = (0..self.n_noise()).map(|_| StandardNormal.sample(rng)).collect();
        match self {
            Component::Gp(g) => {
                let m = g.block.posterior.dim();
                let log_theta = &g.hyper.mean + &g.hyper.factor * DVector::from_column_slice(&eps[m..]);
                let theta: Vec<f64> = log_theta.iter().map(|v| v.exp()).collect();
                let kernel = g.block.kernel.with_params(&theta)?;
                let sys = InducingSystem::new(&kernel, &g.block.grid)?;
                let u = g.block.posterior.sample(&DVector::from_column_slice(&eps[..m]));
                let alpha = sys.solve(&u);
                Ok(ComponentDraw::Gp {
                    kernel,
                    inducing: g.block.grid.points(),
                    alpha: alpha.iter().copied().collect(),
                    jitter: sys.jitter,
                    link: g.link,
                })
            }
            Component::Parametric(p) => Ok(ComponentDraw::Parametric {
                form: p.form,
                values: (0..p.log_mean.len())
                    .map(|k| (p.log_mean[k] + p.log_sd[k].exp() * eps[k]).exp())
                    .collect(),
            }),
            Component::Absent => Ok(ComponentDraw::Absent),
        }
    }

    /// Posterior rate draws at a target set (fast path for grids).
    pub fn sample_rates(&self, targets: &TargetSet, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let eps: Vec<f64> = (0..self.n_noise()).map(|_| StandardNormal.sample(rng)).collect();
        Ok(self.forward(targets, &eps)?.0)
    }

    pub fn is_absent(&self) -> bool {
        matches!(self, Component::Absent)
    }
}

/// `q = q(u_μ)q(θ_μ)q(u_φ)q(θ_φ)` (or parametric counterparts).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationalState {
    pub mu: Component,
    pub phi: Component,
}

impl VariationalState {
    pub fn n_params(&self) -> usize {
        self.mu.n_params() + self.phi.n_params()
    }

    pub fn n_noise(&self) -> usize {
        self.mu.n_noise() + self.phi.n_noise()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.mu.flatten(&mut out);
        self.phi.flatten(&mut out);
        out
    }

    pub fn unflatten(&mut self, p: &[f64]) {
        let k = self.mu.unflatten(p);
        self.phi.unflatten(&p[k..]);
    }

    pub fn entropy(&self) -> f64 {
        self.mu.entropy() + self.phi.entropy()
    }

    fn entropy_grad(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.mu.entropy_grad(&mut out);
        self.phi.entropy_grad(&mut out);
        out
    }
}

/// Initial GP factor: zero inducing means, `0.1·I` factors, log-hyperparameter
/// means at `log(extent/4)` for lengthscales and `log 1` for variances.
pub fn init_gp_factor(
    family: Family,
    structure: Structure,
    domain: Box3,
    counts: [usize; 3],
    link: LinkFunction,
    prior: HyperPrior,
) -> Result<GpFactor> {
    let ext = [domain.extent(0), domain.extent(1), domain.extent(2)];
    let lengthscales = match structure {
        Structure::Separable => vec![ext[0] / 4.0, ext[1] / 4.0, ext[2] / 4.0],
        Structure::Additive => vec![
            ext[0] / 4.0,
            0.5 * (ext[1] + ext[2]) / 4.0,
            (ext[0] + ext[1] + ext[2]) / 12.0,
        ],
    };
    let variances = vec![1.0; structure.n_variances()];
    let kernel = KernelSpec::new(family, structure, variances, lengthscales)?;
    if prior.len() != kernel.n_params() {
        return Err(Error::Domain(format!(
            "hyperprior has {} entries, kernel has {} parameters",
            prior.len(),
            kernel.n_params()
        )));
    }
    let grid = InducingGrid::new(domain, counts)?;
    let m = grid.len();
    let block = SparseGpBlock::new(
        kernel.clone(),
        grid,
        InducingPosterior::isotropic(m, 0.1),
        TargetSet::default(),
    )?;
    let d = kernel.n_params();
    let hyper = HyperparamPosterior {
        mean: DVector::from_iterator(d, kernel.params().iter().map(|v| v.ln())),
        factor: DMatrix::identity(d, d) * 0.1,
    };
    Ok(GpFactor {
        block,
        hyper,
        prior,
        link,
    })
}

/// Likelihood geometry plus the μ and φ target sets it implies.
pub struct ModelData {
    pub layout: LikelihoodLayout,
    pub mu_targets: TargetSet,
    pub phi_targets: TargetSet,
}

impl ModelData {
    pub fn new(layout: LikelihoodLayout) -> Self {
        let mu_targets = layout.mu_targets();
        let phi_targets = layout.phi_targets();
        Self {
            layout,
            mu_targets,
            phi_targets,
        }
    }
}

struct DrawResult {
    value: f64,
    grad: Option<Vec<f64>>,
}

fn draw_noise(n: usize, n_noise: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..n_noise).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

fn eval_draw(state: &VariationalState, data: &ModelData, eps: &[f64], want_grad: bool) -> Result<DrawResult> {
    let nm = state.mu.n_noise();
    let (eps_mu, eps_phi) = eps.split_at(nm);
    let (mu_rates, lp_mu, tape_mu) = state.mu.forward(&data.mu_targets, eps_mu)?;
    let (phi_rates, lp_phi, tape_phi) = state.phi.forward(&data.phi_targets, eps_phi)?;
    let vals = data.layout.split(&mu_rates, &phi_rates);
    if !want_grad {
        let ll = data.layout.log_likelihood(&vals);
        return Ok(DrawResult {
            value: ll + lp_mu + lp_phi,
            grad: None,
        });
    }
    let (ll, g) = data.layout.log_likelihood_grad(&vals);
    let value = ll + lp_mu + lp_phi;
    if !value.is_finite() {
        return Ok(DrawResult { value, grad: None });
    }
    let mut g_mu = g.mu_grid;
    g_mu.extend(g.mu_events);
    let mut g_phi = g.phi_grid;
    g_phi.extend(g.phi_pairs);
    let mut grad = Vec::with_capacity(state.n_params());
    state.mu.backward(&data.mu_targets, eps_mu, &tape_mu, &g_mu, &mut grad);
    state
        .phi
        .backward(&data.phi_targets, eps_phi, &tape_phi, &g_phi, &mut grad);
    Ok(DrawResult {
        value,
        grad: Some(grad),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub std_err: f64,
    pub n_samples: usize,
    pub n_failed: usize,
}

fn summarise(values: &[f64], entropy: f64) -> Result<ElboEstimate> {
    let ok: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if ok.is_empty() {
        return Err(Error::FitFailed(format!("all {} ELBO draws failed", values.len())));
    }
    let n = ok.len() as f64;
    let mean = ok.iter().sum::<f64>() / n;
    let var = if ok.len() > 1 {
        ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(ElboEstimate {
        value: mean + entropy,
        std_err: (var / n).sqrt(),
        n_samples: values.len(),
        n_failed: values.len() - ok.len(),
    })
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const EVAL_STREAM: u64 = u64::MAX;

/// Monte Carlo ELBO. Failed draws (conditioning, `λ ≤ 0`) are counted and
/// excluded from the average; all draws failing is an error.
pub fn elbo_estimate(state: &VariationalState, data: &ModelData, n_samples: usize, seed: u64) -> Result<ElboEstimate> {
    if n_samples == 0 {
        return Err(Error::Domain("n_samples must be at least 1".into()));
    }
    let mut rng = step_rng(seed, EVAL_STREAM);
    let noise = draw_noise(n_samples, state.n_noise(), &mut rng);
    let values: Vec<f64> = noise
        .par_iter()
        .map(|eps| match eval_draw(state, data, eps, false) {
            Ok(r) => r.value,
            Err(_) => f64::NEG_INFINITY,
        })
        .collect();
    summarise(&values, state.entropy())
}

/// ELBO estimate and its gradient for a given noise batch.
pub fn elbo_and_grad_with_noise(
    state: &VariationalState,
    data: &ModelData,
    noise: &[Vec<f64>],
) -> Result<(ElboEstimate, Vec<f64>)> {
    let results: Vec<Result<DrawResult>> = noise.par_iter().map(|eps| eval_draw(state, data, eps, true)).collect();
    let mut values = Vec::with_capacity(noise.len());
    let mut grad = vec![0.0; state.n_params()];
    let mut n_ok = 0usize;
    for r in results {
        match r {
            Ok(DrawResult { value, grad: Some(g) }) if value.is_finite() && g.iter().all(|v| v.is_finite()) => {
                values.push(value);
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
                n_ok += 1;
            }
            Ok(_) => values.push(f64::NEG_INFINITY),
            Err(e) => {
                debug!("draw failed: {e}");
                values.push(f64::NEG_INFINITY);
            }
        }
    }
    let est = summarise(&values, state.entropy())?;
    for g in grad.iter_mut() {
        *g /= n_ok as f64;
    }
    for (g, e) in grad.iter_mut().zip(state.entropy_grad()) {
        *g += e;
    }
    Ok((est, grad))
}

pub fn elbo_and_grad(
    state: &VariationalState,
    data: &ModelData,
    n_samples: usize,
    seed: u64,
    stream: u64,
) -> Result<(ElboEstimate, Vec<f64>)> {
    let mut rng = step_rng(seed, stream);
    let noise = draw_noise(n_samples, state.n_noise(), &mut rng);
    elbo_and_grad_with_noise(state, data, &noise)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub step_size: f64,
    /// Final step size as a fraction of the initial one (cosine decay).
    pub final_step_fraction: f64,
    pub mc_samples: usize,
    /// Draws used for the final ELBO that ranks restarts.
    pub final_samples: usize,
    pub seeds: Vec<u64>,
    /// Scale of the seed-dependent perturbation of restart initialisations.
    pub init_jitter: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iterations: 800,
            step_size: 0.05,
            final_step_fraction: 0.1,
            mc_samples: 8,
            final_samples: 32,
            seeds: vec![0, 1, 2, 3],
            init_jitter: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("optimizer.step_size", "must be positive"));
        }
        if !(self.final_step_fraction > 0.0 && self.final_step_fraction <= 1.0) {
            return Err(Error::config("optimizer.final_step_fraction", "must be in (0, 1]"));
        }
        if self.mc_samples == 0 {
            return Err(Error::config("optimizer.mc_samples", "must be at least 1"));
        }
        if self.final_samples == 0 {
            return Err(Error::config("optimizer.final_samples", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("optimizer.seeds", "at least one seed required"));
        }
        if !(self.init_jitter >= 0.0) {
            return Err(Error::config("optimizer.init_jitter", "must be nonnegative"));
        }
        Ok(())
    }

    pub fn step_at(&self, t: usize) -> f64 {
        let lo = self.step_size * self.final_step_fraction;
        let frac = if self.iterations <= 1 {
            0.0
        } else {
            t as f64 / (self.iterations - 1) as f64
        };
        lo + 0.5 * (self.step_size - lo) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Adam with per-coordinate first and second moments (ascent).
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] += lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub schema_version: u32,
    pub seed: u64,
    pub elbo_trace: Vec<f64>,
    pub final_elbo: f64,
    pub final_elbo_std_err: f64,
    pub n_skipped: usize,
    pub state: VariationalState,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Seed-dependent perturbation of inducing and log-hyperparameter means.
pub fn perturb_init(state: &VariationalState, seed: u64, scale: f64) -> VariationalState {
    let mut out = state.clone();
    if scale == 0.0 {
        return out;
    }
    let mut rng = step_rng(seed, EVAL_STREAM - 1);
    let mut jitter =
        |v: &mut f64| *v += scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    for c in [&mut out.mu, &mut out.phi] {
        match c {
            Component::Gp(g) => {
                g.block.posterior.mean.iter_mut().for_each(&mut jitter);
                g.hyper.mean.iter_mut().for_each(&mut jitter);
                let theta: Vec<f64> = g.hyper.mean.iter().map(|v| v.exp()).collect();
                if let Ok(k) = g.block.kernel.with_params(&theta) {
                    g.block.kernel = k;
                }
            }
            Component::Parametric(p) => p.log_mean.iter_mut().for_each(&mut jitter),
            Component::Absent => {}
        }
    }
    out
}

/// Maximise the ELBO from `init` with Adam and cosine step decay.
pub fn fit(init: &VariationalState, data: &ModelData, cfg: &OptimizerConfig, seed: u64) -> Result<FitResult> {
    cfg.validate()?;
    let start = Instant::now();
    let mut state = init.clone();
    let mut params = state.flatten();
    let mut adam = Adam::new(params.len());
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut skipped = 0usize;
    for it in 0..cfg.iterations {
        match elbo_and_grad(&state, data, cfg.mc_samples, seed, it as u64) {
            Ok((est, grad)) if grad.iter().all(|g| g.is_finite()) && est.value.is_finite() => {
                trace.push(est.value);
                adam.step(&mut params, &grad, cfg.step_at(it));
                state.unflatten(&params);
            }
            Ok((est, _)) => {
                skipped += 1;
                trace.push(est.value);
                warn!("iteration {it}: non-finite gradient, step skipped");
            }
            Err(e) => {
                skipped += 1;
                trace.push(f64::NEG_INFINITY);
                warn!("iteration {it}: {e}; step skipped");
            }
        }
        if 2 * skipped > cfg.iterations.max(1) {
            return Err(Error::FitFailed(format!(
                "{skipped} of {} steps skipped (seed {seed})",
                it + 1
            )));
        }
        if it % 100 == 0 {
            debug!("seed {seed} iteration {it}: elbo {:.3}", trace[it]);
        }
    }
    let fin = elbo_estimate(&state, data, cfg.final_samples, seed)?;
    info!("seed {seed}: final elbo {:.3} ± {:.3}", fin.value, fin.std_err);
    Ok(FitResult {
        schema_version: SCHEMA_VERSION,
        seed,
        elbo_trace: trace,
        final_elbo: fin.value,
        final_elbo_std_err: fin.std_err,
        n_skipped: skipped,
        state,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Index of the largest final ELBO.
pub fn select_best(final_elbos: &[f64]) -> Option<usize> {
    final_elbos
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
}

/// One fit per restart seed from perturbed initialisations, in seed order.
pub fn fit_restarts(
    init: &VariationalState,
    data: &ModelData,
    cfg: &OptimizerConfig,
) -> Result<Vec<Result<FitResult>>> {
    cfg.validate()?;
    Ok(cfg
        .seeds
        .par_iter()
        .map(|&s| fit(&perturb_init(init, s, cfg.init_jitter), data, cfg, s))
        .collect())
}

/// Fit once per seed (perturbed initialisations) and keep the best ELBO.
pub fn multi_restart(
    init: &VariationalState,
    data: &ModelData,
    cfg: &OptimizerConfig,
) -> Result<(FitResult, Vec<f64>)> {
    let results = fit_restarts(init, data, cfg)?;
    let mut ok = Vec::new();
    let mut messages = Vec::new();
    for (s, r) in cfg.seeds.iter().zip(results) {
        match r {
            Ok(r) => ok.push(r),
            Err(e) => messages.push(format!("seed {s}: {e}")),
        }
    }
    if ok.is_empty() {
        return Err(Error::AllRestartsFailed {
            n: cfg.seeds.len(),
            messages,
        });
    }
    let finals: Vec<f64> = ok.iter().map(|r| r.final_elbo).collect();
    let best = select_best(&finals).expect("non-empty");
    let wall: f64 = ok.iter().map(|r| r.wall_time_secs).sum();
    let mut chosen = ok.swap_remove(best);
    chosen.wall_time_secs = wall;
    Ok((chosen, finals))
}
