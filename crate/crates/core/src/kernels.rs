//! Stationary covariance kernels over (t, x, y).
//!
//! Base kernels are written in terms of the scaled distance `r = |z - z'| / ℓ`.
//! Joint kernels are stored as a sum of [`Term`]s, each a product of
//! [`Factor`]s over contiguous coordinate blocks. RBF kernels factorise down
//! to single coordinates; Matérn kernels only down to the block over which
//! the distance is taken. The factorised form is what lets the sparse-GP
//! projector apply kernels on tensor grids without materialising them.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Matérn smoothness restricted to the closed-form half-integer cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Nu {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl Nu {
    pub fn from_f64(nu: f64) -> Result<Nu> {
        match nu {
            0.5 => Ok(Nu::Half),
            1.5 => Ok(Nu::ThreeHalves),
            2.5 => Ok(Nu::FiveHalves),
            other => Err(Error::Domain(format!(
                "Matérn smoothness must be one of 0.5, 1.5, 2.5 (got {other})"
            ))),
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Nu::Half => 0.5,
            Nu::ThreeHalves => 1.5,
            Nu::FiveHalves => 2.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Rbf,
    Matern(Nu),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// `σ² k_t(t,t'|1,ℓ_t) k_s(s,s'|1,ℓ_x,ℓ_y)` with ARD over space.
    Separable,
    /// `k_t + k_s + k_ts`, isotropic spatial and spatio-temporal parts.
    Additive,
}

impl Structure {
    pub fn n_variances(self) -> usize {
        match self {
            Structure::Separable => 1,
            Structure::Additive => 3,
        }
    }

    pub fn n_lengthscales(self) -> usize {
        3
    }

    pub fn n_params(self) -> usize {
        self.n_variances() + self.n_lengthscales()
    }
}

/// Signal variances followed by lengthscales.
///
/// Separable: `[σ²]`, `[ℓ_t, ℓ_x, ℓ_y]`. Additive: `[σ_t², σ_s², σ_ts²]`,
/// `[ℓ_t, ℓ_s, ℓ_ts]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub variances: Vec<f64>,
    pub lengthscales: Vec<f64>,
}

impl KernelHyperparams {
    pub fn new(structure: Structure, variances: Vec<f64>, lengthscales: Vec<f64>) -> Result<Self> {
        if variances.len() != structure.n_variances() {
            return Err(Error::Domain(format!(
                "{structure:?} kernel needs {} variances, got {}",
                structure.n_variances(),
                variances.len()
            )));
        }
        if lengthscales.len() != structure.n_lengthscales() {
            return Err(Error::Domain(format!(
                "{structure:?} kernel needs {} lengthscales, got {}",
                structure.n_lengthscales(),
                lengthscales.len()
            )));
        }
        if let Some(bad) = variances
            .iter()
            .chain(lengthscales.iter())
            .find(|v| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::Domain(format!(
                "kernel hyperparameters must be strictly positive (got {bad})"
            )));
        }
        Ok(Self {
            variances,
            lengthscales,
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.variances.iter().chain(self.lengthscales.iter()).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelSpecRepr", into = "KernelSpecRepr")]
pub struct KernelSpec {
    pub family: Family,
    pub structure: Structure,
    pub hyperparams: KernelHyperparams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelSpecRepr {
    family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nu: Option<f64>,
    structure: Structure,
    variances: Vec<f64>,
    lengthscales: Vec<f64>,
}

impl TryFrom<KernelSpecRepr> for KernelSpec {
    type Error = Error;

    fn try_from(r: KernelSpecRepr) -> Result<Self> {
        let family = parse_family(&r.family, r.nu)?;
        KernelSpec::new(family, r.structure, r.variances, r.lengthscales)
    }
}

impl From<KernelSpec> for KernelSpecRepr {
    fn from(k: KernelSpec) -> Self {
        let (family, nu) = match k.family {
            Family::Rbf => ("rbf".to_string(), None),
            Family::Matern(nu) => ("matern".to_string(), Some(nu.as_f64())),
        };
        KernelSpecRepr {
            family,
            nu,
            structure: k.structure,
            variances: k.hyperparams.variances,
            lengthscales: k.hyperparams.lengthscales,
        }
    }
}

pub fn parse_family(name: &str, nu: Option<f64>) -> Result<Family> {
    match name {
        "rbf" => Ok(Family::Rbf),
        "matern" => Ok(Family::Matern(Nu::from_f64(nu.unwrap_or(2.5))?)),
        other => Err(Error::Domain(format!(
            "unknown kernel family `{other}` (expected rbf or matern)"
        ))),
    }
}

impl KernelSpec {
    pub fn new(family: Family, structure: Structure, variances: Vec<f64>, lengthscales: Vec<f64>) -> Result<Self> {
        Ok(Self {
            family,
            structure,
            hyperparams: KernelHyperparams::new(structure, variances, lengthscales)?,
        })
    }

    pub fn n_params(&self) -> usize {
        self.structure.n_params()
    }

    /// Hyperparameters flattened as variances then lengthscales.
    pub fn params(&self) -> Vec<f64> {
        self.hyperparams.to_vec()
    }

    /// Same family and structure with new (linear-scale) hyperparameters.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let nv = self.structure.n_variances();
        if params.len() != self.n_params() {
            return Err(Error::Domain(format!(
                "expected {} kernel parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        KernelSpec::new(
            self.family,
            self.structure,
            params[..nv].to_vec(),
            params[nv..].to_vec(),
        )
    }

    pub fn eval(&self, p: &Point, q: &Point) -> f64 {
        eval_joint_kernel(self, p, q)
    }

    /// Value at zero lag.
    pub fn diagonal(&self) -> f64 {
        self.hyperparams.variances.iter().sum()
    }

    pub(crate) fn terms(&self) -> Vec<Term> {
        kernel_terms(self.family, self.structure)
    }
}

/// Unit-variance base kernel as a function of scaled distance.
pub(crate) fn unit_kernel(family: Family, r: f64) -> f64 {
    match family {
        Family::Rbf => (-0.5 * r * r).exp(),
        Family::Matern(Nu::Half) => (-r).exp(),
        Family::Matern(Nu::ThreeHalves) => {
            let a = 3f64.sqrt() * r;
            (1.0 + a) * (-a).exp()
        }
        Family::Matern(Nu::FiveHalves) => {
            let a = 5f64.sqrt() * r;
            (1.0 + a + a * a / 3.0) * (-a).exp()
        }
    }
}

/// `-k'(r) / r` for the unit kernel. Multiplying by `(Δ/ℓ)²` gives the
/// derivative with respect to `log ℓ`. Infinite at `r = 0` for ν = 1/2; callers
/// only use it with a zero multiplier there.
pub(crate) fn unit_kernel_slope(family: Family, r: f64) -> f64 {
    match family {
        Family::Rbf => (-0.5 * r * r).exp(),
        Family::Matern(Nu::Half) => {
            if r > 0.0 {
                (-r).exp() / r
            } else {
                0.0
            }
        }
        Family::Matern(Nu::ThreeHalves) => 3.0 * (-(3f64.sqrt()) * r).exp(),
        Family::Matern(Nu::FiveHalves) => {
            let a = 5f64.sqrt() * r;
            5.0 / 3.0 * (1.0 + a) * (-a).exp()
        }
    }
}

pub fn eval_base_kernel(family: Family, r: f64, variance: f64, lengthscale: f64) -> Result<f64> {
    if !(variance > 0.0) || !(lengthscale > 0.0) || !(r >= 0.0) {
        return Err(Error::Domain(format!(
            "base kernel needs σ² > 0, ℓ > 0, r ≥ 0 (got σ²={variance}, ℓ={lengthscale}, r={r})"
        )));
    }
    Ok(variance * unit_kernel(family, r / lengthscale))
}

pub fn eval_joint_kernel(spec: &KernelSpec, p: &Point, q: &Point) -> f64 {
    let params = spec.params();
    spec.terms()
        .iter()
        .map(|term| term.eval(spec.family, &params, p, q))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum FactorKind {
    /// Constant one: the term does not depend on these coordinates.
    Ones,
    Base,
}

/// One multiplicative block of a term, covering coordinates `start..end`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Factor {
    pub start: usize,
    pub end: usize,
    pub kind: FactorKind,
    /// Index into the flat parameter vector of the lengthscale for each
    /// covered coordinate.
    pub lengthscale: [usize; 3],
}

impl Factor {
    fn ones(start: usize, end: usize) -> Self {
        Self {
            start,
            end,
            kind: FactorKind::Ones,
            lengthscale: [usize::MAX; 3],
        }
    }

    fn base(start: usize, end: usize, ls: usize) -> Self {
        Self::ard(start, end, [ls; 3])
    }

    fn ard(start: usize, end: usize, lengthscale: [usize; 3]) -> Self {
        Self {
            start,
            end,
            kind: FactorKind::Base,
            lengthscale,
        }
    }

    /// Distinct lengthscale parameters this factor depends on.
    pub fn params(&self) -> Vec<usize> {
        if self.kind == FactorKind::Ones {
            return Vec::new();
        }
        let mut out: Vec<usize> = (self.start..self.end)
            .map(|d| self.lengthscale[d - self.start])
            .collect();
        out.dedup();
        out
    }

    /// Factor value and, for each entry of `self.params()`, its derivative
    /// with respect to the log of that lengthscale.
    pub fn eval_with_grad(&self, family: Family, params: &[f64], p: &Point, q: &Point, grads: &mut [f64]) -> f64 {
        if self.kind == FactorKind::Ones {
            return 1.0;
        }
        if family == Family::Rbf && self.end - self.start == 1 {
            let s = (p[self.start] - q[self.start]) / params[self.lengthscale[0]];
            let s2 = s * s;
            let k = (-0.5 * s2).exp();
            if let Some(g) = grads.first_mut() {
                *g = k * s2;
            }
            return k;
        }
        let mut scaled_sq = [0.0; 3];
        let mut r2 = 0.0;
        for d in self.start..self.end {
            let s = (p[d] - q[d]) / params[self.lengthscale[d - self.start]];
            scaled_sq[d - self.start] = s * s;
            r2 += s * s;
        }
        let r = r2.sqrt();
        let k = unit_kernel(family, r);
        if !grads.is_empty() {
            let slope = if r2 > 0.0 { unit_kernel_slope(family, r) } else { 0.0 };
            let mut slot = 0;
            let mut last = usize::MAX;
            for d in self.start..self.end {
                let idx = self.lengthscale[d - self.start];
                if idx != last {
                    if last != usize::MAX {
                        slot += 1;
                    }
                    grads[slot] = 0.0;
                    last = idx;
                }
                grads[slot] += slope * scaled_sq[d - self.start];
            }
        }
        k
    }

    pub fn eval(&self, family: Family, params: &[f64], p: &Point, q: &Point) -> f64 {
        self.eval_with_grad(family, params, p, q, &mut [])
    }
}

/// `params[variance] * Π factors`, with factors tiling coordinates 0..3.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Term {
    pub variance: usize,
    pub factors: Vec<Factor>,
}

impl Term {
    pub fn eval(&self, family: Family, params: &[f64], p: &Point, q: &Point) -> f64 {
        params[self.variance]
            * self
                .factors
                .iter()
                .map(|f| f.eval(family, params, p, q))
                .product::<f64>()
    }
}

pub(crate) fn kernel_terms(family: Family, structure: Structure) -> Vec<Term> {
    let rbf = family == Family::Rbf;
    match (structure, rbf) {
        (Structure::Separable, true) => vec![Term {
            variance: 0,
            factors: vec![Factor::base(0, 1, 1), Factor::base(1, 2, 2), Factor::base(2, 3, 3)],
        }],
        (Structure::Separable, false) => vec![Term {
            variance: 0,
            factors: vec![Factor::base(0, 1, 1), Factor::ard(1, 3, [2, 3, 0])],
        }],
        (Structure::Additive, true) => vec![
            Term {
                variance: 0,
                factors: vec![Factor::base(0, 1, 3), Factor::ones(1, 3)],
            },
            Term {
                variance: 1,
                factors: vec![Factor::ones(0, 1), Factor::base(1, 2, 4), Factor::base(2, 3, 4)],
            },
            Term {
                variance: 2,
                factors: vec![Factor::base(0, 1, 5), Factor::base(1, 2, 5), Factor::base(2, 3, 5)],
            },
        ],
        (Structure::Additive, false) => vec![
            Term {
                variance: 0,
                factors: vec![Factor::base(0, 1, 3), Factor::ones(1, 3)],
            },
            Term {
                variance: 1,
                factors: vec![Factor::ones(0, 1), Factor::base(1, 3, 4)],
            },
            Term {
                variance: 2,
                factors: vec![Factor::base(0, 3, 5)],
            },
        ],
    }
}

/// Kernel value and its gradient with respect to the log of every
/// hyperparameter (variances then lengthscales).
pub(crate) fn eval_with_log_grad(
    family: Family,
    terms: &[Term],
    params: &[f64],
    p: &Point,
    q: &Point,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;
    let mut fvals = [0.0; 3];
    let mut fgrads = [[0.0; 3]; 3];
    for term in terms {
        let coef = params[term.variance];
        for (i, f) in term.factors.iter().enumerate() {
            let np = f.params().len();
            fvals[i] = f.eval_with_grad(family, params, p, q, &mut fgrads[i][..np]);
        }
        let nf = term.factors.len();
        let value: f64 = coef * fvals[..nf].iter().product::<f64>();
        total += value;
        grad[term.variance] += value;
        for (i, f) in term.factors.iter().enumerate() {
            let others: f64 = (0..nf).filter(|&j| j != i).map(|j| fvals[j]).product();
            for (slot, idx) in f.params().into_iter().enumerate() {
                grad[idx] += coef * others * fgrads[i][slot];
            }
        }
    }
    total
}

/// Gram matrix between two point lists. When `a` and `b` are the same list,
/// `jitter` is added to the diagonal.
pub fn gram_matrix(spec: &KernelSpec, a: &[Point], b: &[Point], jitter: f64) -> DMatrix<f64> {
    let same = a == b;
    let mut k = DMatrix::from_fn(a.len(), b.len(), |i, j| eval_joint_kernel(spec, &a[i], &b[j]));
    if same {
        for i in 0..a.len() {
            k[(i, i)] += jitter;
        }
    }
    k
}

pub const JITTER_START: f64 = 1e-6;
pub const JITTER_MAX: f64 = 1e-2;

/// Cholesky factorisation with escalating diagonal jitter.
///
/// Jitter starts at `1e-6 · mean(diag)` and is multiplied by ten until it
/// reaches `1e-2 · mean(diag)`. Returns the factor and the absolute jitter
/// that was added.
pub fn cholesky_with_jitter(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let mean_diag = if n == 0 { 1.0 } else { k.diagonal().sum() / n as f64 };
    if !mean_diag.is_finite() || mean_diag <= 0.0 {
        return Err(Error::Conditioning {
            condition_number: f64::INFINITY,
        });
    }
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-12) {
        let jitter = rel * mean_diag;
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(kj) {
            return Ok((ch, jitter));
        }
        rel *= 10.0;
    }
    let mut kj = k.clone();
    for i in 0..n {
        kj[(i, i)] += JITTER_MAX * mean_diag;
    }
    Err(Error::Conditioning {
        condition_number: condition_number(&kj),
    })
}

/// `λ_max / λ_min` of a symmetric matrix; `+∞` when `λ_min ≤ 0`.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const ALL_FAMILIES: [Family; 4] = [
        Family::Rbf,
        Family::Matern(Nu::Half),
        Family::Matern(Nu::ThreeHalves),
        Family::Matern(Nu::FiveHalves),
    ];

    fn sep(family: Family, var: f64, ls: [f64; 3]) -> KernelSpec {
        KernelSpec::new(family, Structure::Separable, vec![var], ls.to_vec()).unwrap()
    }

    fn add(family: Family, vars: [f64; 3], ls: [f64; 3]) -> KernelSpec {
        KernelSpec::new(family, Structure::Additive, vars.to_vec(), ls.to_vec()).unwrap()
    }

    #[test]
    fn base_kernel_examples() {
        assert_eq!(eval_base_kernel(Family::Rbf, 0.0, 2.5, 1.0).unwrap(), 2.5);
        assert_relative_eq!(eval_base_kernel(Family::Rbf, 1.0, 1.0, 1.0).unwrap(), (-0.5f64).exp());
        assert_relative_eq!(
            eval_base_kernel(Family::Matern(Nu::Half), 1.0, 1.0, 1.0).unwrap(),
            (-1f64).exp()
        );
        assert_eq!(
            eval_base_kernel(Family::Matern(Nu::FiveHalves), 0.0, 3.0, 0.4).unwrap(),
            3.0
        );
    }

    #[test]
    fn base_kernel_rejects_bad_hyperparams() {
        assert!(eval_base_kernel(Family::Rbf, 1.0, 0.0, 1.0).is_err());
        assert!(eval_base_kernel(Family::Rbf, 1.0, 1.0, -1.0).is_err());
        assert!(eval_base_kernel(Family::Rbf, -1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn matern_forms_match_closed_form() {
        let r: f64 = 0.7;
        let s3 = 3f64.sqrt() * r;
        let s5 = 5f64.sqrt() * r;
        assert_relative_eq!(
            unit_kernel(Family::Matern(Nu::ThreeHalves), r),
            (1.0 + s3) * (-s3).exp()
        );
        assert_relative_eq!(
            unit_kernel(Family::Matern(Nu::FiveHalves), r),
            (1.0 + s5 + 5.0 * r * r / 3.0) * (-s5).exp()
        );
    }

    #[test]
    fn nu_outside_half_integers_rejected() {
        assert!(Nu::from_f64(2.0).is_err());
        assert!(parse_family("matern", Some(2.0)).is_err());
        assert!(parse_family("cosine", None).is_err());
    }

    #[test]
    fn joint_kernel_examples() {
        let p = [1.0, 2.0, 3.0];
        assert_eq!(sep(Family::Rbf, 2.0, [1.0, 1.0, 1.0]).eval(&p, &p), 2.0);
        assert_relative_eq!(add(Family::Rbf, [1.0, 2.0, 0.5], [1.0, 1.0, 1.0]).eval(&p, &p), 3.5);
        let k = sep(Family::Rbf, 1.0, [0.7, 1.0, 1.0]);
        assert_relative_eq!(
            k.eval(&[0.0, 0.0, 0.0], &[0.7, 0.0, 0.0]),
            (-0.5f64).exp(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn separable_matern_uses_ard_spatial_distance() {
        let k = sep(Family::Matern(Nu::ThreeHalves), 1.5, [0.5, 2.0, 0.25]);
        let p = [0.1, 0.3, 0.2];
        let q = [0.4, 1.0, 0.1];
        let rs = (((p[1] - q[1]) / 2.0f64).powi(2) + ((p[2] - q[2]) / 0.25f64).powi(2)).sqrt();
        let rt = (p[0] - q[0]).abs() / 0.5;
        let m32 = |r: f64| (1.0 + 3f64.sqrt() * r) * (-(3f64.sqrt()) * r).exp();
        assert_relative_eq!(k.eval(&p, &q), 1.5 * m32(rt) * m32(rs), epsilon = 1e-14);
    }

    #[test]
    fn additive_matern_components() {
        let fam = Family::Matern(Nu::FiveHalves);
        let k = add(fam, [0.5, 1.2, 0.3], [1.1, 0.6, 2.0]);
        let p: Point = [0.2, 0.5, 0.9];
        let q: Point = [1.0, 0.1, 0.4];
        let dt = (p[0] - q[0]).abs();
        let ds = ((p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
        let dts = (dt * dt + ds * ds).sqrt();
        let expected =
            0.5 * unit_kernel(fam, dt / 1.1) + 1.2 * unit_kernel(fam, ds / 0.6) + 0.3 * unit_kernel(fam, dts / 2.0);
        assert_relative_eq!(k.eval(&p, &q), expected, epsilon = 1e-14);
    }

    #[test]
    fn gram_examples() {
        let k = sep(Family::Rbf, 1.0, [1.0, 1.0, 1.0]);
        let one = [[0.3, 0.2, 0.1]];
        assert_eq!(gram_matrix(&k, &one, &one, 0.0)[(0, 0)], 1.0);
        let two = [[0.3, 0.2, 0.1], [0.3, 0.2, 0.1]];
        let g = gram_matrix(&k, &two, &two, 0.0);
        assert!(g.iter().all(|v| *v == 1.0));

        let ka = add(Family::Rbf, [1.0, 0.5, 0.25], [0.8, 1.3, 2.0]);
        let pts = [[0.0, 0.1, 0.2], [1.0, 0.5, 0.9], [2.5, 1.5, 0.3]];
        let g = gram_matrix(&ka, &pts, &pts, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g[(i, j)], eval_joint_kernel(&ka, &pts[i], &pts[j]));
            }
        }
    }

    #[test]
    fn condition_number_examples() {
        assert_relative_eq!(condition_number(&DMatrix::identity(3, 3)), 1.0);
        assert_relative_eq!(
            condition_number(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![10.0, 1.0]))),
            10.0
        );
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        assert_relative_eq!(condition_number(&m), 3.0, epsilon = 1e-12);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(condition_number(&singular).is_infinite());
    }

    #[test]
    fn jitter_escalation_factorises_singular_gram() {
        let k = sep(Family::Rbf, 1.0, [1.0, 1.0, 1.0]);
        let pts = [[0.0; 3], [0.0; 3], [0.0; 3]];
        let g = gram_matrix(&k, &pts, &pts, 0.0);
        let (_, jitter) = cholesky_with_jitter(&g).unwrap();
        assert!((1e-6..=1e-2).contains(&jitter));
    }

    #[test]
    fn jitter_escalation_reports_conditioning_failure() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match cholesky_with_jitter(&m) {
            Err(Error::Conditioning { .. }) => {}
            other => panic!("expected conditioning error, got {other:?}"),
        }
    }

    #[test]
    fn log_gradient_matches_finite_differences() {
        for fam in ALL_FAMILIES {
            for spec in [
                sep(fam, 1.3, [0.7, 1.1, 0.4]),
                add(fam, [0.6, 1.2, 0.9], [0.8, 0.5, 1.7]),
            ] {
                let p = [0.3, 0.8, -0.2];
                let q = [0.9, 0.1, 0.25];
                let params = spec.params();
                let terms = spec.terms();
                let mut grad = vec![0.0; params.len()];
                let v = eval_with_log_grad(spec.family, &terms, &params, &p, &q, &mut grad);
                assert_relative_eq!(v, spec.eval(&p, &q), epsilon = 1e-14);
                for i in 0..params.len() {
                    let h: f64 = 1e-6;
                    let mut up = params.clone();
                    up[i] *= h.exp();
                    let mut dn = params.clone();
                    dn[i] *= (-h).exp();
                    let fd = (spec.with_params(&up).unwrap().eval(&p, &q)
                        - spec.with_params(&dn).unwrap().eval(&p, &q))
                        / (2.0 * h);
                    assert_relative_eq!(grad[i], fd, epsilon = 1e-8, max_relative = 1e-6);
                }
            }
        }
    }

    #[test]
    fn spec_serde_roundtrip_and_validation() {
        let k = add(Family::Matern(Nu::ThreeHalves), [1.0, 2.0, 3.0], [0.1, 0.2, 0.3]);
        let s = serde_json::to_string(&k).unwrap();
        assert!(s.contains("\"nu\":1.5"));
        let back: KernelSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, k);
        let bad = r#"{"family":"matern","nu":2.0,"structure":"additive","variances":[1,1,1],"lengthscales":[1,1,1]}"#;
        assert!(serde_json::from_str::<KernelSpec>(bad).is_err());
        let wrong_count = r#"{"family":"rbf","structure":"separable","variances":[1,1],"lengthscales":[1,1,1]}"#;
        assert!(serde_json::from_str::<KernelSpec>(wrong_count).is_err());
    }

    fn arb_point() -> impl Strategy<Value = Point> {
        (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(a, b, c)| [a, b, c])
    }

    fn arb_spec() -> impl Strategy<Value = KernelSpec> {
        (
            0usize..4,
            any::<bool>(),
            prop::collection::vec(0.1..3.0f64, 3),
            prop::collection::vec(0.2..2.0f64, 3),
        )
            .prop_map(|(f, additive, vars, ls)| {
                let family = ALL_FAMILIES[f];
                if additive {
                    KernelSpec::new(family, Structure::Additive, vars, ls).unwrap()
                } else {
                    KernelSpec::new(family, Structure::Separable, vec![vars[0]], ls).unwrap()
                }
            })
    }

    proptest! {
        #[test]
        fn symmetric(spec in arb_spec(), p in arb_point(), q in arb_point()) {
            prop_assert_eq!(spec.eval(&p, &q), spec.eval(&q, &p));
        }

        #[test]
        fn stationary(spec in arb_spec(), p in arb_point(), q in arb_point(), s in arb_point()) {
            let ps = [p[0] + s[0], p[1] + s[1], p[2] + s[2]];
            let qs = [q[0] + s[0], q[1] + s[1], q[2] + s[2]];
            let a = spec.eval(&p, &q);
            let b = spec.eval(&ps, &qs);
            prop_assert!((a - b).abs() <= 1e-12 * spec.diagonal());
        }

        #[test]
        fn bounded_by_diagonal(spec in arb_spec(), p in arb_point(), q in arb_point()) {
            let v = spec.eval(&p, &q);
            prop_assert!(v > 0.0 && v <= spec.diagonal() * (1.0 + 1e-12));
        }

        #[test]
        fn monotone_decay(f in 0usize..4, r1 in 0.0..5.0f64, dr in 0.0..5.0f64) {
            let fam = ALL_FAMILIES[f];
            let a = eval_base_kernel(fam, r1, 1.7, 0.9).unwrap();
            let b = eval_base_kernel(fam, r1 + dr, 1.7, 0.9).unwrap();
            prop_assert!(b <= a);
        }

        #[test]
        fn gram_is_psd_with_small_jitter(
            spec in arb_spec(),
            pts in prop::collection::vec(arb_point(), 1..30),
        ) {
            let g = gram_matrix(&spec, &pts, &pts, 1e-6 * spec.diagonal());
            let g = (&g + g.transpose()) * 0.5;
            // Repeated points are legal; jitter escalation must still succeed.
            prop_assert!(cholesky_with_jitter(&g).is_ok());
        }

        #[test]
        fn additive_gram_is_sum_of_components(
            f in 0usize..4,
            pts in prop::collection::vec(arb_point(), 1..8),
        ) {
            let fam = ALL_FAMILIES[f];
            let vars = [0.7, 1.3, 0.4];
            let ls = [0.9, 1.4, 0.6];
            let full = gram_matrix(&add(fam, vars, ls), &pts, &pts, 0.0);
            let kt = DMatrix::from_fn(pts.len(), pts.len(), |i, j| {
                vars[0] * unit_kernel(fam, (pts[i][0] - pts[j][0]).abs() / ls[0])
            });
            let ks = DMatrix::from_fn(pts.len(), pts.len(), |i, j| {
                let d = ((pts[i][1] - pts[j][1]).powi(2) + (pts[i][2] - pts[j][2]).powi(2)).sqrt();
                vars[1] * unit_kernel(fam, d / ls[1])
            });
            let kts = DMatrix::from_fn(pts.len(), pts.len(), |i, j| {
                let d = (0..3).map(|k| (pts[i][k] - pts[j][k]).powi(2)).sum::<f64>().sqrt();
                vars[2] * unit_kernel(fam, d / ls[2])
            });
            let diff = (full - (kt + ks + kts)).abs().max();
            prop_assert!(diff < 1e-12);
        }
    }
}
