//! Comparison models fitted with the same variational machinery.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::hawkes_model::{LinkFunction, SpatioTemporalWindow};
use crate::kernels::{Family, Point, Structure};
use crate::vi::{
    exp_gaussian_trigger, init_gp_factor, multi_restart, Component, FitResult, HyperPrior, ModelData, OptimizerConfig,
    ParametricFactor, ParametricForm, VariationalState,
};

/// Exponential-in-time, Gaussian-in-space trigger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParametricTrigger {
    pub alpha: f64,
    pub beta: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

impl ParametricTrigger {
    pub fn new(alpha: f64, beta: f64, sigma_x: f64, sigma_y: f64) -> Result<Self> {
        if [alpha, beta, sigma_x, sigma_y]
            .iter()
            .any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return Err(Error::Domain("parametric trigger parameters must be positive".into()));
        }
        Ok(Self {
            alpha,
            beta,
            sigma_x,
            sigma_y,
        })
    }

    fn as_vec(&self) -> [f64; 4] {
        [self.alpha, self.beta, self.sigma_x, self.sigma_y]
    }

    /// Trigger value; zero outside the support when one is given.
    pub fn eval(&self, lag: &Point, support: Option<&SpatioTemporalWindow>) -> f64 {
        if let Some(w) = support {
            let inside = lag[0] >= 0.0 && lag[0] <= w.t_phi && lag[1].abs() <= w.x_phi && lag[2].abs() <= w.y_phi;
            if !inside {
                return 0.0;
            }
        }
        exp_gaussian_trigger(&self.as_vec(), lag)
    }

    /// Mass of the trigger over the truncated support.
    pub fn truncated_mass(&self, w: &SpatioTemporalWindow) -> f64 {
        let sx = erf(w.x_phi / (std::f64::consts::SQRT_2 * self.sigma_x));
        let sy = erf(w.y_phi / (std::f64::consts::SQRT_2 * self.sigma_y));
        self.alpha * (1.0 - (-self.beta * w.t_phi).exp()) * sx * sy
    }
}

pub fn parametric_trigger_eval(p: &ParametricTrigger, dt: f64, dx: f64, dy: f64) -> f64 {
    p.eval(&[dt, dx, dy], None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    ParametricHawkes,
    CoxHawkes,
    Lgcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    /// Link for the GP background (Cox–Hawkes and LGCP).
    pub background_link: LinkFunction,
    pub family: Family,
    pub inducing_mu: [usize; 3],
}

impl BaselineSpec {
    pub fn new(kind: BaselineKind) -> Self {
        Self {
            kind,
            background_link: LinkFunction::Exp,
            family: Family::Rbf,
            inducing_mu: [4, 4, 4],
        }
    }
}

/// Shape and rate of the weak Gamma prior on every parametric quantity.
pub const PARAMETRIC_PRIOR: (f64, f64) = (1.0, 0.01);
const PARAMETRIC_INIT_SD: f64 = 0.1;

fn parametric_prior(n: usize) -> HyperPrior {
    HyperPrior::gamma(n, PARAMETRIC_PRIOR.0, PARAMETRIC_PRIOR.1)
}

fn trigger_factor(w: &SpatioTemporalWindow) -> Result<ParametricFactor> {
    ParametricFactor::new(
        ParametricForm::ExpGaussianTrigger,
        &[0.2, 4.0 / w.t_phi, w.x_phi / 3.0, w.y_phi / 3.0],
        PARAMETRIC_INIT_SD,
        parametric_prior(4),
    )
}

/// Initial variational state for a baseline.
pub fn init_baseline_state(spec: &BaselineSpec, data: &ModelData) -> Result<VariationalState> {
    let w = data.layout.window;
    let n = data.layout.n_events().max(1) as f64;
    let gp_background = || -> Result<Component> {
        Ok(Component::Gp(init_gp_factor(
            spec.family,
            Structure::Additive,
            w.domain(),
            spec.inducing_mu,
            spec.background_link,
            HyperPrior::gamma(Structure::Additive.n_params(), 2.0, 2.0),
        )?))
    };
    Ok(match spec.kind {
        BaselineKind::ParametricHawkes => VariationalState {
            mu: Component::Parametric(ParametricFactor::new(
                ParametricForm::Constant,
                &[0.8 * n / w.volume()],
                PARAMETRIC_INIT_SD,
                parametric_prior(1),
            )?),
            phi: Component::Parametric(trigger_factor(&w)?),
        },
        BaselineKind::CoxHawkes => VariationalState {
            mu: gp_background()?,
            phi: Component::Parametric(trigger_factor(&w)?),
        },
        BaselineKind::Lgcp => VariationalState {
            mu: gp_background()?,
            phi: Component::Absent,
        },
    })
}

/// Fit a baseline with multi-restart selection.
pub fn fit_baseline(spec: &BaselineSpec, data: &ModelData, cfg: &OptimizerConfig) -> Result<(FitResult, Vec<f64>)> {
    let init = init_baseline_state(spec, data)?;
    multi_restart(&init, data, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn trigger_examples() {
        let p = ParametricTrigger::new(0.4, 3.0, 0.2, 0.1).unwrap();
        assert_relative_eq!(
            parametric_trigger_eval(&p, 0.0, 0.0, 0.0),
            0.4 * 3.0 / (2.0 * PI * 0.2 * 0.1),
            epsilon = 1e-12
        );
        let q = ParametricTrigger::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(
            parametric_trigger_eval(&q, 1.0, 0.0, 0.0),
            (-1.0f64).exp() / (2.0 * PI),
            epsilon = 1e-15
        );
        assert_relative_eq!(parametric_trigger_eval(&q, 1.0, 0.0, 0.0), 0.05855, epsilon = 1e-5);
        assert!(ParametricTrigger::new(0.0, 1.0, 1.0, 1.0).is_err());
    }

    fn integrate(
        p: &ParametricTrigger,
        tmax: f64,
        xmax: f64,
        ymax: f64,
        n: usize,
        support: Option<&SpatioTemporalWindow>,
    ) -> f64 {
        let q = crate::grid::QuadratureGrid::new(
            crate::grid::Box3::new([0.0, -xmax, -ymax], [tmax, xmax, ymax]),
            [n, n, n],
        )
        .unwrap();
        let v: Vec<f64> = q.grid.points().iter().map(|l| p.eval(l, support)).collect();
        q.integrate(&v)
    }

    #[test]
    fn full_integral_is_alpha() {
        let p = ParametricTrigger::new(0.6, 2.0, 0.5, 0.4).unwrap();
        let v = integrate(&p, 12.0, 4.0, 4.0, 301, None);
        assert_relative_eq!(v, 0.6, max_relative = 1e-3);
    }

    #[test]
    fn truncated_mass_matches_quadrature() {
        let w = SpatioTemporalWindow::new(10.0, 10.0, 10.0, 0.5, 0.3, 0.3).unwrap();
        let p = ParametricTrigger::new(0.3, 2.5, 0.15, 0.1).unwrap();
        let v = integrate(&p, 0.5, 0.3, 0.3, 401, Some(&w));
        assert_relative_eq!(v, p.truncated_mass(&w), max_relative = 1e-4);
        // Outside the support the truncated trigger vanishes.
        assert_eq!(p.eval(&[0.6, 0.0, 0.0], Some(&w)), 0.0);
    }

    #[test]
    fn baseline_states_have_expected_shapes() {
        let w = SpatioTemporalWindow::new(4.0, 2.0, 2.0, 0.5, 0.3, 0.3).unwrap();
        let ev = crate::hawkes_model::EventSequence::new(vec![[1.0, 1.0, 1.0], [2.0, 0.5, 0.5]], &w).unwrap();
        let layout = crate::hawkes_model::LikelihoodLayout::new(w, ev, [4, 4, 4], [3, 3, 3]).unwrap();
        let data = ModelData::new(layout);
        let ph = init_baseline_state(&BaselineSpec::new(BaselineKind::ParametricHawkes), &data).unwrap();
        assert_eq!(ph.n_params(), 2 + 8);
        let lg = init_baseline_state(&BaselineSpec::new(BaselineKind::Lgcp), &data).unwrap();
        assert!(lg.phi.is_absent());
        let ch = init_baseline_state(&BaselineSpec::new(BaselineKind::CoxHawkes), &data).unwrap();
        match &ch.mu {
            Component::Gp(g) => assert_eq!(g.block.kernel.structure, Structure::Additive),
            _ => panic!("Cox-Hawkes background must be a GP"),
        }
    }
}
