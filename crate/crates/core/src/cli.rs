//! Run configuration and the `simulate` / `fit` / `evaluate` / `diagnose` /
//! `report` commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_baseline, BaselineKind, BaselineSpec};
use crate::diagnostics::{diagnose, PosteriorMeanIntensity};
use crate::error::{Error, Result};
use crate::hawkes_model::{
    expected_total_events, write_points_csv, EventSequence, LikelihoodLayout, LinkFunction, SpatioTemporalWindow,
};
use crate::kernels::{parse_family, Family, Structure};
use crate::metrics_eval::{metrics_report, summarise_posterior, PosteriorSummary};
use crate::simulate::{scenario, simulate_hawkes, SimulationSidecar};
use crate::vi::{
    init_gp_factor, multi_restart, Component, FitResult, HyperPrior, ModelData, OptimizerConfig, VariationalState,
    SCHEMA_VERSION,
};

pub const EVENTS_FILE: &str = "events.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const FIT_FILE: &str = "fit.json";
pub const RESTARTS_FILE: &str = "restarts.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const RESIDUALS_FILE: &str = "residuals.csv";
pub const REPORT_FILE: &str = "report.json";
pub const MU_SURFACE_FILE: &str = "mu_surface.csv";
pub const PHI_SURFACE_FILE: &str = "phi_surface.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";
pub const ERROR_FILE: &str = "error.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Full,
    Desk,
}

impl Profile {
    pub fn grids(self) -> ([usize; 3], [usize; 3]) {
        match self {
            Profile::Full => ([70; 3], [40; 3]),
            Profile::Desk => ([20; 3], [12; 3]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Ours,
    ParametricHawkes,
    CoxHawkes,
    Lgcp,
}

impl ModelKind {
    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            ModelKind::Ours => None,
            ModelKind::ParametricHawkes => Some(BaselineKind::ParametricHawkes),
            ModelKind::CoxHawkes => Some(BaselineKind::CoxHawkes),
            ModelKind::Lgcp => Some(BaselineKind::Lgcp),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub t_phi: f64,
    pub x_phi: f64,
    pub y_phi: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            t: 10.0,
            x: 10.0,
            y: 10.0,
            t_phi: 0.5,
            x_phi: 0.3,
            y_phi: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub family: String,
    pub nu: Option<f64>,
    pub structure: Structure,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            family: "rbf".into(),
            nu: None,
            structure: Structure::Additive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkName {
    Softplus,
    Exp,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkConfig {
    pub mu: LinkName,
    pub phi: LinkName,
    /// Sigmoid scale; defaults to ten times the crude event density.
    pub sigmoid_scale: Option<f64>,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            mu: LinkName::Softplus,
            phi: LinkName::Softplus,
            sigmoid_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub profile: Profile,
    pub mu: Option<[usize; 3]>,
    pub phi: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InducingConfig {
    pub mu: [usize; 3],
    pub phi: [usize; 3],
}

impl Default for InducingConfig {
    fn default() -> Self {
        Self {
            mu: [4, 4, 4],
            phi: [3, 3, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperpriorConfig {
    pub shape: f64,
    pub rate: f64,
}

impl Default for HyperpriorConfig {
    fn default() -> Self {
        Self { shape: 2.0, rate: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Link of the GP background in the Cox–Hawkes and LGCP baselines.
    pub baseline_link: LinkName,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Ours,
            baseline_link: LinkName::Exp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Built-in scenario used by `simulate` and as ground truth by `evaluate`.
    pub scenario: Option<u8>,
    /// Events CSV; defaults to `events.csv` in the output directory.
    pub events: Option<PathBuf>,
    /// Fit JSON; defaults to `fit.json` in the output directory.
    pub fit: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub n_draws: usize,
    /// Report MSE values multiplied by 100.
    pub scale: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            n_draws: 256,
            scale: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    pub n_grid: usize,
    /// Target rate; defaults to the median fitted intensity.
    pub k: Option<f64>,
    pub n_draws: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            n_grid: 8,
            k: None,
            n_draws: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub window: WindowConfig,
    pub kernel: KernelConfig,
    pub link: LinkConfig,
    pub grids: GridConfig,
    pub inducing: InducingConfig,
    pub hyperprior: HyperpriorConfig,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub evaluate: EvaluateConfig,
    pub diagnose: DiagnoseConfig,
}

fn toml_error_key(e: &toml::de::Error) -> String {
    let msg = e.message();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return rest[..end].to_string();
        }
    }
    "document".to_string()
}

/// Parse a TOML document, fill defaults and validate.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::config(toml_error_key(&e), e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.window()?;
        if let Some(n) = self.kernel.nu {
            if self.kernel.family != "matern" {
                return Err(Error::config("kernel.nu", "only meaningful for the matern family"));
            }
            crate::kernels::Nu::from_f64(n).map_err(|e| Error::config("kernel.nu", e.to_string()))?;
        }
        self.family()?;
        let (mu, phi) = self.grid_counts();
        for (key, c, min) in [
            ("grids.mu", mu, 2),
            ("grids.phi", phi, 2),
            ("inducing.mu", self.inducing.mu, 1),
            ("inducing.phi", self.inducing.phi, 1),
        ] {
            if c.iter().any(|&n| n < min) {
                return Err(Error::config(key, format!("each count must be at least {min}")));
            }
        }
        if !(self.hyperprior.shape > 0.0 && self.hyperprior.rate > 0.0) {
            return Err(Error::config("hyperprior", "shape and rate must be positive"));
        }
        if let Some(s) = self.link.sigmoid_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("link.sigmoid_scale", "must be positive"));
            }
        }
        if let Some(k) = self.data.scenario {
            if !(1..=3).contains(&k) {
                return Err(Error::config("data.scenario", "must be 1, 2 or 3"));
            }
        }
        if self.evaluate.n_draws == 0 {
            return Err(Error::config("evaluate.n_draws", "must be at least 1"));
        }
        if self.diagnose.n_draws == 0 {
            return Err(Error::config("diagnose.n_draws", "must be at least 1"));
        }
        if self.diagnose.n_grid == 0 {
            return Err(Error::config("diagnose.n_grid", "must be at least 1"));
        }
        if let Some(k) = self.diagnose.k {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::config("diagnose.k", "must be positive"));
            }
        }
        self.optimizer.validate()
    }

    pub fn window(&self) -> Result<SpatioTemporalWindow> {
        let w = &self.window;
        SpatioTemporalWindow::new(w.t, w.x, w.y, w.t_phi, w.x_phi, w.y_phi)
            .map_err(|e| Error::config("window", e.to_string()))
    }

    pub fn family(&self) -> Result<Family> {
        parse_family(&self.kernel.family, self.kernel.nu).map_err(|e| Error::config("kernel.family", e.to_string()))
    }

    pub fn grid_counts(&self) -> ([usize; 3], [usize; 3]) {
        let (mu, phi) = self.grids.profile.grids();
        (self.grids.mu.unwrap_or(mu), self.grids.phi.unwrap_or(phi))
    }

    /// Apply command-line overrides. A seed override also shifts the restart
    /// seeds so that they start at the new seed.
    pub fn apply_overrides(&mut self, seed: Option<u64>, profile: Option<Profile>) {
        if let Some(s) = seed {
            self.seed = s;
            let n = self.optimizer.seeds.len() as u64;
            self.optimizer.seeds = (s..s + n).collect();
        }
        if let Some(p) = profile {
            self.grids.profile = p;
        }
    }

    fn link(&self, name: LinkName, n_events: usize, window: &SpatioTemporalWindow) -> LinkFunction {
        match name {
            LinkName::Softplus => LinkFunction::Softplus,
            LinkName::Exp => LinkFunction::Exp,
            LinkName::Sigmoid => match self.link.sigmoid_scale {
                Some(scale) => LinkFunction::Sigmoid { scale },
                None => LinkFunction::default_sigmoid(n_events, window),
            },
        }
    }

    pub fn baseline_spec(&self, n_events: usize) -> Result<Option<BaselineSpec>> {
        let w = self.window()?;
        Ok(self.model.kind.baseline().map(|kind| BaselineSpec {
            kind,
            background_link: self.link(self.model.baseline_link, n_events, &w),
            family: self.family().expect("validated"),
            inducing_mu: self.inducing.mu,
        }))
    }

    /// Initial state of the primary model.
    pub fn initial_state(&self, n_events: usize) -> Result<VariationalState> {
        let w = self.window()?;
        let family = self.family()?;
        let st = self.kernel.structure;
        let prior = || HyperPrior::gamma(st.n_params(), self.hyperprior.shape, self.hyperprior.rate);
        let mu = init_gp_factor(
            family,
            st,
            w.domain(),
            self.inducing.mu,
            self.link(self.link.mu, n_events, &w),
            prior(),
        )?;
        let phi = init_gp_factor(
            family,
            st,
            w.support(),
            self.inducing.phi,
            self.link(self.link.phi, n_events, &w),
            prior(),
        )?;
        Ok(VariationalState {
            mu: Component::Gp(mu),
            phi: Component::Gp(phi),
        })
    }

    pub fn model_data(&self, events: EventSequence) -> Result<ModelData> {
        let (mu, phi) = self.grid_counts();
        Ok(ModelData::new(LikelihoodLayout::new(self.window()?, events, mu, phi)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Simulate,
    Fit,
    Evaluate,
    Diagnose,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Evaluate => "evaluate",
            Command::Diagnose => "diagnose",
            Command::Report => "report",
        }
    }
}

/// Files written by one command, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Timing {
    schema_version: u32,
    command: String,
    wall_time_secs: f64,
    unix_time_secs: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RestartSummary {
    schema_version: u32,
    model: ModelKind,
    seeds: Vec<u64>,
    final_elbos: Vec<f64>,
    selected_seed: u64,
}

/// Spatial-average curve with a 95% equal-tailed band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandedCurve {
    pub abscissa: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub n_draws: usize,
    pub mu_curve: BandedCurve,
    pub phi_curve: BandedCurve,
    pub mu_norm: Interval,
    pub phi_norm: Interval,
    /// `‖μ‖₁ / (1 − ‖φ‖₁)` at the posterior means, rounded.
    pub expected_events: Option<u64>,
    pub observed_events: usize,
    pub stationary: bool,
    pub mu_surface: String,
    pub phi_surface: String,
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

fn interval(values: &[f64]) -> Interval {
    Interval {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        lower: quantile(values, 0.025),
        upper: quantile(values, 0.975),
    }
}

fn banded(abscissa: &[f64], curves: &[Vec<f64>]) -> BandedCurve {
    let n = abscissa.len();
    let column = |j: usize| curves.iter().map(|c| c[j]).collect::<Vec<_>>();
    BandedCurve {
        abscissa: abscissa.to_vec(),
        mean: (0..n)
            .map(|j| column(j).iter().sum::<f64>() / curves.len() as f64)
            .collect(),
        lower: (0..n).map(|j| quantile(&column(j), 0.025)).collect(),
        upper: (0..n).map(|j| quantile(&column(j), 0.975)).collect(),
    }
}

/// Build the report from a posterior summary.
pub fn build_report(summary: &PosteriorSummary, layout: &LikelihoodLayout) -> Report {
    let mu_norm = interval(&summary.mu_norms);
    let phi_norm = interval(&summary.phi_norms);
    let stationary = phi_norm.mean < 1.0;
    if !stationary {
        warn!(
            "posterior mean branching ratio {:.3} >= 1: fitted process is not stationary",
            phi_norm.mean
        );
    }
    let expected_events = expected_total_events(mu_norm.mean, phi_norm.mean)
        .ok()
        .map(|v| v.round() as u64);
    Report {
        schema_version: SCHEMA_VERSION,
        n_draws: summary.n_draws,
        mu_curve: banded(&layout.mu_grid.grid.axes[0], &summary.mu_curves),
        phi_curve: banded(&layout.phi_grid.grid.axes[0], &summary.phi_curves),
        mu_norm,
        phi_norm,
        expected_events,
        observed_events: layout.n_events(),
        stationary,
        mu_surface: MU_SURFACE_FILE.into(),
        phi_surface: PHI_SURFACE_FILE.into(),
    }
}

fn write_surface(path: &Path, header: [&str; 3], points: &[[f64; 3]], mean: &[f64], sq: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([header[0], header[1], header[2], "mean", "sd"])?;
    for ((p, m), s) in points.iter().zip(mean).zip(sq) {
        let sd = (s - m * m).max(0.0).sqrt();
        w.write_record([p[0], p[1], p[2], *m, sd].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::InsufficientData(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Execution context for one command.
pub struct Runner {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Runner {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        let out = out.into();
        fs::create_dir_all(&out)?;
        Ok(Self { config, out })
    }

    fn events_path(&self) -> PathBuf {
        self.config
            .data
            .events
            .clone()
            .unwrap_or_else(|| self.out.join(EVENTS_FILE))
    }

    fn fit_path(&self) -> PathBuf {
        self.config.data.fit.clone().unwrap_or_else(|| self.out.join(FIT_FILE))
    }

    fn load_events(&self) -> Result<EventSequence> {
        let path = self.events_path();
        if !path.exists() {
            return Err(Error::InsufficientData(format!(
                "events file {} not found",
                path.display()
            )));
        }
        EventSequence::read_csv(&path, &self.config.window()?)
    }

    fn load_fit(&self) -> Result<FitResult> {
        read_json(&self.fit_path())
    }

    /// Run a command and write its manifest and timing files.
    pub fn run(&self, cmd: Command) -> Result<Manifest> {
        let start = Instant::now();
        let files = match cmd {
            Command::Simulate => self.simulate()?,
            Command::Fit => self.fit()?,
            Command::Evaluate => self.evaluate()?,
            Command::Diagnose => self.diagnose()?,
            Command::Report => self.report()?,
        };
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            command: cmd.name().into(),
            seed: self.config.seed,
            files: files.iter().map(|s| s.to_string()).collect(),
        };
        write_json(&self.out.join(MANIFEST_FILE), &manifest)?;
        let unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        write_json(
            &self.out.join(TIMING_FILE),
            &Timing {
                schema_version: SCHEMA_VERSION,
                command: cmd.name().into(),
                wall_time_secs: start.elapsed().as_secs_f64(),
                unix_time_secs: unix,
            },
        )?;
        Ok(manifest)
    }

    fn simulate(&self) -> Result<Vec<&'static str>> {
        let k = self
            .config
            .data
            .scenario
            .ok_or_else(|| Error::config("data.scenario", "simulate needs a scenario"))?;
        let truth = scenario(k)?;
        let report = simulate_hawkes(&truth, self.config.seed)?;
        info!(
            "simulated {} events (scenario {k}, seed {})",
            report.events.len(),
            self.config.seed
        );
        report.events.write_csv(&self.out.join(EVENTS_FILE))?;
        write_json(
            &self.out.join(TRUTH_FILE),
            &SimulationSidecar::new(&truth, &report, self.config.seed)?,
        )?;
        Ok(vec![EVENTS_FILE, TRUTH_FILE])
    }

    fn fit(&self) -> Result<Vec<&'static str>> {
        let events = self.load_events()?;
        let n = events.len();
        let data = self.config.model_data(events)?;
        let cfg = &self.config.optimizer;
        let (fit, finals) = match self.config.baseline_spec(n)? {
            Some(spec) => fit_baseline(&spec, &data, cfg)?,
            None => multi_restart(&self.config.initial_state(n)?, &data, cfg)?,
        };
        info!("selected restart seed {} with ELBO {:.3}", fit.seed, fit.final_elbo);
        write_json(&self.out.join(FIT_FILE), &fit)?;
        write_json(
            &self.out.join(RESTARTS_FILE),
            &RestartSummary {
                schema_version: SCHEMA_VERSION,
                model: self.config.model.kind,
                seeds: cfg.seeds.clone(),
                final_elbos: finals,
                selected_seed: fit.seed,
            },
        )?;
        Ok(vec![FIT_FILE, RESTARTS_FILE])
    }

    fn summary(&self, n_draws: usize) -> Result<(PosteriorSummary, ModelData)> {
        let fit = self.load_fit()?;
        let data = self.config.model_data(self.load_events()?)?;
        let summary = summarise_posterior(&fit.state, &data, n_draws, self.config.seed)?;
        Ok((summary, data))
    }

    fn evaluate(&self) -> Result<Vec<&'static str>> {
        let (summary, data) = self.summary(self.config.evaluate.n_draws)?;
        let truth = self.config.data.scenario.map(scenario).transpose()?;
        let report = metrics_report(&summary, truth.as_ref(), &data.layout, self.config.evaluate.scale);
        write_json(&self.out.join(METRICS_FILE), &report)?;
        Ok(vec![METRICS_FILE])
    }

    fn diagnose(&self) -> Result<Vec<&'static str>> {
        let fit = self.load_fit()?;
        let events = self.load_events()?;
        let d = &self.config.diagnose;
        let eval = PosteriorMeanIntensity::new(&fit.state, self.config.window()?, d.n_draws, self.config.seed)?;
        let (report, residual) = diagnose(&events.events, &eval, d.k, d.n_grid, self.config.seed)?;
        write_json(&self.out.join(DIAGNOSTICS_FILE), &report)?;
        write_points_csv(&self.out.join(RESIDUALS_FILE), &residual.events)?;
        Ok(vec![DIAGNOSTICS_FILE, RESIDUALS_FILE])
    }

    fn report(&self) -> Result<Vec<&'static str>> {
        let (summary, data) = self.summary(self.config.evaluate.n_draws)?;
        let layout = &data.layout;
        let report = build_report(&summary, layout);
        write_surface(
            &self.out.join(MU_SURFACE_FILE),
            ["t", "x", "y"],
            &layout.mu_grid.grid.points(),
            &summary.mu_mean,
            &summary.mu_sq,
        )?;
        write_surface(
            &self.out.join(PHI_SURFACE_FILE),
            ["dt", "dx", "dy"],
            &layout.phi_grid.grid.points(),
            &summary.phi_mean,
            &summary.phi_sq,
        )?;
        write_json(&self.out.join(REPORT_FILE), &report)?;
        Ok(vec![REPORT_FILE, MU_SURFACE_FILE, PHI_SURFACE_FILE])
    }

    /// Record a failure next to the other artifacts.
    pub fn write_error(&self, cmd: Command, err: &Error) {
        let body = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "command": cmd.name(),
            "error": err.to_string(),
        });
        if let Err(e) = write_json(&self.out.join(ERROR_FILE), &body) {
            warn!("could not write error file: {e}");
        }
    }
}
