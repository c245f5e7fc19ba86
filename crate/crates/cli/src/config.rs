//! Strict TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use binmhe::estimator::Variant;
use binmhe::experiments::{custom_setup, example1_setup, example2_setup, CustomInit, ErrorAlignment, ScenarioSetup, SweepVariable};
use binmhe::{BinarySensorBank, BoxSet, LtiModel, NoiseBounds};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

pub const HORIZON_GRID: [f64; 12] = [5.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 80.0, 100.0, 120.0, 140.0, 150.0];
pub const NOISE_GRID: [f64; 6] = [0.0, 0.02, 0.05, 0.1, 0.15, 0.2];
pub const ARMSE_THRESHOLDS: [f64; 9] = [-0.8, -0.6, -0.4, -0.2, 0.0, 0.2, 0.4, 0.6, 0.8];
pub const TIMING_HORIZONS: [usize; 7] = [1, 5, 20, 35, 50, 100, 150];

/// `τ ∈ [−1.5, 1.5]` in steps of 0.1.
pub fn threshold_grid() -> Vec<f64> {
    (-15..=15).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    #[serde(default = "default_scenario")]
    pub name: ScenarioName,
    /// Seconds; a positive multiple of the 0.1 s sample time.
    pub duration_s: Option<f64>,
    /// JSON model document; custom scenario only.
    pub model: Option<PathBuf>,
    pub thresholds: Option<Vec<f64>>,
    pub initial_state: Option<Vec<f64>>,
    #[serde(default)]
    pub initial_spread: f64,
    pub prior: Option<Vec<f64>>,
    #[serde(default)]
    pub prior_spread: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            name: default_scenario(),
            duration_s: None,
            model: None,
            thresholds: None,
            initial_state: None,
            initial_spread: 0.0,
            prior: None,
            prior_spread: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioName {
    Example1,
    Example2,
    Custom,
}

impl ScenarioName {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Example1 => "example1",
            ScenarioName::Example2 => "example2",
            ScenarioName::Custom => "custom",
        }
    }
}

fn default_scenario() -> ScenarioName {
    ScenarioName::Example1
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    pub variants: Option<Vec<Variant>>,
    pub horizon: Option<usize>,
    /// Arrival weight `P = εI`.
    pub epsilon: Option<f64>,
    /// `Q = qI`.
    pub process_weight: Option<f64>,
    /// Same weight for every sensor.
    pub output_weight: Option<f64>,
    /// Half-width of the state box; 0 removes it.
    pub state_box: Option<f64>,
    /// Shrinking-horizon estimates before the first full window.
    pub warm_up: Option<bool>,
    pub tolerance: Option<f64>,
    pub max_iterations: Option<usize>,
    #[serde(default)]
    pub constraints: ConstraintSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    /// Threshold-consistency rows in the constrained variants.
    pub thresholds: Option<bool>,
    /// Half-width of the per-step disturbance box.
    pub disturbance: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub rho_v: Option<f64>,
    pub rho_w: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub alignment: ErrorAlignment,
    #[serde(default = "yes")]
    pub normalized: bool,
    /// Wall-time columns are zero unless set, keeping outputs reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default = "default_armse_window")]
    pub armse_window: [f64; 2],
    pub sweep_variable: Option<SweepVariable>,
    pub sweep_values: Option<Vec<f64>>,
    #[serde(default = "default_timing_horizons")]
    pub timing_horizons: Vec<usize>,
    #[serde(default = "default_timing_runs")]
    pub timing_runs: usize,
    #[serde(default = "default_timing_steps")]
    pub timing_steps: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

fn default_trials() -> usize {
    20
}
fn default_seed() -> u64 {
    1
}
fn yes() -> bool {
    true
}
fn default_armse_window() -> [f64; 2] {
    [25.0, 40.0]
}
fn default_timing_horizons() -> Vec<usize> {
    TIMING_HORIZONS.to_vec()
}
fn default_timing_runs() -> usize {
    9
}
fn default_timing_steps() -> usize {
    200
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // relative model paths resolve against the config file
        if let (Some(model), Some(dir)) = (&config.scenario.model, path.parent()) {
            if model.is_relative() {
                config.scenario.model = Some(dir.join(model));
            }
        }
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        if let Some(d) = s.duration_s {
            ensure!(d > 0.0, "scenario.duration_s must be positive, got {d}");
        }
        match (s.name, &s.model) {
            (ScenarioName::Custom, None) => bail!("scenario.model is required for the custom scenario"),
            (ScenarioName::Custom, Some(m)) => ensure!(m.is_file(), "model file {} does not exist", m.display()),
            (_, Some(_)) => bail!("scenario.model is only allowed with name = \"custom\""),
            _ => {}
        }
        if s.name != ScenarioName::Custom {
            ensure!(
                s.initial_state.is_none() && s.prior.is_none(),
                "scenario.initial_state and scenario.prior are only allowed with name = \"custom\""
            );
        }
        let e = &self.experiment;
        ensure!(e.trials >= 1, "experiment.trials must be at least 1");
        ensure!(e.armse_window[0] < e.armse_window[1], "experiment.armse_window must be increasing");
        ensure!(e.timing_runs >= 1 && e.timing_steps >= 1, "timing runs and steps must be at least 1");
        if let Some(v) = &e.sweep_values {
            ensure!(!v.is_empty(), "experiment.sweep_values must not be empty");
        }
        if let Some(v) = &self.estimator.variants {
            ensure!(!v.is_empty(), "estimator.variants must not be empty");
        }
        if self.estimator.horizon == Some(0) {
            bail!("estimator.horizon must be at least 1");
        }
        Ok(())
    }

    pub fn variants(&self) -> Vec<Variant> {
        self.estimator.variants.clone().unwrap_or_else(|| vec![Variant::Lsmhe, Variant::Pwmhe])
    }

    fn custom_base(&self) -> Result<ScenarioSetup> {
        let s = &self.scenario;
        let path = s.model.as_ref().expect("validated");
        let text = std::fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
        let model = LtiModel::from_json(&text).with_context(|| format!("parsing model {}", path.display()))?;
        let (n, p) = (model.n(), model.p());
        let thresholds = s.thresholds.clone().context("scenario.thresholds is required for the custom scenario")?;
        let rho_v = self.noise.rho_v.unwrap_or(0.0);
        let sensors = BinarySensorBank::new(thresholds, vec![rho_v; p])?;
        let noise = NoiseBounds::new(self.noise.rho_w.unwrap_or(0.0), vec![rho_v; p], 0.0, 0.0)?;
        let init = CustomInit {
            initial_state: DVector::from_vec(s.initial_state.clone().context("scenario.initial_state is required for the custom scenario")?),
            initial_spread: s.initial_spread,
            prior: DVector::from_vec(s.prior.clone().unwrap_or_else(|| vec![0.0; n])),
            prior_spread: s.prior_spread,
        };
        let mut config = binmhe::EstimatorConfig::scaled_identity(n, p, 1e-5, 1.0, 1.0, 10);
        config.warm_up = true;
        let mut setup = custom_setup(model, sensors, config, noise, 10.0, init)?;
        // radius of the set the initial state is drawn from
        let x0 = setup.custom.as_ref().expect("custom").initial_state.norm();
        setup.noise.rho_x = x0 + s.initial_spread * (n as f64).sqrt();
        Ok(setup)
    }

    /// Scenario defaults with every configured override applied.
    pub fn setup(&self) -> Result<ScenarioSetup> {
        let s = &self.scenario;
        let mut setup = match s.name {
            ScenarioName::Example1 => example1_setup()?,
            ScenarioName::Example2 => example2_setup()?,
            ScenarioName::Custom => self.custom_base()?,
        };
        let (n, p) = (setup.n(), setup.sensors.len());
        if let Some(d) = s.duration_s {
            setup.duration_s = d;
        }
        setup.steps(setup.duration_s).context("scenario.duration_s")?;
        if s.name != ScenarioName::Custom {
            if let Some(t) = &s.thresholds {
                ensure!(t.len() == p, "scenario.thresholds needs {p} entries, got {}", t.len());
                setup.sensors = setup.sensors.with_thresholds(t.clone())?;
            }
            if let Some(rho_v) = self.noise.rho_v {
                setup = setup.with_noise_level(rho_v)?;
            }
            if let Some(rho_w) = self.noise.rho_w {
                setup.noise.rho_w = rho_w;
                setup.noise.validate()?;
            }
        }

        let e = &self.estimator;
        let c = &mut setup.config;
        if let Some(h) = e.horizon {
            c.horizon = h;
        }
        if let Some(eps) = e.epsilon {
            ensure!(eps > 0.0, "estimator.epsilon must be positive");
            c.arrival_weight = DMatrix::identity(n, n) * eps;
        }
        if let Some(q) = e.process_weight {
            ensure!(q > 0.0, "estimator.process_weight must be positive");
            c.process_weight = DMatrix::identity(n, n) * q;
        }
        if let Some(r) = e.output_weight {
            ensure!(r > 0.0, "estimator.output_weight must be positive");
            c.output_weights = vec![r; p];
        }
        match e.state_box {
            Some(h) if h > 0.0 => c.state_box = Some(BoxSet::symmetric(n, h)?),
            Some(h) if h == 0.0 => c.state_box = None,
            Some(h) => bail!("estimator.state_box must be nonnegative, got {h}"),
            None => {}
        }
        if let Some(w) = e.warm_up {
            c.warm_up = w;
        }
        if let Some(t) = e.tolerance {
            c.solver.tolerance = t;
        }
        if let Some(m) = e.max_iterations {
            c.solver.max_iterations = m;
        }
        if let Some(t) = e.constraints.thresholds {
            c.threshold_constraints = t;
        }
        if let Some(d) = e.constraints.disturbance {
            ensure!(d > 0.0, "estimator.constraints.disturbance must be positive");
            c.disturbance_box = Some(BoxSet::symmetric(n, d)?);
        }
        c.validate(n, p)?;
        Ok(setup)
    }
}
