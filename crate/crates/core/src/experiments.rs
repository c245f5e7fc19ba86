//! Simulation scenarios, Monte Carlo RMSE, observability sweeps and timing.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, RowDVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{BoxSet, EstimatorConfig};
use crate::error::{check_dim, Error, Result};
use crate::estimator::{run, MovingHorizonEstimator, Variant};
use crate::linsys::{build_network, discretize, simulate, LtiModel, NoiseBounds, Trajectory};
use crate::linsys::uniform;
use crate::observability::OutputPowers;
use crate::rng::{keyed_rng, stream, trial_seed};
use crate::sensing::{BinarySensorBank, Level, MeasurementWindow};
use crate::stability::{compute_constants, find_epsilon, EpsilonBracket, PhiTracker, StabilityConstants, StabilityInputs};

pub const SAMPLE_TIME: f64 = 0.1;
/// Harmonic state of one oscillator: positions in the slow-mode ratio.
pub const NOMINAL_NODE_STATE: [f64; 4] = [0.618, 0.0, 1.0, 0.0];
pub const EXAMPLE2_THRESHOLDS: [f64; 6] = [0.5, 0.2, -0.5, -0.8, -0.2, 0.3];
pub const EXAMPLE2_COUPLING: f64 = 0.02;
/// Ring 1-2-3-4-5-6-1 with chords 1-4 and 2-5 (zero-based).
pub const EXAMPLE2_EDGES: [(usize, usize); 8] = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 3), (1, 4)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Example1,
    Example2,
    Custom,
}

/// Initial conditions of a user-supplied model: each entry drawn uniformly
/// within `spread` of its centre.
#[derive(Debug, Clone, PartialEq)]
pub struct CustomInit {
    pub initial_state: DVector<f64>,
    pub initial_spread: f64,
    pub prior: DVector<f64>,
    pub prior_spread: f64,
}

/// Everything needed to simulate and estimate one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSetup {
    pub scenario: Scenario,
    pub model: LtiModel,
    pub sensors: BinarySensorBank,
    pub config: EstimatorConfig,
    pub noise: NoiseBounds,
    pub duration_s: f64,
    pub custom: Option<CustomInit>,
}

/// Two masses, two springs: `x = [q1, q1', q2, q2']`.
pub fn oscillator_continuous(m1: f64, m2: f64, k1: f64, k2: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            0.0, 1.0, 0.0, 0.0,
            -(k1 + k2) / m1, 0.0, k2 / m1, 0.0,
            0.0, 0.0, 0.0, 1.0,
            k2 / m2, 0.0, -k2 / m2, 0.0,
        ],
    )
}

fn example_ac() -> DMatrix<f64> {
    oscillator_continuous(1.0, 1.0, 10.0, 10.0)
}

/// Angular frequency of the slow mode, `sqrt(15 − sqrt(125))` rad/s.
pub fn slow_mode_frequency() -> f64 {
    (15.0 - 125f64.sqrt()).sqrt()
}

fn node_model() -> Result<LtiModel> {
    let (ad, _) = discretize(&example_ac(), &DMatrix::zeros(4, 0), SAMPLE_TIME)?;
    Ok(LtiModel::autonomous(ad, DMatrix::from_row_slice(1, 4, &[0.0, 0.0, 1.0, 0.0]))?.with_sample_time(SAMPLE_TIME))
}

pub fn example1_setup() -> Result<ScenarioSetup> {
    let model = node_model()?;
    let rho_v = 0.05;
    let mut config = EstimatorConfig::scaled_identity(4, 1, 1e-5, 1.0, 1.0, 100);
    config.state_box = Some(BoxSet::symmetric(4, 5.0)?);
    config.warm_up = true;
    Ok(ScenarioSetup {
        scenario: Scenario::Example1,
        sensors: BinarySensorBank::new(vec![0.5], vec![rho_v])?,
        noise: NoiseBounds::new(0.0, vec![rho_v], 5.0, 0.0)?,
        model,
        config,
        duration_s: 40.0,
        custom: None,
    })
}

pub fn example2_laplacian() -> DMatrix<f64> {
    let mut l = DMatrix::zeros(6, 6);
    for &(i, j) in &EXAMPLE2_EDGES {
        l[(i, j)] = -1.0;
        l[(j, i)] = -1.0;
        l[(i, i)] += 1.0;
        l[(j, j)] += 1.0;
    }
    l
}

pub fn example2_setup() -> Result<ScenarioSetup> {
    let node = node_model()?;
    let row = RowDVector::from_row_slice(&[0.0, 0.0, 1.0, 0.0]);
    let model = build_network(&node, &example2_laplacian(), EXAMPLE2_COUPLING, &row)?;
    let rho_v = vec![0.05; 6];
    let mut config = EstimatorConfig::scaled_identity(24, 6, 1e-5, 1.0, 1.0, 100);
    config.state_box = None;
    config.warm_up = true;
    let nominal_norm = NOMINAL_NODE_STATE.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(ScenarioSetup {
        scenario: Scenario::Example2,
        sensors: BinarySensorBank::new(EXAMPLE2_THRESHOLDS.to_vec(), rho_v.clone())?,
        // radius of the set the initial states are drawn from
        noise: NoiseBounds::new(0.0, rho_v, nominal_norm * 6f64.sqrt() + 5.0 * 24f64.sqrt(), 0.0)?,
        model,
        config,
        duration_s: 35.0,
        custom: None,
    })
}

pub fn custom_setup(
    model: LtiModel,
    sensors: BinarySensorBank,
    config: EstimatorConfig,
    noise: NoiseBounds,
    duration_s: f64,
    init: CustomInit,
) -> Result<ScenarioSetup> {
    let (n, p) = (model.n(), model.p());
    check_dim("sensor count", p, sensors.len())?;
    check_dim("measurement noise bounds", p, noise.rho_v.len())?;
    check_dim("initial state", n, init.initial_state.len())?;
    check_dim("prior", n, init.prior.len())?;
    config.validate(n, p)?;
    noise.validate()?;
    if !(init.initial_spread >= 0.0 && init.prior_spread >= 0.0) {
        return Err(Error::InvalidInput("initial spreads must be nonnegative".into()));
    }
    Ok(ScenarioSetup {
        scenario: Scenario::Custom,
        model,
        sensors,
        config,
        noise,
        duration_s,
        custom: Some(init),
    })
}

impl ScenarioSetup {
    pub fn n(&self) -> usize {
        self.model.n()
    }

    pub fn steps(&self, duration_s: f64) -> Result<usize> {
        let steps = duration_s / SAMPLE_TIME;
        if !(steps.is_finite() && steps >= 1.0) || (steps - steps.round()).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("duration {duration_s} s is not a positive multiple of Ts = {SAMPLE_TIME}")));
        }
        Ok(steps.round() as usize)
    }

    fn nominal(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), NOMINAL_NODE_STATE.iter().copied().cycle().take(self.n()))
    }

    /// True initial state of trial seed `seed`.
    pub fn initial_state(&self, seed: u64) -> DVector<f64> {
        let mut rng = keyed_rng(seed, stream::INITIAL_STATE, 0);
        match self.scenario {
            Scenario::Example1 => {
                // harmonic state advanced by a random fraction of the slow period
                let period = 2.0 * std::f64::consts::PI / slow_mode_frequency();
                let offset = (uniform(&mut rng, 0.5) + 0.5) * period;
                (example_ac() * offset).exp() * self.nominal()
            }
            Scenario::Example2 => self.nominal().map(|v| v + uniform(&mut rng, 5.0)),
            Scenario::Custom => {
                let init = self.custom.as_ref().expect("custom scenario without initial conditions");
                init.initial_state.map(|v| v + uniform(&mut rng, init.initial_spread))
            }
        }
    }

    /// A priori prediction `x̄_0` of trial seed `seed`.
    pub fn prior(&self, seed: u64) -> DVector<f64> {
        let mut rng = keyed_rng(seed, stream::PRIOR, 0);
        match self.scenario {
            Scenario::Example1 => DVector::from_fn(self.n(), |_, _| uniform(&mut rng, 5.0)),
            Scenario::Example2 => self.nominal(),
            Scenario::Custom => {
                let init = self.custom.as_ref().expect("custom scenario without initial conditions");
                init.prior.map(|v| v + uniform(&mut rng, init.prior_spread))
            }
        }
    }

    pub fn simulate(&self, seed: u64, steps: usize) -> Result<Trajectory> {
        let inputs = vec![DVector::zeros(self.model.m()); steps];
        simulate(&self.model, &self.initial_state(seed), &inputs, &self.noise, seed)
    }

    pub fn with_threshold(&self, tau: f64) -> Result<Self> {
        let mut s = self.clone();
        s.sensors = s.sensors.with_thresholds(vec![tau; s.sensors.len()])?;
        Ok(s)
    }

    pub fn with_noise_level(&self, rho_v: f64) -> Result<Self> {
        let mut s = self.clone();
        let p = s.sensors.len();
        s.sensors = BinarySensorBank::new(s.sensors.thresholds().to_vec(), vec![rho_v; p])?;
        s.noise = NoiseBounds::new(s.noise.rho_w, vec![rho_v; p], s.noise.rho_x, s.noise.rho_u)?;
        Ok(s)
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        let mut s = self.clone();
        s.config.horizon = horizon;
        s
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        let mut s = self.clone();
        let n = s.n();
        s.config.arrival_weight = DMatrix::identity(n, n) * epsilon;
        s
    }
}

/// Which estimate the error at time `k` refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorAlignment {
    /// `x_k − x̂_{k|k+N}`; the run is extended by `N` steps so that the
    /// window starts cover `[0, duration]`.
    WindowStart,
    /// `x_t − x̂_{t|t}`; covers `[0, duration]` when warm-up is enabled.
    #[default]
    Filter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub trials: usize,
    pub duration_s: f64,
    pub variants: Vec<Variant>,
    pub seed: u64,
    pub alignment: ErrorAlignment,
    pub normalized: bool,
    pub record_wall_time: bool,
}

impl ExperimentSpec {
    pub fn new(trials: usize, duration_s: f64, variants: Vec<Variant>, seed: u64) -> Self {
        Self {
            trials,
            duration_s,
            variants,
            seed,
            alignment: ErrorAlignment::default(),
            normalized: true,
            record_wall_time: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidInput("at least one trial is required".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::InvalidInput("at least one estimator variant is required".into()));
        }
        Ok(())
    }
}

/// Errors of one variant in one trial, on the common time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub trial: usize,
    pub variant: Variant,
    /// Time indices `k` of the errors.
    pub steps: Vec<usize>,
    pub errors: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub mean_step_time_s: f64,
    pub fallbacks: usize,
}

/// Runs every variant of `spec` on trial `trial`'s data.
pub fn run_trial(setup: &ScenarioSetup, spec: &ExperimentSpec, trial: usize) -> Result<Vec<TrialOutcome>> {
    let seed = trial_seed(spec.seed, trial as u64);
    let horizon = setup.config.horizon;
    let steps = setup.steps(spec.duration_s)?;
    let sim_steps = match spec.alignment {
        ErrorAlignment::WindowStart => steps + horizon,
        ErrorAlignment::Filter => steps,
    };
    let traj = setup.simulate(seed, sim_steps)?;
    spec.variants
        .iter()
        .map(|&variant| {
            let mut est = MovingHorizonEstimator::new(
                setup.model.clone(),
                setup.sensors.clone(),
                setup.config.clone(),
                variant,
                setup.prior(seed),
            )?;
            if !spec.record_wall_time {
                est = est.without_wall_time();
            }
            let records = run(&mut est, &traj, &setup.sensors)?;
            let mut out = TrialOutcome {
                trial,
                variant,
                steps: Vec::with_capacity(records.len()),
                errors: Vec::with_capacity(records.len()),
                states: Vec::with_capacity(records.len()),
                mean_step_time_s: records.iter().map(|r| r.wall_time_s).sum::<f64>() / records.len().max(1) as f64,
                fallbacks: records.iter().filter(|r| r.fell_back).count(),
            };
            for r in &records {
                let (k, e) = match spec.alignment {
                    // shrinking warm-up windows all start at 0
                    ErrorAlignment::WindowStart if r.t < horizon => continue,
                    ErrorAlignment::WindowStart => (r.t - horizon, &r.start_error),
                    ErrorAlignment::Filter => (r.t, &r.end_error),
                };
                out.steps.push(k);
                out.errors.push(e.clone());
                out.states.push(traj.states[k].clone());
            }
            Ok(out)
        })
        .collect()
}

/// `RMSE(t)` over trials, optionally divided by the RMS state norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseSeries {
    pub times: Vec<f64>,
    pub rmse: Vec<f64>,
    pub normalized: bool,
}

impl RmseSeries {
    /// `errors[l][j]` is trial `l`'s error at `times[j]`.
    pub fn from_errors(times: Vec<f64>, errors: &[Vec<DVector<f64>>], states: Option<&[Vec<DVector<f64>>]>) -> Self {
        let trials = errors.len() as f64;
        let rms = |set: &[Vec<DVector<f64>>], j: usize| (set.iter().map(|e| e[j].norm_squared()).sum::<f64>() / trials).sqrt();
        let rmse = (0..times.len())
            .map(|j| {
                let num = rms(errors, j);
                match states {
                    None => num,
                    Some(s) => {
                        let den = rms(s, j);
                        if den > 0.0 {
                            num / den
                        } else if num == 0.0 {
                            0.0
                        } else {
                            f64::INFINITY
                        }
                    }
                }
            })
            .collect();
        Self {
            times,
            rmse,
            normalized: states.is_some(),
        }
    }

    /// Mean of the entries with `lo ≤ t ≤ hi`.
    pub fn mean_over(&self, lo: f64, hi: f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .times
            .iter()
            .zip(&self.rmse)
            .filter(|(t, _)| **t >= lo - 1e-9 && **t <= hi + 1e-9)
            .map(|(_, v)| *v)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean over `[lo, hi]`; rejects series that end before `hi`.
    pub fn armse(&self, lo: f64, hi: f64) -> Result<f64> {
        let last = self.times.last().copied().unwrap_or(f64::NEG_INFINITY);
        if last < hi - 1e-9 {
            return Err(Error::InvalidInput(format!("ARMSE window [{lo}, {hi}] s exceeds the run, which ends at {last} s")));
        }
        self.mean_over(lo, hi)
            .ok_or_else(|| Error::InvalidInput(format!("no samples in [{lo}, {hi}] s")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub rmse: RmseSeries,
    pub excluded: usize,
    pub mean_step_time_s: f64,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloResult {
    pub summaries: Vec<VariantSummary>,
    pub failures: Vec<(usize, String)>,
}

impl MonteCarloResult {
    pub fn summary(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }
}

/// Thread pool with `workers` threads (machine parallelism when `None`).
pub fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(Error::InvalidInput("worker count must be at least 1".into()));
        }
        b = b.num_threads(w);
    }
    b.build().map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
}

/// Independent trials in parallel; failing trials are excluded and listed.
pub fn monte_carlo(setup: &ScenarioSetup, spec: &ExperimentSpec, workers: Option<usize>) -> Result<MonteCarloResult> {
    spec.validate()?;
    let results: Vec<Result<Vec<TrialOutcome>>> =
        pool(workers)?.install(|| (0..spec.trials).into_par_iter().map(|l| run_trial(setup, spec, l)).collect());

    let mut ok: Vec<Vec<TrialOutcome>> = Vec::new();
    let mut failures = Vec::new();
    for (l, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => failures.push((l, e.to_string())),
        }
    }
    if ok.is_empty() {
        return Err(Error::NoSolution(format!("all {} trials failed", spec.trials)));
    }

    let summaries = spec
        .variants
        .iter()
        .enumerate()
        .map(|(vi, &variant)| {
            let outcomes: Vec<&TrialOutcome> = ok.iter().map(|v| &v[vi]).collect();
            let times: Vec<f64> = outcomes[0].steps.iter().map(|&k| k as f64 * SAMPLE_TIME).collect();
            let errors: Vec<Vec<DVector<f64>>> = outcomes.iter().map(|o| o.errors.clone()).collect();
            let states: Vec<Vec<DVector<f64>>> = outcomes.iter().map(|o| o.states.clone()).collect();
            let rmse = RmseSeries::from_errors(times, &errors, spec.normalized.then_some(states.as_slice()));
            VariantSummary {
                variant,
                rmse,
                excluded: failures.len(),
                mean_step_time_s: outcomes.iter().map(|o| o.mean_step_time_s).sum::<f64>() / outcomes.len() as f64,
                fallbacks: outcomes.iter().map(|o| o.fallbacks).sum(),
            }
        })
        .collect();
    Ok(MonteCarloResult { summaries, failures })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepVariable {
    Horizon,
    Threshold,
    NoiseLevel,
}

impl SweepVariable {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepVariable::Horizon => "N",
            SweepVariable::Threshold => "tau",
            SweepVariable::NoiseLevel => "rho_v",
        }
    }

    fn apply(self, setup: &ScenarioSetup, value: f64) -> Result<ScenarioSetup> {
        match self {
            SweepVariable::Horizon => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::InvalidInput(format!("horizon {value} must be a positive integer")));
                }
                Ok(setup.with_horizon(value as usize))
            }
            SweepVariable::Threshold => setup.with_threshold(value),
            SweepVariable::NoiseLevel => setup.with_noise_level(value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep_variable: String,
    pub value: f64,
    pub delta_mean: f64,
    pub delta_min: f64,
    /// Fraction of windows whose switching observability matrix has full rank.
    pub rank_fraction: f64,
    /// Standard error of `delta_mean` over trials.
    pub delta_stderr: f64,
}

/// Observability of one simulated run, over every full window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunObservability {
    /// Minimum of `δ_t` over the windows.
    pub delta: f64,
    /// Maximum of `‖D_t^i‖` over the windows.
    pub phi_bar: f64,
    pub full_rank_windows: usize,
    pub windows: usize,
}

pub fn observe_run(setup: &ScenarioSetup, seed: u64, steps: usize, with_phi: bool) -> Result<RunObservability> {
    let traj = setup.simulate(seed, steps)?;
    let horizon = setup.config.horizon;
    let readings: Vec<Vec<Level>> = traj.outputs.iter().map(|z| setup.sensors.measure(z)).collect();
    if readings.len() < horizon + 1 {
        return Err(Error::InvalidInput("run shorter than one window".into()));
    }
    let powers = OutputPowers::new(&setup.model, horizon);
    let zero = DVector::zeros(setup.model.m());
    let mut window = MeasurementWindow::new(0, vec![zero.clone(); horizon], readings[..=horizon].to_vec())?;
    let mut phi = PhiTracker::default();
    let mut out = RunObservability {
        delta: f64::INFINITY,
        phi_bar: 0.0,
        full_rank_windows: 0,
        windows: 0,
    };
    loop {
        let report = powers.report(&window);
        out.delta = out.delta.min(report.delta_t);
        out.windows += 1;
        if report.rank == setup.n() {
            out.full_rank_windows += 1;
        }
        if with_phi {
            out.phi_bar = phi.observe(&setup.model, &window);
        }
        let next = window.end() + 1;
        if next >= readings.len() {
            break;
        }
        window = window.slide(zero.clone(), readings[next].clone())?;
    }
    Ok(out)
}

/// Run-level `δ`, full-rank windows and total windows.
pub fn run_delta(setup: &ScenarioSetup, seed: u64, steps: usize) -> Result<(f64, usize, usize)> {
    let o = observe_run(setup, seed, steps, false)?;
    Ok((o.delta, o.full_rank_windows, o.windows))
}

/// Stability constants of a scenario with `δ` and `φ̄` taken from one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub observability: RunObservability,
    /// Scale of `P = ε P̄` in the configured arrival weight, with `P̄ = I`.
    pub configured_epsilon: f64,
    pub constants: StabilityConstants,
    pub bracket: Option<EpsilonBracket>,
}

pub fn stability_inputs(setup: &ScenarioSetup, obs: &RunObservability, use_state_box: bool) -> StabilityInputs {
    StabilityInputs::new(&setup.config, &setup.model, &setup.noise, use_state_box, obs.delta, obs.phi_bar)
}

/// `use_state_box` selects the state-box radius (estimates constrained to
/// the box) over the prior-error radius `ρ_X` in `a2`.
pub fn certify(setup: &ScenarioSetup, seed: u64, duration_s: f64, use_state_box: bool) -> Result<StabilityCertificate> {
    let obs = observe_run(setup, seed, setup.steps(duration_s)?, true)?;
    let inputs = stability_inputs(setup, &obs, use_state_box);
    let n = setup.n();
    let constants = compute_constants(&inputs, &setup.config.arrival_weight)?;
    let bracket = match find_epsilon(&inputs, &DMatrix::identity(n, n)) {
        Ok(b) => Some(b),
        Err(Error::NoSolution(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(StabilityCertificate {
        observability: obs,
        configured_epsilon: setup.config.arrival_weight.clone().symmetric_eigenvalues().max(),
        constants,
        bracket,
    })
}

/// Mean run-level `δ` per grid value.
pub fn sweep_observability(
    setup: &ScenarioSetup,
    variable: SweepVariable,
    values: &[f64],
    trials: usize,
    duration_s: f64,
    seed: u64,
    workers: Option<usize>,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || trials == 0 {
        return Err(Error::InvalidInput("sweep needs a nonempty grid and at least one trial".into()));
    }
    let steps = setup.steps(duration_s)?;
    let pool = pool(workers)?;
    values
        .iter()
        .map(|&value| {
            let s = variable.apply(setup, value)?;
            let per_trial: Vec<Result<(f64, usize, usize)>> = pool.install(|| {
                (0..trials)
                    .into_par_iter()
                    .map(|l| run_delta(&s, trial_seed(seed, l as u64), steps))
                    .collect()
            });
            let per_trial = per_trial.into_iter().collect::<Result<Vec<_>>>()?;
            let deltas: Vec<f64> = per_trial.iter().map(|r| r.0).collect();
            let mean = deltas.iter().sum::<f64>() / trials as f64;
            let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (trials.max(2) - 1) as f64;
            let (full, total) = per_trial.iter().fold((0, 0), |acc, r| (acc.0 + r.1, acc.1 + r.2));
            Ok(SweepRow {
                sweep_variable: variable.as_str().to_string(),
                value,
                delta_mean: mean,
                delta_min: deltas.iter().copied().fold(f64::INFINITY, f64::min),
                rank_fraction: full as f64 / total as f64,
                delta_stderr: (var / trials as f64).sqrt(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmseRow {
    pub sweep_variable: String,
    pub value: f64,
    pub variant: Variant,
    pub armse: f64,
}

/// ARMSE over `[lo, hi]` s per grid value and variant.
pub fn armse_sweep(
    setup: &ScenarioSetup,
    variable: SweepVariable,
    values: &[f64],
    spec: &ExperimentSpec,
    window: (f64, f64),
    workers: Option<usize>,
) -> Result<Vec<ArmseRow>> {
    let mut rows = Vec::new();
    for &value in values {
        let s = variable.apply(setup, value)?;
        let mc = monte_carlo(&s, spec, workers)?;
        for sum in &mc.summaries {
            rows.push(ArmseRow {
                sweep_variable: variable.as_str().to_string(),
                value,
                variant: sum.variant,
                armse: sum.rmse.armse(window.0, window.1)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub horizon: usize,
    pub variant: Variant,
    /// Median over runs of each run's mean wall time per full-window step.
    pub median_step_s: f64,
    pub min_step_s: f64,
    pub max_step_s: f64,
    pub runs: usize,
    pub steps_per_run: usize,
}

/// Per-step wall time for each horizon and variant, on the calling thread.
pub fn timing_table(
    setup: &ScenarioSetup,
    horizons: &[usize],
    variants: &[Variant],
    steps: usize,
    runs: usize,
    seed: u64,
) -> Result<Vec<TimingRow>> {
    if steps == 0 || runs == 0 {
        return Err(Error::InvalidInput("timing needs at least one step and one run".into()));
    }
    let zero = DVector::zeros(setup.model.m());
    let mut rows = Vec::new();
    for &horizon in horizons {
        let s = setup.with_horizon(horizon);
        // variants interleaved run by run so that clock drift affects all alike
        let mut per_run = vec![Vec::with_capacity(runs); variants.len()];
        for r in 0..runs {
            let seed_r = trial_seed(seed, r as u64);
            let traj = s.simulate(seed_r, horizon + steps)?;
            let readings: Vec<Vec<Level>> = traj.outputs.iter().map(|z| s.sensors.measure(z)).collect();
            for (vi, &variant) in variants.iter().enumerate() {
                let mut est = MovingHorizonEstimator::new(s.model.clone(), s.sensors.clone(), s.config.clone(), variant, s.prior(seed_r))?;
                let mut total = 0.0;
                let mut count = 0usize;
                for (t, y) in readings.iter().enumerate() {
                    let started = Instant::now();
                    let out = est.step(&zero, y.clone())?;
                    let elapsed = started.elapsed().as_secs_f64();
                    if out.is_some() && t >= horizon {
                        total += elapsed;
                        count += 1;
                    }
                }
                per_run[vi].push(total / count as f64);
            }
        }
        for (vi, &variant) in variants.iter().enumerate() {
            let times = &mut per_run[vi];
            times.sort_by(f64::total_cmp);
            rows.push(TimingRow {
                horizon,
                variant,
                median_step_s: median_sorted(times),
                min_step_s: times[0],
                max_step_s: times[times.len() - 1],
                runs,
                steps_per_run: steps + 1,
            });
        }
    }
    Ok(rows)
}

fn median_sorted(v: &[f64]) -> f64 {
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
