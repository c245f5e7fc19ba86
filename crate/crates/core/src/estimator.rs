//! Receding-horizon loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::costs::{EstimatorConfig, WindowEstimate, WindowProblem};
use crate::error::{check_dim, Error, Result};
use crate::linsys::{LtiModel, Trajectory};
use crate::sensing::{BinarySensorBank, Level, MeasurementWindow};
use crate::solvers::{self, ConstraintSet, SolveReport, SolveStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Lsmhe,
    Pwmhe,
    #[serde(rename = "lsmhe-c")]
    LsmheConstrained,
    #[serde(rename = "pwmhe-c")]
    PwmheConstrained,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Lsmhe,
        Variant::Pwmhe,
        Variant::LsmheConstrained,
        Variant::PwmheConstrained,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Lsmhe => "lsmhe",
            Variant::Pwmhe => "pwmhe",
            Variant::LsmheConstrained => "lsmhe-c",
            Variant::PwmheConstrained => "pwmhe-c",
        }
    }

    pub fn is_constrained(self) -> bool {
        matches!(self, Variant::LsmheConstrained | Variant::PwmheConstrained)
    }

    pub fn is_piecewise(self) -> bool {
        matches!(self, Variant::Pwmhe | Variant::PwmheConstrained)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown variant '{s}' (expected lsmhe, pwmhe, lsmhe-c or pwmhe-c)")))
    }
}

/// One solved window.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Time of the newest measurement.
    pub t: usize,
    pub estimate: WindowEstimate,
    pub status: SolveStatus,
    /// The constrained problem was infeasible and the unconstrained one was solved.
    pub fell_back: bool,
    pub wall_time_s: f64,
}

/// Estimator state; advanced one measurement at a time.
#[derive(Debug, Clone)]
pub struct MovingHorizonEstimator {
    model: LtiModel,
    sensors: BinarySensorBank,
    config: EstimatorConfig,
    variant: Variant,
    prediction: DVector<f64>,
    window: Option<MeasurementWindow>,
    pending_input: Option<DVector<f64>>,
    last: Option<WindowEstimate>,
    next_t: usize,
    record_wall_time: bool,
    history: Option<Vec<WindowEstimate>>,
}

impl MovingHorizonEstimator {
    pub fn new(
        model: LtiModel,
        sensors: BinarySensorBank,
        config: EstimatorConfig,
        variant: Variant,
        prior: DVector<f64>,
    ) -> Result<Self> {
        config.validate(model.n(), model.p())?;
        check_dim("prior", model.n(), prior.len())?;
        check_dim("sensor count", model.p(), sensors.len())?;
        if prior.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("prior has non-finite entries".into()));
        }
        Ok(Self {
            model,
            sensors,
            config,
            variant,
            prediction: prior,
            window: None,
            pending_input: None,
            last: None,
            next_t: 0,
            record_wall_time: true,
            history: None,
        })
    }

    /// Keeps every window estimate in [`history`](Self::history).
    pub fn with_history(mut self) -> Self {
        self.history = Some(Vec::new());
        self
    }

    /// Disables wall-clock measurement; `wall_time_s` is then always 0.
    pub fn without_wall_time(mut self) -> Self {
        self.record_wall_time = false;
        self
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn model(&self) -> &LtiModel {
        &self.model
    }

    pub fn sensors(&self) -> &BinarySensorBank {
        &self.sensors
    }

    /// Prediction `x̄` for the start of the next full window.
    pub fn prediction(&self) -> &DVector<f64> {
        &self.prediction
    }

    pub fn window(&self) -> Option<&MeasurementWindow> {
        self.window.as_ref()
    }

    pub fn history(&self) -> Option<&[WindowEstimate]> {
        self.history.as_deref()
    }

    /// Consumes `y_t` and the input `u_t` applied after it.
    pub fn step(&mut self, input: &DVector<f64>, readings: Vec<Level>) -> Result<Option<StepOutput>> {
        check_dim("input", self.model.m(), input.len())?;
        check_dim("readings", self.model.p(), readings.len())?;
        let t = self.next_t;
        let horizon = self.config.horizon;

        let window = match self.window.take() {
            None => MeasurementWindow::new(t, Vec::new(), vec![readings])?,
            Some(w) => {
                let u = self.pending_input.take().expect("input of the previous step");
                if w.horizon() < horizon {
                    let mut inputs = w.inputs().to_vec();
                    inputs.push(u);
                    let mut outputs: Vec<Vec<Level>> = (0..=w.horizon()).map(|k| w.readings(k).to_vec()).collect();
                    outputs.push(readings);
                    MeasurementWindow::new(w.start(), inputs, outputs)?
                } else {
                    w.slide(u, readings)?
                }
            }
        };
        self.next_t += 1;
        self.pending_input = Some(input.clone());
        let full = window.horizon() == horizon;
        self.window = Some(window);
        if !full && !self.config.warm_up {
            return Ok(None);
        }

        let window = self.window.as_ref().unwrap();
        let started = self.record_wall_time.then(Instant::now);
        let (report, fell_back) = self
            .solve(window)
            .map_err(|e| Error::Solver { t, source: Box::new(e) })?;
        let wall_time_s = started.map_or(0.0, |s| s.elapsed().as_secs_f64());

        if full {
            // x̄_{t-N+1} = A x̂_{t-N|t} + B u_{t-N}
            let u_start = if horizon == 0 { input } else { window.input(0) };
            self.prediction = self.model.propagate(report.estimate.first(), u_start);
        }
        self.last = Some(report.estimate.clone());
        if let Some(h) = self.history.as_mut() {
            h.push(report.estimate.clone());
        }
        Ok(Some(StepOutput {
            t,
            estimate: report.estimate,
            status: report.status,
            fell_back,
            wall_time_s,
        }))
    }

    /// Previous estimate shifted by one instant, extended by one propagation step.
    fn warm_start(&self, window: &MeasurementWindow) -> Option<DVector<f64>> {
        let last = self.last.as_ref()?;
        let n = self.model.n();
        let instants = window.horizon() + 1;
        let shift = window.start().checked_sub(last.start)?;
        let mut states: Vec<DVector<f64>> = last.estimates.iter().skip(shift).cloned().collect();
        while states.len() < instants {
            let k = window.start() + states.len() - 1;
            let u = if self.model.m() == 0 || states.len() > window.horizon() {
                DVector::zeros(self.model.m())
            } else {
                window.input(k - window.start()).clone()
            };
            let x = self.model.propagate(states.last()?, &u);
            states.push(x);
        }
        states.truncate(instants);
        let mut chi = DVector::zeros(instants * n);
        for (k, x) in states.iter().enumerate() {
            chi.rows_mut(k * n, n).copy_from(x);
        }
        Some(chi)
    }

    fn solve(&self, window: &MeasurementWindow) -> Result<(SolveReport, bool)> {
        let problem = WindowProblem::new(&self.model, &self.sensors, &self.config, window, &self.prediction)?;
        let warm = self.warm_start(window);
        let report = match self.variant {
            Variant::Lsmhe => solvers::solve_lsmhe(&problem)?,
            Variant::Pwmhe => solvers::solve_pwmhe(&problem, None, warm.as_ref())?,
            Variant::LsmheConstrained => {
                let cs = ConstraintSet::for_problem(&problem);
                solvers::solve_constrained_lsmhe(&problem, &cs)?
            }
            Variant::PwmheConstrained => {
                let cs = ConstraintSet::for_problem(&problem);
                solvers::solve_pwmhe(&problem, Some(&cs), warm.as_ref())?
            }
        };
        if report.status == SolveStatus::Infeasible {
            let fallback = if self.variant.is_piecewise() {
                solvers::solve_pwmhe(&problem, None, warm.as_ref())?
            } else {
                solvers::solve_lsmhe(&problem)?
            };
            return Ok((fallback, true));
        }
        Ok((report, false))
    }
}

/// One solved window of a run, with errors against the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub t: usize,
    /// `x̂_{t-N|t}`.
    pub start_estimate: DVector<f64>,
    /// `x̂_{t|t}`.
    pub end_estimate: DVector<f64>,
    /// `x_{t-N} − x̂_{t-N|t}`.
    pub start_error: DVector<f64>,
    /// `x_t − x̂_{t|t}`.
    pub end_error: DVector<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub fell_back: bool,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn window_start(&self, horizon: usize) -> usize {
        self.t - horizon
    }
}

/// Streams a simulated trajectory through the estimator. Outputs are
/// binarized with `sensors`; the truth is used only for the error columns.
pub fn run(estimator: &mut MovingHorizonEstimator, trajectory: &Trajectory, sensors: &BinarySensorBank) -> Result<Vec<RunRecord>> {
    let horizon = estimator.config.horizon;
    let zero = DVector::zeros(estimator.model.m());
    let mut records = Vec::new();
    for (t, z) in trajectory.outputs.iter().enumerate() {
        let u = trajectory.inputs.get(t).unwrap_or(&zero);
        let Some(out) = estimator.step(u, sensors.measure(z))? else {
            continue;
        };
        let start = out.estimate.start;
        let start_estimate = out.estimate.first().clone();
        let end_estimate = out.estimate.last().clone();
        let start_error = &trajectory.states[start] - &start_estimate;
        let end_error = &trajectory.states[t] - &end_estimate;
        debug_assert!(out.estimate.start + horizon >= t || estimator.config.warm_up);
        records.push(RunRecord {
            t,
            start_estimate,
            end_estimate,
            start_error,
            end_error,
            cost: out.estimate.cost,
            iterations: out.estimate.iterations,
            status: out.status,
            fell_back: out.fell_back,
            wall_time_s: out.wall_time_s,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linsys::{simulate, NoiseBounds};
    use nalgebra::DMatrix;

    fn oscillator() -> LtiModel {
        let th: f64 = 0.3;
        LtiModel::autonomous(
            DMatrix::from_row_slice(2, 2, &[th.cos(), th.sin(), -th.sin(), th.cos()]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn no_estimate_before_window_fills() {
        let model = oscillator();
        let sensors = BinarySensorBank::new(vec![0.2], vec![0.0]).unwrap();
        let config = EstimatorConfig::scaled_identity(2, 1, 1e-3, 1.0, 1.0, 5);
        let mut est = MovingHorizonEstimator::new(model, sensors, config, Variant::Lsmhe, DVector::zeros(2)).unwrap();
        for t in 0..5 {
            assert!(est.step(&DVector::zeros(0), vec![Level::High]).unwrap().is_none(), "t = {t}");
        }
        let out = est.step(&DVector::zeros(0), vec![Level::High]).unwrap().unwrap();
        assert_eq!(out.t, 5);
        assert_eq!(out.estimate.start, 0);
    }

    #[test]
    fn constant_prediction_without_switches() {
        let model = LtiModel::autonomous(DMatrix::identity(2, 2), DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let sensors = BinarySensorBank::new(vec![0.0], vec![0.0]).unwrap();
        let config = EstimatorConfig::scaled_identity(2, 1, 1.0, 1.0, 1.0, 3);
        let prior = DVector::from_vec(vec![0.7, -0.2]);
        let mut est = MovingHorizonEstimator::new(model, sensors, config, Variant::Lsmhe, prior.clone()).unwrap();
        for _ in 0..20 {
            est.step(&DVector::zeros(0), vec![Level::Low]).unwrap();
            assert!((est.prediction() - &prior).amax() < 1e-12);
        }
    }

    #[test]
    fn prediction_follows_window_start_estimate() {
        let model = oscillator();
        let sensors = BinarySensorBank::new(vec![0.1], vec![0.0]).unwrap();
        let config = EstimatorConfig::scaled_identity(2, 1, 1e-2, 1.0, 1.0, 4);
        let traj = simulate(&model, &DVector::from_vec(vec![1.0, 0.0]), &vec![DVector::zeros(0); 40], &NoiseBounds::noiseless(1), 1).unwrap();
        let mut est = MovingHorizonEstimator::new(model.clone(), sensors.clone(), config, Variant::Pwmhe, DVector::zeros(2)).unwrap();
        for z in &traj.outputs {
            if let Some(out) = est.step(&DVector::zeros(0), sensors.measure(z)).unwrap() {
                let expected = model.a() * out.estimate.first();
                assert_eq!(est.prediction(), &expected);
            }
        }
    }

    #[test]
    fn pwmhe_reproduces_truth_from_exact_prior() {
        let model = oscillator();
        let sensors = BinarySensorBank::new(vec![0.3], vec![0.0]).unwrap();
        let config = EstimatorConfig::scaled_identity(2, 1, 1.0, 1.0, 1.0, 6);
        let x0 = DVector::from_vec(vec![1.0, 0.5]);
        let traj = simulate(&model, &x0, &vec![DVector::zeros(0); 30], &NoiseBounds::noiseless(1), 3).unwrap();
        let mut est = MovingHorizonEstimator::new(model, sensors.clone(), config, Variant::Pwmhe, x0).unwrap();
        let records = run(&mut est, &traj, &sensors).unwrap();
        assert_eq!(records.len(), 31 - 6);
        for r in &records {
            assert!(r.start_error.amax() < 1e-9, "t = {}: {}", r.t, r.start_error);
            assert!(r.end_error.amax() < 1e-9);
        }
    }

    #[test]
    fn warm_up_emits_shrinking_windows() {
        let model = oscillator();
        let sensors = BinarySensorBank::new(vec![0.0], vec![0.0]).unwrap();
        let mut config = EstimatorConfig::scaled_identity(2, 1, 1.0, 1.0, 1.0, 3);
        config.warm_up = true;
        let mut est = MovingHorizonEstimator::new(model, sensors, config, Variant::Pwmhe, DVector::zeros(2)).unwrap();
        let sizes: Vec<usize> = (0..6)
            .map(|_| est.step(&DVector::zeros(0), vec![Level::Low]).unwrap().unwrap().estimate.estimates.len())
            .collect();
        assert_eq!(sizes, vec![1, 2, 3, 4, 4, 4]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("ls".parse::<Variant>().is_err());
    }
}
