//! Window cost functions.
//!
//! Both costs share an arrival term `‖x̂_start − x̄‖²_P` and a dynamics term
//! `Σ ‖x̂_{k+1} − A x̂_k − B u_k‖²_Q`. They differ in the output term:
//!
//! * the least-squares cost charges `R^i (C^i x̂_k − τ^i)²` at each switching
//!   instant `k` of sensor `i`;
//! * the piecewise-quadratic cost charges the same distance at every instant
//!   of the window, but only when the expected output `C^i x̂_k` sits on the
//!   wrong side of the threshold for the reading `y_k^i`.
//!
//! The piecewise term is continuously differentiable and convex, so the
//! second cost is C¹ and strictly convex whenever `P, Q ≻ 0`.
//!
//! Candidates are stacked as `χ = col(x̂_start, …, x̂_end)` with `(N + 1) n`
//! entries.

use nalgebra::{Cholesky, DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::blocktri::BlockTridiagonal;
use crate::error::{check_dim, Error, Result};
use crate::linsys::LtiModel;
use crate::sensing::{mismatch, BinarySensorBank, MeasurementWindow};

/// Axis-aligned box `lower ≤ x ≤ upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        check_dim("box bounds", lower.len(), upper.len())?;
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidInput("box lower bounds must be below upper bounds".into()));
        }
        Ok(Self { lower, upper })
    }

    /// Box `[-half_width, half_width]^n`.
    pub fn symmetric(n: usize, half_width: f64) -> Result<Self> {
        Self::new(DVector::from_element(n, -half_width), DVector::from_element(n, half_width))
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    /// Largest Euclidean norm over the box.
    pub fn radius(&self) -> f64 {
        self.lower
            .iter()
            .zip(self.upper.iter())
            .map(|(l, u)| l.abs().max(u.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Knobs of the iterative solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Projected-gradient (or KKT residual) tolerance.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Backtracking factor of the Armijo line search.
    pub backtrack: f64,
    /// Sufficient-decrease constant of the Armijo line search.
    pub sufficient_decrease: f64,
    /// Strict inequalities are enforced as `≤ rhs − margin`.
    pub margin: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 500,
            backtrack: 0.5,
            sufficient_decrease: 1e-4,
            margin: 1e-9,
        }
    }
}

/// Which instant of a switching interval the least-squares term charges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwitchingPoint {
    /// `C^i x̂_k − τ^i` at the instant before the reading changes.
    #[default]
    IntervalStart,
    /// `C^i (x̂_k + x̂_{k+1}) / 2 − τ^i`.
    Midpoint,
}

/// Weights, horizon, constraint sets and solver settings of an estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    /// Arrival-cost weight `P`.
    pub arrival_weight: DMatrix<f64>,
    /// Disturbance weight `Q`.
    pub process_weight: DMatrix<f64>,
    /// Per-sensor output weights `R^i`.
    pub output_weights: Vec<f64>,
    pub horizon: usize,
    /// Convex state set used by the piecewise-quadratic estimator.
    pub state_box: Option<BoxSet>,
    /// Box bounding `x̂_{k+1} − A x̂_k − B u_k`, used when disturbance
    /// constraints are requested.
    pub disturbance_box: Option<BoxSet>,
    /// Impose the reading-consistency rows in the constrained variants.
    pub threshold_constraints: bool,
    pub switching_point: SwitchingPoint,
    /// Solve shrinking-horizon problems before the first full window.
    pub warm_up: bool,
    pub solver: SolverSettings,
}

impl EstimatorConfig {
    /// Identity-shaped weights `P = εI`, `Q = qI`, `R^i = r`.
    pub fn scaled_identity(n: usize, p: usize, epsilon: f64, q: f64, r: f64, horizon: usize) -> Self {
        Self {
            arrival_weight: DMatrix::identity(n, n) * epsilon,
            process_weight: DMatrix::identity(n, n) * q,
            output_weights: vec![r; p],
            horizon,
            state_box: None,
            disturbance_box: None,
            threshold_constraints: true,
            switching_point: SwitchingPoint::default(),
            warm_up: false,
            solver: SolverSettings::default(),
        }
    }

    pub fn validate(&self, n: usize, p: usize) -> Result<()> {
        check_dim("arrival weight rows", n, self.arrival_weight.nrows())?;
        check_dim("arrival weight columns", n, self.arrival_weight.ncols())?;
        check_dim("process weight rows", n, self.process_weight.nrows())?;
        check_dim("process weight columns", n, self.process_weight.ncols())?;
        check_dim("output weights", p, self.output_weights.len())?;
        check_positive_definite(&self.arrival_weight, "P (arrival weight)")?;
        check_positive_definite(&self.process_weight, "Q (process weight)")?;
        if self.output_weights.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::NotPositiveDefinite { weight: "R (output weights)" });
        }
        if self.horizon == 0 {
            return Err(Error::InvalidInput("horizon must be at least 1".into()));
        }
        for b in [&self.state_box, &self.disturbance_box].into_iter().flatten() {
            check_dim("box dimension", n, b.dim())?;
        }
        if !(self.solver.tolerance > 0.0 && self.solver.max_iterations > 0) {
            return Err(Error::InvalidInput("solver tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

fn check_positive_definite(m: &DMatrix<f64>, weight: &'static str) -> Result<()> {
    let symmetric = (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax());
    if symmetric && Cholesky::new(m.clone()).is_some() {
        Ok(())
    } else {
        Err(Error::NotPositiveDefinite { weight })
    }
}

/// Estimates of one window, `x̂_{start|t} … x̂_{t|t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowEstimate {
    /// First instant of the window.
    pub start: usize,
    pub estimates: Vec<DVector<f64>>,
    pub cost: f64,
    pub iterations: usize,
    /// Final gradient norm or KKT residual.
    pub residual: f64,
}

impl WindowEstimate {
    /// Last instant of the window.
    pub fn end(&self) -> usize {
        self.start + self.estimates.len() - 1
    }

    /// Smoothed estimate at the window start.
    pub fn first(&self) -> &DVector<f64> {
        &self.estimates[0]
    }

    /// Filtered estimate at the window end.
    pub fn last(&self) -> &DVector<f64> {
        self.estimates.last().expect("window has at least one estimate")
    }

    pub fn stacked(&self) -> DVector<f64> {
        stack(&self.estimates)
    }
}

/// `χ' H χ + 2 χ' g + r` with block-tridiagonal `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub h: BlockTridiagonal,
    pub g: DVector<f64>,
    pub r: f64,
}

impl QuadraticForm {
    pub fn evaluate(&self, chi: &DVector<f64>) -> f64 {
        chi.dot(&self.h.mul_vec(chi)) + 2.0 * chi.dot(&self.g) + self.r
    }

    /// `2 (H χ + g)`.
    pub fn gradient(&self, chi: &DVector<f64>) -> DVector<f64> {
        (self.h.mul_vec(chi) + &self.g) * 2.0
    }

    pub fn dense_h(&self) -> DMatrix<f64> {
        self.h.to_dense()
    }
}

/// Stacks window states into one vector.
pub fn stack(states: &[DVector<f64>]) -> DVector<f64> {
    let n = states.first().map_or(0, |x| x.len());
    let mut out = DVector::zeros(n * states.len());
    for (k, x) in states.iter().enumerate() {
        out.rows_mut(k * n, n).copy_from(x);
    }
    out
}

/// Splits a stacked vector into `n`-blocks.
pub fn unstack(chi: &DVector<f64>, n: usize) -> Vec<DVector<f64>> {
    chi.as_slice().chunks(n).map(DVector::from_column_slice).collect()
}

/// One window's estimation problem: everything the costs depend on.
#[derive(Debug, Clone, Copy)]
pub struct WindowProblem<'a> {
    pub model: &'a LtiModel,
    pub sensors: &'a BinarySensorBank,
    pub config: &'a EstimatorConfig,
    pub window: &'a MeasurementWindow,
    /// Prediction `x̄` of the state at the window start.
    pub prediction: &'a DVector<f64>,
}

impl<'a> WindowProblem<'a> {
    pub fn new(
        model: &'a LtiModel,
        sensors: &'a BinarySensorBank,
        config: &'a EstimatorConfig,
        window: &'a MeasurementWindow,
        prediction: &'a DVector<f64>,
    ) -> Result<Self> {
        check_dim("prediction", model.n(), prediction.len())?;
        check_dim("sensor count", model.p(), sensors.len())?;
        check_dim("window sensors", model.p(), window.sensors())?;
        check_dim("output weights", model.p(), config.output_weights.len())?;
        for u in window.inputs() {
            check_dim("window input", model.m(), u.len())?;
        }
        Ok(Self {
            model,
            sensors,
            config,
            window,
            prediction,
        })
    }

    pub fn n(&self) -> usize {
        self.model.n()
    }

    /// Number of instants `N + 1`.
    pub fn instants(&self) -> usize {
        self.window.horizon() + 1
    }

    /// Number of decision variables `(N + 1) n`.
    pub fn dim(&self) -> usize {
        self.instants() * self.n()
    }

    pub fn block<'c>(&self, chi: &'c DVector<f64>, k: usize) -> DVectorView<'c, f64> {
        chi.rows(k * self.n(), self.n())
    }

    fn input_term(&self, k: usize) -> DVector<f64> {
        if self.model.m() == 0 {
            DVector::zeros(self.n())
        } else {
            self.model.b() * self.window.input(k)
        }
    }

    /// Noise-free propagation of the prediction through the window inputs.
    pub fn prior_trajectory(&self) -> DVector<f64> {
        let mut states = Vec::with_capacity(self.instants());
        let mut x = self.prediction.clone();
        for k in 0..self.instants() {
            if k > 0 {
                x = self.model.a() * &x + self.input_term(k - 1);
            }
            states.push(x.clone());
        }
        stack(&states)
    }

    /// Disturbance estimate `x̂_{k+1} − A x̂_k − B u_k`.
    pub fn disturbance(&self, chi: &DVector<f64>, k: usize) -> DVector<f64> {
        self.block(chi, k + 1) - self.model.a() * self.block(chi, k) - self.input_term(k)
    }

    fn shared_terms(&self, chi: &DVector<f64>) -> f64 {
        let dx = self.block(chi, 0) - self.prediction;
        let mut cost = dx.dot(&(&self.config.arrival_weight * &dx));
        for k in 0..self.window.horizon() {
            let w = self.disturbance(chi, k);
            cost += w.dot(&(&self.config.process_weight * &w));
        }
        cost
    }

    /// Expected output `C^i x̂_k` at window offset `k`.
    fn expected_output(&self, chi: &DVector<f64>, sensor: usize, k: usize) -> f64 {
        self.model.c().row(sensor).dot(&self.block(chi, k).transpose())
    }

    /// Least-squares cost.
    pub fn cost_ls(&self, chi: &DVector<f64>) -> f64 {
        let mut cost = self.shared_terms(chi);
        let start = self.window.start();
        for (i, set) in self.window.switching_sets().iter().enumerate() {
            let (tau, r) = (self.sensors.threshold(i), self.config.output_weights[i]);
            for &k in set {
                let off = k - start;
                let z = match self.config.switching_point {
                    SwitchingPoint::IntervalStart => self.expected_output(chi, i, off),
                    SwitchingPoint::Midpoint => {
                        0.5 * (self.expected_output(chi, i, off) + self.expected_output(chi, i, off + 1))
                    }
                };
                cost += r * (z - tau).powi(2);
            }
        }
        cost
    }

    /// Piecewise-quadratic cost.
    pub fn cost_pw(&self, chi: &DVector<f64>) -> f64 {
        let mut cost = self.shared_terms(chi);
        for k in 0..self.instants() {
            for i in 0..self.model.p() {
                let (tau, y) = (self.sensors.threshold(i), self.window.reading(k, i));
                let z = self.expected_output(chi, i, k);
                if mismatch(z, tau, y) {
                    cost += self.config.output_weights[i] * (z - tau).powi(2);
                }
            }
        }
        cost
    }

    /// Exact gradient of [`cost_pw`](Self::cost_pw).
    pub fn gradient_pw(&self, chi: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let a = self.model.a();
        let q = &self.config.process_weight;
        let mut grad = DVector::zeros(self.dim());
        let dx = self.block(chi, 0) - self.prediction;
        grad.rows_mut(0, n).axpy(2.0, &(&self.config.arrival_weight * dx), 1.0);
        for k in 0..self.window.horizon() {
            let qw = q * self.disturbance(chi, k);
            grad.rows_mut((k + 1) * n, n).axpy(2.0, &qw, 1.0);
            grad.rows_mut(k * n, n).axpy(-2.0, &a.tr_mul(&qw), 1.0);
        }
        for k in 0..self.instants() {
            for i in 0..self.model.p() {
                let (tau, y) = (self.sensors.threshold(i), self.window.reading(k, i));
                let z = self.expected_output(chi, i, k);
                if mismatch(z, tau, y) {
                    let coef = 2.0 * self.config.output_weights[i] * (z - tau);
                    let row = self.model.c().row(i).transpose();
                    grad.rows_mut(k * n, n).axpy(coef, &row, 1.0);
                }
            }
        }
        grad
    }

    /// Arrival and dynamics terms as a quadratic form.
    pub fn shared_form(&self) -> QuadraticForm {
        let n = self.n();
        let a = self.model.a();
        let q = &self.config.process_weight;
        let p = &self.config.arrival_weight;
        let mut h = BlockTridiagonal::zeros(self.instants(), n);
        let mut g = DVector::zeros(self.dim());
        h.add_diag(0, p);
        g.rows_mut(0, n).axpy(-1.0, &(p * self.prediction), 1.0);
        let mut r = self.prediction.dot(&(p * self.prediction));

        let atq = a.transpose() * q;
        let atqa = &atq * a;
        let neg_qa = -(q * a);
        for k in 0..self.window.horizon() {
            h.add_diag(k, &atqa);
            h.add_diag(k + 1, q);
            h.add_lower(k, &neg_qa);
            if self.model.m() > 0 {
                let c = self.input_term(k);
                g.rows_mut(k * n, n).gemv(1.0, &atq, &c, 1.0);
                g.rows_mut((k + 1) * n, n).gemv(-1.0, q, &c, 1.0);
                r += c.dot(&(q * &c));
            }
        }
        QuadraticForm { h, g, r }
    }

    /// Least-squares cost as `χ'Hχ + 2χ'g + r`.
    pub fn quadratic_ls(&self) -> QuadraticForm {
        let n = self.n();
        let mut form = self.shared_form();
        let start = self.window.start();
        for (i, set) in self.window.switching_sets().iter().enumerate() {
            let (tau, r) = (self.sensors.threshold(i), self.config.output_weights[i]);
            let row = self.model.c().row(i).transpose();
            let ctc = &row * row.transpose();
            for &k in set {
                let off = k - start;
                match self.config.switching_point {
                    SwitchingPoint::IntervalStart => {
                        form.h.add_diag(off, &(&ctc * r));
                        form.g.rows_mut(off * n, n).axpy(-r * tau, &row, 1.0);
                    }
                    SwitchingPoint::Midpoint => {
                        let quarter = &ctc * (0.25 * r);
                        form.h.add_diag(off, &quarter);
                        form.h.add_diag(off + 1, &quarter);
                        form.h.add_lower(off, &quarter);
                        form.g.rows_mut(off * n, n).axpy(-0.5 * r * tau, &row, 1.0);
                        form.g.rows_mut((off + 1) * n, n).axpy(-0.5 * r * tau, &row, 1.0);
                    }
                }
                form.r += r * tau * tau;
            }
        }
        form
    }

    /// Hessian of the piecewise cost on the piece containing `chi`, in the
    /// same half-scaled convention as [`QuadraticForm::h`].
    pub fn hessian_pw(&self, chi: &DVector<f64>) -> BlockTridiagonal {
        let mut h = self.shared_form().h;
        self.add_active_output_terms(&mut h, chi);
        h
    }

    pub(crate) fn add_active_output_terms(&self, h: &mut BlockTridiagonal, chi: &DVector<f64>) {
        for i in 0..self.model.p() {
            let row = self.model.c().row(i).transpose();
            let ctc = &row * row.transpose() * self.config.output_weights[i];
            let tau = self.sensors.threshold(i);
            for k in 0..self.instants() {
                let z = self.expected_output(chi, i, k);
                if mismatch(z, tau, self.window.reading(k, i)) {
                    h.add_diag(k, &ctc);
                }
            }
        }
    }
}
