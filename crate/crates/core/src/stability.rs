//! Constants of the error-recursion bound `‖e_{t-N}‖²_P ≤ a1 ‖e_{t-N-1}‖²_P + a2`
//! and the search for an arrival weight `P = εP̄` giving `a1 < 1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::costs::EstimatorConfig;
use crate::error::{Error, Result};
use crate::linsys::{spectral_norm, LtiModel, NoiseBounds};
use crate::sensing::MeasurementWindow;

/// Per-sensor `(H_t^i, D_t^i)`: one row per switching instant `k`, with
/// `N + 1` column blocks indexed by `j = start..=end`.
pub fn switching_response_matrices(model: &LtiModel, window: &MeasurementWindow) -> Vec<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, m) = (model.n(), model.m());
    let blocks = window.horizon() + 1;
    // c_pows[q] = C A^q
    let mut c_pows = Vec::with_capacity(blocks);
    let mut cur = model.c().clone();
    for _ in 0..blocks {
        let next = &cur * model.a();
        c_pows.push(cur);
        cur = next;
    }
    let cb: Vec<DMatrix<f64>> = c_pows.iter().map(|c| c * model.b()).collect();
    let start = window.start();
    window
        .switching_sets()
        .iter()
        .enumerate()
        .map(|(i, set)| {
            let mut h = DMatrix::zeros(set.len(), blocks * m);
            let mut d = DMatrix::zeros(set.len(), blocks * n);
            for (r, &k) in set.iter().enumerate() {
                for j in start..k {
                    let q = k - 1 - j;
                    let col = j - start;
                    if m > 0 {
                        h.view_mut((r, col * m), (1, m)).copy_from(&cb[q].row(i));
                    }
                    d.view_mut((r, col * n), (1, n)).copy_from(&c_pows[q].row(i));
                }
            }
            (h, d)
        })
        .collect()
}

/// Largest spectral norm of the `D_t^i` of one window.
pub fn window_phi(model: &LtiModel, window: &MeasurementWindow) -> f64 {
    switching_response_matrices(model, window)
        .iter()
        .map(|(_, d)| if d.nrows() == 0 { 0.0 } else { spectral_norm(d) })
        .fold(0.0, f64::max)
}

/// Running maximum of `‖D_t^i‖` over observed windows (empirical `φ̄`).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhiTracker {
    value: f64,
}

impl PhiTracker {
    pub fn observe(&mut self, model: &LtiModel, window: &MeasurementWindow) -> f64 {
        self.value = self.value.max(window_phi(model, window));
        self.value
    }

    pub fn value(&self) -> f64 {
        self.value
    }
}

/// Problem data the constants depend on, apart from the arrival weight.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityInputs {
    pub process_weight: DMatrix<f64>,
    pub output_weights: Vec<f64>,
    pub horizon: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Euclidean radius of the admissible state set.
    pub rho_state: f64,
    pub rho_u: f64,
    /// Euclidean bound on the process noise.
    pub rho_w: f64,
    pub rho_v_max: f64,
    pub delta: f64,
    pub phi_bar: f64,
}

impl StabilityInputs {
    /// `rho_state` is the configured state box radius when `use_state_box`
    /// is set and a box exists, else `noise.rho_x`.
    pub fn new(
        config: &EstimatorConfig,
        model: &LtiModel,
        noise: &NoiseBounds,
        use_state_box: bool,
        delta: f64,
        phi_bar: f64,
    ) -> Self {
        let rho_state = match (&config.state_box, use_state_box) {
            (Some(b), true) => b.radius(),
            _ => noise.rho_x,
        };
        Self {
            process_weight: config.process_weight.clone(),
            output_weights: config.output_weights.clone(),
            horizon: config.horizon,
            a: model.a().clone(),
            b: model.b().clone(),
            c: model.c().clone(),
            rho_state,
            rho_u: noise.rho_u,
            rho_w: noise.process_radius(model.n()),
            rho_v_max: noise.rho_v_max(),
            delta,
            phi_bar,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityConstants {
    pub delta: f64,
    pub l_bar: f64,
    pub c_bar: f64,
    pub r_bar: f64,
    pub r_underbar: f64,
    pub phi_bar: f64,
    pub lambda_min_p: f64,
    pub lambda_max_p: f64,
    pub lambda_min_q: f64,
    pub lambda_max_q: f64,
    pub norm_a: f64,
    pub norm_a_minus_i: f64,
    pub norm_b: f64,
    pub b1: f64,
    pub b2: f64,
    pub d1: f64,
    pub d2: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub a1: f64,
    pub a2: f64,
    /// `sqrt(a2 / (1 − a1))`, only when `a1 < 1`.
    pub e_inf: Option<f64>,
    pub rho_state: f64,
    pub rho_u: f64,
    pub rho_w: f64,
    pub rho_v_max: f64,
    pub p: usize,
    pub horizon: usize,
    pub n: usize,
}

fn eigen_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let ev = m.clone().symmetric_eigenvalues();
    (ev.min(), ev.max())
}

/// Evaluates every constant for arrival weight `arrival_weight`.
pub fn compute_constants(inputs: &StabilityInputs, arrival_weight: &DMatrix<f64>) -> Result<StabilityConstants> {
    if !(inputs.delta >= 0.0) {
        return Err(Error::InvalidInput(format!("delta = {} must be nonnegative", inputs.delta)));
    }
    if !(inputs.phi_bar > 0.0) {
        return Err(Error::InvalidInput(format!("phi_bar = {} must be positive", inputs.phi_bar)));
    }
    let (lmin_p, lmax_p) = eigen_extremes(arrival_weight);
    let (lmin_q, lmax_q) = eigen_extremes(&inputs.process_weight);
    if !(lmin_p > 0.0) {
        return Err(Error::NotPositiveDefinite { weight: "P (arrival weight)" });
    }
    if !(lmin_q > 0.0) {
        return Err(Error::NotPositiveDefinite { weight: "Q (process weight)" });
    }
    let r_bar = inputs.output_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let r_under = inputs.output_weights.iter().copied().fold(f64::INFINITY, f64::min);
    if !(r_under > 0.0) {
        return Err(Error::NotPositiveDefinite { weight: "R (output weights)" });
    }

    let n = inputs.a.nrows();
    let p = inputs.c.nrows() as f64;
    let big_n = inputs.horizon as f64;
    let c_bar = (0..inputs.c.nrows())
        .map(|i| inputs.c.row(i).norm())
        .fold(0.0, f64::max);
    let l_bar = c_bar;
    let phi = inputs.phi_bar;
    let norm_a = spectral_norm(&inputs.a);
    let norm_ami = spectral_norm(&(&inputs.a - DMatrix::identity(n, n)));
    let norm_b = if inputs.b.ncols() == 0 { 0.0 } else { spectral_norm(&inputs.b) };

    let d1 = 2.0 * p * phi * phi;
    let d2 = 3.0 * l_bar * l_bar / (phi * phi);
    let b1 = lmax_p / lmin_p * (4.0 + d1 / lmin_q * (d2 + r_bar));
    let b2 = 0.5 + inputs.delta.powi(2) * r_under / (4.0 * lmax_p);
    let a1 = b1 * norm_a * norm_a / b2;
    let c1 = p * (big_n + 1.0) * (4.0 * r_bar * c_bar * c_bar + 3.0 * l_bar * l_bar);
    let c2 = c1;
    let c3 = b1 + big_n * lmax_q * (b1 / (2.0 * lmax_p) - 1.0) + p * r_bar * (4.0 * (big_n + 1.0) * c_bar * c_bar + phi * phi);
    let c4 = p * (big_n + 1.0) * r_bar * (b1 / (2.0 * lmax_p) - 1.0) + p * r_bar * (4.0 * big_n + 5.0);
    let a2 = (c1 * norm_ami.powi(2) * inputs.rho_state.powi(2)
        + c2 * norm_b.powi(2) * inputs.rho_u.powi(2)
        + c3 * inputs.rho_w.powi(2)
        + c4 * inputs.rho_v_max.powi(2))
        / b2;
    let e_inf = (a1 < 1.0).then(|| (a2 / (1.0 - a1)).sqrt());

    Ok(StabilityConstants {
        delta: inputs.delta,
        l_bar,
        c_bar,
        r_bar,
        r_underbar: r_under,
        phi_bar: phi,
        lambda_min_p: lmin_p,
        lambda_max_p: lmax_p,
        lambda_min_q: lmin_q,
        lambda_max_q: lmax_q,
        norm_a,
        norm_a_minus_i: norm_ami,
        norm_b,
        b1,
        b2,
        d1,
        d2,
        c1,
        c2,
        c3,
        c4,
        a1,
        a2,
        e_inf,
        rho_state: inputs.rho_state,
        rho_u: inputs.rho_u,
        rho_w: inputs.rho_w,
        rho_v_max: inputs.rho_v_max,
        p: inputs.c.nrows(),
        horizon: inputs.horizon,
        n,
    })
}

/// Certified arrival-weight scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonBracket {
    pub epsilon: f64,
    pub a1_at_epsilon: f64,
    pub a1_at_double: f64,
}

/// Largest `ε` (to 1e-12 relative) with `a1 < 1` for `P = ε P̄`.
///
/// `a1(ε) = K / (1/2 + c/ε)` with `K = b1 ‖A‖²` independent of `ε`, so `a1`
/// increases with `ε` and the threshold is found by bisection on `log ε`.
pub fn find_epsilon(inputs: &StabilityInputs, p_bar: &DMatrix<f64>) -> Result<EpsilonBracket> {
    if !(inputs.delta > 0.0) {
        return Err(Error::NoSolution(
            "observability measure delta is zero; no arrival weight gives a1 < 1".into(),
        ));
    }
    let a1 = |eps: f64| compute_constants(inputs, &(p_bar * eps)).map(|c| c.a1);
    let mut lo = 1.0;
    while a1(lo)? >= 1.0 {
        lo *= 0.5;
        if lo < 1e-300 {
            return Err(Error::NoSolution("a1 >= 1 for every representable epsilon".into()));
        }
    }
    let mut hi = lo * 2.0;
    while a1(hi)? < 1.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::NoSolution("a1 < 1 for every epsilon; no largest value exists".into()));
        }
    }
    while (hi - lo) > 1e-12 * lo {
        let mid = (lo * hi).sqrt();
        let mid = if mid > lo && mid < hi { mid } else { 0.5 * (lo + hi) };
        if mid <= lo || mid >= hi {
            break;
        }
        if a1(mid)? < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(EpsilonBracket {
        epsilon: lo,
        a1_at_epsilon: a1(lo)?,
        a1_at_double: a1(2.0 * lo)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecursionReport {
    pub pairs: usize,
    /// Indices `s` (into the error sequence) where the bound fails for `(s-1, s)`.
    pub violations: Vec<usize>,
    /// Largest `‖e_s‖²_P − a1 ‖e_{s-1}‖²_P − a2`.
    pub worst_slack: f64,
    /// Max `‖e‖` over the tail.
    pub tail_max_norm: f64,
    pub e_inf: Option<f64>,
    pub tail_within_bound: Option<bool>,
}

/// Checks `‖e_s‖²_P ≤ a1 ‖e_{s-1}‖²_P + a2` for consecutive errors and
/// compares the tail `errors[tail_start..]` with `e_inf`.
pub fn check_error_recursion(
    errors: &[DVector<f64>],
    arrival_weight: &DMatrix<f64>,
    constants: &StabilityConstants,
    tail_start: usize,
) -> RecursionReport {
    let sq = |e: &DVector<f64>| e.dot(&(arrival_weight * e));
    let mut violations = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    for s in 1..errors.len() {
        let slack = sq(&errors[s]) - constants.a1 * sq(&errors[s - 1]) - constants.a2;
        worst = worst.max(slack);
        if slack > 0.0 {
            violations.push(s);
        }
    }
    let tail_max_norm = errors.iter().skip(tail_start).map(|e| e.norm()).fold(0.0, f64::max);
    RecursionReport {
        pairs: errors.len().saturating_sub(1),
        violations,
        worst_slack: worst,
        tail_max_norm,
        e_inf: constants.e_inf,
        tail_within_bound: constants.e_inf.map(|b| tail_max_norm <= b),
    }
}
