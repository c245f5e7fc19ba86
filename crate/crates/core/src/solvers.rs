//! Window solvers.
//!
//! * least squares: one block-Cholesky solve of the normal equations;
//! * piecewise quadratic: projected Newton (Bertsekas) with Armijo
//!   backtracking on the optional state box;
//! * constrained variants: the interior-point QP of [`crate::qp`]. The
//!   piecewise terms are lifted exactly with one slack per sensor and
//!   instant, `R e²` with `e ≥ 0` and `e ≥ y (τ − C x)`.

use nalgebra::{DMatrix, DVector};

use crate::blocktri::BlockTridiagonal;
use crate::costs::{unstack, BoxSet, WindowEstimate, WindowProblem};
use crate::error::Result;
use crate::qp::{BlockQp, IpmSettings, QpStatus, SparseRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub estimate: WindowEstimate,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Stationarity measure at the returned point.
    pub residual: f64,
    /// Cost after each accepted iterate, starting from the initial point.
    pub cost_history: Vec<f64>,
}

/// Row `coeff' x_offset ≤ rhs` of the threshold-consistency system `Γχ ≤ γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdRow {
    pub offset: usize,
    pub sensor: usize,
    pub coeff: DVector<f64>,
    pub rhs: f64,
}

/// Hard constraints of the constrained estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub threshold_rows: Vec<ThresholdRow>,
    pub state_box: Option<BoxSet>,
    pub disturbance_box: Option<BoxSet>,
    /// Every row is imposed as `a'χ ≤ b − margin`.
    pub margin: f64,
}

impl ConstraintSet {
    pub fn empty(margin: f64) -> Self {
        Self {
            threshold_rows: Vec::new(),
            state_box: None,
            disturbance_box: None,
            margin,
        }
    }

    /// Threshold rows (unless disabled) together with the boxes and margin
    /// of the problem's configuration.
    pub fn for_problem(problem: &WindowProblem<'_>) -> Self {
        Self {
            threshold_rows: if problem.config.threshold_constraints {
                build_threshold_constraints(problem)
            } else {
                Vec::new()
            },
            state_box: problem.config.state_box.clone(),
            disturbance_box: problem.config.disturbance_box.clone(),
            margin: problem.config.solver.margin,
        }
    }

    pub fn has_linear_rows(&self) -> bool {
        !self.threshold_rows.is_empty() || self.disturbance_box.is_some()
    }

    /// Dense `(Γ, γ)` of the threshold rows over `instants` blocks of size `n`.
    pub fn gamma(&self, n: usize, instants: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut g = DMatrix::zeros(self.threshold_rows.len(), n * instants);
        let mut rhs = DVector::zeros(self.threshold_rows.len());
        for (r, row) in self.threshold_rows.iter().enumerate() {
            g.view_mut((r, row.offset * n), (1, n)).copy_from(&row.coeff.transpose());
            rhs[r] = row.rhs;
        }
        (g, rhs)
    }

    /// All rows as sparse rows over blocks of `block` entries whose first
    /// `n` entries are the state. Margins included.
    fn sparse_rows(&self, problem: &WindowProblem<'_>, block: usize) -> Vec<SparseRow> {
        let n = problem.n();
        let embed = |v: DVector<f64>| {
            let mut out = DVector::zeros(block);
            out.rows_mut(0, n).copy_from(&v);
            out
        };
        let unit = |j: usize, s: f64| {
            let mut out = DVector::zeros(block);
            out[j] = s;
            out
        };
        let mut rows = Vec::new();
        for t in &self.threshold_rows {
            rows.push(SparseRow::single(t.offset, embed(t.coeff.clone()), t.rhs - self.margin));
        }
        if let Some(b) = &self.state_box {
            for k in 0..problem.instants() {
                for j in 0..n {
                    rows.push(SparseRow::single(k, unit(j, 1.0), b.upper[j] - self.margin));
                    rows.push(SparseRow::single(k, unit(j, -1.0), -b.lower[j] - self.margin));
                }
            }
        }
        if let Some(b) = &self.disturbance_box {
            let a = problem.model.a();
            for k in 0..problem.window.horizon() {
                let bu = if problem.model.m() == 0 {
                    DVector::zeros(n)
                } else {
                    problem.model.b() * problem.window.input(k)
                };
                for j in 0..n {
                    let a_row = embed(a.row(j).transpose());
                    rows.push(SparseRow {
                        blocks: vec![(k, -&a_row), (k + 1, unit(j, 1.0))],
                        rhs: b.upper[j] + bu[j] - self.margin,
                    });
                    rows.push(SparseRow {
                        blocks: vec![(k, a_row), (k + 1, unit(j, -1.0))],
                        rhs: -b.lower[j] - bu[j] - self.margin,
                    });
                }
            }
        }
        rows
    }

    /// Largest `a'χ − b` over all rows, margin excluded.
    pub fn max_violation(&self, problem: &WindowProblem<'_>, chi: &DVector<f64>) -> f64 {
        let mut relaxed = self.clone();
        relaxed.margin = 0.0;
        relaxed
            .sparse_rows(problem, problem.n())
            .iter()
            .map(|r| r.dot(chi) - r.rhs)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Threshold-consistency rows `−y C^i x_k ≤ −y τ^i + ρ_V^i`, sensor-major,
/// instants ascending.
pub fn build_threshold_constraints(problem: &WindowProblem<'_>) -> Vec<ThresholdRow> {
    let mut rows = Vec::with_capacity(problem.model.p() * problem.instants());
    for i in 0..problem.model.p() {
        let c = problem.model.output_row(i).transpose();
        let tau = problem.sensors.threshold(i);
        let rho = problem.sensors.noise_bound(i);
        for k in 0..problem.instants() {
            let y = problem.window.reading(k, i).sign();
            rows.push(ThresholdRow {
                offset: k,
                sensor: i,
                coeff: &c * -y,
                rhs: -y * tau + rho,
            });
        }
    }
    rows
}

fn finish(problem: &WindowProblem<'_>, chi: DVector<f64>, cost: f64, iterations: usize, residual: f64) -> WindowEstimate {
    WindowEstimate {
        start: problem.window.start(),
        estimates: unstack(&chi, problem.n()),
        cost,
        iterations,
        residual,
    }
}

fn ipm_settings(problem: &WindowProblem<'_>) -> IpmSettings {
    let s = &problem.config.solver;
    IpmSettings {
        tolerance: s.tolerance,
        primal_tolerance: (0.1 * s.margin).min(s.tolerance).max(1e-14),
        max_iterations: s.max_iterations.min(200),
    }
}

/// Closed-form least-squares estimate.
pub fn solve_lsmhe(problem: &WindowProblem<'_>) -> Result<SolveReport> {
    problem.config.validate(problem.n(), problem.model.p())?;
    let form = problem.quadratic_ls();
    let chi = form.h.solve(&(-&form.g))?;
    let residual = (form.h.mul_vec(&chi) + &form.g).amax();
    // χ'Hχ + 2g'χ + r with Hχ = −g
    let cost = (form.r + form.g.dot(&chi)).max(0.0);
    Ok(SolveReport {
        estimate: finish(problem, chi, cost, 1, residual),
        status: SolveStatus::Optimal,
        iterations: 1,
        residual,
        cost_history: vec![cost],
    })
}

/// Least squares subject to `constraints`.
pub fn solve_constrained_lsmhe(problem: &WindowProblem<'_>, constraints: &ConstraintSet) -> Result<SolveReport> {
    problem.config.validate(problem.n(), problem.model.p())?;
    let form = problem.quadratic_ls();
    let qp = BlockQp {
        hessian: form.h.scaled(2.0),
        linear: &form.g * 2.0,
        rows: constraints.sparse_rows(problem, problem.n()),
    };
    let sol = qp.solve(&problem.prior_trajectory(), &ipm_settings(problem))?;
    let cost = problem.cost_ls(&sol.x);
    Ok(SolveReport {
        estimate: finish(problem, sol.x, cost, sol.iterations, sol.kkt_residual),
        status: status_of(sol.status),
        iterations: sol.iterations,
        residual: sol.kkt_residual,
        cost_history: vec![cost],
    })
}

fn status_of(s: QpStatus) -> SolveStatus {
    match s {
        QpStatus::Optimal => SolveStatus::Optimal,
        QpStatus::MaxIterations => SolveStatus::MaxIterations,
        QpStatus::Infeasible => SolveStatus::Infeasible,
    }
}

/// Piecewise-quadratic estimate. Without linear rows in `constraints` this
/// runs projected Newton on the state box (from `constraints`, else from the
/// configuration); otherwise the lifted interior-point QP.
pub fn solve_pwmhe(
    problem: &WindowProblem<'_>,
    constraints: Option<&ConstraintSet>,
    initial: Option<&DVector<f64>>,
) -> Result<SolveReport> {
    problem.config.validate(problem.n(), problem.model.p())?;
    if let Some(cs) = constraints.filter(|c| c.has_linear_rows()) {
        return solve_lifted_pw(problem, cs, initial);
    }
    let state_box = constraints
        .and_then(|c| c.state_box.as_ref())
        .or(problem.config.state_box.as_ref());
    projected_newton(problem, state_box, initial)
}

struct Bounds {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl Bounds {
    fn new(state_box: Option<&BoxSet>, instants: usize, n: usize) -> Self {
        let tile = |v: Option<&DVector<f64>>, fill: f64| {
            DVector::from_fn(instants * n, |r, _| v.map_or(fill, |v| v[r % n]))
        };
        Self {
            lower: tile(state_box.map(|b| &b.lower), f64::NEG_INFINITY),
            upper: tile(state_box.map(|b| &b.upper), f64::INFINITY),
        }
    }

    fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |r, _| x[r].clamp(self.lower[r], self.upper[r]))
    }
}

fn projected_newton(
    problem: &WindowProblem<'_>,
    state_box: Option<&BoxSet>,
    initial: Option<&DVector<f64>>,
) -> Result<SolveReport> {
    let settings = &problem.config.solver;
    let bounds = Bounds::new(state_box, problem.instants(), problem.n());
    let shared = problem.shared_form();
    let scale = 1.0 + 2.0 * shared.g.amax();
    let tol = settings.tolerance * scale;

    let start = initial.cloned().unwrap_or_else(|| problem.prior_trajectory());
    let mut x = bounds.project(&start);
    let mut f = problem.cost_pw(&x);
    let mut history = vec![f];
    let mut residual = f64::INFINITY;

    for iter in 0..settings.max_iterations {
        let g = problem.gradient_pw(&x);
        let pg = &x - bounds.project(&(&x - &g));
        residual = pg.amax();
        if residual <= tol {
            let cost = f;
            return Ok(SolveReport {
                estimate: finish(problem, x, cost, iter, residual),
                status: SolveStatus::Optimal,
                iterations: iter,
                residual,
                cost_history: history,
            });
        }

        let eps = residual.min(1e-4);
        let fixed: Vec<bool> = (0..x.len())
            .map(|j| (x[j] <= bounds.lower[j] + eps && g[j] > 0.0) || (x[j] >= bounds.upper[j] - eps && g[j] < 0.0))
            .collect();
        let mut h: BlockTridiagonal = problem.hessian_pw(&x).scaled(2.0);
        let diag: Vec<f64> = (0..x.len())
            .map(|j| h.diag(j / problem.n())[(j % problem.n(), j % problem.n())])
            .collect();
        h = h.with_fixed(&fixed);
        let mut rhs = -&g;
        for (j, &fx) in fixed.iter().enumerate() {
            if fx {
                rhs[j] = 0.0;
            }
        }
        let mut d = h.solve(&rhs)?;
        for (j, &fx) in fixed.iter().enumerate() {
            if fx {
                d[j] = -g[j] / diag[j].max(f64::MIN_POSITIVE);
            }
        }

        let free_slope: f64 = (0..x.len()).filter(|&j| !fixed[j]).map(|j| -g[j] * d[j]).sum();
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-14 {
            let trial = bounds.project(&(&x + &d * alpha));
            let ft = problem.cost_pw(&trial);
            let active_slope: f64 = (0..x.len()).filter(|&j| fixed[j]).map(|j| g[j] * (x[j] - trial[j])).sum();
            if f - ft >= settings.sufficient_decrease * (alpha * free_slope + active_slope) {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= settings.backtrack;
        }
        match accepted {
            Some((trial, ft)) => {
                x = trial;
                f = ft;
                history.push(f);
            }
            None => break,
        }
    }

    let g = problem.gradient_pw(&x);
    residual = residual.min((&x - bounds.project(&(&x - &g))).amax());
    let status = if residual <= tol {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIterations
    };
    let iterations = history.len() - 1;
    Ok(SolveReport {
        estimate: finish(problem, x, f, iterations, residual),
        status,
        iterations,
        residual,
        cost_history: history,
    })
}

/// Interior-point solve of the piecewise cost under `constraints`, lifted to
/// blocks `[x_k; e_k]`.
fn solve_lifted_pw(
    problem: &WindowProblem<'_>,
    constraints: &ConstraintSet,
    initial: Option<&DVector<f64>>,
) -> Result<SolveReport> {
    let n = problem.n();
    let p = problem.model.p();
    let block = n + p;
    let instants = problem.instants();
    let shared = problem.shared_form();

    let mut hessian = BlockTridiagonal::zeros(instants, block);
    let mut linear = DVector::zeros(instants * block);
    let weights = DMatrix::from_diagonal(&DVector::from_column_slice(&problem.config.output_weights));
    for k in 0..instants {
        let mut d = DMatrix::zeros(block, block);
        d.view_mut((0, 0), (n, n)).copy_from(&(shared.h.diag(k) * 2.0));
        d.view_mut((n, n), (p, p)).copy_from(&(&weights * 2.0));
        hessian.add_diag(k, &d);
        if k + 1 < instants {
            let mut l = DMatrix::zeros(block, block);
            l.view_mut((0, 0), (n, n)).copy_from(&(shared.h.lower(k) * 2.0));
            hessian.add_lower(k, &l);
        }
        linear.rows_mut(k * block, n).copy_from(&(shared.g.rows(k * n, n) * 2.0));
    }

    let mut rows = constraints.sparse_rows(problem, block);
    for k in 0..instants {
        for i in 0..p {
            let y = problem.window.reading(k, i).sign();
            let mut slack_only = DVector::zeros(block);
            slack_only[n + i] = -1.0;
            rows.push(SparseRow::single(k, slack_only.clone(), 0.0));
            let mut coupled = slack_only;
            coupled.rows_mut(0, n).copy_from(&(problem.model.output_row(i).transpose() * -y));
            rows.push(SparseRow::single(k, coupled, -y * problem.sensors.threshold(i)));
        }
    }

    let chi0 = initial.cloned().unwrap_or_else(|| problem.prior_trajectory());
    let mut x0 = DVector::zeros(instants * block);
    for k in 0..instants {
        let xk = chi0.rows(k * n, n);
        x0.rows_mut(k * block, n).copy_from(&xk);
        for i in 0..p {
            let y = problem.window.reading(k, i).sign();
            let z = problem.model.output_row(i).dot(&xk.transpose());
            x0[k * block + n + i] = (y * (problem.sensors.threshold(i) - z)).max(0.0);
        }
    }

    let qp = BlockQp { hessian, linear, rows };
    let sol = qp.solve(&x0, &ipm_settings(problem))?;
    let chi = DVector::from_fn(instants * n, |r, _| sol.x[(r / n) * block + r % n]);
    let cost = problem.cost_pw(&chi);
    Ok(SolveReport {
        estimate: finish(problem, chi, cost, sol.iterations, sol.kkt_residual),
        status: status_of(sol.status),
        iterations: sol.iterations,
        residual: sol.kkt_residual,
        cost_history: vec![cost],
    })
}
