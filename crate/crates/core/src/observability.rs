//! Observability of the linear output subsystem sampled at the switching
//! instants of a window.

use nalgebra::{DMatrix, RowDVector};

use crate::linsys::LtiModel;
use crate::sensing::MeasurementWindow;

/// Stacked switching-instant observability matrix of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservabilityReport {
    /// Rows `C^i A^(k - start)`, sensor by sensor, instants ascending.
    pub theta: DMatrix<f64>,
    pub rank: usize,
    /// Smallest singular value of `theta`; zero unless `rank == n`.
    pub delta_t: f64,
    /// `(sensor, absolute instant)` of each row of `theta`.
    pub rows: Vec<(usize, usize)>,
}

impl ObservabilityReport {
    pub fn is_full_rank(&self, n: usize) -> bool {
        check_uniform_observability(self, n)
    }
}

/// Cache of output rows `C^i A^j` for `j = 0..=horizon`.
#[derive(Debug, Clone)]
pub struct OutputPowers {
    n: usize,
    // rows[j] = C A^j, one row per sensor
    rows: Vec<DMatrix<f64>>,
}

impl OutputPowers {
    pub fn new(model: &LtiModel, horizon: usize) -> Self {
        let mut rows = Vec::with_capacity(horizon + 1);
        let mut current = model.c().clone();
        for _ in 0..=horizon {
            let next = &current * model.a();
            rows.push(current);
            current = next;
        }
        Self { n: model.n(), rows }
    }

    pub fn horizon(&self) -> usize {
        self.rows.len() - 1
    }

    /// `C^sensor A^power`.
    pub fn row(&self, sensor: usize, power: usize) -> RowDVector<f64> {
        self.rows[power].row(sensor).into_owned()
    }

    /// Observability report of `window`, whose horizon must not exceed the
    /// cached one.
    pub fn report(&self, window: &MeasurementWindow) -> ObservabilityReport {
        assert!(window.horizon() <= self.horizon(), "window longer than cached powers");
        let rows: Vec<(usize, usize)> = window
            .switching_sets()
            .iter()
            .enumerate()
            .flat_map(|(i, set)| set.iter().map(move |&k| (i, k)))
            .collect();
        let mut theta = DMatrix::zeros(rows.len(), self.n);
        for (r, &(i, k)) in rows.iter().enumerate() {
            theta.set_row(r, &self.rows[k - window.start()].row(i));
        }
        let (rank, delta_t) = rank_and_delta(&theta);
        ObservabilityReport {
            theta,
            rank,
            delta_t,
            rows,
        }
    }

    pub fn delta(&self, window: &MeasurementWindow) -> f64 {
        self.report(window).delta_t
    }
}

/// Numerical rank (singular values above `max(rows, cols) * eps * σ_max`)
/// and the smallest singular value when the rank is full column rank.
pub fn rank_and_delta(theta: &DMatrix<f64>) -> (usize, f64) {
    let n = theta.ncols();
    if theta.nrows() == 0 || n == 0 {
        return (0, 0.0);
    }
    let sv = theta.singular_values();
    let sigma_max = sv.max();
    if sigma_max == 0.0 {
        return (0, 0.0);
    }
    let tol = theta.nrows().max(n) as f64 * f64::EPSILON * sigma_max;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    let delta = if rank == n { sv.min() } else { 0.0 };
    (rank, delta)
}

/// Numerical rank of an arbitrary matrix.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    rank_and_delta(m).0
}

/// Observability report of the switching instants in `window`.
pub fn observability_matrix(model: &LtiModel, window: &MeasurementWindow) -> ObservabilityReport {
    OutputPowers::new(model, window.horizon()).report(window)
}

/// Smallest `delta_t` over the given windows; the empirical stand-in for the
/// infimum over all windows.
pub fn uniform_delta<'a, I>(model: &LtiModel, windows: I) -> f64
where
    I: IntoIterator<Item = &'a MeasurementWindow>,
{
    let mut powers: Option<OutputPowers> = None;
    let mut delta = f64::INFINITY;
    for w in windows {
        if powers.as_ref().is_none_or(|p| p.horizon() < w.horizon()) {
            powers = Some(OutputPowers::new(model, w.horizon()));
        }
        delta = delta.min(powers.as_ref().unwrap().delta(w));
    }
    assert!(delta.is_finite(), "uniform_delta needs at least one window");
    delta
}

/// Full-rank check on a report.
pub fn check_uniform_observability(report: &ObservabilityReport, n: usize) -> bool {
    report.rank == n
}

/// Largest eigenvalue angle `max |arg λ|` of `A`, in radians.
pub fn max_eigen_angle(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.im.atan2(l.re).abs())
        .fold(0.0, f64::max)
}

/// Sufficient switching-density condition for full rank:
/// `ν/N ≥ 2(n-1)/N + ω_max/π`.
pub fn switching_density_condition(model: &LtiModel, switchings: usize, horizon: usize) -> bool {
    assert!(horizon >= 1, "horizon must be at least 1");
    let n = model.n() as f64;
    let big_n = horizon as f64;
    let lhs = switchings as f64 / big_n;
    let rhs = 2.0 * (n - 1.0) / big_n + max_eigen_angle(model.a()) / std::f64::consts::PI;
    lhs >= rhs
}
