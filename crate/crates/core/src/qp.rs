//! Primal-dual interior-point method for convex quadratic programs
//!
//! ```text
//! minimize ½ x'Mx + q'x   subject to   a_j'x ≤ b_j
//! ```
//!
//! where `M` is block tridiagonal and every constraint row touches at most
//! two consecutive blocks, so the reduced Newton matrix `M + G'DG` stays
//! block tridiagonal. Mehrotra predictor-corrector steps from an infeasible
//! start.

use nalgebra::DVector;

use crate::blocktri::BlockTridiagonal;
use crate::error::Result;

/// Inequality `Σ coeff_b' x_b ≤ rhs` over at most two consecutive blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub blocks: Vec<(usize, DVector<f64>)>,
    pub rhs: f64,
}

impl SparseRow {
    pub fn single(block: usize, coeff: DVector<f64>, rhs: f64) -> Self {
        Self {
            blocks: vec![(block, coeff)],
            rhs,
        }
    }

    pub fn dot(&self, x: &DVector<f64>) -> f64 {
        self.blocks
            .iter()
            .map(|(b, c)| c.dot(&x.rows(b * c.len(), c.len())))
            .sum()
    }

    fn axpy_into(&self, scale: f64, out: &mut DVector<f64>) {
        for (b, c) in &self.blocks {
            out.rows_mut(b * c.len(), c.len()).axpy(scale, c, 1.0);
        }
    }

    /// Adds `weight * a a'` into `m`.
    fn add_outer(&self, weight: f64, m: &mut BlockTridiagonal) {
        for (bi, ci) in &self.blocks {
            m.add_diag(*bi, &(ci * ci.transpose() * weight));
        }
        if let [(b0, c0), (b1, c1)] = self.blocks.as_slice() {
            match b1.checked_sub(*b0) {
                Some(1) => m.add_lower(*b0, &(c1 * c0.transpose() * weight)),
                _ => match b0.checked_sub(*b1) {
                    Some(1) => m.add_lower(*b1, &(c0 * c1.transpose() * weight)),
                    _ => panic!("constraint rows may only couple consecutive blocks"),
                },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockQp {
    pub hessian: BlockTridiagonal,
    pub linear: DVector<f64>,
    pub rows: Vec<SparseRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpmSettings {
    pub tolerance: f64,
    /// Primal residual target; kept below the strictness margin.
    pub primal_tolerance: f64,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub slacks: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    /// Max of the scaled dual residual, primal residual and mean complementarity.
    pub kkt_residual: f64,
    pub objective: f64,
}

impl BlockQp {
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&self.hessian.mul_vec(x)) + self.linear.dot(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.hessian.mul_vec(x) + &self.linear
    }

    fn g_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.dot(x)))
    }

    fn gt_mul(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.linear.len());
        for (r, &v) in self.rows.iter().zip(y.iter()) {
            if v != 0.0 {
                r.axpy_into(v, &mut out);
            }
        }
        out
    }

    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        self.rows
            .iter()
            .map(|r| r.dot(x) - r.rhs)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn solve(&self, x0: &DVector<f64>, settings: &IpmSettings) -> Result<QpSolution> {
        let m = self.rows.len();
        if m == 0 {
            let x = self.hessian.solve(&(-&self.linear))?;
            let residual = self.gradient(&x).amax() / (1.0 + self.linear.amax());
            return Ok(QpSolution {
                objective: self.objective(&x),
                x,
                multipliers: DVector::zeros(0),
                slacks: DVector::zeros(0),
                status: QpStatus::Optimal,
                iterations: 1,
                kkt_residual: residual,
            });
        }

        let b = DVector::from_iterator(m, self.rows.iter().map(|r| r.rhs));
        let dual_scale = 1.0 + self.linear.amax();
        let primal_scale = 1.0 + b.amax();

        let mut x = x0.clone();
        let mut s = (&b - self.g_mul(&x)).map(|v| v.max(1.0));
        let mut lambda = DVector::from_element(m, 1.0);

        let mut best: Option<(f64, QpSolution)> = None;
        for iter in 1..=settings.max_iterations {
            let r_d = self.gradient(&x) + self.gt_mul(&lambda);
            let r_p = self.g_mul(&x) + &s - &b;
            let mu = s.dot(&lambda) / m as f64;
            let dual_res = r_d.amax() / dual_scale;
            let primal_res = r_p.amax() / primal_scale;
            let kkt = dual_res.max(primal_res).max(mu);

            if dual_res <= settings.tolerance && primal_res <= settings.primal_tolerance && mu <= settings.tolerance {
                return Ok(QpSolution {
                    objective: self.objective(&x),
                    x,
                    multipliers: lambda,
                    slacks: s,
                    status: QpStatus::Optimal,
                    iterations: iter,
                    kkt_residual: kkt,
                });
            }
            if primal_res > settings.primal_tolerance && lambda.amax() > 1e12 {
                return Ok(self.infeasible(x, lambda, s, iter, kkt));
            }
            if best.as_ref().is_none_or(|(k, _)| kkt < *k) {
                best = Some((
                    kkt,
                    QpSolution {
                        objective: self.objective(&x),
                        x: x.clone(),
                        multipliers: lambda.clone(),
                        slacks: s.clone(),
                        status: QpStatus::MaxIterations,
                        iterations: iter,
                        kkt_residual: kkt,
                    },
                ));
            }

            // Reduced matrix M + G' diag(λ/s) G.
            let d = lambda.component_div(&s);
            let mut reduced = self.hessian.clone();
            for (row, &w) in self.rows.iter().zip(d.iter()) {
                row.add_outer(w, &mut reduced);
            }
            let factor = reduced.cholesky()?;

            let direction = |r_c: &DVector<f64>| {
                // (M + G'DG) dx = -r_d + G' S^{-1} (r_c - Λ r_p)
                let t = (r_c - lambda.component_mul(&r_p)).component_div(&s);
                let rhs = -&r_d + self.gt_mul(&t);
                let dx = factor.solve(&rhs);
                let g_dx = self.g_mul(&dx);
                let ds = -&r_p - &g_dx;
                let dl = (lambda.component_mul(&(&r_p + &g_dx)) - r_c).component_div(&s);
                (dx, ds, dl)
            };

            // Predictor.
            let rc_aff = s.component_mul(&lambda);
            let (_, ds_a, dl_a) = direction(&rc_aff);
            let a_p = max_step(&s, &ds_a);
            let a_d = max_step(&lambda, &dl_a);
            let alpha_aff = a_p.min(a_d);
            let mu_aff = (&s + &ds_a * alpha_aff).dot(&(&lambda + &dl_a * alpha_aff)) / m as f64;
            let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

            // Corrector.
            let rc = &rc_aff + ds_a.component_mul(&dl_a) - DVector::from_element(m, sigma * mu);
            let (dx, ds, dl) = direction(&rc);
            let alpha = (0.99 * max_step(&s, &ds).min(max_step(&lambda, &dl))).min(1.0);

            x += &dx * alpha;
            s += &ds * alpha;
            lambda += &dl * alpha;
            s.apply(|v| *v = v.max(1e-300));
            lambda.apply(|v| *v = v.max(1e-300));
        }

        let (kkt, mut sol) = best.expect("at least one iteration");
        let primal_res = {
            let r_p = self.g_mul(&sol.x) + &sol.slacks - &b;
            r_p.amax() / primal_scale
        };
        if primal_res > settings.primal_tolerance.max(settings.tolerance) {
            sol.status = QpStatus::Infeasible;
        }
        sol.kkt_residual = kkt;
        sol.iterations = settings.max_iterations;
        Ok(sol)
    }

    fn infeasible(&self, x: DVector<f64>, lambda: DVector<f64>, s: DVector<f64>, iter: usize, kkt: f64) -> QpSolution {
        QpSolution {
            objective: self.objective(&x),
            x,
            multipliers: lambda,
            slacks: s,
            status: QpStatus::Infeasible,
            iterations: iter,
            kkt_residual: kkt,
        }
    }
}

/// Largest `α ∈ (0, 1]` keeping `v + α dv ≥ 0`.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&vi, &d)| -vi / d)
        .fold(1.0, f64::min)
}
