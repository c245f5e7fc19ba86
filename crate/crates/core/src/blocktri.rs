//! Symmetric block-tridiagonal matrices and their block Cholesky factor.
//!
//! Every Hessian arising from a window of `N + 1` stacked states has this
//! shape: the dynamics couple only consecutive instants.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric matrix with `blocks` diagonal blocks of size `n × n`.
/// `lower[k]` is the block at position `(k + 1, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiagonal {
    n: usize,
    diag: Vec<DMatrix<f64>>,
    lower: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    pub fn zeros(blocks: usize, n: usize) -> Self {
        assert!(blocks >= 1 && n >= 1);
        Self {
            n,
            diag: vec![DMatrix::zeros(n, n); blocks],
            lower: vec![DMatrix::zeros(n, n); blocks - 1],
        }
    }

    pub fn block_size(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn dim(&self) -> usize {
        self.n * self.diag.len()
    }

    pub fn diag(&self, k: usize) -> &DMatrix<f64> {
        &self.diag[k]
    }

    pub fn lower(&self, k: usize) -> &DMatrix<f64> {
        &self.lower[k]
    }

    pub fn add_diag(&mut self, k: usize, m: &DMatrix<f64>) {
        self.diag[k] += m;
    }

    /// Adds `m` at block `(k + 1, k)` and `m'` at `(k, k + 1)`.
    pub fn add_lower(&mut self, k: usize, m: &DMatrix<f64>) {
        self.lower[k] += m;
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &BlockTridiagonal, scale: f64) {
        for (d, o) in self.diag.iter_mut().zip(&other.diag) {
            *d += o * scale;
        }
        for (l, o) in self.lower.iter_mut().zip(&other.lower) {
            *l += o * scale;
        }
    }

    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            n: self.n,
            diag: self.diag.iter().map(|d| d * scale).collect(),
            lower: self.lower.iter().map(|l| l * scale).collect(),
        }
    }

    /// Dense copy.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for (k, d) in self.diag.iter().enumerate() {
            m.view_mut((k * n, k * n), (n, n)).copy_from(d);
        }
        for (k, l) in self.lower.iter().enumerate() {
            m.view_mut(((k + 1) * n, k * n), (n, n)).copy_from(l);
            m.view_mut((k * n, (k + 1) * n), (n, n)).copy_from(&l.transpose());
        }
        m
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut y = DVector::zeros(self.dim());
        for k in 0..self.blocks() {
            let mut yk = y.rows_mut(k * n, n);
            yk.gemv(1.0, &self.diag[k], &x.rows(k * n, n), 0.0);
            if k > 0 {
                yk.gemv(1.0, &self.lower[k - 1], &x.rows((k - 1) * n, n), 1.0);
            }
            if k + 1 < self.blocks() {
                yk.gemv_tr(1.0, &self.lower[k], &x.rows((k + 1) * n, n), 1.0);
            }
        }
        y
    }

    /// Replaces every row and column whose flag is set by the corresponding
    /// row and column of the identity.
    pub fn with_fixed(&self, fixed: &[bool]) -> Self {
        assert_eq!(fixed.len(), self.dim());
        let n = self.n;
        let mut out = self.clone();
        for k in 0..self.blocks() {
            for a in 0..n {
                if !fixed[k * n + a] {
                    continue;
                }
                for b in 0..n {
                    out.diag[k][(a, b)] = 0.0;
                    out.diag[k][(b, a)] = 0.0;
                }
                out.diag[k][(a, a)] = 1.0;
                if k > 0 {
                    for b in 0..n {
                        out.lower[k - 1][(a, b)] = 0.0;
                    }
                }
                if k + 1 < self.blocks() {
                    for b in 0..n {
                        out.lower[k][(b, a)] = 0.0;
                    }
                }
            }
        }
        out
    }

    pub fn cholesky(&self) -> Result<BlockCholesky> {
        let not_pd = || Error::NotPositiveDefinite { weight: "Hessian" };
        let mut factors: Vec<DMatrix<f64>> = Vec::with_capacity(self.blocks());
        // coupling[k] = L_k^{-1} lower[k]', so that block (k+1, k) of L is coupling[k]'
        let mut coupling: Vec<DMatrix<f64>> = Vec::with_capacity(self.blocks() - 1);
        for k in 0..self.blocks() {
            let mut d = self.diag[k].clone();
            if k > 0 {
                let mut wt = self.lower[k - 1].transpose();
                forward_substitute(&factors[k - 1], &mut wt).ok_or_else(not_pd)?;
                subtract_gram(&mut d, &wt);
                coupling.push(wt);
            }
            factor_in_place(&mut d).ok_or_else(not_pd)?;
            factors.push(d);
        }
        Ok(BlockCholesky {
            n: self.n,
            factors,
            coupling,
        })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.cholesky()?.solve(rhs))
    }
}

/// Dense Cholesky of a small SPD block, overwriting it with its lower factor.
fn factor_in_place(m: &mut DMatrix<f64>) -> Option<()> {
    let n = m.nrows();
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= m[(j, k)] * m[(j, k)];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        m[(j, j)] = d;
        for i in j + 1..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= m[(i, k)] * m[(j, k)];
            }
            m[(i, j)] = v / d;
        }
        for i in 0..j {
            m[(i, j)] = 0.0;
        }
    }
    Some(())
}

/// `b ← L⁻¹ b` for lower-triangular `l`.
fn forward_substitute(l: &DMatrix<f64>, b: &mut DMatrix<f64>) -> Option<()> {
    let n = l.nrows();
    let ls = l.as_slice();
    for col in b.column_iter_mut() {
        let mut col = col;
        let c = col.as_mut_slice();
        for i in 0..n {
            let mut v = c[i];
            for k in 0..i {
                v -= ls[k * n + i] * c[k];
            }
            let d = ls[i * n + i];
            if d == 0.0 {
                return None;
            }
            c[i] = v / d;
        }
    }
    Some(())
}

/// `d ← d − w' w`, lower triangle only.
fn subtract_gram(d: &mut DMatrix<f64>, w: &DMatrix<f64>) {
    let n = d.nrows();
    for j in 0..n {
        let wj = w.column(j);
        for i in j..n {
            d[(i, j)] -= w.column(i).dot(&wj);
        }
    }
}

/// Block Cholesky factor `L` with `L L' = H`.
#[derive(Debug, Clone)]
pub struct BlockCholesky {
    n: usize,
    factors: Vec<DMatrix<f64>>,
    coupling: Vec<DMatrix<f64>>,
}

impl BlockCholesky {
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let blocks = self.factors.len();
        let mut x = rhs.clone();
        for k in 0..blocks {
            let (head, mut tail) = x.rows_range_pair_mut(..k * n, k * n..(k + 1) * n);
            if k > 0 {
                tail.gemv_tr(-1.0, &self.coupling[k - 1], &head.rows((k - 1) * n, n), 1.0);
            }
            self.factors[k].solve_lower_triangular_mut(&mut tail);
        }
        for k in (0..blocks).rev() {
            let (mut cur, next) = x.rows_range_pair_mut(k * n..(k + 1) * n, (k + 1) * n..);
            if k + 1 < blocks {
                cur.gemv(-1.0, &self.coupling[k], &next.rows(0, n), 1.0);
            }
            self.factors[k].tr_solve_lower_triangular_mut(&mut cur);
        }
        x
    }
}
