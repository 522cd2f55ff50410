//! Factored kernel features.
//!
//! A pivoted Cholesky factorisation of the state kernel over all observed
//! states gives `k_0(s_i, s_j) = phi_i^T phi_j` up to a per-entry error of at
//! most `tol`. Lifting with the action indicator gives features
//! `psi(s, a) = e_a (x) phi(s)` of dimension `D = 2m`, and every Gram matrix
//! the estimators need becomes a product of `N x D` blocks.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::data::TupleTable;
use crate::error::{OplError, Result};
use crate::kernel::{pooled_states, KernelConfig};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    /// Stop once every residual diagonal entry is at most this.
    pub tol: f64,
    pub max_rank: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self { tol: 1e-6, max_rank: 4096 }
    }
}

/// Low-rank factor `K ~ F F^T` with the pivots that generated it.
#[derive(Debug, Clone)]
pub struct PivotedCholesky {
    pub pivots: Vec<usize>,
    /// `P x m`
    pub factor: Mat<f64>,
    /// Largest residual diagonal at termination.
    pub residual: f64,
}

/// Pivoted Cholesky of an implicit PSD matrix of size `p`, evaluated one
/// column at a time.
pub fn pivoted_cholesky<F>(p: usize, diag: &[f64], column: F, cfg: BasisConfig) -> PivotedCholesky
where
    F: Fn(usize) -> Vec<f64>,
{
    assert_eq!(diag.len(), p);
    let mut d = diag.to_vec();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut pivots = Vec::new();
    loop {
        let (piv, &dmax) = d
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty matrix");
        if dmax <= cfg.tol || cols.len() >= cfg.max_rank.min(p) {
            let factor = Mat::from_fn(p, cols.len(), |i, j| cols[j][i]);
            return PivotedCholesky { pivots, factor, residual: dmax.max(0.0) };
        }
        let mut c = column(piv);
        for prev in &cols {
            let w = prev[piv];
            if w != 0.0 {
                for (ci, pi) in c.iter_mut().zip(prev) {
                    *ci -= w * pi;
                }
            }
        }
        let scale = 1.0 / dmax.sqrt();
        for ci in c.iter_mut() {
            *ci *= scale;
        }
        for (di, ci) in d.iter_mut().zip(&c) {
            *di -= ci * ci;
        }
        // Pivoted entries are exactly resolved.
        d[piv] = 0.0;
        for &q in &pivots {
            d[q] = 0.0;
        }
        pivots.push(piv);
        cols.push(c);
    }
}

/// Per-tuple state features, `phi(S_h)` and `phi(S'_h)`, plus the data needed
/// to evaluate a policy on next states.
#[derive(Debug, Clone)]
pub struct TupleFeatures {
    pub phi_s: Mat<f64>,
    pub phi_next: Mat<f64>,
    pub actions: Vec<u8>,
    pub rewards: Vec<f64>,
    /// Row-major `N x d`.
    pub next_states: Vec<f64>,
    pub state_dim: usize,
    pub horizon: usize,
}

impl TupleFeatures {
    /// Factors the state kernel over every observed state of the table.
    pub fn build(cfg: &KernelConfig, tuples: &TupleTable, basis: BasisConfig) -> Result<Self> {
        let pooled = pooled_states(tuples);
        let p = pooled.len();
        let diag: Vec<f64> = pooled.iter().map(|s| cfg.k0(s, s)).collect();
        let chol = pivoted_cholesky(p, &diag, |j| par::map_indexed(p, |i| cfg.k0(&pooled[i], &pooled[j])), basis);
        if chol.pivots.is_empty() {
            return Err(OplError::DegenerateData("state kernel is identically zero".into()));
        }
        let m = chol.factor.ncols();
        let t = tuples.horizon();
        let n = tuples.len();
        let row = |h: usize, next: bool| (h / t) * (t + 1) + h % t + usize::from(next);
        let phi_s = Mat::from_fn(n, m, |h, q| chol.factor[(row(h, false), q)]);
        let phi_next = Mat::from_fn(n, m, |h, q| chol.factor[(row(h, true), q)]);
        let d = tuples.state_dim();
        let mut next_states = Vec::with_capacity(n * d);
        for h in 0..n {
            next_states.extend_from_slice(tuples.next_state(h));
        }
        Ok(Self {
            phi_s,
            phi_next,
            actions: tuples.actions().to_vec(),
            rewards: tuples.rewards().to_vec(),
            next_states,
            state_dim: d,
            horizon: t,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.phi_s.ncols()
    }

    pub fn next_state(&self, h: usize) -> &[f64] {
        &self.next_states[h * self.state_dim..(h + 1) * self.state_dim]
    }

    pub fn n_trajectories(&self) -> usize {
        self.len() / self.horizon
    }

    /// Rows belonging to the given trajectories, in the order given.
    pub fn select_trajectories(&self, trajectories: &[usize]) -> Self {
        let t = self.horizon;
        let rows: Vec<usize> = trajectories.iter().flat_map(|&i| i * t..(i + 1) * t).collect();
        let m = self.rank();
        let d = self.state_dim;
        let mut next_states = Vec::with_capacity(rows.len() * d);
        for &h in &rows {
            next_states.extend_from_slice(self.next_state(h));
        }
        Self {
            phi_s: Mat::from_fn(rows.len(), m, |i, q| self.phi_s[(rows[i], q)]),
            phi_next: Mat::from_fn(rows.len(), m, |i, q| self.phi_next[(rows[i], q)]),
            actions: rows.iter().map(|&h| self.actions[h]).collect(),
            rewards: rows.iter().map(|&h| self.rewards[h]).collect(),
            next_states,
            state_dim: d,
            horizon: t,
        }
    }

    /// The lifted design `X` (`N x 2m`): row `h` holds `phi(S_h)` in block `A_h`.
    pub fn lifted(&self) -> Mat<f64> {
        let m = self.rank();
        Mat::from_fn(self.len(), 2 * m, |h, c| {
            let block = c / m;
            if block == usize::from(self.actions[h]) {
                self.phi_s[(h, c % m)]
            } else {
                0.0
            }
        })
    }
}
