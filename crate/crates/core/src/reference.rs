//! Dense `N x N` implementation of the estimators.
//!
//! This follows the closed forms literally: the shaped extended Gram, the
//! four-part `F~`, `M` through explicit solves, and the projected value
//! system. It is quadratic in memory and cubic in time, so it only serves
//! small problems and cross-checks of the factored path.

use faer::Mat;

use crate::data::TupleTable;
use crate::error::{OplError, Result};
use crate::kernel::{next_prob_grads, next_probs, GramPack, KernelConfig};
use crate::linalg::{self, dot, matmul, matvec, LuSolver, SpdSolver};
use crate::nuisance::{TuningPair, Tunings};
use crate::policy::PolicyParams;

pub struct DenseModel {
    pub pack: GramPack,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseValue {
    pub eta: f64,
    pub alpha: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseRatio {
    pub phi: Vec<f64>,
    pub nu: Vec<f64>,
    pub e: Vec<f64>,
    pub omega: Vec<f64>,
}

impl DenseModel {
    pub fn new(cfg: &KernelConfig, tuples: &TupleTable) -> Self {
        Self { pack: GramPack::build(cfg, tuples), rewards: tuples.rewards().to_vec() }
    }

    pub fn n(&self) -> usize {
        self.pack.n()
    }

    /// `M = (L + mu I)^{-1} L^2 (L + mu I)^{-1}` at matrix-scale `mu`.
    pub fn m_matrix(&self, mu: f64) -> Result<Mat<f64>> {
        let l = &self.pack.l;
        let solver = SpdSolver::new(&linalg::add_diag(l, mu))?;
        let a = solver.solve_mat(l.as_ref());
        Ok(matmul(a.as_ref(), a.transpose()))
    }

    /// Projected first-order system for `alpha`, then `eta`.
    pub fn value(&self, f: &Mat<f64>, tuning: TuningPair) -> Result<DenseValue> {
        let n = self.n();
        let nf = n as f64;
        let m = self.m_matrix(tuning.mu * nf)?;
        let ones = vec![1.0; n];
        let m1 = matvec(m.as_ref(), &ones);
        let c = dot(&ones, &m1);
        let mf = matmul(m.as_ref(), f.as_ref());
        let one_mf: Vec<f64> = (0..n).map(|j| (0..n).map(|i| mf[(i, j)]).sum()).collect();
        let a = Mat::from_fn(n, n, |i, j| {
            mf[(i, j)] + if i == j { tuning.lambda * nf } else { 0.0 } - m1[i] * one_mf[j] / c
        });
        let mr = matvec(m.as_ref(), &self.rewards);
        let one_mr: f64 = mr.iter().sum();
        let rhs: Vec<f64> = (0..n).map(|i| mr[i] - m1[i] * one_mr / c).collect();
        let alpha = LuSolver::new(&a)?.solve_vec(&rhs);
        let fa = matvec(f.as_ref(), &alpha);
        let eta = dot(&m1, &linalg::sub(&self.rewards, &fa)) / c;
        Ok(DenseValue { eta, alpha, u: linalg::scale(&fa, -1.0) })
    }

    pub fn ratio(&self, f: &Mat<f64>, tuning: TuningPair) -> Result<DenseRatio> {
        let n = self.n();
        let nf = n as f64;
        let m = self.m_matrix(tuning.mu * nf)?;
        let ones = vec![1.0; n];
        let b = linalg::add_diag(&matmul(m.as_ref(), f.as_ref()), tuning.lambda * nf);
        let phi = LuSolver::new(&b)?.solve_vec(&matvec(m.as_ref(), &ones));
        let rhs = linalg::sub(&ones, &matvec(f.as_ref(), &phi));
        let nu = SpdSolver::new(&linalg::add_diag(&self.pack.l, tuning.mu * nf))?.solve_vec(&rhs);
        let e = matvec(self.pack.l.as_ref(), &nu);
        let mean = linalg::mean(&e);
        let max_abs = linalg::norm_inf(&e);
        if mean.abs() <= 1e-8 * (max_abs + 1e-12) {
            return Err(OplError::DegenerateRatio { mean, max_abs });
        }
        let omega = e.iter().map(|x| x / mean).collect();
        Ok(DenseRatio { phi, nu, e, omega })
    }

    /// `nu^T L (R - F~ alpha) / nu^T L 1`.
    pub fn objective(&self, policy: &PolicyParams, tuples: &TupleTable, tunings: Tunings) -> Result<f64> {
        let f = self.pack.feature_gram_from(&next_probs(policy, tuples));
        let v = self.value(&f, tunings.value)?;
        let r = self.ratio(&f, tunings.ratio)?;
        let c: Vec<f64> = self.rewards.iter().zip(&v.u).map(|(a, b)| a + b).collect();
        Ok(dot(&r.e, &c) / r.e.iter().sum::<f64>())
    }

    /// Gradient by differentiating the dense first-order systems.
    pub fn gradient(&self, policy: &PolicyParams, tuples: &TupleTable, tunings: Tunings) -> Result<Vec<f64>> {
        let n = self.n();
        let nf = n as f64;
        let p1 = next_probs(policy, tuples);
        let f = self.pack.feature_gram_from(&p1);
        let df = self.pack.feature_gram_grad_from(&p1, &next_prob_grads(policy, tuples));
        let v = self.value(&f, tunings.value)?;
        let r = self.ratio(&f, tunings.ratio)?;
        let ones = vec![1.0; n];
        let c: Vec<f64> = self.rewards.iter().zip(&v.u).map(|(a, b)| a + b).collect();
        let sum_e: f64 = r.e.iter().sum();
        let j = dot(&r.e, &c) / sum_e;

        let mv = self.m_matrix(tunings.value.mu * nf)?;
        let bv = LuSolver::new(&linalg::add_diag(&matmul(mv.as_ref(), f.as_ref()), tunings.value.lambda * nf))?;
        let x1 = bv.solve_vec(&matvec(mv.as_ref(), &ones));
        let mr = self.m_matrix(tunings.ratio.mu * nf)?;
        let br = LuSolver::new(&linalg::add_diag(&matmul(mr.as_ref(), f.as_ref()), tunings.ratio.lambda * nf))?;
        let lmu = SpdSolver::new(&linalg::add_diag(&self.pack.l, tunings.ratio.mu * nf))?;

        Ok(df
            .iter()
            .map(|fk| {
                let fa = matvec(fk.as_ref(), &v.alpha);
                let y = bv.solve_vec(&matvec(mv.as_ref(), &fa));
                let d_eta = -y.iter().sum::<f64>() / x1.iter().sum::<f64>();
                let d_alpha: Vec<f64> = y.iter().zip(&x1).map(|(a, b)| -a - d_eta * b).collect();
                let d_u = linalg::scale(&linalg::axpy(&fa, 1.0, &matvec(f.as_ref(), &d_alpha)), -1.0);
                let fphi = matvec(fk.as_ref(), &r.phi);
                let d_phi = linalg::scale(&br.solve_vec(&matvec(mr.as_ref(), &fphi)), -1.0);
                let d_nu = linalg::scale(&lmu.solve_vec(&linalg::axpy(&fphi, 1.0, &matvec(f.as_ref(), &d_phi))), -1.0);
                let d_e = matvec(self.pack.l.as_ref(), &d_nu);
                let centred: Vec<f64> = c.iter().map(|x| x - j).collect();
                (dot(&d_e, &centred) + dot(&r.e, &d_u)) / sum_e
            })
            .collect())
    }
}
