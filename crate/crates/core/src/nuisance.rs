//! The coupled kernel estimators of the relative value function and the
//! stationary ratio, in closed form.
//!
//! With `M = (L + mu I)^{-1} L^2 (L + mu I)^{-1}` and `B = M F~ + lambda I`,
//! the value fit solves `B alpha = M (R - eta 1)` together with `1^T alpha = 0`
//! (which is the stationarity condition in `eta`), and the ratio fit solves
//! `B' phi = M' 1`, `(L + mu' I) nu = 1 - F~ phi`, `e = L nu`.
//!
//! Everything is computed on the factored features of [`crate::basis`]:
//! `L = X X^T` and `F~ = Psi Psi^T` with `Psi = X - P(pi)`, so that
//! `M = X S X^T` for `S = (G + mu)^{-1} G (G + mu)^{-1}`, `G = X^T X`, and
//! `B^{-1} M v = X z` where `(lambda I + S E E^T) z = S X^T v`, `E = X^T Psi`.

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisConfig, TupleFeatures};
use crate::data::TupleTable;
use crate::error::{OplError, Result};
use crate::kernel::{kernel_sa, shaped_kernel, KernelConfig, Sa};
use crate::linalg::{self, dot, matmul, scaled_gram, sym_eigen, LuSolver};
use crate::policy::PolicyParams;

/// Per-sample penalties `(lambda_n, mu_n)`; the solved systems use
/// `lambda_n * N` and `mu_n * N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningPair {
    pub lambda: f64,
    pub mu: f64,
}

impl TuningPair {
    pub fn new(lambda: f64, mu: f64) -> Result<Self> {
        let pair = Self { lambda, mu };
        pair.check()?;
        Ok(pair)
    }

    pub fn check(&self) -> Result<()> {
        if self.lambda > 0.0 && self.mu > 0.0 && self.lambda.is_finite() && self.mu.is_finite() {
            Ok(())
        } else {
            Err(OplError::Value(format!("tuning parameters must be positive, got {self:?}")))
        }
    }
}

/// Tunings for the value and the ratio fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tunings {
    pub value: TuningPair,
    pub ratio: TuningPair,
}

impl Tunings {
    pub fn both(pair: TuningPair) -> Self {
        Self { value: pair, ratio: pair }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFit {
    pub eta_tilde: f64,
    pub alpha: Vec<f64>,
    pub u_at_data: Vec<f64>,
    pub tuning: TuningPair,
    pub kernel: KernelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioFit {
    pub phi: Vec<f64>,
    pub nu: Vec<f64>,
    pub e_at_data: Vec<f64>,
    pub omega_at_data: Vec<f64>,
    pub tuning: TuningPair,
    pub kernel: KernelConfig,
}

/// Penalty-dependent pieces: `S` and `(G + mu)^{-1}` at one matrix-scale `mu`.
#[derive(Debug, Clone)]
pub struct Penalty {
    mu: f64,
    s: Mat<f64>,
    g_mu_inv: Mat<f64>,
}

impl Penalty {
    pub fn mu(&self) -> f64 {
        self.mu
    }
}

/// Policy-dependent pieces for one `pi`.
#[derive(Debug, Clone)]
pub struct PolicyTerms {
    p1: Vec<f64>,
    e: Mat<f64>,
    h: Mat<f64>,
}

impl PolicyTerms {
    pub fn p1(&self) -> &[f64] {
        &self.p1
    }
}

/// Derivative columns of `F~ v`, kept factored.
struct DfParts {
    base: Vec<f64>,
    w: Mat<f64>,
    /// `X^T (dF~ v)`
    xt: Mat<f64>,
}

impl DfParts {
    /// `y^T (dF~_k v)` given `psi_y = Psi^T y`.
    fn weighted_dot(&self, dp: MatRef<'_, f64>, k: usize, y: &[f64], psi_y: &[f64]) -> f64 {
        let direct: f64 = (0..y.len()).map(|h| y[h] * dp[(h, k)] * self.base[h]).sum();
        direct + dot(psi_y, self.w.col_as_slice(k))
    }
}

/// Solver for `v -> B^{-1} M v`.
pub struct BSolver {
    lu: LuSolver,
    s: Mat<f64>,
}

#[derive(Debug, Clone)]
struct ActionBlock {
    rows: Vec<usize>,
    phi: Mat<f64>,
    phi_next: Mat<f64>,
    cross: Mat<f64>,
}

impl ActionBlock {
    fn new(feats: &TupleFeatures, action: u8) -> Self {
        let m = feats.rank();
        let rows: Vec<usize> = (0..feats.len()).filter(|&h| feats.actions[h] == action).collect();
        let phi = Mat::from_fn(rows.len(), m, |i, q| feats.phi_s[(rows[i], q)]);
        let phi_next = Mat::from_fn(rows.len(), m, |i, q| feats.phi_next[(rows[i], q)]);
        let cross = linalg::matmul_tn(phi.as_ref(), phi_next.as_ref());
        Self { rows, phi, phi_next, cross }
    }
}

/// Policy-independent state for one set of tuples.
#[derive(Debug, Clone)]
pub struct FitContext {
    feats: TupleFeatures,
    x: Mat<f64>,
    /// Per action: row indices, `phi(S_h)` and `phi(S'_h)` on those rows, and
    /// `sum_h phi(S_h) phi(S'_h)^T` over them.
    blocks: [ActionBlock; 2],
    x_sum: Vec<f64>,
    xt_rewards: Vec<f64>,
    g: Mat<f64>,
    g_vals: Vec<f64>,
    g_vecs: Mat<f64>,
}

impl FitContext {
    pub fn new(feats: TupleFeatures) -> Result<Self> {
        if feats.len() < 2 {
            return Err(OplError::DegenerateData("need at least two tuples".into()));
        }
        if !linalg::all_finite(&feats.rewards) || !linalg::all_finite(&feats.next_states) {
            return Err(OplError::Value("non-finite entries in the tuple table".into()));
        }
        let x = feats.lifted();
        let g = linalg::matmul_tn(x.as_ref(), x.as_ref());
        let (mut g_vals, g_vecs) = sym_eigen(&g)?;
        for v in &mut g_vals {
            *v = v.max(0.0);
        }
        let blocks = [ActionBlock::new(&feats, 0), ActionBlock::new(&feats, 1)];
        let x_sum = linalg::matvec_t(x.as_ref(), &vec![1.0; feats.len()]);
        let xt_rewards = linalg::matvec_t(x.as_ref(), &feats.rewards);
        Ok(Self { feats, x, blocks, x_sum, xt_rewards, g, g_vals, g_vecs })
    }

    pub fn from_tuples(cfg: &KernelConfig, tuples: &TupleTable, basis: BasisConfig) -> Result<Self> {
        Self::new(TupleFeatures::build(cfg, tuples, basis)?)
    }

    pub fn features(&self) -> &TupleFeatures {
        &self.feats
    }

    pub fn n(&self) -> usize {
        self.feats.len()
    }

    fn m(&self) -> usize {
        self.feats.rank()
    }

    /// `X^T v`
    fn xt(&self, v: &[f64]) -> Vec<f64> {
        linalg::matvec_t(self.x.as_ref(), v)
    }

    /// `X u`
    fn xu(&self, u: &[f64]) -> Vec<f64> {
        linalg::matvec(self.x.as_ref(), u)
    }

    pub fn l_apply(&self, v: &[f64]) -> Vec<f64> {
        self.xu(&self.xt(v))
    }

    /// Builds the penalty pieces for a per-sample `mu_n`.
    pub fn penalty(&self, mu_n: f64) -> Penalty {
        let mu = mu_n * self.n() as f64;
        let s_diag: Vec<f64> = self.g_vals.iter().map(|&g| g / ((g + mu) * (g + mu))).collect();
        let inv_diag: Vec<f64> = self.g_vals.iter().map(|&g| 1.0 / (g + mu)).collect();
        Penalty { mu, s: scaled_gram(&self.g_vecs, &s_diag), g_mu_inv: scaled_gram(&self.g_vecs, &inv_diag) }
    }

    /// `(L + mu I)^{-1} v`
    pub fn l_mu_solve(&self, pen: &Penalty, v: &[f64]) -> Vec<f64> {
        let inner = linalg::matvec(pen.g_mu_inv.as_ref(), &self.xt(v));
        let proj = self.xu(&inner);
        v.iter().zip(&proj).map(|(a, b)| (a - b) / pen.mu).collect()
    }

    /// `M v`
    pub fn m_apply(&self, pen: &Penalty, v: &[f64]) -> Vec<f64> {
        self.xu(&linalg::matvec(pen.s.as_ref(), &self.xt(v)))
    }

    /// `pi(1 | S'_h)` and its `theta`-gradient columns.
    pub fn policy_probs(&self, policy: &PolicyParams) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = self.n();
        let p1: Vec<f64> = (0..n).map(|h| policy.prob_one(self.feats.next_state(h))).collect();
        let mut cols = vec![vec![0.0; n]; policy.dim()];
        for h in 0..n {
            for (k, g) in policy.grad_prob_one(self.feats.next_state(h)).into_iter().enumerate() {
                cols[k][h] = g;
            }
        }
        (p1, cols)
    }

    pub fn terms(&self, p1: Vec<f64>) -> PolicyTerms {
        assert_eq!(p1.len(), self.n());
        let m = self.m();
        let n = self.n();
        // E = X^T X - X^T P, with P_h = [pi_0 phi(S'_h), pi_1 phi(S'_h)]; the
        // rows of action a give [C_a - D_a, D_a] with D_a the p1-weighted cross.
        let _ = n;
        let mut e = self.g.clone();
        for (a, block) in self.blocks.iter().enumerate() {
            if block.rows.is_empty() {
                continue;
            }
            let weighted = Mat::from_fn(block.rows.len(), m, |i, q| p1[block.rows[i]] * block.phi_next[(i, q)]);
            let d = linalg::matmul_tn(block.phi.as_ref(), weighted.as_ref());
            let off = a * m;
            for c in 0..m {
                for i in 0..m {
                    e[(off + i, c)] -= block.cross[(i, c)] - d[(i, c)];
                    e[(off + i, m + c)] -= d[(i, c)];
                }
            }
        }
        let h = matmul(e.as_ref(), e.transpose());
        PolicyTerms { p1, e, h }
    }

    /// Terms without `E` and `H`, enough for [`FitContext::sections_inner`].
    pub fn light_terms(&self, p1: Vec<f64>) -> PolicyTerms {
        assert_eq!(p1.len(), self.n());
        PolicyTerms { p1, e: Mat::zeros(0, 0), h: Mat::zeros(0, 0) }
    }

    /// `Psi^T V`
    fn psi_t_mat(&self, terms: &PolicyTerms, v: MatRef<'_, f64>) -> Mat<f64> {
        let m = self.m();
        let k = v.ncols();
        let mut out = linalg::matmul_tn(self.x.as_ref(), v);
        let p1 = &terms.p1;
        let w = Mat::from_fn(v.nrows(), 2 * k, |h, c| {
            let x = v[(h, c % k)];
            if c < k { x * (1.0 - p1[h]) } else { x * p1[h] }
        });
        let a = linalg::matmul_tn(self.feats.phi_next.as_ref(), w.as_ref());
        for j in 0..k {
            for q in 0..m {
                out[(q, j)] -= a[(q, j)];
                out[(m + q, j)] -= a[(q, k + j)];
            }
        }
        out
    }

    /// `Psi U`
    fn psi_u_mat(&self, terms: &PolicyTerms, u: MatRef<'_, f64>) -> Mat<f64> {
        let m = self.m();
        let k = u.ncols();
        let mut out = matmul(self.x.as_ref(), u);
        let stacked = Mat::from_fn(m, 2 * k, |q, c| if c < k { u[(q, c)] } else { u[(m + q, c - k)] });
        let b = matmul(self.feats.phi_next.as_ref(), stacked.as_ref());
        for j in 0..k {
            for h in 0..out.nrows() {
                let p = terms.p1[h];
                out[(h, j)] -= (1.0 - p) * b[(h, j)] + p * b[(h, k + j)];
            }
        }
        out
    }

    fn psi_t(&self, terms: &PolicyTerms, v: &[f64]) -> Vec<f64> {
        self.psi_t_mat(terms, linalg::col(v)).col_as_slice(0).to_vec()
    }

    fn psi_u(&self, terms: &PolicyTerms, u: &[f64]) -> Vec<f64> {
        self.psi_u_mat(terms, linalg::col(u)).col_as_slice(0).to_vec()
    }

    /// `F~ v`
    pub fn f_apply(&self, terms: &PolicyTerms, v: &[f64]) -> Vec<f64> {
        self.psi_u(terms, &self.psi_t(terms, v))
    }

    /// `(dF~/dtheta_k) v` for the derivative column `dp = d pi(1|S') / d theta_k`.
    ///
    /// Only the next-state weights move: `dPsi_h = dp_h [phi(S'_h), -phi(S'_h)]`.
    pub fn df_apply(&self, terms: &PolicyTerms, dp: &[f64], v: &[f64]) -> Vec<f64> {
        self.df_apply_mat(terms, linalg::col(dp), v).col_as_slice(0).to_vec()
    }

    /// [`FitContext::df_apply`] for every derivative column of `dp` at once.
    fn df_apply_mat(&self, terms: &PolicyTerms, dp: MatRef<'_, f64>, v: &[f64]) -> Mat<f64> {
        let m = self.m();
        let k = dp.ncols();
        let u = self.psi_t(terms, v);
        let diff: Vec<f64> = (0..m).map(|q| u[q] - u[m + q]).collect();
        let base = linalg::matvec(self.feats.phi_next.as_ref(), &diff);
        let weighted = Mat::from_fn(dp.nrows(), k, |h, j| v[h] * dp[(h, j)]);
        let c = linalg::matmul_tn(self.feats.phi_next.as_ref(), weighted.as_ref());
        let w = Mat::from_fn(2 * m, k, |q, j| if q < m { c[(q, j)] } else { -c[(q - m, j)] });
        let mut out = self.psi_u_mat(terms, w.as_ref());
        for j in 0..k {
            for h in 0..out.nrows() {
                out[(h, j)] += base[h] * dp[(h, j)];
            }
        }
        out
    }

    /// `(dF~/dtheta) v = dp * base + Psi W` in factored form, with `X^T` of it.
    fn df_parts(&self, terms: &PolicyTerms, dp: MatRef<'_, f64>, v: &[f64], z_v: &[f64]) -> DfParts {
        let m = self.m();
        let k = dp.ncols();
        let u = self.et(terms, z_v);
        let diff: Vec<f64> = (0..m).map(|q| u[q] - u[m + q]).collect();
        let base = linalg::matvec(self.feats.phi_next.as_ref(), &diff);
        let weighted = Mat::from_fn(dp.nrows(), k, |h, j| v[h] * dp[(h, j)]);
        let c = linalg::matmul_tn(self.feats.phi_next.as_ref(), weighted.as_ref());
        let w = Mat::from_fn(2 * m, k, |q, j| if q < m { c[(q, j)] } else { -c[(q - m, j)] });
        let scaled = Mat::from_fn(dp.nrows(), k, |h, j| base[h] * dp[(h, j)]);
        let mut xt = linalg::matmul_tn(self.x.as_ref(), scaled.as_ref());
        let ew = matmul(terms.e.as_ref(), w.as_ref());
        for j in 0..k {
            for q in 0..2 * m {
                xt[(q, j)] += ew[(q, j)];
            }
        }
        DfParts { base, w, xt }
    }

    pub fn b_solver(&self, terms: &PolicyTerms, pen: &Penalty, lambda_n: f64) -> Result<BSolver> {
        let lambda = lambda_n * self.n() as f64;
        let sh = matmul(pen.s.as_ref(), terms.h.as_ref());
        let a = linalg::add_diag(&sh, lambda);
        Ok(BSolver { lu: LuSolver::new(&a)?, s: pen.s.clone() })
    }

    /// `B^{-1} M v`
    pub fn b_apply(&self, solver: &BSolver, v: &[f64]) -> Vec<f64> {
        let rhs = linalg::matvec(solver.s.as_ref(), &self.xt(v));
        self.xu(&solver.lu.solve_vec(&rhs))
    }

    /// `Psi^T X z = E^T z`
    fn et(&self, terms: &PolicyTerms, z: &[f64]) -> Vec<f64> {
        linalg::matvec_t(terms.e.as_ref(), z)
    }

    fn b_coef_vec(&self, solver: &BSolver, xt_v: &[f64]) -> Vec<f64> {
        solver.lu.solve_vec(&linalg::matvec(solver.s.as_ref(), xt_v))
    }

    /// `E^T z` for coefficients `z` of a fit on these tuples, i.e. the feature
    /// coefficients of `sum_h (X z)_h f_{W'_h}`.
    pub(crate) fn sections_from_coef(&self, terms: &PolicyTerms, z: &[f64]) -> Vec<f64> {
        self.et(terms, z)
    }

    /// Coefficients `Z` with `B^{-1} M V = X Z`, from `X^T V`.
    fn b_coef(&self, solver: &BSolver, xt_v: MatRef<'_, f64>) -> Mat<f64> {
        solver.lu.solve_mat(matmul(solver.s.as_ref(), xt_v).as_ref())
    }

    /// Feature-space coefficients `Psi^T c` of `sum_h c_h f_{W'_h}`.
    pub fn section_coefficients(&self, terms: &PolicyTerms, c: &[f64]) -> Vec<f64> {
        self.psi_t(terms, c)
    }

    /// `<sum_j c_j f_{W'_j}, f_{W'_h}>` for the tuples of `self`, with the
    /// function given by its feature coefficients (possibly from another fold).
    pub fn sections_inner(&self, terms: &PolicyTerms, coef: &[f64]) -> Vec<f64> {
        self.psi_u(terms, coef)
    }

    /// `sum_j c_j l(W_j, W_h)` for the tuples of `self`, with `c` living on
    /// the tuples of `other` (same feature basis).
    pub fn cross_l_apply(&self, other: &FitContext, c: &[f64]) -> Vec<f64> {
        self.xu(&other.xt(c))
    }
}

/// Internal result of a value fit. `alpha = X z_alpha`.
#[derive(Debug, Clone)]
pub struct ValueCore {
    pub eta: f64,
    pub alpha: Vec<f64>,
    pub u: Vec<f64>,
    pub(crate) z_alpha: Vec<f64>,
    z1: Vec<f64>,
    sum_x1: f64,
}

/// Internal result of a ratio fit. `phi = X z_phi`, `e = X z_e`.
#[derive(Debug, Clone)]
pub struct RatioCore {
    pub phi: Vec<f64>,
    pub nu: Vec<f64>,
    pub e: Vec<f64>,
    pub omega: Vec<f64>,
    pub(crate) z_phi: Vec<f64>,
    z_e: Vec<f64>,
}

pub fn solve_value(ctx: &FitContext, terms: &PolicyTerms, solver: &BSolver) -> Result<ValueCore> {
    let z_r = ctx.b_coef_vec(solver, &ctx.xt_rewards);
    let z1 = ctx.b_coef_vec(solver, &ctx.x_sum);
    let sum_x1 = dot(&ctx.x_sum, &z1);
    let sum_xr = dot(&ctx.x_sum, &z_r);
    if !(sum_x1.abs() > 1e-300) {
        return Err(OplError::SingularSystem("value fit: degenerate constant direction".into()));
    }
    let eta = sum_xr / sum_x1;
    let z_alpha = linalg::axpy(&z_r, -eta, &z1);
    let alpha = ctx.xu(&z_alpha);
    // F~ X z = Psi E^T z
    let u = linalg::scale(&ctx.psi_u(terms, &ctx.et(terms, &z_alpha)), -1.0);
    if !eta.is_finite() || !linalg::all_finite(&u) {
        return Err(OplError::Numerical("value fit produced non-finite values".into()));
    }
    Ok(ValueCore { eta, alpha, u, z_alpha, z1, sum_x1 })
}

/// `(phi, nu, e)` before normalisation.
pub fn solve_ratio_raw(ctx: &FitContext, terms: &PolicyTerms, solver: &BSolver, pen: &Penalty) -> Result<RatioCore> {
    let z_phi = ctx.b_coef_vec(solver, &ctx.x_sum);
    let phi = ctx.xu(&z_phi);
    let f_phi = ctx.psi_u(terms, &ctx.et(terms, &z_phi));
    let rhs: Vec<f64> = f_phi.iter().map(|v| 1.0 - v).collect();
    // X^T rhs = X^T 1 - H z_phi, and L (L + mu)^{-1} v = X (G + mu)^{-1} X^T v.
    let xt_rhs = linalg::sub(&ctx.x_sum, &linalg::matvec(terms.h.as_ref(), &z_phi));
    let z_e = linalg::matvec(pen.g_mu_inv.as_ref(), &xt_rhs);
    let e = ctx.xu(&z_e);
    let nu: Vec<f64> = rhs.iter().zip(&e).map(|(r, x)| (r - x) / pen.mu).collect();
    if !linalg::all_finite(&e) || !linalg::all_finite(&nu) {
        return Err(OplError::Numerical("ratio fit produced non-finite values".into()));
    }
    Ok(RatioCore { phi, nu, e, omega: Vec::new(), z_phi, z_e })
}

pub fn solve_ratio(ctx: &FitContext, terms: &PolicyTerms, solver: &BSolver, pen: &Penalty) -> Result<RatioCore> {
    let mut core = solve_ratio_raw(ctx, terms, solver, pen)?;
    let mean = linalg::mean(&core.e);
    let max_abs = linalg::norm_inf(&core.e);
    if mean.abs() <= 1e-8 * (max_abs + 1e-12) {
        return Err(OplError::DegenerateRatio { mean, max_abs });
    }
    core.omega = core.e.iter().map(|x| x / mean).collect();
    Ok(core)
}

/// Fits at one policy, optionally with the `theta`-gradient of the objective.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: ValueCore,
    pub ratio: RatioCore,
    pub objective: f64,
    pub gradient: Option<Vec<f64>>,
}

/// Objective evaluator with the penalty pieces prepared once.
pub struct Evaluator {
    ctx: FitContext,
    tunings: Tunings,
    pen_value: Penalty,
    pen_ratio: Option<Penalty>,
}

impl Evaluator {
    pub fn new(ctx: FitContext, tunings: Tunings) -> Result<Self> {
        tunings.value.check()?;
        tunings.ratio.check()?;
        let pen_value = ctx.penalty(tunings.value.mu);
        let pen_ratio = (tunings.ratio.mu != tunings.value.mu).then(|| ctx.penalty(tunings.ratio.mu));
        Ok(Self { ctx, tunings, pen_value, pen_ratio })
    }

    pub fn context(&self) -> &FitContext {
        &self.ctx
    }

    pub fn tunings(&self) -> Tunings {
        self.tunings
    }

    fn pen_ratio(&self) -> &Penalty {
        self.pen_ratio.as_ref().unwrap_or(&self.pen_value)
    }

    pub fn evaluate(&self, policy: &PolicyParams, with_gradient: bool) -> Result<Evaluation> {
        let (p1, dp1) = self.ctx.policy_probs(policy);
        self.evaluate_probs(p1, with_gradient.then_some(dp1.as_slice()))
    }

    /// Same as [`Evaluator::evaluate`] from precomputed next-state
    /// probabilities and derivative columns. Passing zero columns freezes
    /// the policy dependence of `F~`.
    pub fn evaluate_probs(&self, p1: Vec<f64>, dp1: Option<&[Vec<f64>]>) -> Result<Evaluation> {
        let ctx = &self.ctx;
        let terms = ctx.terms(p1);
        let solver_v = ctx.b_solver(&terms, &self.pen_value, self.tunings.value.lambda)?;
        let same = self.pen_ratio.is_none() && self.tunings.ratio.lambda == self.tunings.value.lambda;
        let solver_r_owned;
        let solver_r = if same {
            &solver_v
        } else {
            solver_r_owned = ctx.b_solver(&terms, self.pen_ratio(), self.tunings.ratio.lambda)?;
            &solver_r_owned
        };
        let value = solve_value(ctx, &terms, &solver_v)?;
        let ratio = solve_ratio(ctx, &terms, solver_r, self.pen_ratio())?;
        let rewards = &ctx.feats.rewards;
        let c: Vec<f64> = rewards.iter().zip(&value.u).map(|(r, u)| r + u).collect();
        let sum_e: f64 = ratio.e.iter().sum();
        let objective = dot(&ratio.e, &c) / sum_e;
        if !objective.is_finite() {
            return Err(OplError::Numerical("objective is not finite".into()));
        }
        let gradient = dp1.map(|cols| {
            let n = ctx.n();
            let p = cols.len();
            let dp = Mat::from_fn(n, p, |h, k| cols[k][h]);
            // dJ = [de^T (c - J) + e^T dU] / e^T 1, reduced to feature space with
            // F~ X z = Psi E^T z and de^T (c - J) = -(inner)^T L (L + mu)^{-1} (c - J).
            let psi_e = ctx.et(&terms, &ratio.z_e);
            let mut xt_c = linalg::sub(&ctx.xt_rewards, &linalg::matvec(terms.h.as_ref(), &value.z_alpha));
            for (x, s1) in xt_c.iter_mut().zip(&ctx.x_sum) {
                *x -= objective * s1;
            }
            let z_q = linalg::matvec(self.pen_ratio().g_mu_inv.as_ref(), &xt_c);
            let q = ctx.xu(&z_q);
            let psi_q = ctx.et(&terms, &z_q);
            let fa = ctx.df_parts(&terms, dp.as_ref(), &value.alpha, &value.z_alpha);
            let fphi = ctx.df_parts(&terms, dp.as_ref(), &ratio.phi, &ratio.z_phi);
            // Value side.
            let zy = ctx.b_coef(&solver_v, fa.xt.as_ref());
            let sum_y = linalg::matvec_t(zy.as_ref(), &ctx.x_sum);
            let z_alpha = Mat::from_fn(zy.nrows(), p, |i, k| -zy[(i, k)] + sum_y[k] / value.sum_x1 * value.z1[i]);
            let et_za = linalg::matmul_tn(terms.e.as_ref(), z_alpha.as_ref());
            // Ratio side.
            let z_phi = ctx.b_coef(solver_r, fphi.xt.as_ref());
            let et_zp = linalg::matmul_tn(terms.e.as_ref(), z_phi.as_ref());
            (0..p)
                .map(|k| {
                    let e_dfa = fa.weighted_dot(dp.as_ref(), k, &ratio.e, &psi_e);
                    let e_du = -e_dfa - dot(&psi_e, et_za.col_as_slice(k));
                    let q_fphi = fphi.weighted_dot(dp.as_ref(), k, &q, &psi_q);
                    let q_inner = q_fphi - dot(&psi_q, et_zp.col_as_slice(k));
                    (-q_inner + e_du) / sum_e
                })
                .collect()
        });
        Ok(Evaluation { value, ratio, objective, gradient })
    }
}

/// Fits the relative value function at `policy`.
pub fn fit_value(policy: &PolicyParams, tuples: &TupleTable, cfg: &KernelConfig, tuning: TuningPair) -> Result<ValueFit> {
    tuning.check()?;
    let ctx = FitContext::from_tuples(cfg, tuples, BasisConfig::default())?;
    let (p1, _) = ctx.policy_probs(policy);
    let terms = ctx.terms(p1);
    let pen = ctx.penalty(tuning.mu);
    let solver = ctx.b_solver(&terms, &pen, tuning.lambda)?;
    let core = solve_value(&ctx, &terms, &solver)?;
    Ok(ValueFit { eta_tilde: core.eta, alpha: core.alpha, u_at_data: core.u, tuning, kernel: cfg.clone() })
}

/// Fits the scaled ratio function at `policy`.
pub fn fit_ratio(policy: &PolicyParams, tuples: &TupleTable, cfg: &KernelConfig, tuning: TuningPair) -> Result<RatioFit> {
    tuning.check()?;
    let ctx = FitContext::from_tuples(cfg, tuples, BasisConfig::default())?;
    let (p1, _) = ctx.policy_probs(policy);
    let terms = ctx.terms(p1);
    let pen = ctx.penalty(tuning.mu);
    let solver = ctx.b_solver(&terms, &pen, tuning.lambda)?;
    let core = solve_ratio(&ctx, &terms, &solver, &pen)?;
    Ok(RatioFit {
        phi: core.phi,
        nu: core.nu,
        e_at_data: core.e,
        omega_at_data: core.omega,
        tuning,
        kernel: cfg.clone(),
    })
}

/// Temporal-difference error `R + sum_a' pi(a'|S') Q(S', a') - Q(S, A) - eta`.
pub fn td_error<Q>(policy: &PolicyParams, state: &[f64], action: u8, reward: f64, next_state: &[f64], eta: f64, q: Q) -> f64
where
    Q: Fn(&[f64], u8) -> f64,
{
    let p1 = policy.prob_one(next_state);
    reward + (1.0 - p1) * q(next_state, 0) + p1 * q(next_state, 1) - q(state, action) - eta
}

/// `Q(w) = sum_h alpha_h <f_{W'_h}, k~(w, .)>` for coefficients on the tuples.
pub fn q_from_alpha(cfg: &KernelConfig, tuples: &TupleTable, policy: &PolicyParams, alpha: &[f64], query: Sa<'_>) -> f64 {
    (0..tuples.len())
        .map(|h| {
            let sp = tuples.next_state(h);
            let p1 = policy.prob_one(sp);
            let sec = shaped_kernel(cfg, (tuples.state(h), tuples.action(h)), query)
                - (1.0 - p1) * shaped_kernel(cfg, (sp, 0), query)
                - p1 * shaped_kernel(cfg, (sp, 1), query);
            alpha[h] * sec
        })
        .sum()
}

/// `sum_h coeff_h l(W_h, query)`.
pub fn predict_g(coeffs: &[f64], cfg: &KernelConfig, tuples: &TupleTable, query: Sa<'_>) -> f64 {
    assert_eq!(coeffs.len(), tuples.len());
    (0..tuples.len())
        .filter(|&h| coeffs[h] != 0.0)
        .map(|h| coeffs[h] * kernel_sa(cfg, (tuples.state(h), tuples.action(h)), query))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tuning_must_be_positive() {
        assert!(TuningPair::new(0.0, 1.0).is_err());
        assert!(TuningPair::new(1.0, f64::NAN).is_err());
        assert!(TuningPair::new(1e-3, 1e-2).is_ok());
    }

    #[test]
    fn td_error_with_zero_value_is_reward() {
        let p = PolicyParams::zeros(1, 10.0, crate::policy::FeatureMap::Intercept);
        assert_eq!(td_error(&p, &[0.3], 1, 2.5, &[0.1], 0.0, |_, _| 0.0), 2.5);
    }
}
