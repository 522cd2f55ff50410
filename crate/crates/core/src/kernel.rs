//! State-action kernels, anchor shaping and the dense Gram matrices.
//!
//! The dense [`GramPack`] materialises every kernel evaluation and is meant
//! for small problems and as a reference; the estimators run on the
//! factored representation in [`crate::basis`].

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::data::TupleTable;
use crate::error::{OplError, Result};
use crate::policy::PolicyParams;

/// Base kernel on states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateKernel {
    /// `exp(-|s1 - s2|^2 / sigma^2)`
    Gaussian { bandwidth: f64 },
    /// `1{s1 == s2}`, for tabular data encoded as state indices.
    Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub state_kernel: StateKernel,
    pub anchor_state: Vec<f64>,
    pub anchor_action: u8,
}

/// A state-action pair.
pub type Sa<'a> = (&'a [f64], u8);

impl KernelConfig {
    pub fn gaussian(bandwidth: f64, state_dim: usize) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(OplError::Value(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self { state_kernel: StateKernel::Gaussian { bandwidth }, anchor_state: vec![0.0; state_dim], anchor_action: 0 })
    }

    pub fn delta(state_dim: usize) -> Self {
        Self { state_kernel: StateKernel::Delta, anchor_state: vec![0.0; state_dim], anchor_action: 0 }
    }

    /// Gaussian kernel with the median-heuristic bandwidth over all states
    /// (current and next) in the table.
    pub fn from_tuples(tuples: &TupleTable) -> Result<Self> {
        let states = pooled_states(tuples);
        Self::gaussian(median_bandwidth(&states)?, tuples.state_dim())
    }

    pub fn with_anchor(mut self, state: Vec<f64>, action: u8) -> Self {
        self.anchor_state = state;
        self.anchor_action = action;
        self
    }

    pub fn anchor(&self) -> Sa<'_> {
        (&self.anchor_state, self.anchor_action)
    }

    /// Base state kernel `k_0`.
    pub fn k0(&self, s1: &[f64], s2: &[f64]) -> f64 {
        match self.state_kernel {
            StateKernel::Gaussian { bandwidth } => {
                let d2: f64 = s1.iter().zip(s2).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (bandwidth * bandwidth)).exp()
            }
            StateKernel::Delta => f64::from(u8::from(s1 == s2)),
        }
    }
}

/// The `T + 1` states of every trajectory, in trajectory order.
pub fn pooled_states(tuples: &TupleTable) -> Vec<Vec<f64>> {
    let t = tuples.horizon();
    let mut out = Vec::with_capacity(tuples.n_trajectories() * (t + 1));
    for i in 0..tuples.n_trajectories() {
        for step in 0..t {
            out.push(tuples.state(i * t + step).to_vec());
        }
        out.push(tuples.next_state(i * t + t - 1).to_vec());
    }
    out
}

/// Median pairwise Euclidean distance over at most 1000 evenly spaced points.
///
/// If more than half of the distances are zero the median of the positive
/// distances is used instead, so heavily repeated states still get a usable
/// bandwidth.
pub fn median_bandwidth(states: &[Vec<f64>]) -> Result<f64> {
    const MAX_POINTS: usize = 1000;
    let n = states.len();
    let picked: Vec<&[f64]> = if n > MAX_POINTS {
        (0..MAX_POINTS).map(|i| states[i * n / MAX_POINTS].as_slice()).collect()
    } else {
        states.iter().map(Vec::as_slice).collect()
    };
    let mut dists = Vec::with_capacity(picked.len() * picked.len().saturating_sub(1) / 2);
    for i in 0..picked.len() {
        for j in (i + 1)..picked.len() {
            let d2: f64 = picked[i].iter().zip(picked[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            dists.push(d2.sqrt());
        }
    }
    let med = median(&mut dists).ok_or_else(|| OplError::DegenerateData("need at least two states".into()))?;
    if med > 0.0 {
        return Ok(med);
    }
    let mut positive: Vec<f64> = dists.into_iter().filter(|&d| d > 0.0).collect();
    match median(&mut positive) {
        Some(m) if m.is_finite() => Ok(m),
        _ => Err(OplError::DegenerateData("all states are identical".into())),
    }
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// `1{a1 = a2} k_0(s1, s2)`
pub fn kernel_sa(cfg: &KernelConfig, w1: Sa<'_>, w2: Sa<'_>) -> f64 {
    if w1.1 != w2.1 {
        0.0
    } else {
        cfg.k0(w1.0, w2.0)
    }
}

/// Anchor-shaped kernel
/// `k(w1,w2) - k(w*,w1) - k(w*,w2) + k(w*,w*)`.
///
/// Grouped as `(k(w1,w2) - k(w*,w2)) - (k(w1,w*) - k(w*,w*))`, which is exactly
/// zero whenever either argument equals the anchor.
pub fn shaped_kernel(cfg: &KernelConfig, w1: Sa<'_>, w2: Sa<'_>) -> f64 {
    let star = cfg.anchor();
    (kernel_sa(cfg, w1, w2) - kernel_sa(cfg, star, w2)) - (kernel_sa(cfg, w1, star) - kernel_sa(cfg, star, star))
}

/// Dense Gram matrices for a tuple table.
///
/// `extended` is the shaped kernel over the `3N` points
/// `W_0..W_{N-1}, (S'_0,0)..(S'_{N-1},0), (S'_0,1)..(S'_{N-1},1)`.
#[derive(Debug, Clone)]
pub struct GramPack {
    pub l: Mat<f64>,
    pub extended: Mat<f64>,
}

impl GramPack {
    pub fn build(cfg: &KernelConfig, tuples: &TupleTable) -> Self {
        let n = tuples.len();
        let point = |i: usize| -> Sa<'_> {
            if i < n {
                (tuples.state(i), tuples.action(i))
            } else {
                let a = ((i - n) / n) as u8;
                (tuples.next_state((i - n) % n), a)
            }
        };
        let l = Mat::from_fn(n, n, |i, j| kernel_sa(cfg, point(i), point(j)));
        let mut extended = Mat::<f64>::zeros(3 * n, 3 * n);
        for i in 0..3 * n {
            for j in 0..=i {
                let v = shaped_kernel(cfg, point(i), point(j));
                extended[(i, j)] = v;
                extended[(j, i)] = v;
            }
        }
        Self { l, extended }
    }

    pub fn n(&self) -> usize {
        self.l.nrows()
    }

    /// `F~` from the policy probabilities `p1[h] = pi(1 | S'_h)`.
    pub fn feature_gram_from(&self, p1: &[f64]) -> Mat<f64> {
        let n = self.n();
        let c = self.contraction(p1);
        let k = &self.extended;
        let mut f = Mat::<f64>::zeros(n, n);
        for h in 0..n {
            for j in 0..=h {
                let mut v = 0.0;
                for &(ih, ch) in &c[h] {
                    for &(ij, cj) in &c[j] {
                        v += ch * cj * k[(ih, ij)];
                    }
                }
                f[(h, j)] = v;
                f[(j, h)] = v;
            }
        }
        f
    }

    /// `dF~/dtheta_k` for each `k`, given `dp1[h][k] = d pi(1|S'_h) / d theta_k`.
    pub fn feature_gram_grad_from(&self, p1: &[f64], dp1: &[Vec<f64>]) -> Vec<Mat<f64>> {
        let n = self.n();
        let p = dp1.first().map_or(0, Vec::len);
        let c = self.contraction(p1);
        let k = &self.extended;
        (0..p)
            .map(|q| {
                // Only the next-state weights move: d(-pi_0) = +dp1, d(-pi_1) = -dp1.
                let dc: Vec<[(usize, f64); 2]> =
                    (0..n).map(|h| [(n + h, dp1[h][q]), (2 * n + h, -dp1[h][q])]).collect();
                let mut g = Mat::<f64>::zeros(n, n);
                for h in 0..n {
                    for j in 0..=h {
                        let mut v = 0.0;
                        for &(ih, dh) in &dc[h] {
                            for &(ij, cj) in &c[j] {
                                v += dh * cj * k[(ih, ij)];
                            }
                        }
                        for &(ih, ch) in &c[h] {
                            for &(ij, dj) in &dc[j] {
                                v += ch * dj * k[(ih, ij)];
                            }
                        }
                        g[(h, j)] = v;
                        g[(j, h)] = v;
                    }
                }
                g
            })
            .collect()
    }

    // f_{W'_h} = k(W_h, .) - pi_0 k((S'_h,0), .) - pi_1 k((S'_h,1), .)
    fn contraction(&self, p1: &[f64]) -> Vec<[(usize, f64); 3]> {
        let n = self.n();
        (0..n).map(|h| [(h, 1.0), (n + h, -(1.0 - p1[h])), (2 * n + h, -p1[h])]).collect()
    }
}

/// `pi(1 | S'_h)` for every tuple.
pub fn next_probs(policy: &PolicyParams, tuples: &TupleTable) -> Vec<f64> {
    (0..tuples.len()).map(|h| policy.prob_one(tuples.next_state(h))).collect()
}

/// `d pi(1 | S'_h) / d theta` for every tuple.
pub fn next_prob_grads(policy: &PolicyParams, tuples: &TupleTable) -> Vec<Vec<f64>> {
    (0..tuples.len()).map(|h| policy.grad_prob_one(tuples.next_state(h))).collect()
}

/// Dense `F~(pi)`; quadratic memory, intended for small `N`.
pub fn feature_gram(cfg: &KernelConfig, tuples: &TupleTable, policy: &PolicyParams) -> Mat<f64> {
    GramPack::build(cfg, tuples).feature_gram_from(&next_probs(policy, tuples))
}

/// Dense `dF~/dtheta` as `p` matrices of size `N x N`.
pub fn feature_gram_grad(cfg: &KernelConfig, tuples: &TupleTable, policy: &PolicyParams) -> Vec<Mat<f64>> {
    GramPack::build(cfg, tuples).feature_gram_grad_from(&next_probs(policy, tuples), &next_prob_grads(policy, tuples))
}
