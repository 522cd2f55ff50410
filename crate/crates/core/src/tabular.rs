//! Exact quantities on small finite MDPs.
//!
//! Everything here is computed by direct linear algebra on the transition
//! tensor, so it serves as ground truth for the kernel estimators when they
//! are run on tabular data through Kronecker-delta kernels. States are
//! encoded in trajectories as the one-dimensional vector `[s as f64]`.

use faer::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Trajectory};
use crate::error::{OplError, Result};
use crate::linalg::LuSolver;
use crate::policy::PolicyParams;

/// Finite MDP with a Markov behaviour policy and an initial distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s][a][s'] = P(s' | s, a)`
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a] = r(s, a)`
    pub rewards: Vec<Vec<f64>>,
    /// `behavior[s][a] = pi_b(a | s)`
    pub behavior: Vec<Vec<f64>>,
    pub init: Vec<f64>,
}

/// Stationary Markov policy, `probs[s][a] = pi(a | s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub probs: Vec<Vec<f64>>,
}

/// A table indexed by state-action pair, row-major `[s][a]`.
pub type SaTable = Vec<Vec<f64>>;

const PROB_TOL: f64 = 1e-12;

fn check_simplex(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|&p| !(0.0..=1.0 + PROB_TOL).contains(&p) || !p.is_finite()) {
        return Err(OplError::Value(format!("{what}: entries must lie in [0, 1]")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(OplError::Value(format!("{what}: sums to {total}, expected 1")));
    }
    Ok(())
}

impl TabularMdp {
    /// Validates the probability tables. `p_min` bounds behaviour
    /// probabilities from below.
    pub fn validate(&self, p_min: f64) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(OplError::Shape("empty state or action space".into()));
        }
        let shape_ok = self.transitions.len() == ns
            && self.transitions.iter().all(|r| r.len() == na && r.iter().all(|p| p.len() == ns))
            && self.rewards.len() == ns
            && self.rewards.iter().all(|r| r.len() == na)
            && self.behavior.len() == ns
            && self.behavior.iter().all(|r| r.len() == na)
            && self.init.len() == ns;
        if !shape_ok {
            return Err(OplError::Shape("tabular MDP tables have inconsistent sizes".into()));
        }
        for s in 0..ns {
            for a in 0..na {
                check_simplex(&self.transitions[s][a], &format!("P(.|{s},{a})"))?;
            }
            check_simplex(&self.behavior[s], &format!("behavior(.|{s})"))?;
            if self.behavior[s].iter().any(|&p| p < p_min) {
                return Err(OplError::Value(format!("behavior(.|{s}) falls below p_min = {p_min}")));
            }
        }
        check_simplex(&self.init, "init")
    }

    pub fn sa_index(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    /// Random MDP with all transition and behaviour entries bounded away
    /// from zero (hence irreducible under every policy).
    pub fn random<R: Rng>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let mut simplex = |k: usize| -> Vec<f64> {
            let raw: Vec<f64> = (0..k).map(|_| 0.2 + rng.random::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / total).collect()
        };
        let transitions = (0..n_states).map(|_| (0..n_actions).map(|_| simplex(n_states)).collect()).collect();
        let behavior = (0..n_states).map(|_| simplex(n_actions)).collect();
        let init = simplex(n_states);
        let rewards = (0..n_states).map(|_| (0..n_actions).map(|_| rng.random::<f64>() * 2.0 - 0.5).collect()).collect();
        Self { n_states, n_actions, transitions, rewards, behavior, init }
    }

    /// The fixed 4-state, 2-action MDP used by the double-robustness probes.
    ///
    /// Action 1 pushes the chain toward the high-reward states but carries a
    /// small immediate cost; behaviour is uniform.
    pub fn reference_four_state() -> Self {
        let transitions = vec![
            vec![vec![0.7, 0.2, 0.05, 0.05], vec![0.2, 0.5, 0.2, 0.1]],
            vec![vec![0.5, 0.3, 0.1, 0.1], vec![0.1, 0.3, 0.4, 0.2]],
            vec![vec![0.3, 0.4, 0.2, 0.1], vec![0.05, 0.15, 0.4, 0.4]],
            vec![vec![0.2, 0.3, 0.3, 0.2], vec![0.05, 0.05, 0.3, 0.6]],
        ];
        let rewards = vec![vec![0.0, -0.3], vec![0.5, 0.2], vec![1.0, 0.8], vec![2.0, 1.7]];
        let behavior = vec![vec![0.5, 0.5]; 4];
        let init = vec![0.4, 0.3, 0.2, 0.1];
        Self { n_states: 4, n_actions: 2, transitions, rewards, behavior, init }
    }

    /// The behaviour policy as a [`TabularPolicy`].
    pub fn behavior_policy(&self) -> TabularPolicy {
        TabularPolicy { probs: self.behavior.clone() }
    }

    /// State-to-state kernel `P^pi(s' | s)`.
    pub fn state_chain(&self, pi: &TabularPolicy) -> Vec<Vec<f64>> {
        let ns = self.n_states;
        (0..ns)
            .map(|s| {
                let mut row = vec![0.0; ns];
                for a in 0..self.n_actions {
                    let w = pi.probs[s][a];
                    for (sp, r) in row.iter_mut().enumerate() {
                        *r += w * self.transitions[s][a][sp];
                    }
                }
                row
            })
            .collect()
    }

    /// `(P^pi f)(s, a) = sum_{s'} P(s'|s,a) sum_{a'} pi(a'|s') f(s', a')`.
    pub fn expected_next(&self, pi: &TabularPolicy, f: &SaTable) -> SaTable {
        let v: Vec<f64> = (0..self.n_states)
            .map(|sp| (0..self.n_actions).map(|ap| pi.probs[sp][ap] * f[sp][ap]).sum())
            .collect();
        (0..self.n_states)
            .map(|s| {
                (0..self.n_actions)
                    .map(|a| self.transitions[s][a].iter().zip(&v).map(|(p, x)| p * x).sum())
                    .collect()
            })
            .collect()
    }
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states] }
    }

    /// Evaluates a binary-action logistic policy at the encoded states `[s]`.
    pub fn from_logistic(policy: &PolicyParams, n_states: usize) -> Self {
        let probs = (0..n_states)
            .map(|s| {
                let p1 = policy.prob_one(&[s as f64]);
                vec![1.0 - p1, p1]
            })
            .collect();
        Self { probs }
    }
}

/// Inverse-CDF draw from a probability row.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

impl TabularMdp {
    /// One transition from `(s, a)` driven by the uniform variate `u`.
    pub fn next_state(&self, s: usize, a: usize, u: f64) -> usize {
        sample_index(&self.transitions[s][a], u)
    }

    /// `n` behaviour-policy trajectories of length `horizon`; trajectory `i`
    /// draws from its own stream of `seed`.
    pub fn simulate(&self, n: usize, horizon: usize, seed: u64) -> Result<Dataset> {
        let trajectories = (0..n)
            .map(|i| {
                let mut rng = crate::seed::stream_rng(seed, i as u64);
                let mut s = sample_index(&self.init, rng.random());
                let mut tr = Trajectory { states: vec![vec![s as f64]], actions: Vec::new(), rewards: Vec::new() };
                for _ in 0..horizon {
                    let a = sample_index(&self.behavior[s], rng.random());
                    let next = self.next_state(s, a, rng.random());
                    tr.actions.push(a as u8);
                    tr.rewards.push(self.rewards[s][a]);
                    tr.states.push(vec![next as f64]);
                    s = next;
                }
                tr
            })
            .collect();
        Dataset::new(trajectories)
    }
}

/// Decodes a tabular state stored as `[s as f64]`.
pub fn state_index(state: &[f64]) -> usize {
    state[0] as usize
}

/// Whether the positive-probability graph of `P^pi` is strongly connected.
pub fn is_irreducible(mdp: &TabularMdp, pi: &TabularPolicy) -> bool {
    let chain = mdp.state_chain(pi);
    let ns = mdp.n_states;
    let reach = |forward: bool| -> bool {
        let mut seen = vec![false; ns];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(s) = stack.pop() {
            for t in 0..ns {
                let p = if forward { chain[s][t] } else { chain[t][s] };
                if p > 0.0 && !seen[t] {
                    seen[t] = true;
                    stack.push(t);
                }
            }
        }
        seen.into_iter().all(|x| x)
    };
    reach(true) && reach(false)
}

/// Stationary distribution `d^pi` of the state chain.
pub fn stationary_distribution(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    if !is_irreducible(mdp, pi) {
        return Err(OplError::NotIrreducible);
    }
    let ns = mdp.n_states;
    let chain = mdp.state_chain(pi);
    // (P^T - I) d = 0 with the last equation replaced by sum(d) = 1.
    let a = Mat::from_fn(ns, ns, |i, j| {
        if i == ns - 1 {
            1.0
        } else {
            chain[j][i] - if i == j { 1.0 } else { 0.0 }
        }
    });
    let mut b = vec![0.0; ns];
    b[ns - 1] = 1.0;
    Ok(LuSolver::new(&a)?.solve_vec(&b))
}

/// `eta^pi = sum_{s,a} r(s,a) pi(a|s) d^pi(s)`.
pub fn average_reward_exact(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    let d = stationary_distribution(mdp, pi)?;
    Ok((0..mdp.n_states)
        .map(|s| d[s] * (0..mdp.n_actions).map(|a| pi.probs[s][a] * mdp.rewards[s][a]).sum::<f64>())
        .sum())
}

/// Solution of the average-reward Bellman equation with `Q(anchor) = 0`.
///
/// Returns `(eta, Q)`; `eta` comes out of the same linear system and agrees
/// with [`average_reward_exact`].
pub fn bellman_solution(mdp: &TabularMdp, pi: &TabularPolicy, anchor: (usize, usize)) -> Result<(f64, SaTable)> {
    if !is_irreducible(mdp, pi) {
        return Err(OplError::NotIrreducible);
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let nsa = ns * na;
    // Unknowns: Q(s,a) for all pairs, then eta.
    let mut a = Mat::<f64>::zeros(nsa + 1, nsa + 1);
    let mut b = vec![0.0; nsa + 1];
    for s in 0..ns {
        for act in 0..na {
            let row = mdp.sa_index(s, act);
            a[(row, row)] -= 1.0;
            a[(row, nsa)] = -1.0;
            for sp in 0..ns {
                let p = mdp.transitions[s][act][sp];
                for ap in 0..na {
                    a[(row, mdp.sa_index(sp, ap))] += p * pi.probs[sp][ap];
                }
            }
            b[row] = -mdp.rewards[s][act];
        }
    }
    a[(nsa, mdp.sa_index(anchor.0, anchor.1))] = 1.0;
    let x = LuSolver::new(&a)?.solve_vec(&b);
    if !crate::linalg::all_finite(&x) {
        return Err(OplError::SingularSystem("Bellman system".into()));
    }
    let q = (0..ns).map(|s| (0..na).map(|act| x[mdp.sa_index(s, act)]).collect()).collect();
    Ok((x[nsa], q))
}

/// Shifted relative value function `Q~^pi` with `Q~(anchor) = 0`.
pub fn relative_value_exact(mdp: &TabularMdp, pi: &TabularPolicy, anchor: (usize, usize)) -> Result<SaTable> {
    bellman_solution(mdp, pi, anchor).map(|(_, q)| q)
}

/// Max-norm Bellman residual `|r + P^pi Q - Q - eta|`.
pub fn bellman_residual(mdp: &TabularMdp, pi: &TabularPolicy, eta: f64, q: &SaTable) -> f64 {
    let next = mdp.expected_next(pi, q);
    let mut worst = 0.0_f64;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            worst = worst.max((mdp.rewards[s][a] + next[s][a] - q[s][a] - eta).abs());
        }
    }
    worst
}

/// Exact state-action marginals `d_1, ..., d_T` under the behaviour policy.
pub fn time_marginals(mdp: &TabularMdp, horizon: usize) -> Vec<SaTable> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut out = Vec::with_capacity(horizon);
    let mut ds = mdp.init.clone();
    for _ in 0..horizon {
        let dsa: SaTable = (0..ns).map(|s| (0..na).map(|a| ds[s] * mdp.behavior[s][a]).collect()).collect();
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                for (sp, nx) in next.iter_mut().enumerate() {
                    *nx += dsa[s][a] * mdp.transitions[s][a][sp];
                }
            }
        }
        out.push(dsa);
        ds = next;
    }
    out
}

/// `d_D(s, a) = (1/T) sum_t d_t(s, a)`.
pub fn marginal_average_distribution(mdp: &TabularMdp, horizon: usize) -> Result<SaTable> {
    if horizon == 0 {
        return Err(OplError::Value("horizon must be at least 1".into()));
    }
    let marginals = time_marginals(mdp, horizon);
    let mut avg = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
    for dt in &marginals {
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                avg[s][a] += dt[s][a] / horizon as f64;
            }
        }
    }
    Ok(avg)
}

/// Ratio function `omega^pi(s,a) = d^pi(s) pi(a|s) / d_D(s,a)`.
pub fn ratio_exact(mdp: &TabularMdp, pi: &TabularPolicy, horizon: usize) -> Result<SaTable> {
    let d_pi = stationary_distribution(mdp, pi)?;
    let d_d = marginal_average_distribution(mdp, horizon)?;
    let mut omega = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            if d_d[s][a] <= 0.0 {
                return Err(OplError::ZeroCoverage { state: s, action: a });
            }
            omega[s][a] = d_pi[s] * pi.probs[s][a] / d_d[s][a];
        }
    }
    Ok(omega)
}

/// `sum_{s,a} d_D(s,a) f(s,a)`: the exact value of `E[(1/T) sum_t f(S_t, A_t)]`.
pub fn data_expectation(d_d: &SaTable, f: &SaTable) -> f64 {
    d_d.iter().zip(f).map(|(dr, fr)| dr.iter().zip(fr).map(|(d, x)| d * x).sum::<f64>()).sum()
}

/// Exact `E[(1/T) sum_t omega(S_t,A_t) {f(S_t,A_t) - sum_a' pi(a'|S_{t+1}) f(S_{t+1}, a')}]`.
pub fn orthogonality_expectation(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    horizon: usize,
    omega: &SaTable,
    f: &SaTable,
) -> Result<f64> {
    let d_d = marginal_average_distribution(mdp, horizon)?;
    let next = mdp.expected_next(pi, f);
    let integrand: SaTable = (0..mdp.n_states)
        .map(|s| (0..mdp.n_actions).map(|a| omega[s][a] * (f[s][a] - next[s][a])).collect())
        .collect();
    Ok(data_expectation(&d_d, &integrand))
}

/// Conditional mean of `U^pi(s, a, S')` given `(s, a)`, i.e. `(P^pi Q)(s,a) - Q(s,a)`.
pub fn expected_u(mdp: &TabularMdp, pi: &TabularPolicy, q: &SaTable) -> SaTable {
    let next = mdp.expected_next(pi, q);
    (0..mdp.n_states).map(|s| (0..mdp.n_actions).map(|a| next[s][a] - q[s][a]).collect()).collect()
}

/// `U^pi(s, a, s') = sum_a' pi(a'|s') Q(s', a') - Q(s, a)`.
pub fn u_value(pi: &TabularPolicy, q: &SaTable, s: usize, a: usize, s_next: usize) -> f64 {
    pi.probs[s_next].iter().zip(&q[s_next]).map(|(p, x)| p * x).sum::<f64>() - q[s][a]
}
