//! Simulation environments, Monte Carlo policy values, in-class oracle
//! search and the replication harness.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{flatten, Dataset, Trajectory};
use crate::error::{OplError, Result};
use crate::kernel::KernelConfig;
use crate::lbfgs::LbfgsConfig;
use crate::optimize::{maximize_multi_start, optimize, start_points, OptimizeConfig, StartLog};
use crate::par;
use crate::policy::{FeatureMap, PolicyParams};
use crate::seed::{mix, stream_rng};
use crate::tabular::{sample_index, state_index, TabularMdp};
use crate::tuner::{cv_select, TuningGrid};
use crate::nuisance::Tunings;

/// A simulator with binary actions. Decision times `t` start at 1.
pub trait Environment: Sync {
    fn state_dim(&self) -> usize;
    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// Returns `(R_{t+1}, S_{t+1})`.
    fn step(&self, state: &[f64], action: u8, t: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>);
    /// `pi_b(1 | s)` of the data-generating policy.
    fn behavior_prob_one(&self, _state: &[f64]) -> f64 {
        0.5
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn standard_normal_state(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| normal(rng)).collect()
}

/// Coefficients of the three-dimensional linear-Gaussian dynamics shared by
/// both scenarios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDynamics {
    pub s1_ar: f64,
    pub s1_noise: f64,
    pub s2_ar: f64,
    pub s2_action: f64,
    pub s2_noise: f64,
    pub s3_ar: f64,
    pub s3_state_action: f64,
    pub s3_action: f64,
    pub s3_noise: f64,
}

pub const SCENARIO_DYNAMICS: LinearDynamics = LinearDynamics {
    s1_ar: 0.5,
    s1_noise: 2.0,
    s2_ar: 0.25,
    s2_action: 0.125,
    s2_noise: 2.0,
    s3_ar: 0.9,
    s3_state_action: 0.05,
    s3_action: 0.5,
    s3_noise: 1.0,
};

/// `R = base - burden * S_3 + effect * S_1 A (c0 + c1 S_1 + c2 S_2) + noise * xi_4`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioReward {
    pub base: f64,
    pub burden: f64,
    pub effect: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub noise: f64,
    /// Per-step decay rate of `burden` and `effect`; zero for a stationary reward.
    pub decay: f64,
}

pub const SCENARIO1_REWARD: ScenarioReward =
    ScenarioReward { base: 10.0, burden: 0.4, effect: 0.25, c0: 0.04, c1: 0.02, c2: 0.02, noise: 0.16, decay: 0.0 };

pub const SCENARIO2_REWARD: ScenarioReward =
    ScenarioReward { base: 10.0, burden: 0.4, effect: 0.25, c0: 0.04, c1: 0.02, c2: 0.02, noise: 0.0, decay: 0.05 };

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub dynamics: LinearDynamics,
    pub reward: ScenarioReward,
}

impl Scenario {
    pub fn one() -> Self {
        Self { dynamics: SCENARIO_DYNAMICS, reward: SCENARIO1_REWARD }
    }

    pub fn two() -> Self {
        Self { dynamics: SCENARIO_DYNAMICS, reward: SCENARIO2_REWARD }
    }
}

impl Environment for Scenario {
    fn state_dim(&self) -> usize {
        3
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        standard_normal_state(3, rng)
    }

    fn step(&self, s: &[f64], action: u8, t: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
        let xi: [f64; 4] = [normal(rng), normal(rng), normal(rng), normal(rng)];
        let a = f64::from(action);
        let d = &self.dynamics;
        let next = vec![
            d.s1_ar * s[0] + d.s1_noise * xi[0],
            d.s2_ar * s[1] + d.s2_action * a + d.s2_noise * xi[1],
            d.s3_ar * s[2] + d.s3_state_action * s[2] * a + d.s3_action * a + d.s3_noise * xi[2],
        ];
        let r = &self.reward;
        let decay = (-r.decay * (t as f64 - 1.0)).exp();
        let reward = r.base - r.burden * decay * s[2] + r.effect * decay * s[0] * a * (r.c0 + r.c1 * s[0] + r.c2 * s[1])
            + r.noise * xi[3];
        (reward, next)
    }
}

/// Two-dimensional bilinear environment with reward on the next state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VLearningEnv {
    pub gain: f64,
    pub cross: f64,
    pub noise_sd: f64,
    pub reward_s1: f64,
    pub reward_s2: f64,
    pub action_cost: f64,
}

impl Default for VLearningEnv {
    fn default() -> Self {
        Self { gain: 0.75, cross: 0.25, noise_sd: 0.5, reward_s1: 2.0, reward_s2: 1.0, action_cost: 0.25 }
    }
}

impl Environment for VLearningEnv {
    fn state_dim(&self) -> usize {
        2
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        standard_normal_state(2, rng)
    }

    fn step(&self, s: &[f64], action: u8, _t: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
        let e1 = self.noise_sd * normal(rng);
        let e2 = self.noise_sd * normal(rng);
        let sign = 2.0 * f64::from(action) - 1.0;
        let n1 = self.gain * sign * s[0] + self.cross * s[0] * s[1] + e1;
        let n2 = -self.gain * sign * s[1] - self.cross * s[0] * s[1] + e2;
        let reward = self.reward_s1 * n1 + self.reward_s2 * n2 - self.action_cost * sign;
        (reward, vec![n1, n2])
    }
}

/// A finite MDP with states encoded as `[s as f64]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularEnv {
    pub mdp: TabularMdp,
}

impl Environment for TabularEnv {
    fn state_dim(&self) -> usize {
        1
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![sample_index(&self.mdp.init, rng.random()) as f64]
    }

    fn step(&self, s: &[f64], action: u8, _t: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
        let si = state_index(s);
        let a = usize::from(action);
        let next = self.mdp.next_state(si, a, rng.random());
        (self.mdp.rewards[si][a], vec![next as f64])
    }

    fn behavior_prob_one(&self, s: &[f64]) -> f64 {
        self.mdp.behavior[state_index(s)][1]
    }
}

/// Serializable environment choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    Scenario1,
    Scenario2,
    Vlearning,
    Tabular { mdp: TabularMdp },
}

impl EnvSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::Scenario1 => "scenario1",
            EnvSpec::Scenario2 => "scenario2",
            EnvSpec::Vlearning => "vlearning",
            EnvSpec::Tabular { .. } => "tabular",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "scenario1" => Some(EnvSpec::Scenario1),
            "scenario2" => Some(EnvSpec::Scenario2),
            "vlearning" => Some(EnvSpec::Vlearning),
            "tabular" => Some(EnvSpec::Tabular { mdp: TabularMdp::reference_four_state() }),
            _ => None,
        }
    }

    pub fn build(&self) -> Box<dyn Environment> {
        match self {
            EnvSpec::Scenario1 => Box::new(Scenario::one()),
            EnvSpec::Scenario2 => Box::new(Scenario::two()),
            EnvSpec::Vlearning => Box::new(VLearningEnv::default()),
            EnvSpec::Tabular { mdp } => Box::new(TabularEnv { mdp: mdp.clone() }),
        }
    }
}

/// Who picks the actions.
#[derive(Debug, Clone, Copy)]
pub enum Actor<'a> {
    Behavior,
    Policy(&'a PolicyParams),
}

impl Actor<'_> {
    fn prob_one(&self, env: &dyn Environment, s: &[f64]) -> f64 {
        match self {
            Actor::Behavior => env.behavior_prob_one(s),
            Actor::Policy(p) => p.prob_one(s),
        }
    }
}

/// One trajectory on its own stream. Every step draws the action uniform
/// first, then the environment noise, so streams line up across policies.
pub fn simulate_trajectory(env: &dyn Environment, actor: Actor<'_>, horizon: usize, rng: &mut ChaCha8Rng) -> Trajectory {
    let mut s = env.initial_state(rng);
    let mut tr = Trajectory { states: Vec::with_capacity(horizon + 1), actions: Vec::with_capacity(horizon), rewards: Vec::with_capacity(horizon) };
    tr.states.push(s.clone());
    for t in 1..=horizon {
        let u: f64 = rng.random();
        let a = u8::from(u < actor.prob_one(env, &s));
        let (r, next) = env.step(&s, a, t, rng);
        tr.actions.push(a);
        tr.rewards.push(r);
        tr.states.push(next.clone());
        s = next;
    }
    tr
}

/// `n` trajectories of length `horizon`; trajectory `i` uses stream `i` of `seed`.
pub fn simulate(env: &dyn Environment, actor: Actor<'_>, n: usize, horizon: usize, seed: u64) -> Result<Dataset> {
    let trajectories = par::map_indexed(n, |i| simulate_trajectory(env, actor, horizon, &mut stream_rng(seed, i as u64)));
    Dataset::new(trajectories)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub sd: f64,
    /// Trajectories replaced because the state left `[-ESCAPE_BOUND, ESCAPE_BOUND]`.
    #[serde(default)]
    pub escaped: usize,
}

/// States beyond this magnitude count as escaped. The bilinear V-learning
/// dynamics blow up to overflow from there within a few steps.
pub const ESCAPE_BOUND: f64 = 1e6;

fn average_after_burn_in(env: &dyn Environment, policy: &PolicyParams, t_test: usize, burn_in: usize, rng: &mut ChaCha8Rng) -> Option<f64> {
    let mut s = env.initial_state(rng);
    let mut total = 0.0;
    for t in 1..=t_test {
        let u: f64 = rng.random();
        let a = policy.act(&s, u);
        let (r, next) = env.step(&s, a, t, rng);
        if t > burn_in {
            total += r;
        }
        s = next;
        if !s.iter().all(|x| x.abs() <= ESCAPE_BOUND) {
            return None;
        }
    }
    Some(total / (t_test - burn_in) as f64)
}

/// Mean and standard deviation across `n_test` trajectories of the average
/// reward after `burn_in` steps. An escaped trajectory is counted and
/// replaced by the next unused stream, up to `10 * n_test` replacements;
/// past that the mean is NaN.
pub fn mc_average_reward(env: &dyn Environment, policy: &PolicyParams, n_test: usize, t_test: usize, burn_in: usize, seed: u64) -> Result<McEstimate> {
    if t_test <= burn_in || n_test == 0 {
        return Err(OplError::Value("need n_test >= 1 and T_test > burn_in".into()));
    }
    let run = |stream: usize| average_after_burn_in(env, policy, t_test, burn_in, &mut stream_rng(seed, stream as u64));
    let mut values: Vec<f64> = par::map_indexed(n_test, run).into_iter().flatten().collect();
    let mut next = n_test;
    while values.len() < n_test && next - n_test < 10 * n_test {
        let batch = (n_test - values.len()).min(11 * n_test - next);
        values.extend(par::map_indexed(batch, |i| run(next + i)).into_iter().flatten());
        next += batch;
    }
    let escaped = next - values.len();
    let (mean, sd) = if values.len() == n_test { mean_sd(&values).unwrap_or((f64::NAN, f64::NAN)) } else { (f64::NAN, f64::NAN) };
    Ok(McEstimate { mean, sd, escaped })
}

/// Monte Carlo evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub n_test: usize,
    pub t_test: usize,
    pub burn_in: usize,
}

impl EvalProtocol {
    /// 100 trajectories of length 1000, no burn-in.
    pub const LONG_RUN: EvalProtocol = EvalProtocol { n_test: 100, t_test: 1000, burn_in: 0 };
    /// One trajectory of length 10000, the first 5000 steps discarded.
    pub const SINGLE_CHAIN: EvalProtocol = EvalProtocol { n_test: 1, t_test: 10_000, burn_in: 5_000 };
    /// 1000 trajectories of length 100, no burn-in.
    pub const SHORT_RUNS: EvalProtocol = EvalProtocol { n_test: 1000, t_test: 100, burn_in: 0 };

    pub fn run(&self, env: &dyn Environment, policy: &PolicyParams, seed: u64) -> Result<McEstimate> {
        mc_average_reward(env, policy, self.n_test, self.t_test, self.burn_in, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub protocol: EvalProtocol,
    pub n_starts: usize,
    pub max_iters: usize,
    /// Central-difference step on the common-random-numbers objective.
    pub fd_step: f64,
    /// Points per coordinate of the coarse grid screened before the local
    /// searches; the best `n_starts` grid points become extra starts.
    #[serde(default)]
    pub grid_points: usize,
    pub box_bound: f64,
    pub features: FeatureMap,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { protocol: EvalProtocol::LONG_RUN, n_starts: 5, max_iters: 50, fd_step: 0.05, grid_points: 5, box_bound: 10.0, features: FeatureMap::Intercept, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub theta_star: PolicyParams,
    /// Value at `theta_star` on the search streams.
    pub search_value: f64,
    /// Value at `theta_star` on fresh streams.
    pub eta_star: f64,
    pub starts: Vec<StartLog>,
}

/// Best in-class policy: coarse grid screen, then quasi-Newton refinement
/// on a common-random-numbers Monte Carlo objective.
pub fn oracle_search(env: &dyn Environment, cfg: &OracleConfig) -> Result<OracleResult> {
    oracle_search_on(env, cfg, mix(cfg.seed, 1))
}

/// `oracle_search` with explicit search streams, so the oracle can be
/// searched on the very chain its learned competitors are scored on.
pub fn oracle_search_on(env: &dyn Environment, cfg: &OracleConfig, search_seed: u64) -> Result<OracleResult> {
    let template = PolicyParams::zeros(env.state_dim(), cfg.box_bound, cfg.features);
    let p = template.dim();
    let c = cfg.box_bound;
    let value = |theta: &[f64]| -> Option<f64> {
        let v = cfg.protocol.run(env, &template.with_theta(theta), search_seed).ok()?.mean;
        v.is_finite().then_some(v)
    };
    let f = |theta: &[f64]| -> Option<(f64, Vec<f64>)> {
        let v = value(theta)?;
        let g = (0..p)
            .map(|k| {
                let mut up = theta.to_vec();
                let mut dn = theta.to_vec();
                up[k] = (theta[k] + cfg.fd_step).min(c);
                dn[k] = (theta[k] - cfg.fd_step).max(-c);
                Some((value(&up)? - value(&dn)?) / (up[k] - dn[k]))
            })
            .collect::<Option<Vec<f64>>>()?;
        Some((v, g))
    };
    let mut starts = start_points(cfg.n_starts, p, c, true, cfg.seed);
    starts.extend(best_grid_points(&value, p, c, cfg.grid_points, cfg.n_starts));
    let lcfg = LbfgsConfig { max_iters: cfg.max_iters, grad_tol: 1e-6, ftol: 1e-9, ..LbfgsConfig::default() };
    let (theta, search_value, logs) = maximize_multi_start(f, &starts, c, lcfg)?;
    let theta_star = template.with_theta(&theta);
    let eta_star = cfg.protocol.run(env, &theta_star, mix(cfg.seed, 2))?.mean;
    Ok(OracleResult { theta_star, search_value, eta_star, starts: logs })
}

fn best_grid_points<V>(value: &V, dim: usize, bound: f64, points: usize, keep: usize) -> Vec<Vec<f64>>
where
    V: Fn(&[f64]) -> Option<f64> + Sync,
{
    if points < 2 || keep == 0 {
        return Vec::new();
    }
    let total = points.pow(dim as u32);
    let node = |i: usize| -bound + 2.0 * bound * i as f64 / (points - 1) as f64;
    let mut scored: Vec<(f64, Vec<f64>)> = par::map_indexed(total, |mut idx| {
        let theta: Vec<f64> = (0..dim)
            .map(|_| {
                let x = node(idx % points);
                idx /= points;
                x
            })
            .collect();
        value(&theta).map(|v| (v, theta))
    })
    .into_iter()
    .flatten()
    .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.into_iter().take(keep).map(|(_, t)| t).collect()
}

/// How the penalties are chosen in each replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TuningMode {
    CrossValidated { grid: TuningGrid },
    Fixed { tunings: Tunings },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub n: usize,
    pub horizon: usize,
    pub n_reps: usize,
    /// Protocol for the reported learned-policy value.
    pub eval: EvalProtocol,
    /// Protocol for regrets; the oracle and every learned policy share streams.
    pub regret_eval: Option<EvalProtocol>,
    pub optimizer: OptimizeConfig,
    pub tuning: TuningMode,
    pub oracle: Option<OracleConfig>,
    pub seed_root: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRow {
    pub env: String,
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub rep: usize,
    pub learned_value: Option<f64>,
    pub oracle_value: Option<f64>,
    pub regret: Option<f64>,
    /// Test trajectories replaced in `learned_value` after escaping.
    #[serde(default)]
    pub escaped: usize,
    pub seed: u64,
    #[serde(skip)]
    pub theta: Option<Vec<f64>>,
    #[serde(skip)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<RepRow>,
    pub oracle: Option<OracleResult>,
}

fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    Some((mean, sd))
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    /// Escaped test trajectories summed over replications.
    pub fn escaped(&self) -> usize {
        self.rows.iter().map(|r| r.escaped).sum()
    }

    /// Mean and sd of the learned values over successful replications.
    pub fn value_summary(&self) -> Option<(f64, f64)> {
        mean_sd(&self.rows.iter().filter_map(|r| r.learned_value).collect::<Vec<_>>())
    }

    pub fn regret_summary(&self) -> Option<(f64, f64)> {
        mean_sd(&self.rows.iter().filter_map(|r| r.regret).collect::<Vec<_>>())
    }
}

/// Learns a policy from one simulated dataset: tuning, then optimisation.
pub fn learn_policy(data: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<PolicyParams> {
    let tuples = flatten(data);
    let kernel = KernelConfig::from_tuples(&tuples)?;
    let template = PolicyParams::zeros(data.state_dim(), cfg.optimizer.box_bound, cfg.optimizer.features);
    let tunings = match &cfg.tuning {
        TuningMode::CrossValidated { grid } => cv_select(data, grid, &kernel, seed, &template)?.tunings(),
        TuningMode::Fixed { tunings } => *tunings,
    };
    let opt = OptimizeConfig { tuning_value: tunings.value, tuning_ratio: tunings.ratio, seed, ..cfg.optimizer.clone() };
    Ok(optimize(data, &opt, &kernel)?.theta_hat)
}

fn finite_value(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(OplError::Numerical("policy value is not finite: too many test trajectories escaped".into()))
    }
}

/// Runs every replication: simulate, tune, optimise, evaluate. Failed
/// replications are recorded in their row and do not stop the batch.
pub fn replicate_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let env = cfg.env.build();
    let env = env.as_ref();
    let regret_seed = mix(cfg.seed_root, 0xEE);
    let oracle = match (&cfg.oracle, &cfg.regret_eval) {
        (Some(oc), Some(p)) => Some(oracle_search_on(env, &OracleConfig { protocol: *p, ..oc.clone() }, regret_seed)?),
        (Some(oc), None) => Some(oracle_search(env, oc)?),
        _ => None,
    };
    let oracle_regret_value = match (&oracle, &cfg.regret_eval) {
        (Some(o), Some(_)) => Some(finite_value(o.search_value)?),
        _ => None,
    };
    let rows = par::map_indexed(cfg.n_reps, |rep| {
        let seed = mix(cfg.seed_root, rep as u64);
        let mut row = RepRow {
            env: cfg.env.name().to_string(),
            n: cfg.n,
            horizon: cfg.horizon,
            rep,
            learned_value: None,
            oracle_value: oracle_regret_value.or(oracle.as_ref().map(|o| o.eta_star)),
            regret: None,
            escaped: 0,
            seed,
            theta: None,
            error: None,
        };
        let outcome = (|| -> Result<()> {
            let data = simulate(env, Actor::Behavior, cfg.n, cfg.horizon, seed)?;
            let policy = learn_policy(&data, cfg, seed)?;
            row.theta = Some(policy.theta.clone());
            let est = cfg.eval.run(env, &policy, mix(seed, 0xEF))?;
            row.escaped = est.escaped;
            row.learned_value = Some(finite_value(est.mean)?);
            if let (Some(p), Some(ov)) = (&cfg.regret_eval, oracle_regret_value) {
                row.regret = Some(ov - finite_value(p.run(env, &policy, regret_seed)?.mean)?);
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            row.error = Some(e.to_string());
        }
        row
    });
    Ok(ExperimentReport { rows, oracle })
}

/// Writes replication rows as CSV
/// (`env,n,T,rep,learned_value,oracle_value,regret,seed`).
pub fn write_rows_csv(rows: &[RepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| OplError::Io(e.into()))?;
    for row in rows {
        w.serialize(row).map_err(|e| OplError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// One line of a Markdown summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryLine {
    pub label: String,
    pub n: usize,
    pub horizon: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub reference: Option<String>,
    pub failures: usize,
}

/// Markdown table with mean (sd) and a reference column.
pub fn markdown_table(title: &str, metric: &str, lines: &[SummaryLine]) -> String {
    let mut out = format!("### {title}\n\n| setting | n | T | {metric} | reference | failed reps |\n|---|---|---|---|---|---|\n");
    for l in lines {
        let cell = match (l.mean, l.sd) {
            (Some(m), Some(s)) => format!("{m:.3} ({s:.3})"),
            _ => "n/a".to_string(),
        };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            l.label,
            l.n,
            l.horizon,
            cell,
            l.reference.as_deref().unwrap_or("-"),
            l.failures
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ConstantEnv;

    impl Environment for ConstantEnv {
        fn state_dim(&self) -> usize {
            1
        }
        fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
            vec![normal(rng)]
        }
        fn step(&self, s: &[f64], _a: u8, _t: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
            (4.25, vec![0.5 * s[0] + normal(rng)])
        }
    }

    #[test]
    fn dynamics_constants_are_pinned() {
        let d = SCENARIO_DYNAMICS;
        assert_eq!(
            [d.s1_ar, d.s1_noise, d.s2_ar, d.s2_action, d.s2_noise, d.s3_ar, d.s3_state_action, d.s3_action, d.s3_noise],
            [0.5, 2.0, 0.25, 0.125, 2.0, 0.9, 0.05, 0.5, 1.0]
        );
        let r = SCENARIO1_REWARD;
        assert_eq!([r.base, r.burden, r.effect, r.c0, r.c1, r.c2, r.noise, r.decay], [10.0, 0.4, 0.25, 0.04, 0.02, 0.02, 0.16, 0.0]);
        let r = SCENARIO2_REWARD;
        assert_eq!([r.base, r.burden, r.effect, r.c0, r.c1, r.c2, r.noise, r.decay], [10.0, 0.4, 0.25, 0.04, 0.02, 0.02, 0.0, 0.05]);
        let v = VLearningEnv::default();
        assert_eq!([v.gain, v.cross, v.noise_sd, v.reward_s1, v.reward_s2, v.action_cost], [0.75, 0.25, 0.5, 2.0, 1.0, 0.25]);
    }

    #[test]
    fn scenario_two_decay_follows_time() {
        let env = Scenario::two();
        let s = [1.0, 1.0, 2.0];
        // Same noise draws for both calls; the noise does not enter this reward.
        let (r1, _) = env.step(&s, 0, 1, &mut stream_rng(1, 0));
        let (r3, _) = env.step(&s, 0, 3, &mut stream_rng(1, 0));
        assert!((r1 - (10.0 - 0.4 * 2.0)).abs() < 1e-12);
        assert!((r3 - (10.0 - 0.4 * (-0.1f64).exp() * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn vlearning_reward_uses_next_state() {
        let env = VLearningEnv::default();
        let s = [0.4, -0.2];
        let (r, next) = env.step(&s, 1, 1, &mut stream_rng(2, 0));
        assert!((r - (2.0 * next[0] + next[1] - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn constant_reward_has_zero_spread() {
        let p = PolicyParams::zeros(1, 10.0, FeatureMap::Intercept);
        let est = mc_average_reward(&ConstantEnv, &p, 7, 30, 5, 3).unwrap();
        assert_eq!(est.mean, 4.25);
        assert_eq!(est.sd, 0.0);
    }

    #[test]
    fn burn_in_is_equivalent_to_discarding_steps() {
        let env = Scenario::one();
        let p = PolicyParams::new(vec![0.2, -0.3, 0.1, 0.4], 10.0, FeatureMap::Intercept).unwrap();
        let est = mc_average_reward(&env, &p, 3, 40, 15, 8).unwrap();
        let manual: Vec<f64> = (0..3)
            .map(|i| {
                let tr = simulate_trajectory(&env, Actor::Policy(&p), 40, &mut stream_rng(8, i));
                tr.rewards[15..].iter().sum::<f64>() / 25.0
            })
            .collect();
        assert!((est.mean - manual.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn simulation_is_seeded() {
        let env = Scenario::one();
        let a = simulate(&env, Actor::Behavior, 3, 5, 7).unwrap();
        assert_eq!(a, simulate(&env, Actor::Behavior, 3, 5, 7).unwrap());
        assert_ne!(a, simulate(&env, Actor::Behavior, 3, 5, 8).unwrap());
    }

    #[test]
    fn env_spec_json_round_trip() {
        for name in ["scenario1", "scenario2", "vlearning", "tabular"] {
            let spec = EnvSpec::parse(name).unwrap();
            let text = serde_json::to_string(&spec).unwrap();
            assert_eq!(serde_json::from_str::<EnvSpec>(&text).unwrap(), spec);
            assert_eq!(spec.name(), name);
        }
        assert!(EnvSpec::parse("nope").is_none());
    }

    #[test]
    fn markdown_has_one_row_per_line() {
        let lines = vec![SummaryLine { label: "a".into(), n: 1, horizon: 2, mean: Some(1.0), sd: Some(0.1), reference: None, failures: 0 }];
        let md = markdown_table("t", "value", &lines);
        assert!(md.contains("| a | 1 | 2 | 1.000 (0.100) | - | 0 |"));
    }
}
