//! Trajectory data model: ingestion, validation and flattening into
//! transition tuples.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OplError, Result};

/// One observed trajectory `S_1, A_1, R_2, S_2, ..., A_T, R_{T+1}, S_{T+1}`.
///
/// `rewards[t]` is the reward realised after taking `actions[t]` in
/// `states[t]`, so all three sequences are indexed by decision time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<u8>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

/// `n` trajectories sharing horizon `T` and state dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    horizon: usize,
    state_dim: usize,
}

impl Dataset {
    /// Checks shapes and the action domain.
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| OplError::Shape("dataset needs at least one trajectory".into()))?;
        let horizon = first.actions.len();
        let state_dim = first.state_dim();
        if horizon == 0 {
            return Err(OplError::Shape("trajectory horizon must be positive".into()));
        }
        if state_dim == 0 {
            return Err(OplError::Shape("state dimension must be positive".into()));
        }
        for (i, tr) in trajectories.iter().enumerate() {
            if tr.actions.len() != horizon || tr.rewards.len() != horizon || tr.states.len() != horizon + 1 {
                return Err(OplError::Shape(format!(
                    "trajectory {i}: expected {} states, {horizon} actions, {horizon} rewards; got {}, {}, {}",
                    horizon + 1,
                    tr.states.len(),
                    tr.actions.len(),
                    tr.rewards.len()
                )));
            }
            if let Some(t) = tr.states.iter().position(|s| s.len() != state_dim) {
                return Err(OplError::Shape(format!(
                    "trajectory {i}, time {t}: state has dimension {}, expected {state_dim}",
                    tr.states[t].len()
                )));
            }
            if let Some(t) = tr.actions.iter().position(|&a| a > 1) {
                return Err(OplError::Value(format!(
                    "trajectory {i}, time {t}: action {} is not binary",
                    tr.actions[t]
                )));
            }
        }
        Ok(Self { trajectories, horizon, state_dim })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories
    }

    pub fn n(&self) -> usize {
        self.trajectories.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Sub-dataset made of the given trajectory indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.trajectories[i].clone()).collect())
    }

    /// Errors with `Value` if any state or reward is NaN or infinite.
    pub fn ensure_finite(&self) -> Result<()> {
        let report = validate(self, f64::INFINITY);
        match report.violations.iter().find(|v| matches!(v.kind, ViolationKind::NonFinite)) {
            Some(v) => Err(OplError::Value(format!(
                "non-finite entry in trajectory {}, time {}: {}",
                v.trajectory, v.time, v.detail
            ))),
            None => Ok(()),
        }
    }
}

/// Reads a JSON-lines file, one trajectory per line.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut trajectories = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        trajectories.push(parse_line(&line, lineno + 1)?);
    }
    Dataset::new(trajectories)
}

#[derive(Deserialize)]
struct RawTrajectory {
    states: Vec<Vec<f64>>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
}

fn parse_line(line: &str, lineno: usize) -> Result<Trajectory> {
    let raw: RawTrajectory =
        serde_json::from_str(line).map_err(|e| OplError::Parse { line: lineno, msg: e.to_string() })?;
    let actions = raw
        .actions
        .iter()
        .enumerate()
        .map(|(t, &a)| {
            if a == 0.0 {
                Ok(0)
            } else if a == 1.0 {
                Ok(1)
            } else {
                Err(OplError::Value(format!("line {lineno}, time {t}: action {a} is not binary")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(Trajectory { states: raw.states, actions, rewards: raw.rewards })
}

/// Writes a dataset as JSON lines with keys `states`, `actions`, `rewards`.
pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for tr in dataset.trajectories() {
        serde_json::to_writer(&mut w, tr)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    RewardBound,
    ActionDomain,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub trajectory: usize,
    pub time: usize,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists reward-bound, action-domain and non-finite violations. Never fails.
pub fn validate(dataset: &Dataset, r_max: f64) -> ValidationReport {
    let mut violations = Vec::new();
    for (i, tr) in dataset.trajectories().iter().enumerate() {
        for (t, s) in tr.states.iter().enumerate() {
            if let Some(j) = s.iter().position(|x| !x.is_finite()) {
                violations.push(Violation {
                    trajectory: i,
                    time: t,
                    kind: ViolationKind::NonFinite,
                    detail: format!("state[{j}] = {}", s[j]),
                });
            }
        }
        for (t, &r) in tr.rewards.iter().enumerate() {
            if !r.is_finite() {
                violations.push(Violation {
                    trajectory: i,
                    time: t,
                    kind: ViolationKind::NonFinite,
                    detail: format!("reward = {r}"),
                });
            } else if r.abs() > r_max {
                violations.push(Violation {
                    trajectory: i,
                    time: t,
                    kind: ViolationKind::RewardBound,
                    detail: format!("|{r}| > {r_max}"),
                });
            }
        }
        for (t, &a) in tr.actions.iter().enumerate() {
            if a > 1 {
                violations.push(Violation {
                    trajectory: i,
                    time: t,
                    kind: ViolationKind::ActionDomain,
                    detail: format!("action = {a}"),
                });
            }
        }
    }
    ValidationReport { violations }
}

/// Flattened transitions `Z_h = (S_h, A_h, R_h, S'_h)`, `h = i * T + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleTable {
    states: Vec<f64>,
    next_states: Vec<f64>,
    actions: Vec<u8>,
    rewards: Vec<f64>,
    owner: Vec<usize>,
    n: usize,
    horizon: usize,
    state_dim: usize,
}

impl TupleTable {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn n_trajectories(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn state(&self, h: usize) -> &[f64] {
        &self.states[h * self.state_dim..(h + 1) * self.state_dim]
    }

    pub fn next_state(&self, h: usize) -> &[f64] {
        &self.next_states[h * self.state_dim..(h + 1) * self.state_dim]
    }

    pub fn action(&self, h: usize) -> u8 {
        self.actions[h]
    }

    pub fn actions(&self) -> &[u8] {
        &self.actions
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Index of the trajectory tuple `h` came from.
    pub fn owner(&self, h: usize) -> usize {
        self.owner[h]
    }

    pub fn owners(&self) -> &[usize] {
        &self.owner
    }

    /// Decision time (0-based) of tuple `h` within its trajectory.
    pub fn time(&self, h: usize) -> usize {
        h % self.horizon
    }

    /// Inverse of [`flatten`].
    pub fn regroup(&self) -> Vec<Trajectory> {
        (0..self.n)
            .map(|i| {
                let base = i * self.horizon;
                let mut states: Vec<Vec<f64>> = (0..self.horizon).map(|t| self.state(base + t).to_vec()).collect();
                states.push(self.next_state(base + self.horizon - 1).to_vec());
                Trajectory {
                    states,
                    actions: self.actions[base..base + self.horizon].to_vec(),
                    rewards: self.rewards[base..base + self.horizon].to_vec(),
                }
            })
            .collect()
    }

    /// Per-trajectory averages `(1/T) sum_t v_h` of a per-tuple vector.
    pub fn trajectory_means(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.len());
        v.chunks(self.horizon).map(|c| c.iter().sum::<f64>() / self.horizon as f64).collect()
    }
}

/// Flattens trajectories in trajectory-major, time-major order.
pub fn flatten(dataset: &Dataset) -> TupleTable {
    let (n, horizon, d) = (dataset.n(), dataset.horizon(), dataset.state_dim());
    let big_n = n * horizon;
    let mut states = Vec::with_capacity(big_n * d);
    let mut next_states = Vec::with_capacity(big_n * d);
    let mut actions = Vec::with_capacity(big_n);
    let mut rewards = Vec::with_capacity(big_n);
    let mut owner = Vec::with_capacity(big_n);
    for (i, tr) in dataset.trajectories().iter().enumerate() {
        for t in 0..horizon {
            states.extend_from_slice(&tr.states[t]);
            next_states.extend_from_slice(&tr.states[t + 1]);
            actions.push(tr.actions[t]);
            rewards.push(tr.rewards[t]);
            owner.push(i);
        }
    }
    TupleTable { states, next_states, actions, rewards, owner, n, horizon, state_dim: d }
}
