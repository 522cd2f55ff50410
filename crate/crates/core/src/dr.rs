//! Doubly robust average-reward estimate and its influence function.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Trajectory, TupleTable};
use crate::error::{OplError, Result};
use crate::policy::PolicyParams;
use crate::tabular::{self, state_index, TabularMdp, TabularPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrEstimate {
    pub eta_hat: f64,
    pub numerator: f64,
    pub denominator: f64,
    /// Influence-function value of each trajectory at `eta_hat`.
    pub eif_per_trajectory: Option<Vec<f64>>,
}

impl DrEstimate {
    /// Sample variance of the influence values divided by `n`.
    pub fn variance(&self) -> Option<f64> {
        let eif = self.eif_per_trajectory.as_ref()?;
        let n = eif.len();
        if n < 2 {
            return None;
        }
        let mean = eif.iter().sum::<f64>() / n as f64;
        let var = eif.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Some(var / n as f64)
    }

    pub fn std_error(&self) -> Option<f64> {
        self.variance().map(f64::sqrt)
    }
}

/// `eta = P_n[(1/T) sum_t w (R + U)] / P_n[(1/T) sum_t w]` from per-tuple
/// vectors laid out trajectory-major with the given horizon.
pub fn dr_from_parts(omega: &[f64], u: &[f64], r: &[f64], horizon: usize) -> Result<DrEstimate> {
    let n_tuples = omega.len();
    if u.len() != n_tuples || r.len() != n_tuples || horizon == 0 || !n_tuples.is_multiple_of(horizon) {
        return Err(OplError::Shape("omega, U and R must share one trajectory-major layout".into()));
    }
    let n = n_tuples / horizon;
    let mut num_i = Vec::with_capacity(n);
    let mut den_i = Vec::with_capacity(n);
    for i in 0..n {
        let rows = i * horizon..(i + 1) * horizon;
        num_i.push(rows.clone().map(|h| omega[h] * (r[h] + u[h])).sum::<f64>() / horizon as f64);
        den_i.push(rows.map(|h| omega[h]).sum::<f64>() / horizon as f64);
    }
    let numerator = num_i.iter().sum::<f64>() / n as f64;
    let denominator = den_i.iter().sum::<f64>() / n as f64;
    if denominator == 0.0 || !denominator.is_finite() {
        return Err(OplError::ZeroDenominator);
    }
    let eta_hat = numerator / denominator;
    let eif = num_i.iter().zip(&den_i).map(|(a, b)| a - eta_hat * b).collect();
    Ok(DrEstimate { eta_hat, numerator, denominator, eif_per_trajectory: Some(eif) })
}

/// Doubly robust estimate over a flattened tuple table.
pub fn dr_average_reward(omega: &[f64], u: &[f64], r: &[f64], grouping: &TupleTable) -> Result<DrEstimate> {
    if omega.len() != grouping.len() {
        return Err(OplError::Shape(format!("expected {} tuples, got {}", grouping.len(), omega.len())));
    }
    dr_from_parts(omega, u, r, grouping.horizon())
}

/// `(1/T) sum_t w(S_t,A_t) {R_{t+1} + sum_a' pi(a'|S_{t+1}) Q(S_{t+1},a') - Q(S_t,A_t) - eta}`.
pub fn eif_value<W, Q>(trajectory: &Trajectory, omega: W, q: Q, eta: f64, policy: &PolicyParams) -> f64
where
    W: Fn(&[f64], u8) -> f64,
    Q: Fn(&[f64], u8) -> f64,
{
    let t_len = trajectory.horizon();
    (0..t_len)
        .map(|t| {
            let (s, a, sp) = (&trajectory.states[t], trajectory.actions[t], &trajectory.states[t + 1]);
            let p1 = policy.prob_one(sp);
            let u = (1.0 - p1) * q(sp, 0) + p1 * q(sp, 1) - q(s, a);
            omega(s, a) * (trajectory.rewards[t] + u - eta)
        })
        .sum::<f64>()
        / t_len as f64
}

/// Which nuisance the probe replaces by a fixed wrong table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// Both nuisances exact.
    None,
    /// `omega = 1`, exact `U`.
    WrongOmega,
    /// `U = 0`, exact `omega`.
    WrongU,
    /// `omega = 1` and `U = 0`.
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRow {
    pub n: usize,
    pub seed: u64,
    pub corruption: Corruption,
    pub eta_hat: f64,
    pub eta_true: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    pub band: f64,
    /// Whether the error at the largest `n` is below `band`.
    pub passed: bool,
}

/// Settings for [`double_robustness_probe`].
#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub horizon: usize,
    pub seed: u64,
    pub band: f64,
}

/// Simulates behaviour data on `mdp` for each `n` and evaluates `pi` with one
/// exact and one corrupted nuisance.
pub fn double_robustness_probe(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    n_grid: &[usize],
    corruption: Corruption,
    cfg: ProbeConfig,
) -> Result<ProbeReport> {
    let (eta_true, q) = tabular::bellman_solution(mdp, pi, (0, 0))?;
    let omega_true = tabular::ratio_exact(mdp, pi, cfg.horizon)?;
    let mut rows = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let ds = mdp.simulate(n, cfg.horizon, cfg.seed)?;
        let tuples = crate::data::flatten(&ds);
        let mut omega = Vec::with_capacity(tuples.len());
        let mut u = Vec::with_capacity(tuples.len());
        for h in 0..tuples.len() {
            let s = state_index(tuples.state(h));
            let a = usize::from(tuples.action(h));
            let sp = state_index(tuples.next_state(h));
            let keep_omega = matches!(corruption, Corruption::None | Corruption::WrongU);
            let keep_u = matches!(corruption, Corruption::None | Corruption::WrongOmega);
            omega.push(if keep_omega { omega_true[s][a] } else { 1.0 });
            u.push(if keep_u { tabular::u_value(pi, &q, s, a, sp) } else { 0.0 });
        }
        let est = dr_average_reward(&omega, &u, tuples.rewards(), &tuples)?;
        rows.push(ProbeRow {
            n,
            seed: cfg.seed,
            corruption,
            eta_hat: est.eta_hat,
            eta_true,
            abs_error: (est.eta_hat - eta_true).abs(),
        });
    }
    let passed = rows.last().is_some_and(|r| r.abs_error < cfg.band);
    Ok(ProbeReport { rows, band: cfg.band, passed })
}

/// Writes probe rows as CSV.
pub fn write_probe_csv(report: &ProbeReport, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| OplError::Io(e.into()))?;
    for row in &report.rows {
        w.serialize(row).map_err(|e| OplError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::FeatureMap;

    #[test]
    fn constant_reward_unit_weights() {
        let r = vec![3.0; 6];
        let est = dr_from_parts(&[1.0; 6], &[0.0; 6], &r, 3).unwrap();
        assert_eq!(est.eta_hat, 3.0);
        assert!(est.eif_per_trajectory.unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_denominator_is_an_error() {
        assert!(matches!(dr_from_parts(&[0.0; 4], &[0.0; 4], &[1.0; 4], 2), Err(OplError::ZeroDenominator)));
    }

    #[test]
    fn shifting_u_shifts_estimate_when_weights_average_to_one() {
        let omega = [0.5, 1.5, 1.2, 0.8];
        let u = [0.1, -0.2, 0.3, 0.0];
        let r = [1.0, 2.0, 0.5, 1.5];
        let a = dr_from_parts(&omega, &u, &r, 2).unwrap();
        let shifted: Vec<f64> = u.iter().map(|x| x + 2.5).collect();
        let b = dr_from_parts(&omega, &shifted, &r, 2).unwrap();
        assert!((b.eta_hat - a.eta_hat - 2.5).abs() < 1e-12);
    }

    #[test]
    fn eif_centres_on_trajectory_mean() {
        let tr = Trajectory { states: vec![vec![0.0], vec![1.0], vec![2.0]], actions: vec![0, 1], rewards: vec![1.0, 4.0] };
        let p = PolicyParams::zeros(1, 10.0, FeatureMap::Intercept);
        let v = eif_value(&tr, |_, _| 1.0, |_, _| 0.0, tr.mean_reward(), &p);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn eif_mean_is_zero_at_the_estimate() {
        let omega = [0.7, 1.3, 1.1, 0.9, 1.4, 0.6];
        let u = [0.2, -0.1, 0.0, 0.3, -0.4, 0.1];
        let r = [1.0, 2.0, 3.0, 1.0, 0.0, 2.0];
        let est = dr_from_parts(&omega, &u, &r, 2).unwrap();
        let eif = est.eif_per_trajectory.clone().unwrap();
        assert!((eif.iter().sum::<f64>() / 3.0).abs() < 1e-14);
        assert!(est.variance().unwrap() > 0.0);
    }

    #[test]
    fn probe_report_rows_follow_grid() {
        let m = TabularMdp::reference_four_state();
        let pi = TabularPolicy { probs: vec![vec![0.2, 0.8]; 4] };
        let cfg = ProbeConfig { horizon: 10, seed: 1, band: 10.0 };
        let rep = double_robustness_probe(&m, &pi, &[10, 20], Corruption::WrongU, cfg).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert!(rep.passed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.csv");
        write_probe_csv(&rep, &path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("n,seed,corruption,eta_hat,eta_true,abs_error"));
        assert_eq!(text.lines().count(), 3);
    }
}
