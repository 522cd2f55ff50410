//! Cross-validated choice of the penalty pairs.
//!
//! For every candidate policy, fold and grid entry the nuisances are fitted
//! on the training folds; the held-out temporal-difference residuals (value
//! fit) and auxiliary residuals (ratio fit) are projected onto the
//! state-action space by kernel ridge regression, and the mean squared
//! projection is summed over folds. Each grid is then chosen by
//! `argmin_j max_m e(m, j)`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisConfig, TupleFeatures};
use crate::data::{flatten, Dataset, TupleTable};
use crate::error::{OplError, Result};
use crate::kernel::KernelConfig;
use crate::linalg;
use crate::nuisance::{solve_ratio_raw, solve_value, FitContext, Penalty, TuningPair, Tunings};
use crate::par;
use crate::policy::{FeatureMap, PolicyParams};
use crate::seed::stream_rng;

/// Ridge of the validation projection, per tuple.
pub const PROJECTION_RIDGE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub value_grid: Vec<TuningPair>,
    pub ratio_grid: Vec<TuningPair>,
    pub n_candidates: usize,
    pub n_folds: usize,
}

impl Default for TuningGrid {
    fn default() -> Self {
        let grid: Vec<TuningPair> = [1e-4, 1e-3, 1e-2, 1e-1].iter().map(|&v| TuningPair { lambda: v, mu: v }).collect();
        Self { value_grid: grid.clone(), ratio_grid: grid, n_candidates: 10, n_folds: 3 }
    }
}

impl TuningGrid {
    fn validate(&self) -> Result<()> {
        if self.value_grid.is_empty() || self.ratio_grid.is_empty() {
            return Err(OplError::Value("tuning grids must be non-empty".into()));
        }
        if self.n_candidates == 0 || self.n_folds < 2 {
            return Err(OplError::Value("need at least one candidate policy and two folds".into()));
        }
        self.value_grid.iter().chain(&self.ratio_grid).try_for_each(TuningPair::check)
    }
}

/// Grid sorted by `lambda`, then `mu`.
pub fn canonical_grid(grid: &[TuningPair]) -> Vec<TuningPair> {
    let mut g = grid.to_vec();
    g.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then(a.mu.total_cmp(&b.mu)));
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub chosen_value: TuningPair,
    pub chosen_ratio: TuningPair,
    /// `M x J`, columns follow `value_grid`.
    pub error_table_value: Vec<Vec<f64>>,
    /// `M x J`, columns follow `ratio_grid`.
    pub error_table_ratio: Vec<Vec<f64>>,
    pub value_grid: Vec<TuningPair>,
    pub ratio_grid: Vec<TuningPair>,
    pub candidates: Vec<Vec<f64>>,
    pub folds: Vec<Vec<usize>>,
}

impl CvResult {
    pub fn tunings(&self) -> Tunings {
        Tunings { value: self.chosen_value, ratio: self.chosen_ratio }
    }
}

/// `m` parameter vectors uniform on `[-c, c]^p`.
pub fn sample_candidate_policies(m: usize, p: usize, c: f64, seed: u64, features: FeatureMap) -> Vec<PolicyParams> {
    let mut rng = stream_rng(seed, 0x4341_4e44);
    (0..m)
        .map(|_| PolicyParams { theta: (0..p).map(|_| rng.random_range(-c..=c)).collect(), box_bound: c, features })
        .collect()
}

/// Random partition of `0..n` into `k` folds of near-equal size.
pub fn trajectory_folds(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, 0x464f_4c44));
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

/// Index of `argmin_j max_m table[m][j]`; ties go to the smallest `j`, NaN counts as `+inf`.
pub fn argmin_max(table: &[Vec<f64>]) -> usize {
    let j_count = table.first().map_or(0, Vec::len);
    let worst = |j: usize| {
        table.iter().map(|row| if row[j].is_nan() { f64::INFINITY } else { row[j] }).fold(f64::NEG_INFINITY, f64::max)
    };
    let mut best = 0;
    let mut best_val = worst(0);
    for j in 1..j_count {
        let v = worst(j);
        if v < best_val {
            best = j;
            best_val = v;
        }
    }
    best
}

/// Mean squared kernel-ridge projection of `residuals` on the tuples of `ctx`.
pub fn projected_mse(ctx: &FitContext, ridge: &Penalty, residuals: &[f64]) -> f64 {
    // L (L + rho)^{-1} r = r - rho (L + rho)^{-1} r
    let solved = ctx.l_mu_solve(ridge, residuals);
    let fitted: Vec<f64> = residuals.iter().zip(&solved).map(|(r, s)| r - ridge.mu() * s).collect();
    linalg::dot(&fitted, &fitted) / fitted.len() as f64
}

/// Mean squared projection of `residuals` onto the state-action space of the
/// validation tuples, with ridge `1e-3 * N_val`.
pub fn projected_bellman_mse(validation: &TupleTable, residuals: &[f64], cfg: &KernelConfig) -> Result<f64> {
    if residuals.len() != validation.len() {
        return Err(OplError::Shape("one residual per validation tuple is required".into()));
    }
    let ctx = FitContext::new(TupleFeatures::build(cfg, validation, BasisConfig::default())?)?;
    Ok(projected_mse(&ctx, &ctx.penalty(PROJECTION_RIDGE), residuals))
}

struct FoldData {
    train: FitContext,
    val: FitContext,
    val_ridge: Penalty,
    penalties: Vec<Penalty>,
}

/// Runs the cross-validation and picks one pair per grid.
pub fn cv_select(dataset: &Dataset, grid: &TuningGrid, kernel: &KernelConfig, seed: u64, template: &PolicyParams) -> Result<CvResult> {
    grid.validate()?;
    let value_grid = canonical_grid(&grid.value_grid);
    let ratio_grid = canonical_grid(&grid.ratio_grid);
    let folds = trajectory_folds(dataset.n(), grid.n_folds, seed);
    if let Some((k, f)) = folds.iter().enumerate().find(|(_, f)| f.len() < 2) {
        return Err(OplError::FoldTooSmall { fold: k, size: f.len() });
    }
    let candidates = sample_candidate_policies(grid.n_candidates, template.dim(), template.box_bound, seed, template.features);
    let tuples = flatten(dataset);
    let feats = TupleFeatures::build(kernel, &tuples, BasisConfig::default())?;

    // Distinct pairs across both grids share one solver per (candidate, fold).
    let mut pairs: Vec<TuningPair> = Vec::new();
    for p in value_grid.iter().chain(&ratio_grid) {
        if !pairs.contains(p) {
            pairs.push(*p);
        }
    }
    let mut mus: Vec<f64> = Vec::new();
    for p in &pairs {
        if !mus.contains(&p.mu) {
            mus.push(p.mu);
        }
    }

    let fold_data: Vec<FoldData> = par::map_indexed(folds.len(), |k| -> Result<FoldData> {
        let train_idx: Vec<usize> = folds.iter().enumerate().filter(|(j, _)| *j != k).flat_map(|(_, f)| f.iter().copied()).collect();
        let train = FitContext::new(feats.select_trajectories(&train_idx))?;
        let val = FitContext::new(feats.select_trajectories(&folds[k]))?;
        let val_ridge = val.penalty(PROJECTION_RIDGE);
        let penalties = mus.iter().map(|&mu| train.penalty(mu)).collect();
        Ok(FoldData { train, val, val_ridge, penalties })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..candidates.len()).flat_map(|m| (0..folds.len()).map(move |k| (m, k))).collect();
    let results = par::map_slice(&jobs, |&(m, k)| {
        let fd = &fold_data[k];
        let policy = &candidates[m];
        let (p1_tr, _) = fd.train.policy_probs(policy);
        let (p1_val, _) = fd.val.policy_probs(policy);
        let terms = fd.train.terms(p1_tr);
        let val_terms = fd.val.light_terms(p1_val);
        let val_rewards = &fd.val.features().rewards;
        let per_pair: Vec<(f64, f64)> = pairs
            .iter()
            .map(|pair| {
                let pen = &fd.penalties[mus.iter().position(|&mu| mu == pair.mu).expect("mu registered")];
                let Ok(solver) = fd.train.b_solver(&terms, pen, pair.lambda) else {
                    return (f64::INFINITY, f64::INFINITY);
                };
                let value_err = match solve_value(&fd.train, &terms, &solver) {
                    Ok(v) => {
                        let q = fd.train.sections_from_coef(&terms, &v.z_alpha);
                        let inner = fd.val.sections_inner(&val_terms, &q);
                        let td: Vec<f64> = val_rewards.iter().zip(&inner).map(|(r, qi)| r - qi - v.eta).collect();
                        projected_mse(&fd.val, &fd.val_ridge, &td)
                    }
                    Err(_) => f64::INFINITY,
                };
                let ratio_err = match solve_ratio_raw(&fd.train, &terms, &solver, pen) {
                    Ok(r) => {
                        let h = fd.train.sections_from_coef(&terms, &r.z_phi);
                        let inner = fd.val.sections_inner(&val_terms, &h);
                        let g = fd.val.cross_l_apply(&fd.train, &r.nu);
                        let eps: Vec<f64> = inner.iter().zip(&g).map(|(hi, gi)| 1.0 - hi - gi).collect();
                        projected_mse(&fd.val, &fd.val_ridge, &eps)
                    }
                    Err(_) => f64::INFINITY,
                };
                (value_err, ratio_err)
            })
            .collect();
        per_pair
    });

    let mut table_v = vec![vec![0.0; value_grid.len()]; candidates.len()];
    let mut table_r = vec![vec![0.0; ratio_grid.len()]; candidates.len()];
    for (&(m, _), per_pair) in jobs.iter().zip(&results) {
        for (j, pair) in value_grid.iter().enumerate() {
            table_v[m][j] += per_pair[pairs.iter().position(|p| p == pair).expect("pair registered")].0;
        }
        for (j, pair) in ratio_grid.iter().enumerate() {
            table_r[m][j] += per_pair[pairs.iter().position(|p| p == pair).expect("pair registered")].1;
        }
    }
    let chosen_value = value_grid[argmin_max(&table_v)];
    let chosen_ratio = ratio_grid[argmin_max(&table_r)];
    Ok(CvResult {
        chosen_value,
        chosen_ratio,
        error_table_value: table_v,
        error_table_ratio: table_r,
        value_grid,
        ratio_grid,
        candidates: candidates.into_iter().map(|c| c.theta).collect(),
        folds,
    })
}
