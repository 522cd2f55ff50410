//! The doubly robust objective over the logistic policy class, its
//! gradient, and multi-start box-constrained maximisation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisConfig, TupleFeatures};
use crate::data::{flatten, Dataset, TupleTable};
use crate::error::{OplError, Result};
use crate::kernel::KernelConfig;
use crate::lbfgs::{minimize_box, LbfgsConfig, StopReason};
use crate::nuisance::{Evaluation, Evaluator, FitContext, TuningPair, Tunings};
use crate::par;
use crate::policy::{FeatureMap, PolicyParams};
use crate::seed::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub n_starts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub tuning_value: TuningPair,
    pub tuning_ratio: TuningPair,
    pub use_analytic_gradient: bool,
    pub fd_step: f64,
    pub box_bound: f64,
    pub features: FeatureMap,
    /// Use `theta = 0` as the first start; the rest are uniform in the box.
    pub zero_start: bool,
    pub seed: u64,
    pub basis: BasisConfig,
    /// Compare the analytic gradient with finite differences at a seeded
    /// probe point.
    pub check_gradient: bool,
    pub gradient_check_tol: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        let pair = TuningPair { lambda: 1e-2, mu: 1e-2 };
        Self {
            n_starts: 5,
            max_iters: 100,
            grad_tol: 1e-6,
            tuning_value: pair,
            tuning_ratio: pair,
            use_analytic_gradient: true,
            fd_step: 1e-5,
            box_bound: 10.0,
            features: FeatureMap::Intercept,
            zero_start: true,
            seed: 0,
            basis: BasisConfig::default(),
            check_gradient: false,
            gradient_check_tol: 1e-4,
        }
    }
}

impl OptimizeConfig {
    pub fn tunings(&self) -> Tunings {
        Tunings { value: self.tuning_value, ratio: self.tuning_ratio }
    }

    fn validate(&self) -> Result<()> {
        if self.n_starts == 0 {
            return Err(OplError::Value("n_starts must be at least 1".into()));
        }
        if !(self.box_bound > 0.0) || !(self.fd_step > 0.0) {
            return Err(OplError::Value("box bound and fd step must be positive".into()));
        }
        self.tuning_value.check()?;
        self.tuning_ratio.check()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub theta: Vec<f64>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max_k |analytic_k - numeric_k| / max(|analytic|_inf, |numeric|_inf)`
    pub max_rel_err: f64,
}

/// Relative discrepancy between two gradient vectors, scaled by the larger sup-norm.
pub fn gradient_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0_f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// The doubly robust objective `theta -> eta_hat(pi_theta)` on one dataset.
pub struct PolicyObjective {
    evaluator: Evaluator,
    template: PolicyParams,
}

impl PolicyObjective {
    pub fn new(ctx: FitContext, tunings: Tunings, template: PolicyParams) -> Result<Self> {
        Ok(Self { evaluator: Evaluator::new(ctx, tunings)?, template })
    }

    pub fn from_tuples(tuples: &TupleTable, kernel: &KernelConfig, tunings: Tunings, template: PolicyParams, basis: BasisConfig) -> Result<Self> {
        let ctx = FitContext::new(TupleFeatures::build(kernel, tuples, basis)?)?;
        Self::new(ctx, tunings, template)
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }

    pub fn policy(&self, theta: &[f64]) -> PolicyParams {
        self.template.with_theta(theta)
    }

    pub fn dim(&self) -> usize {
        self.template.dim()
    }

    pub fn box_bound(&self) -> f64 {
        self.template.box_bound
    }

    fn undefined(e: OplError) -> OplError {
        match e {
            OplError::ObjectiveUndefined(_) => e,
            other => OplError::ObjectiveUndefined(other.to_string()),
        }
    }

    pub fn evaluate(&self, theta: &[f64], with_gradient: bool) -> Result<Evaluation> {
        self.evaluator.evaluate(&self.policy(theta), with_gradient).map_err(Self::undefined)
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        self.evaluate(theta, false).map(|e| e.objective)
    }

    pub fn analytic_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let e = self.evaluate(theta, true)?;
        Ok((e.objective, e.gradient.expect("gradient requested")))
    }

    /// Central finite differences. Within `step` of the box edge a
    /// second-order one-sided stencil pointing into the box is used instead.
    pub fn numeric_gradient(&self, theta: &[f64], step: f64) -> Result<Vec<f64>> {
        let c = self.box_bound();
        let at = |k: usize, x: f64| -> Result<f64> {
            let mut t = theta.to_vec();
            t[k] = x;
            self.value(&t)
        };
        (0..theta.len())
            .map(|k| {
                let x = theta[k];
                if x + step <= c && x - step >= -c {
                    return Ok((at(k, x + step)? - at(k, x - step)?) / (2.0 * step));
                }
                let h = if x + step > c { -step } else { step };
                Ok((-3.0 * at(k, x)? + 4.0 * at(k, x + h)? - at(k, x + 2.0 * h)?) / (2.0 * h))
            })
            .collect()
    }

    pub fn value_and_gradient(&self, theta: &[f64], analytic: bool, fd_step: f64) -> Result<(f64, Vec<f64>)> {
        if analytic {
            self.analytic_gradient(theta)
        } else {
            Ok((self.value(theta)?, self.numeric_gradient(theta, fd_step)?))
        }
    }

    pub fn check_gradient(&self, theta: &[f64], fd_step: f64) -> Result<GradientCheck> {
        let (_, analytic) = self.analytic_gradient(theta)?;
        let numeric = self.numeric_gradient(theta, fd_step)?;
        let max_rel_err = gradient_rel_error(&analytic, &numeric);
        Ok(GradientCheck { theta: theta.to_vec(), analytic, numeric, max_rel_err })
    }
}

/// Objective at one policy.
pub fn objective(policy: &PolicyParams, tuples: &TupleTable, kernel: &KernelConfig, tunings: Tunings) -> Result<f64> {
    PolicyObjective::from_tuples(tuples, kernel, tunings, policy.clone(), BasisConfig::default())?.value(&policy.theta)
}

/// Analytic gradient at one policy.
pub fn objective_gradient(policy: &PolicyParams, tuples: &TupleTable, kernel: &KernelConfig, tunings: Tunings) -> Result<Vec<f64>> {
    PolicyObjective::from_tuples(tuples, kernel, tunings, policy.clone(), BasisConfig::default())?
        .analytic_gradient(&policy.theta)
        .map(|(_, g)| g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartLog {
    pub start: Vec<f64>,
    pub theta: Option<Vec<f64>>,
    pub objective: Option<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub stop: Option<StopReason>,
    pub history: Vec<f64>,
    pub error: Option<String>,
}

/// Best point over several box-constrained maximisations of `f`.
///
/// `f` returns the value and gradient, or `None` where undefined.
pub fn maximize_multi_start<F>(f: F, starts: &[Vec<f64>], bound: f64, cfg: LbfgsConfig) -> Result<(Vec<f64>, f64, Vec<StartLog>)>
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)> + Sync,
{
    let logs: Vec<StartLog> = par::map_slice(starts, |x0| {
        let neg = |x: &[f64]| f(x).map(|(v, g)| (-v, g.into_iter().map(|gi| -gi).collect()));
        match minimize_box(neg, x0, -bound, bound, cfg) {
            Some(r) => StartLog {
                start: x0.clone(),
                theta: Some(r.x),
                objective: Some(-r.f),
                iterations: r.iterations,
                evaluations: r.evaluations,
                stop: Some(r.stop),
                history: r.history.into_iter().map(|v| -v).collect(),
                error: None,
            },
            None => StartLog {
                start: x0.clone(),
                theta: None,
                objective: None,
                iterations: 0,
                evaluations: 1,
                stop: None,
                history: Vec::new(),
                error: Some("objective undefined at the start".into()),
            },
        }
    });
    let best = logs
        .iter()
        .filter_map(|l| Some((l.theta.clone()?, l.objective?)))
        .fold(None::<(Vec<f64>, f64)>, |acc, (t, v)| match acc {
            Some((_, bv)) if bv >= v => acc,
            _ => Some((t, v)),
        });
    match best {
        Some((theta, value)) => Ok((theta, value, logs)),
        None => Err(OplError::AllStartsFailed(starts.len())),
    }
}

/// Start points: optionally the origin, then uniform draws in the box.
pub fn start_points(n_starts: usize, dim: usize, bound: f64, zero_start: bool, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, 0x5747_4152);
    (0..n_starts)
        .map(|i| {
            if i == 0 && zero_start {
                vec![0.0; dim]
            } else {
                (0..dim).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub theta_hat: PolicyParams,
    pub objective: f64,
    pub starts: Vec<StartLog>,
    pub gradient_check: Option<GradientCheck>,
    pub tunings: Tunings,
    pub kernel: KernelConfig,
    pub seed: u64,
}

/// Maximises the doubly robust objective on an already-built objective.
pub fn optimize_objective(obj: &PolicyObjective, cfg: &OptimizeConfig) -> Result<(Vec<f64>, f64, Vec<StartLog>)> {
    let starts = start_points(cfg.n_starts, obj.dim(), cfg.box_bound, cfg.zero_start, cfg.seed);
    let lcfg = LbfgsConfig { max_iters: cfg.max_iters, grad_tol: cfg.grad_tol, ..LbfgsConfig::default() };
    maximize_multi_start(
        |theta| obj.value_and_gradient(theta, cfg.use_analytic_gradient, cfg.fd_step).ok(),
        &starts,
        cfg.box_bound,
        lcfg,
    )
}

/// Learns `theta_hat` from a dataset with fixed tunings.
pub fn optimize(dataset: &Dataset, cfg: &OptimizeConfig, kernel: &KernelConfig) -> Result<OptimizeResult> {
    cfg.validate()?;
    let tuples = flatten(dataset);
    let template = PolicyParams::zeros(dataset.state_dim(), cfg.box_bound, cfg.features);
    let obj = PolicyObjective::from_tuples(&tuples, kernel, cfg.tunings(), template.clone(), cfg.basis)?;
    let (theta, value, starts) = optimize_objective(&obj, cfg)?;
    // At theta_hat the gradient vanishes and the relative error would only
    // measure rounding, so the check runs at a seeded point in [-1, 1]^p.
    let gradient_check = if cfg.check_gradient {
        let probe = start_points(1, obj.dim(), 1.0, false, cfg.seed ^ 0x4752_4144).remove(0);
        let check = obj.check_gradient(&probe, cfg.fd_step)?;
        if check.max_rel_err > cfg.gradient_check_tol {
            return Err(OplError::GradientMismatch { max_rel_err: check.max_rel_err });
        }
        Some(check)
    } else {
        None
    };
    Ok(OptimizeResult {
        theta_hat: template.with_theta(&theta),
        objective: value,
        starts,
        gradient_check,
        tunings: cfg.tunings(),
        kernel: kernel.clone(),
        seed: cfg.seed,
    })
}
