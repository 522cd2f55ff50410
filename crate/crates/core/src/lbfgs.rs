//! Box-constrained limited-memory quasi-Newton minimisation.
//!
//! Gradient projection with an L-BFGS direction on the free variables and a
//! projected backtracking Armijo search. Every accepted step decreases the
//! objective and every iterate is feasible.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    pub memory: usize,
    /// Stop when the projected gradient's sup-norm falls below this.
    pub grad_tol: f64,
    /// Stop when an accepted step improves by less than `ftol * max(1, |f|)`.
    pub ftol: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { max_iters: 100, memory: 10, grad_tol: 1e-6, ftol: 1e-12, max_backtracks: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    FunctionTolerance,
    LineSearchFailed,
    MaxIterations,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub stop: StopReason,
    /// Objective after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

fn project(x: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    x.iter().map(|v| v.clamp(lo, hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Coordinates pinned at a bound with the gradient pushing outward.
fn active_set(x: &[f64], g: &[f64], lo: f64, hi: f64) -> Vec<bool> {
    x.iter().zip(g).map(|(&xi, &gi)| (xi <= lo && gi > 0.0) || (xi >= hi && gi < 0.0)).collect()
}

fn projected_grad_norm(x: &[f64], g: &[f64], lo: f64, hi: f64) -> f64 {
    active_set(x, g, lo, hi).iter().zip(g).filter(|(a, _)| !**a).fold(0.0, |m, (_, gi)| m.max(gi.abs()))
}

/// Minimises `f` over `[lo, hi]^p` from `x0`.
///
/// `f` returns `None` where the objective is undefined; such points are
/// treated as `+inf` by the line search. Returns `None` if `f` is undefined
/// at the (projected) start.
pub fn minimize_box<F>(mut f: F, x0: &[f64], lo: f64, hi: f64, cfg: LbfgsConfig) -> Option<LbfgsResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut x = project(x0, lo, hi);
    let (mut fx, mut g) = f(&x)?;
    let mut evaluations = 1;
    let mut history = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let p = x.len();

    for iter in 0..cfg.max_iters {
        if projected_grad_norm(&x, &g, lo, hi) < cfg.grad_tol {
            return Some(LbfgsResult { x, f: fx, grad: g, iterations: iter, evaluations, stop: StopReason::GradientTolerance, history });
        }
        let active = active_set(&x, &g, lo, hi);
        let mut retried = false;
        loop {
            let d = direction(&g, &active, &pairs);
            let slope = dot(&d, &g);
            let d = if slope < 0.0 { d } else { steepest(&g, &active) };
            let first = pairs.is_empty();
            let gnorm = dot(&d, &d).sqrt();
            let mut t = if first && gnorm > 0.0 { (1.0 / gnorm).min(1.0) } else { 1.0 };
            let mut accepted = None;
            for _ in 0..cfg.max_backtracks {
                let trial: Vec<f64> = project(&x.iter().zip(&d).map(|(a, b)| a + t * b).collect::<Vec<_>>(), lo, hi);
                let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                if step.iter().all(|s| *s == 0.0) {
                    break;
                }
                evaluations += 1;
                if let Some((ft, gt)) = f(&trial) {
                    if ft.is_finite() && ft <= fx + 1e-4 * dot(&g, &step) && gt.iter().all(|v| v.is_finite()) {
                        accepted = Some((trial, ft, gt, step));
                        break;
                    }
                }
                t *= 0.5;
            }
            match accepted {
                Some((xn, fn_, gn, s)) => {
                    let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
                    let sy = dot(&s, &y);
                    if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
                        if pairs.len() == cfg.memory {
                            pairs.pop_front();
                        }
                        pairs.push_back((s, y, 1.0 / sy));
                    }
                    let improvement = fx - fn_;
                    x = xn;
                    fx = fn_;
                    g = gn;
                    history.push(fx);
                    if improvement <= cfg.ftol * fx.abs().max(1.0) {
                        return Some(LbfgsResult { x, f: fx, grad: g, iterations: iter + 1, evaluations, stop: StopReason::FunctionTolerance, history });
                    }
                    break;
                }
                None if !retried && !pairs.is_empty() => {
                    pairs.clear();
                    retried = true;
                }
                None => {
                    return Some(LbfgsResult { x, f: fx, grad: g, iterations: iter, evaluations, stop: StopReason::LineSearchFailed, history });
                }
            }
        }
        debug_assert_eq!(x.len(), p);
    }
    let stop = if projected_grad_norm(&x, &g, lo, hi) < cfg.grad_tol { StopReason::GradientTolerance } else { StopReason::MaxIterations };
    Some(LbfgsResult { x, f: fx, grad: g, iterations: cfg.max_iters, evaluations, stop, history })
}

fn steepest(g: &[f64], active: &[bool]) -> Vec<f64> {
    g.iter().zip(active).map(|(gi, &a)| if a { 0.0 } else { -gi }).collect()
}

/// Two-loop recursion restricted to the free coordinates.
fn direction(g: &[f64], active: &[bool], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> { v.iter().zip(active).map(|(x, &a)| if a { 0.0 } else { *x }).collect() };
    let mut q = mask(g);
    let mut alphas = Vec::with_capacity(pairs.len());
    let masked: Vec<(Vec<f64>, Vec<f64>)> = pairs.iter().map(|(s, y, _)| (mask(s), mask(y))).collect();
    for (s, y) in masked.iter().rev() {
        let sy = dot(s, y);
        if sy <= 0.0 {
            alphas.push(0.0);
            continue;
        }
        let a = dot(s, &q) / sy;
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y)) = masked.last() {
        let yy = dot(y, y);
        let sy = dot(s, y);
        if yy > 0.0 && sy > 0.0 {
            let gamma = sy / yy;
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
    }
    for ((s, y), a) in masked.iter().zip(alphas.iter().rev()) {
        let sy = dot(s, y);
        if sy <= 0.0 {
            continue;
        }
        let b = dot(y, &q) / sy;
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().zip(active).map(|(x, &act)| if act { 0.0 } else { -x }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Some((f, g))
    }

    #[test]
    fn unconstrained_rosenbrock() {
        let cfg = LbfgsConfig { max_iters: 500, ftol: 0.0, grad_tol: 1e-9, ..Default::default() };
        let r = minimize_box(rosenbrock, &[-1.2, 1.0], -10.0, 10.0, cfg).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn bound_constrained_quadratic() {
        // Minimum of (x-3)^2 + (y+0.5)^2 on [-1, 1]^2 is (1, -0.5).
        let f = |x: &[f64]| Some(((x[0] - 3.0).powi(2) + (x[1] + 0.5).powi(2), vec![2.0 * (x[0] - 3.0), 2.0 * (x[1] + 0.5)]));
        let r = minimize_box(f, &[0.0, 0.9], -1.0, 1.0, LbfgsConfig::default()).unwrap();
        assert_eq!(r.x[0], 1.0);
        assert!((r.x[1] + 0.5).abs() < 1e-7);
    }

    #[test]
    fn accepted_steps_never_increase() {
        let r = minimize_box(rosenbrock, &[2.0, -2.0], -3.0, 3.0, LbfgsConfig::default()).unwrap();
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.x.iter().all(|v| v.abs() <= 3.0));
    }

    #[test]
    fn undefined_region_is_avoided() {
        // Undefined for x > 0.5; minimum of (x-2)^2 on the defined set is the edge.
        let f = |x: &[f64]| if x[0] > 0.5 { None } else { Some(((x[0] - 2.0).powi(2), vec![2.0 * (x[0] - 2.0)])) };
        let r = minimize_box(f, &[0.0], -5.0, 5.0, LbfgsConfig::default()).unwrap();
        assert!(r.x[0] <= 0.5 && r.x[0] > 0.4);
        assert!(minimize_box(f, &[1.0], -5.0, 5.0, LbfgsConfig::default()).is_none());
    }
}
