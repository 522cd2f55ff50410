//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `OPL_ACCEPTANCE=4,5` restricts the run to the listed criteria.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use opl_core::basis::BasisConfig;
use opl_core::dr::{double_robustness_probe, dr_average_reward, Corruption, ProbeConfig};
use opl_core::kernel::{shaped_kernel, KernelConfig};
use opl_core::nuisance::{q_from_alpha, Evaluation, Evaluator, FitContext};
use opl_core::optimize::{OptimizeConfig, PolicyObjective};
use opl_core::sim::{
    oracle_search, replicate_experiment, simulate, Actor, EnvSpec, EvalProtocol, ExperimentConfig, ExperimentReport,
    OracleConfig, TuningMode,
};
use opl_core::tabular::{
    bellman_solution, orthogonality_expectation, ratio_exact, state_index, TabularMdp, TabularPolicy,
};
use opl_core::tuner::TuningGrid;
use opl_core::{flatten, FeatureMap, PolicyParams, TupleTable, TuningPair, Tunings};

const REPS: usize = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn experiment(env: EnvSpec, n: usize, horizon: usize, eval: EvalProtocol, oracle: Option<OracleConfig>, seed_root: u64) -> ExperimentReport {
    let regret_eval = oracle.as_ref().map(|o| o.protocol);
    let cfg = ExperimentConfig {
        env,
        n,
        horizon,
        n_reps: REPS,
        eval,
        regret_eval,
        optimizer: OptimizeConfig::default(),
        tuning: TuningMode::CrossValidated { grid: TuningGrid::default() },
        oracle,
        seed_root,
    };
    replicate_experiment(&cfg).expect("replication batch")
}

fn summary(label: &str, report: &ExperimentReport) -> String {
    let (mean, sd) = report.value_summary().unwrap_or((f64::NAN, f64::NAN));
    format!("{label} mean {mean:.3} (sd {sd:.3}, {} failed reps, {} escaped test trajectories)", report.failures(), report.escaped())
}

fn value_within(report: &ExperimentReport, target: f64, band: f64) -> bool {
    report.failures() == 0 && report.value_summary().is_some_and(|(m, _)| (m - target).abs() <= band)
}

fn criterion_1() -> Outcome {
    let s1 = experiment(EnvSpec::Scenario1, 40, 100, EvalProtocol::LONG_RUN, None, 101);
    let s2 = experiment(EnvSpec::Scenario2, 80, 50, EvalProtocol::LONG_RUN, None, 102);
    let pass = value_within(&s1, 9.913, 0.3) && value_within(&s2, 9.919, 0.3);
    outcome(
        pass,
        format!("{}, target 9.913 +/- 0.3; {}, target 9.919 +/- 0.3", summary("scenario1 (40,100)", &s1), summary("scenario2 (80,50)", &s2)),
    )
}

fn vlearning_reports() -> &'static [ExperimentReport; 2] {
    static REPORTS: OnceLock<[ExperimentReport; 2]> = OnceLock::new();
    REPORTS.get_or_init(|| {
        let oracle = OracleConfig { protocol: EvalProtocol::SINGLE_CHAIN, grid_points: 21, seed: 303, ..OracleConfig::default() };
        [
            experiment(EnvSpec::Vlearning, 25, 24, EvalProtocol::SHORT_RUNS, Some(oracle.clone()), 201),
            experiment(EnvSpec::Vlearning, 50, 48, EvalProtocol::SHORT_RUNS, Some(oracle), 202),
        ]
    })
}

fn criterion_2() -> Outcome {
    let [a, b] = vlearning_reports();
    let above = |r: &ExperimentReport, floor: f64| r.value_summary().is_some_and(|(m, _)| m > floor);
    let pass = value_within(a, 0.898, 0.1) && value_within(b, 0.914, 0.1) && above(a, 0.612) && above(b, 0.615);
    outcome(
        pass,
        format!(
            "{}, target 0.898 +/- 0.1 and > 0.612; {}, target 0.914 +/- 0.1 and > 0.615",
            summary("vlearning (25,24)", a),
            summary("vlearning (50,48)", b)
        ),
    )
}

fn criterion_3() -> Outcome {
    let [a, b] = vlearning_reports();
    let regret = |r: &ExperimentReport| r.regret_summary().map(|(m, _)| m).unwrap_or(f64::NAN);
    let ok = |r: &ExperimentReport| r.failures() == 0 && regret(r) <= 0.08;
    let oracle = a.oracle.as_ref().map(|o| o.search_value).unwrap_or(f64::NAN);
    outcome(
        ok(a) && ok(b),
        format!(
            "mean regret (25,24) {:.4}, (50,48) {:.4}, bound 0.08 (oracle chain value {oracle:.3}; failed reps {} / {})",
            regret(a),
            regret(b),
            a.failures(),
            b.failures()
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (spec, seed) in [(EnvSpec::Scenario1, 401), (EnvSpec::Scenario2, 402)] {
        let env = spec.build();
        let cfg = OracleConfig { seed, ..OracleConfig::default() };
        match oracle_search(env.as_ref(), &cfg) {
            Ok(r) => {
                pass &= (9.8..=10.2).contains(&r.eta_star);
                parts.push(format!("{} eta* {:.4}", spec.name(), r.eta_star));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{} failed: {e}", spec.name()));
            }
        }
    }
    outcome(pass, format!("{}; band [9.8, 10.2]", parts.join(", ")))
}

fn probe_policy() -> (PolicyParams, TabularPolicy) {
    let p = PolicyParams::new(vec![1.5, 0.0], 10.0, FeatureMap::Intercept).unwrap();
    let t = TabularPolicy::from_logistic(&p, 4);
    (p, t)
}

fn criterion_5() -> Outcome {
    let mdp = TabularMdp::reference_four_state();
    let (_, pi) = probe_policy();
    let med = |c: Corruption| {
        median(
            (0..20)
                .map(|seed| {
                    let cfg = ProbeConfig { horizon: 10, seed: 500 + seed, band: 0.05 };
                    double_robustness_probe(&mdp, &pi, &[4000], c, cfg).unwrap().rows[0].abs_error
                })
                .collect(),
        )
    };
    let (wo, wu, both) = (med(Corruption::WrongOmega), med(Corruption::WrongU), med(Corruption::Both));
    outcome(
        wo < 0.05 && wu < 0.05 && both > 0.05,
        format!("median |error| wrong-omega {wo:.4}, wrong-U {wu:.4} (< 0.05); both wrong {both:.4} (> 0.05)"),
    )
}

fn tabular_fit(n: usize, seed: u64, lambda: f64) -> (TupleTable, Evaluation) {
    let mdp = TabularMdp::reference_four_state();
    let (p, _) = probe_policy();
    let tuples = flatten(&mdp.simulate(n, 10, seed).unwrap());
    let kernel = KernelConfig::delta(1);
    let ctx = FitContext::from_tuples(&kernel, &tuples, BasisConfig::default()).unwrap();
    let ev = Evaluator::new(ctx, Tunings::both(TuningPair::new(lambda, lambda).unwrap())).unwrap();
    let fit = ev.evaluate(&p, false).unwrap();
    (tuples, fit)
}

fn criterion_6() -> Outcome {
    let mut means = Vec::new();
    let mut scaled = Vec::new();
    for n in [2000, 4000] {
        let (tuples, fit) = tabular_fit(n, 600, 1e-4);
        let est = dr_average_reward(&fit.ratio.omega, &fit.value.u, tuples.rewards(), &tuples).unwrap();
        let eif = est.eif_per_trajectory.clone().unwrap();
        means.push(eif.iter().sum::<f64>() / eif.len() as f64);
        scaled.push(est.variance().unwrap() * n as f64);
    }
    let max_mean = means.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let change = (scaled[1] - scaled[0]).abs() / scaled[0];
    outcome(
        max_mean <= 1e-10 && change < 0.2,
        format!("max |mean EIF| {max_mean:.2e} (<= 1e-10); n*var {:.4} -> {:.4}, change {:.1}% (< 20%)", scaled[0], scaled[1], 100.0 * change),
    )
}

fn small_instance(rng: &mut ChaCha8Rng, i: usize) -> (TupleTable, usize) {
    let spec = if i.is_multiple_of(2) { EnvSpec::Scenario1 } else { EnvSpec::Vlearning };
    let env = spec.build();
    let n = rng.random_range(3..=6);
    let horizon = rng.random_range(5..=100 / n);
    let data = simulate(env.as_ref(), Actor::Behavior, n, horizon, rng.random()).unwrap();
    (flatten(&data), env.state_dim())
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let mut worst = 0.0_f64;
    let mut failures = 0;
    for i in 0..20 {
        let (tuples, d) = small_instance(&mut rng, i);
        let kernel = KernelConfig::from_tuples(&tuples).unwrap();
        let mut pair = || TuningPair::new(10f64.powf(rng.random_range(-3.0..-1.0)), 10f64.powf(rng.random_range(-3.0..-1.0))).unwrap();
        let tunings = Tunings { value: pair(), ratio: pair() };
        let template = PolicyParams::zeros(d, 10.0, FeatureMap::Intercept);
        let theta: Vec<f64> = (0..template.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let obj = PolicyObjective::from_tuples(&tuples, &kernel, tunings, template, BasisConfig::default()).unwrap();
        match obj.check_gradient(&theta, 1e-5) {
            Ok(c) => worst = worst.max(c.max_rel_err),
            Err(_) => failures += 1,
        }
    }
    outcome(worst < 1e-4 && failures == 0, format!("max relative error {worst:.2e} over 20 instances (< 1e-4), {failures} failed"))
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let mut worst_mean = 0.0_f64;
    let mut fits = 0;
    for i in 0..10 {
        let (tuples, d) = small_instance(&mut rng, i);
        let kernel = KernelConfig::from_tuples(&tuples).unwrap();
        let ctx = FitContext::from_tuples(&kernel, &tuples, BasisConfig::default()).unwrap();
        let ev = Evaluator::new(ctx, Tunings::both(TuningPair::new(1e-2, 1e-2).unwrap())).unwrap();
        let theta: Vec<f64> = (0..=d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let fit = ev.evaluate(&PolicyParams::new(theta, 10.0, FeatureMap::Intercept).unwrap(), false).unwrap();
        worst_mean = worst_mean.max((fit.ratio.omega.iter().sum::<f64>() / fit.ratio.omega.len() as f64 - 1.0).abs());
        fits += 1;
    }
    for (n, seed) in [(250, 801), (1000, 802)] {
        let (_, fit) = tabular_fit(n, seed, 1e-4);
        worst_mean = worst_mean.max((fit.ratio.omega.iter().sum::<f64>() / fit.ratio.omega.len() as f64 - 1.0).abs());
        fits += 1;
    }

    let mut anchor_max = 0.0_f64;
    for kernel in [KernelConfig::gaussian(1.3, 3).unwrap(), KernelConfig::delta(3), KernelConfig::gaussian(0.7, 3).unwrap().with_anchor(vec![0.5, -1.0, 2.0], 1)] {
        for _ in 0..50 {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            let a = u8::from(rng.random::<bool>());
            anchor_max = anchor_max.max(shaped_kernel(&kernel, kernel.anchor(), (&s, a)).abs());
            anchor_max = anchor_max.max(shaped_kernel(&kernel, (&s, a), kernel.anchor()).abs());
        }
    }
    let (tuples, fit) = tabular_fit(100, 803, 1e-3);
    let (p, _) = probe_policy();
    let q_anchor = q_from_alpha(&KernelConfig::delta(1), &tuples, &p, &fit.value.alpha, (&[0.0], 0));
    anchor_max = anchor_max.max(q_anchor.abs());
    outcome(
        worst_mean <= 1e-12 && anchor_max == 0.0,
        format!("max |mean(omega) - 1| {worst_mean:.2e} over {fits} fits (<= 1e-12); max |k~(anchor, .)| and |Q(anchor)| = {anchor_max:e} (exact 0)"),
    )
}

fn criterion_9() -> Outcome {
    let mdp = TabularMdp::reference_four_state();
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let theta = vec![rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)];
        let pi = TabularPolicy::from_logistic(&PolicyParams::new(theta, 10.0, FeatureMap::Intercept).unwrap(), 4);
        let horizon = rng.random_range(2..20);
        let omega = ratio_exact(&mdp, &pi, horizon).unwrap();
        let f: Vec<Vec<f64>> = (0..4).map(|_| (0..2).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        worst = worst.max(orthogonality_expectation(&mdp, &pi, horizon, &omega, &f).unwrap().abs());
    }
    outcome(worst <= 1e-10, format!("max |expectation| {worst:.2e} over 10 random f tables (<= 1e-10)"))
}

fn nuisance_errors(n: usize, seed: u64) -> (f64, f64) {
    let mdp = TabularMdp::reference_four_state();
    let (p, pi) = probe_policy();
    let (tuples, fit) = tabular_fit(n, seed, 1e-4);
    let (_, q_true) = bellman_solution(&mdp, &pi, (0, 0)).unwrap();
    let omega_true = ratio_exact(&mdp, &pi, 10).unwrap();
    let kernel = KernelConfig::delta(1);
    let mut q_err = 0.0_f64;
    for s in 0..4 {
        for a in 0..2u8 {
            let q_hat = q_from_alpha(&kernel, &tuples, &p, &fit.value.alpha, (&[s as f64], a));
            q_err = q_err.max((q_hat - q_true[s][usize::from(a)]).abs());
        }
    }
    let sq: f64 = (0..tuples.len())
        .map(|h| {
            let truth = omega_true[state_index(tuples.state(h))][usize::from(tuples.action(h))];
            (fit.ratio.omega[h] - truth).powi(2)
        })
        .sum();
    (q_err, (sq / tuples.len() as f64).sqrt())
}

fn criterion_10() -> Outcome {
    let collect = |n: usize| -> (f64, f64) {
        let errs: Vec<(f64, f64)> = (0..10).map(|s| nuisance_errors(n, 1000 + s)).collect();
        (median(errs.iter().map(|e| e.0).collect()), median(errs.iter().map(|e| e.1).collect()))
    };
    let (q_small, w_small) = collect(250);
    let (q_large, w_large) = collect(1000);
    outcome(
        q_large < q_small && w_large < w_small,
        format!("median Q error {q_small:.4} -> {q_large:.4}, median omega RMS error {w_small:.4} -> {w_large:.4} (n = 250 -> 1000)"),
    )
}

fn main() {
    opl_core::par::init_from_env();
    let only: Option<Vec<usize>> =
        std::env::var("OPL_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "scenario values", criterion_1),
        (2, "v-learning values", criterion_2),
        (3, "v-learning regret", criterion_3),
        (4, "oracle values", criterion_4),
        (5, "double robustness", criterion_5),
        (6, "influence function", criterion_6),
        (7, "gradient check", criterion_7),
        (8, "normalisation and anchor", criterion_8),
        (9, "orthogonality", criterion_9),
        (10, "monotone nuisance error", criterion_10),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let out = std::panic::catch_unwind(run).unwrap_or_else(|_| outcome(false, "panicked".into()));
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1}s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            start.elapsed().as_secs_f64()
        );
        if !out.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
