use opl_core::basis::BasisConfig;
use opl_core::kernel::{feature_gram, KernelConfig};
use opl_core::nuisance::{Evaluator, FitContext};
use opl_core::optimize::PolicyObjective;
use opl_core::reference::DenseModel;
use opl_core::sim::{simulate, Actor, Scenario, VLearningEnv};
use opl_core::{flatten, FeatureMap, PolicyParams, TupleTable, TuningPair, Tunings};

const FULL_RANK: BasisConfig = BasisConfig { tol: 0.0, max_rank: 4096 };

fn scenario_tuples(n: usize, t: usize, seed: u64) -> TupleTable {
    flatten(&simulate(&Scenario::one(), Actor::Behavior, n, t, seed).unwrap())
}

fn tunings() -> Tunings {
    Tunings { value: TuningPair::new(1e-2, 5e-3).unwrap(), ratio: TuningPair::new(2e-2, 1e-2).unwrap() }
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1e-12_f64, |m, x| m.max(x.abs()));
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

#[test]
fn value_and_ratio_fits_agree_with_dense_model() {
    let tuples = scenario_tuples(4, 6, 11);
    let kernel = KernelConfig::from_tuples(&tuples).unwrap();
    let policy = PolicyParams::new(vec![0.3, -0.5, 0.2, 0.8], 10.0, FeatureMap::Intercept).unwrap();
    let tn = tunings();

    let ctx = FitContext::from_tuples(&kernel, &tuples, FULL_RANK).unwrap();
    let eval = Evaluator::new(ctx, tn).unwrap().evaluate(&policy, false).unwrap();

    let dense = DenseModel::new(&kernel, &tuples);
    let f = feature_gram(&kernel, &tuples, &policy);
    let v = dense.value(&f, tn.value).unwrap();
    let r = dense.ratio(&f, tn.ratio).unwrap();

    assert!((eval.value.eta - v.eta).abs() < 1e-7, "{} vs {}", eval.value.eta, v.eta);
    assert!(max_rel(&eval.value.u, &v.u) < 1e-6);
    assert!(max_rel(&eval.ratio.omega, &r.omega) < 1e-6);
    assert!(max_rel(&eval.ratio.e, &r.e) < 1e-6);
}

#[test]
fn objective_and_gradient_agree_with_dense_model() {
    let tuples = scenario_tuples(5, 5, 3);
    let kernel = KernelConfig::from_tuples(&tuples).unwrap();
    let template = PolicyParams::zeros(3, 10.0, FeatureMap::Intercept);
    let tn = tunings();
    let obj = PolicyObjective::from_tuples(&tuples, &kernel, tn, template.clone(), FULL_RANK).unwrap();
    let dense = DenseModel::new(&kernel, &tuples);
    for theta in [vec![0.0; 4], vec![1.0, -0.4, 0.3, -1.2], vec![-2.0, 0.5, 0.5, 0.5]] {
        let (j, g) = obj.analytic_gradient(&theta).unwrap();
        let p = template.with_theta(&theta);
        let jd = dense.objective(&p, &tuples, tn).unwrap();
        let gd = dense.gradient(&p, &tuples, tn).unwrap();
        assert!((j - jd).abs() < 1e-7 * jd.abs().max(1.0), "{j} vs {jd}");
        assert!(max_rel(&g, &gd) < 1e-5, "{g:?} vs {gd:?}");
    }
}

#[test]
fn low_rank_basis_stays_close_to_dense() {
    let tuples = scenario_tuples(6, 10, 5);
    let kernel = KernelConfig::from_tuples(&tuples).unwrap();
    let policy = PolicyParams::new(vec![-0.3, 0.2, 0.1, 0.4], 10.0, FeatureMap::Intercept).unwrap();
    let tn = tunings();
    let full = PolicyObjective::from_tuples(&tuples, &kernel, tn, policy.clone(), FULL_RANK).unwrap();
    let cut = PolicyObjective::from_tuples(&tuples, &kernel, tn, policy.clone(), BasisConfig::default()).unwrap();
    let a = full.value(&policy.theta).unwrap();
    let b = cut.value(&policy.theta).unwrap();
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
}

#[test]
fn normalised_weights_average_to_one() {
    let data = simulate(&VLearningEnv::default(), Actor::Behavior, 6, 8, 21).unwrap();
    let tuples = flatten(&data);
    let kernel = KernelConfig::from_tuples(&tuples).unwrap();
    let ctx = FitContext::from_tuples(&kernel, &tuples, BasisConfig::default()).unwrap();
    let ev = Evaluator::new(ctx, tunings()).unwrap();
    for theta in [vec![0.0, 0.0, 0.0], vec![2.0, -1.0, 3.0], vec![-9.0, 9.0, 0.5]] {
        let p = PolicyParams::new(theta, 10.0, FeatureMap::Intercept).unwrap();
        let e = ev.evaluate(&p, false).unwrap();
        let mean = e.ratio.omega.iter().sum::<f64>() / e.ratio.omega.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12, "{mean}");
    }
}
