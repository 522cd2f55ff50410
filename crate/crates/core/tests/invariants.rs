use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use opl_core::basis::BasisConfig;
use opl_core::dr::dr_average_reward;
use opl_core::kernel::feature_gram;
use opl_core::linalg::{dot, matvec, norm2};
use opl_core::nuisance::{fit_value, Evaluator, FitContext};
use opl_core::optimize::{optimize, OptimizeConfig};
use opl_core::reference::DenseModel;
use opl_core::seed::mix;
use opl_core::sim::{replicate_experiment, simulate, Actor, EnvSpec, EvalProtocol, ExperimentConfig, Scenario, TuningMode, VLearningEnv};
use opl_core::tabular::{
    average_reward_exact, bellman_solution, data_expectation, expected_u, marginal_average_distribution, orthogonality_expectation,
    ratio_exact, relative_value_exact, u_value, TabularMdp, TabularPolicy,
};
use opl_core::{flatten, load_dataset, write_dataset, Dataset, FeatureMap, KernelConfig, PolicyParams, Trajectory, TuningPair, Tunings};

fn random_policy(rng: &mut ChaCha8Rng, n_states: usize) -> TabularPolicy {
    let probs = (0..n_states)
        .map(|_| {
            let p: f64 = 0.05 + 0.9 * rng.random::<f64>();
            vec![1.0 - p, p]
        })
        .collect();
    TabularPolicy { probs }
}

fn random_table(rng: &mut ChaCha8Rng, n_states: usize) -> Vec<Vec<f64>> {
    (0..n_states).map(|_| (0..2).map(|_| rng.random_range(-5.0..5.0)).collect()).collect()
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1usize..5, 1usize..6, 1usize..4, any::<u64>()).prop_map(|(n, t, d, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajectories = (0..n)
            .map(|_| Trajectory {
                states: (0..=t).map(|_| (0..d).map(|_| rng.random_range(-1e3..1e3)).collect()).collect(),
                actions: (0..t).map(|_| rng.random_range(0..2u8)).collect(),
                rewards: (0..t).map(|_| rng.random_range(-10.0..10.0)).collect(),
            })
            .collect();
        Dataset::new(trajectories).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flatten_is_a_bijection(data in dataset_strategy()) {
        let tuples = flatten(&data);
        let t = data.horizon();
        prop_assert_eq!(tuples.len(), data.n() * t);
        for (i, tr) in data.trajectories().iter().enumerate() {
            for step in 0..t {
                let h = i * t + step;
                prop_assert_eq!(tuples.owner(h), i);
                prop_assert_eq!(tuples.time(h), step);
                prop_assert_eq!(tuples.state(h), &tr.states[step][..]);
                prop_assert_eq!(tuples.next_state(h), &tr.states[step + 1][..]);
                prop_assert_eq!(tuples.action(h), tr.actions[step]);
                prop_assert_eq!(tuples.rewards()[h], tr.rewards[step]);
            }
        }
        prop_assert_eq!(tuples.regroup(), data.trajectories().to_vec());
    }

    #[test]
    fn write_then_load_is_identity(data in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&data, &path).unwrap();
        prop_assert_eq!(load_dataset(&path).unwrap(), data);
    }

    #[test]
    fn orthogonality_holds_for_any_table(seed in any::<u64>(), n_states in 2usize..6, horizon in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = TabularMdp::random(n_states, 2, &mut rng);
        let pi = random_policy(&mut rng, n_states);
        let omega = ratio_exact(&mdp, &pi, horizon).unwrap();
        let f = random_table(&mut rng, n_states);
        prop_assert!(orthogonality_expectation(&mdp, &pi, horizon, &omega, &f).unwrap().abs() < 1e-10);
    }

    #[test]
    fn exact_nuisances_recover_the_average_reward(seed in any::<u64>(), n_states in 2usize..6, horizon in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = TabularMdp::random(n_states, 2, &mut rng);
        let pi = random_policy(&mut rng, n_states);
        let omega = ratio_exact(&mdp, &pi, horizon).unwrap();
        let (eta, q) = bellman_solution(&mdp, &pi, (0, 0)).unwrap();
        let eu = expected_u(&mdp, &pi, &q);
        let integrand: Vec<Vec<f64>> =
            (0..n_states).map(|s| (0..2).map(|a| omega[s][a] * (mdp.rewards[s][a] + eu[s][a])).collect()).collect();
        let d_d = marginal_average_distribution(&mdp, horizon).unwrap();
        prop_assert!((data_expectation(&d_d, &integrand) - eta).abs() < 1e-10);
        prop_assert!((data_expectation(&d_d, &omega) - 1.0).abs() < 1e-10);
        prop_assert!((average_reward_exact(&mdp, &pi).unwrap() - eta).abs() < 1e-10);
    }

    #[test]
    fn relative_value_moves_by_a_constant_with_the_anchor(seed in any::<u64>(), n_states in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = TabularMdp::random(n_states, 2, &mut rng);
        let pi = random_policy(&mut rng, n_states);
        let q1 = relative_value_exact(&mdp, &pi, (0, 0)).unwrap();
        let q2 = relative_value_exact(&mdp, &pi, (n_states - 1, 1)).unwrap();
        let shift = q1[0][0] - q2[0][0];
        for s in 0..n_states {
            for a in 0..2 {
                prop_assert!((q1[s][a] - q2[s][a] - shift).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn u_ignores_constant_shifts_of_q(seed in any::<u64>(), n_states in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = random_policy(&mut rng, n_states);
        let q = random_table(&mut rng, n_states);
        let shifted: Vec<Vec<f64>> = q.iter().map(|r| r.iter().map(|x| x + 7.3).collect()).collect();
        for s in 0..n_states {
            for a in 0..2 {
                for sn in 0..n_states {
                    prop_assert!((u_value(&pi, &q, s, a, sn) - u_value(&pi, &shifted, s, a, sn)).abs() < 1e-12);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fitted_weights_normalise_and_objective_is_the_dr_estimate(
        seed in any::<u64>(),
        theta in proptest::collection::vec(-3.0..3.0f64, 4),
        lambda in 1e-4..1e-1f64,
        mu in 1e-4..1e-1f64,
    ) {
        let data = simulate(&Scenario::one(), Actor::Behavior, 6, 8, seed).unwrap();
        let tuples = flatten(&data);
        let kernel = KernelConfig::from_tuples(&tuples).unwrap();
        let pair = TuningPair::new(lambda, mu).unwrap();
        let ctx = FitContext::from_tuples(&kernel, &tuples, BasisConfig::default()).unwrap();
        let policy = PolicyParams::new(theta, 10.0, FeatureMap::Intercept).unwrap();
        let fit = Evaluator::new(ctx, Tunings::both(pair)).unwrap().evaluate(&policy, false).unwrap();
        let omega = &fit.ratio.omega;
        prop_assert!((omega.iter().sum::<f64>() / omega.len() as f64 - 1.0).abs() < 1e-12);
        let est = dr_average_reward(omega, &fit.value.u, tuples.rewards(), &tuples).unwrap();
        prop_assert!((est.denominator - 1.0).abs() < 1e-12);
        prop_assert!((est.eta_hat - fit.objective).abs() < 1e-12 * fit.objective.abs().max(1.0));
    }
}

#[test]
fn value_fit_solves_its_first_order_system() {
    let data = simulate(&VLearningEnv::default(), Actor::Behavior, 4, 6, 21).unwrap();
    let tuples = flatten(&data);
    let kernel = KernelConfig::from_tuples(&tuples).unwrap();
    let policy = PolicyParams::new(vec![0.4, -1.0, 0.7], 10.0, FeatureMap::Intercept).unwrap();
    let pair = TuningPair::new(1e-2, 1e-2).unwrap();
    let n = tuples.len();
    let nf = n as f64;

    let dense = DenseModel::new(&kernel, &tuples);
    let f = feature_gram(&kernel, &tuples, &policy);
    let m = dense.m_matrix(pair.mu * nf).unwrap();
    // The invariant is about the exact representation; the default basis
    // truncates the kernel factor at 1e-6 and leaves residuals near 1e-7.
    let full = BasisConfig { tol: 0.0, ..BasisConfig::default() };
    let ctx = FitContext::from_tuples(&kernel, &tuples, full).unwrap();
    let alpha = Evaluator::new(ctx, Tunings::both(pair)).unwrap().evaluate(&policy, false).unwrap().value.alpha;

    // (M F + lambda I - M1 (1'M1)^-1 1'M F) alpha = (I - M1 (1'M1)^-1 1') M R
    let ones = vec![1.0; n];
    let m1 = matvec(m.as_ref(), &ones);
    let c = dot(&ones, &m1);
    let mfa = matvec(m.as_ref(), &matvec(f.as_ref(), &alpha));
    let mr = matvec(m.as_ref(), tuples.rewards());
    let (s_fa, s_r) = (mfa.iter().sum::<f64>(), mr.iter().sum::<f64>());
    let residual: Vec<f64> =
        (0..n).map(|i| mfa[i] + pair.lambda * nf * alpha[i] - m1[i] * s_fa / c - (mr[i] - m1[i] * s_r / c)).collect();
    assert!(norm2(&residual) <= 1e-8 * norm2(&mr), "{} vs {}", norm2(&residual), norm2(&mr));
}

#[test]
fn heavier_value_penalty_shrinks_alpha() {
    let data = simulate(&Scenario::one(), Actor::Behavior, 6, 10, 8).unwrap();
    let tuples = flatten(&data);
    let kernel = KernelConfig::from_tuples(&tuples).unwrap();
    let policy = PolicyParams::new(vec![0.5, 0.2, -0.3, 0.1], 10.0, FeatureMap::Intercept).unwrap();
    let norms: Vec<f64> = [1e2, 1e4, 1e6]
        .iter()
        .map(|&lambda| norm2(&fit_value(&policy, &tuples, &kernel, TuningPair::new(lambda, 1e-2).unwrap()).unwrap().alpha))
        .collect();
    assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
}

#[test]
fn optimisation_is_deterministic_and_boxed() {
    let data = simulate(&Scenario::two(), Actor::Behavior, 5, 10, 13).unwrap();
    let kernel = KernelConfig::from_tuples(&flatten(&data)).unwrap();
    let cfg = OptimizeConfig { seed: 99, box_bound: 2.0, ..OptimizeConfig::default() };
    let a = optimize(&data, &cfg, &kernel).unwrap();
    let b = optimize(&data, &cfg, &kernel).unwrap();
    assert_eq!(a.theta_hat.theta, b.theta_hat.theta);
    assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    assert!(a.theta_hat.theta.iter().all(|t| t.abs() <= 2.0));
}

#[test]
fn replications_derive_their_seeds_from_the_root() {
    let pair = TuningPair::new(1e-2, 1e-2).unwrap();
    let cfg = ExperimentConfig {
        env: EnvSpec::Scenario1,
        n: 4,
        horizon: 6,
        n_reps: 3,
        eval: EvalProtocol { n_test: 5, t_test: 20, burn_in: 0 },
        regret_eval: None,
        optimizer: OptimizeConfig { n_starts: 2, max_iters: 10, ..OptimizeConfig::default() },
        tuning: TuningMode::Fixed { tunings: Tunings::both(pair) },
        oracle: None,
        seed_root: 17,
    };
    let a = replicate_experiment(&cfg).unwrap();
    let b = replicate_experiment(&cfg).unwrap();
    for (rep, row) in a.rows.iter().enumerate() {
        assert_eq!(row.seed, mix(17, rep as u64));
        assert!(row.error.is_none(), "{:?}", row.error);
    }
    assert_eq!(a.rows, b.rows);
}
