use approx::assert_abs_diff_eq;
use lfiw::mbope::*;
use lfiw::ratio::TrainConfig;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn tabular(
    transitions: Vec<Vec<Vec<f64>>>,
    rewards: Vec<Vec<f64>>,
    eta: Vec<f64>,
    horizon: usize,
) -> Mdp {
    Mdp::from_document(MdpDocument::Tabular {
        n_states: eta.len(),
        n_actions: transitions.len(),
        transitions,
        rewards,
        eta,
        horizon,
    })
    .unwrap()
}

/// Two states, one action, deterministic flip.
fn flip(horizon: usize) -> Mdp {
    tabular(
        vec![vec![vec![0.0, 1.0], vec![1.0, 0.0]]],
        vec![vec![1.0], vec![0.0]],
        vec![1.0, 0.0],
        horizon,
    )
}

fn learned_chain(corruption: f64) -> (Mdp, Mdp, Policy) {
    let (env, _, eval) = chain4();
    let Dynamics::Tabular(t) = env.dynamics() else {
        unreachable!()
    };
    let model = env
        .with_dynamics(Dynamics::Tabular(t.corrupted(corruption).unwrap()))
        .unwrap();
    (env, model, eval)
}

#[test]
fn deterministic_mdp_gives_identical_rollouts() {
    let mdp = flip(5);
    let pi = Policy::tabular(vec![vec![1.0], vec![1.0]]).unwrap();
    let trajs = rollout(&mdp, &pi, 20, 5, 3).unwrap();
    assert!(trajs.iter().all(|t| t.states == trajs[0].states));
    assert_eq!(trajs[0].total_return(), 3.0);
}

#[test]
fn horizon_one_has_one_transition() {
    let (env, b, _) = chain4();
    let t = &rollout(&env, &b, 1, 1, 0).unwrap()[0];
    assert_eq!(
        (t.states.len(), t.actions.len(), t.rewards.len()),
        (2, 1, 1)
    );
}

#[test]
fn rollout_is_deterministic_given_seed() {
    let (env, b, _) = chain4();
    assert_eq!(
        rollout(&env, &b, 30, 20, 9).unwrap(),
        rollout(&env, &b, 30, 20, 9).unwrap()
    );
    assert_ne!(
        rollout(&env, &b, 30, 20, 9).unwrap(),
        rollout(&env, &b, 30, 20, 10).unwrap()
    );
}

#[test]
fn empirical_next_state_frequencies_match_kernel() {
    let (env, b, _) = chain4();
    let Dynamics::Tabular(p) = env.dynamics() else {
        unreachable!()
    };
    let trajs = rollout(&env, &b, 10_000, 20, 1).unwrap();
    let mut counts = vec![vec![vec![0.0; 4]; 4]; 2];
    for t in &trajs {
        for (s, a, n) in t.transitions() {
            counts[a[0] as usize][s[0] as usize][n[0] as usize] += 1.0;
        }
    }
    for a in 0..2 {
        for s in 0..4 {
            let total: f64 = counts[a][s].iter().sum();
            assert!(total > 1000.0);
            for n in 0..4 {
                let q = p.prob(s, a, n);
                let band = 3.0 * (q * (1.0 - q) / total).sqrt() + 1e-12;
                assert!(
                    (counts[a][s][n] / total - q).abs() <= band,
                    "a={a} s={s} n={n}"
                );
            }
        }
    }
}

#[test]
fn ground_truth_trivial_cases() {
    let (env, b, _) = chain4();
    let zero = Mdp::from_document(match env.to_document() {
        MdpDocument::Tabular {
            n_states,
            n_actions,
            transitions,
            eta,
            horizon,
            ..
        } => MdpDocument::Tabular {
            n_states,
            n_actions,
            transitions,
            rewards: vec![vec![0.0; 2]; 4],
            eta,
            horizon,
        },
        _ => unreachable!(),
    })
    .unwrap();
    assert_eq!(ground_truth_value(&zero, &b).unwrap(), 0.0);
    let single = tabular(vec![vec![vec![1.0]]], vec![vec![1.0]], vec![1.0], 7);
    let pi = Policy::tabular(vec![vec![1.0]]).unwrap();
    assert_eq!(ground_truth_value(&single, &pi).unwrap(), 7.0);
}

#[test]
fn ground_truth_matches_monte_carlo() {
    let (env, _, eval) = chain4();
    let v = ground_truth_value(&env, &eval).unwrap();
    let mc = monte_carlo_value(&env, &eval, 1_000_000, 5).unwrap();
    assert!((mc.value - v).abs() <= 3.0 * mc.stderr, "{v} vs {mc:?}");
}

#[test]
fn ground_truth_rejects_linear_mdp() {
    let mdp = linear_mdp(0.9, 0.1, 0.01);
    let pi = Policy::linear(DMatrix::from_element(1, 1, -0.5), vec![0.3]).unwrap();
    assert!(ground_truth_value(&mdp, &pi).is_err());
    assert!(monte_carlo_value(&mdp, &pi, 100, 0)
        .unwrap()
        .value
        .is_finite());
}

#[test]
fn learned_rows_concentrate_on_deterministic_successors() {
    let mdp = flip(50);
    let pi = Policy::tabular(vec![vec![1.0], vec![1.0]]).unwrap();
    let data = rollout(&mdp, &pi, 20, 50, 0).unwrap();
    let fit = fit_tabular(&data, 2, 1, 1.0).unwrap();
    assert!(fit.prob(0, 0, 1) >= 0.99 && fit.prob(1, 0, 0) >= 0.99);
}

#[test]
fn unvisited_rows_are_uniform() {
    let mdp = flip(3);
    let pi = Policy::tabular(vec![vec![1.0], vec![1.0]]).unwrap();
    let mut data = rollout(&mdp, &pi, 5, 3, 0).unwrap();
    // Only ever observe state 0.
    for t in &mut data {
        t.states.truncate(2);
        t.actions.truncate(1);
        t.rewards.truncate(1);
    }
    let fit = fit_tabular(&data, 2, 1, 1.0).unwrap();
    assert_eq!(fit.probs()[0][1], vec![0.5, 0.5]);
}

fn linear_mdp(a: f64, b: f64, var: f64) -> Mdp {
    Mdp::from_document(MdpDocument::LinearGaussian {
        a: vec![vec![a]],
        b: vec![vec![b]],
        sigma: vec![vec![var]],
        reward: QuadraticReward {
            state_linear: vec![0.0],
            state_quadratic: vec![1.0],
            action_quadratic: vec![0.1],
        },
        eta: GaussianDocument {
            mean: vec![1.0],
            cov: vec![vec![0.25]],
        },
        horizon: 10,
    })
    .unwrap()
}

#[test]
fn least_squares_recovers_linear_dynamics() {
    let mdp = linear_mdp(0.9, 0.1, 0.01);
    let pi = Policy::linear(DMatrix::from_element(1, 1, 0.0), vec![1.0]).unwrap();
    let data = rollout(&mdp, &pi, 1000, 10, 2).unwrap();
    let fit = fit_linear_gaussian(&data, 1e-6).unwrap();
    assert!((fit.a()[(0, 0)] - 0.9).abs() <= 0.02);
    assert!((fit.b()[(0, 0)] - 0.1).abs() <= 0.02);
    assert!((fit.sigma()[(0, 0)] - 0.01).abs() <= 0.002);
}

#[test]
fn log_probability_factorizes() {
    let (env, b, _) = chain4();
    for t in rollout(&env, &b, 50, 20, 4).unwrap() {
        assert_abs_diff_eq!(
            trajectory_log_prob(&env, &b, &t),
            t.log_prob,
            epsilon = 1e-12
        );
    }
    let mdp = linear_mdp(0.8, 0.3, 0.04);
    let pi = Policy::linear(DMatrix::from_element(1, 1, -0.4), vec![0.2]).unwrap();
    for t in rollout(&mdp, &pi, 20, 10, 4).unwrap() {
        assert_abs_diff_eq!(
            trajectory_log_prob(&mdp, &pi, &t),
            t.log_prob,
            epsilon = 1e-9
        );
    }
}

#[test]
fn classifier_is_near_chance_when_model_is_exact() {
    let (env, b, _) = chain4();
    let data = rollout(&env, &b, 100, 20, 0).unwrap();
    let clf =
        train_transition_classifier(&data, env.dynamics(), &transition_train_config(1)).unwrap();
    assert_eq!(clf.gamma, 1.0);
    let held_out = rollout(&env, &b, 100, 20, 1).unwrap();
    let gaps: Vec<f64> = held_out
        .iter()
        .flat_map(|t| {
            t.transitions()
                .map(|(s, a, n)| clf.probability(s, a, n).unwrap())
        })
        .map(|c| (c - 0.5).abs())
        .collect();
    assert!(gaps.iter().sum::<f64>() / gaps.len() as f64 <= 0.05);
}

#[test]
fn classifier_separates_wrong_deterministic_successors() {
    let (env, b, _) = chain4();
    // Every (s, a) jumps to s + 2 mod 4, never a true successor.
    let wrong: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|_| {
            (0..4)
                .map(|s| {
                    let mut row = vec![0.0; 4];
                    row[(s + 2) % 4] = 1.0;
                    row
                })
                .collect()
        })
        .collect();
    let model = Dynamics::Tabular(TabularDynamics::new(wrong).unwrap());
    let data = rollout(&env, &b, 100, 20, 0).unwrap();
    let clf = train_transition_classifier(&data, &model, &transition_train_config(2)).unwrap();
    let held_out = rollout(&env, &b, 50, 20, 3).unwrap();
    let mut correct = 0;
    let mut total = 0;
    let mut rng = lfiw::rng::stream(0, "test", 0);
    for t in &held_out {
        for (s, a, n) in t.transitions() {
            correct += usize::from(clf.probability(s, a, n).unwrap() > 0.5);
            let fake = model.draw(s, a, &mut rng);
            correct += usize::from(clf.probability(s, a, &fake).unwrap() < 0.5);
            total += 2;
        }
    }
    assert!(correct as f64 / total as f64 >= 0.95);
}

#[test]
fn trajectory_weight_examples() {
    let (env, model, eval) = learned_chain(0.3);
    let oracle = OracleWeigher {
        truth: env.dynamics().clone(),
        model: model.dynamics().clone(),
    };
    let Dynamics::Tabular(p) = env.dynamics() else {
        unreachable!()
    };
    let Dynamics::Tabular(q) = model.dynamics() else {
        unreachable!()
    };
    for t in rollout(&model, &eval, 20, 20, 0).unwrap() {
        assert_eq!(trajectory_weight(&t, &oracle, 0).unwrap(), 1.0);
        assert_eq!(trajectory_weight(&t, &UnitWeigher, 20).unwrap(), 1.0);
        let direct: f64 = t
            .transitions()
            .map(|(s, a, n)| {
                let (s, a, n) = (s[0] as usize, a[0] as usize, n[0] as usize);
                p.prob(s, a, n) / q.prob(s, a, n)
            })
            .product();
        let w = trajectory_weight(&t, &oracle, 20).unwrap();
        assert!(
            (w - direct).abs() <= 1e-12 * direct.max(1.0),
            "{w} vs {direct}"
        );
    }
}

#[test]
fn unit_weights_recover_model_estimate() {
    let (_, model, eval) = learned_chain(0.3);
    let trajs = rollout(&model, &eval, 200, 20, 5).unwrap();
    let plain: f64 = trajs.iter().map(|t| t.total_return()).sum::<f64>() / 200.0;
    let v = lfiw_value(&model, &eval, &UnitWeigher, 200, 20, 20, 5, true).unwrap();
    assert_abs_diff_eq!(v.value, plain, epsilon = 1e-12);
    let s = stepwise_lfiw_value(&model, &eval, &UnitWeigher, 200, 20, 5, true).unwrap();
    assert_abs_diff_eq!(s.value, plain, epsilon = 1e-12);
}

#[test]
fn exact_model_with_oracle_weights_matches_truth() {
    let (env, _, eval) = chain4();
    let oracle = OracleWeigher {
        truth: env.dynamics().clone(),
        model: env.dynamics().clone(),
    };
    let v = ground_truth_value(&env, &eval).unwrap();
    let e = lfiw_value(&env, &eval, &oracle, 10_000, 20, 20, 1, true).unwrap();
    assert!((e.value - v).abs() <= 3.0 * e.stderr);
}

#[test]
fn oracle_weights_reduce_bias_of_corrupted_model() {
    let (env, model, eval) = learned_chain(0.3);
    let oracle = OracleWeigher {
        truth: env.dynamics().clone(),
        model: model.dynamics().clone(),
    };
    let v = ground_truth_value(&env, &eval).unwrap();
    let plain = lfiw_value(&model, &eval, &UnitWeigher, 10_000, 20, 0, 2, true).unwrap();
    let weighted = lfiw_value(&model, &eval, &oracle, 10_000, 20, 20, 2, true).unwrap();
    assert!((weighted.value - v).abs() < (plain.value - v).abs());
    let step = stepwise_lfiw_value(&model, &eval, &oracle, 10_000, 20, 2, true).unwrap();
    assert!((step.value - v).abs() < (plain.value - v).abs());
}

#[test]
fn stepwise_at_horizon_one_equals_trajectory_estimator() {
    let (env, model, eval) = learned_chain(0.3);
    let oracle = OracleWeigher {
        truth: env.dynamics().clone(),
        model: model.dynamics().clone(),
    };
    let model = model.with_horizon(1).unwrap();
    for sn in [true, false] {
        let a = lfiw_value(&model, &eval, &oracle, 500, 1, 1, 8, sn).unwrap();
        let b = stepwise_lfiw_value(&model, &eval, &oracle, 500, 1, 8, sn).unwrap();
        assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-12);
    }
}

#[test]
fn sweep_endpoints_and_length() {
    let (env, model, eval) = learned_chain(0.3);
    let oracle = OracleWeigher {
        truth: env.dynamics().clone(),
        model: model.dynamics().clone(),
    };
    let v = ground_truth_value(&env, &eval).unwrap();
    let hs = [0, 5, 10, 15, 20];
    let curve = horizon_sweep(&model, &eval, &oracle, 2000, 20, 3, true, &hs, Some(v)).unwrap();
    assert_eq!(curve.len(), hs.len());
    let plain = lfiw_value(&model, &eval, &UnitWeigher, 2000, 20, 0, 3, true).unwrap();
    let full = lfiw_value(&model, &eval, &oracle, 2000, 20, 20, 3, true).unwrap();
    assert_abs_diff_eq!(curve[0].value, plain.value, epsilon = 1e-12);
    assert_abs_diff_eq!(curve[4].value, full.value, epsilon = 1e-12);
    assert!(curve[4].delta.unwrap().abs() <= curve[0].delta.unwrap().abs());
    let csv = sweep_to_csv(&curve);
    assert!(csv.starts_with("H,value,stderr,delta\n"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn h_beyond_horizon_is_rejected() {
    let (_, model, eval) = learned_chain(0.1);
    assert!(lfiw_value(&model, &eval, &UnitWeigher, 10, 20, 21, 0, true).is_err());
}

#[test]
fn json_round_trip_and_unknown_keys() {
    let (env, b, _) = chain4();
    let again = Mdp::from_json(&env.to_json().unwrap()).unwrap();
    assert_eq!(again.to_document(), env.to_document());
    assert_eq!(
        Policy::from_json(&b.to_json().unwrap())
            .unwrap()
            .to_document(),
        b.to_document()
    );
    let bad = chain4_json()[0].replacen("\"horizon\"", "\"extra\": 1, \"horizon\"", 1);
    assert!(Mdp::from_json(&bad).is_err());
    let bad_row = chain4_json()[0].replacen("[1.0, 0.0, 0.0, 0.0]", "[1.0, 0.5, 0.0, 0.0]", 1);
    assert!(Mdp::from_json(&bad_row).is_err());
    let mdp = linear_mdp(0.9, 0.1, 0.01);
    assert_eq!(
        Mdp::from_json(&mdp.to_json().unwrap())
            .unwrap()
            .to_document(),
        mdp.to_document()
    );
}

#[test]
fn bagged_model_is_stochastic_and_deterministic() {
    let (env, b, _) = chain4();
    let data = rollout(&env, &b, 50, 20, 0).unwrap();
    let f1 = fit_bagged_tabular(&data, 4, 2, 1.0, 5, 3).unwrap();
    let f2 = fit_bagged_tabular(&data, 4, 2, 1.0, 5, 3).unwrap();
    assert_eq!(f1.probs(), f2.probs());
}

#[test]
fn experiment_endpoint_equals_model_estimate() {
    let (env, b, e) = chain4();
    let config = OpeConfig {
        h_values: vec![0, 10, 20],
        n_classifiers: 2,
        train: TrainConfig {
            epochs: 20,
            ..transition_train_config(0)
        },
        ..OpeConfig::default()
    };
    let r = run_ope_experiment(&env, &b, &e, &config).unwrap();
    assert_abs_diff_eq!(r.curve[0].value, r.model_value.value, epsilon = 1e-12);
    assert_abs_diff_eq!(r.curve[2].value, r.lfiw_value.value, epsilon = 1e-12);
    assert_eq!(r, run_ope_experiment(&env, &b, &e, &config).unwrap());
}

fn random_tabular(
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    raw: &[f64],
) -> (Mdp, Policy, Dynamics) {
    let mut it = raw.iter().cycle().map(|x| x + 0.05);
    let mut row = |k: usize| {
        let v: Vec<f64> = (0..k).map(|_| it.next().unwrap()).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let transitions: Vec<Vec<Vec<f64>>> = (0..n_actions)
        .map(|_| (0..n_states).map(|_| row(n_states)).collect())
        .collect();
    let model: Vec<Vec<Vec<f64>>> = (0..n_actions)
        .map(|_| (0..n_states).map(|_| row(n_states)).collect())
        .collect();
    let pi: Vec<Vec<f64>> = (0..n_states).map(|_| row(n_actions)).collect();
    let eta = row(n_states);
    let rewards = (0..n_states)
        .map(|_| row(n_actions).into_iter().map(|x| 3.0 * x - 1.0).collect())
        .collect();
    let mdp = tabular(transitions, rewards, eta, horizon);
    (
        mdp,
        Policy::tabular(pi).unwrap(),
        Dynamics::Tabular(TabularDynamics::new(model).unwrap()),
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn oracle_weights_telescope_and_enumeration_is_exact(
        n_states in 1usize..=4,
        n_actions in 1usize..=3,
        horizon in 1usize..=4,
        raw in proptest::collection::vec(0.0f64..1.0, 16..64),
    ) {
        prop_assume!(n_states * n_actions <= 12);
        let (env, pi, model_dyn) = random_tabular(n_states, n_actions, horizon, &raw);
        let model = env.with_dynamics(model_dyn.clone()).unwrap();
        let oracle = OracleWeigher { truth: env.dynamics().clone(), model: model_dyn };
        let mut mass = 0.0;
        let mut total = 0.0;
        for (t, p) in enumerate_trajectories(&model, &pi).unwrap() {
            mass += p * trajectory_weight(&t, &oracle, horizon).unwrap();
            total += p;
        }
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!((mass - 1.0).abs() <= 1e-12);
        let exact = exact_lfiw_value(&model, &pi, &oracle, horizon).unwrap();
        let v = ground_truth_value(&env, &pi).unwrap();
        prop_assert!((exact - v).abs() <= 1e-12, "{} vs {}", exact, v);
    }

    #[test]
    fn self_normalized_value_is_bounded_by_returns(seed in 0u64..1000, h in 0usize..=20) {
        let (env, model, eval) = learned_chain(0.3);
        let oracle = OracleWeigher { truth: env.dynamics().clone(), model: model.dynamics().clone() };
        let trajs = rollout(&model, &eval, 30, 20, seed).unwrap();
        let lw = step_log_weights(&trajs, &oracle).unwrap();
        let v = match weighted_value(&trajs, &lw, h, true) {
            Ok(e) => e.value,
            Err(lfiw::Error::ZeroWeights) => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        let r: Vec<f64> = trajs.iter().map(|t| t.total_return()).collect();
        let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
    }
}
