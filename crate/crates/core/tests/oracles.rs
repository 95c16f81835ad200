//! Exact solvers and learned components checked against independent
//! reference computations and hand-derived values.

use std::f64::consts::LN_2;

use garat::adversarial::{
    exact_divergence_minimizer, optimal_discriminator, reward_from_prob, transformer_reward,
    Discriminator,
};
use garat::baselines::compose_tabular;
use garat::envs::{
    make_pair, rng_from_seed, Environment, Gridworld, GridworldParams, PairConfig, Pendulum,
    PendulumParams, DEFAULT_REAL_MASS, DEFAULT_SIM_MASS,
};
use garat::grounding::{
    build_at_mdp, grounded_marginal, grounded_mdp, grounded_transition, identity_probs,
};
use garat::harness::scaled_return;
use garat::mdp::{
    expected_return_from_marginal, greedy_action_sets, js_divergence, marginal_js,
    marginal_transition_distribution, policy_evaluation, random_simplex, recover_transition,
    start_value, state_occupancy, tv_distance, value_iteration, TabularMdp, TabularPolicy, Tensor3,
};
use garat::nn::{clipped_surrogate, gae};
use garat::oracles::{five_point_difference, iterative_policy_evaluation, monte_carlo_marginal};

fn random_instance(ns: usize, na: usize, gamma: f64, seed: u64) -> (TabularMdp, TabularPolicy) {
    let mut rng = rng_from_seed(seed);
    let mdp = TabularMdp::random(ns, na, gamma, &mut rng).unwrap();
    let pi = TabularPolicy::random(ns, na, &mut rng);
    (mdp, pi)
}

/// Discounted state occupancy by summing `(1-gamma) gamma^t rho_t` directly.
fn occupancy_by_series(mdp: &TabularMdp, pi: &TabularPolicy, terms: usize) -> Vec<f64> {
    let ns = mdp.n_states();
    let mut rho_t = mdp.rho0().to_vec();
    let mut d = vec![0.0; ns];
    let mut w = 1.0 - mdp.gamma();
    for _ in 0..terms {
        for s in 0..ns {
            d[s] += w * rho_t[s];
        }
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..mdp.n_actions() {
                for s2 in 0..ns {
                    next[s2] += rho_t[s] * pi.prob(s, a) * mdp.transition()[s][a][s2];
                }
            }
        }
        rho_t = next;
        w *= mdp.gamma();
    }
    d
}

#[test]
fn occupancy_matches_truncated_series() {
    for seed in 0..20 {
        let (mdp, pi) = random_instance(5, 3, 0.8, seed);
        let d = state_occupancy(&mdp, &pi).unwrap();
        let series = occupancy_by_series(&mdp, &pi, 400);
        for (a, b) in d.iter().zip(&series) {
            assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn return_from_marginal_matches_bellman_iteration() {
    for seed in 0..20 {
        let (mdp, pi) = random_instance(4, 3, 0.9, 100 + seed);
        let rho = marginal_transition_distribution(&mdp, &pi).unwrap();
        let r = expected_return_from_marginal(&rho, mdp.reward(), mdp.gamma()).unwrap();
        let v = iterative_policy_evaluation(&mdp, &pi, 2000);
        assert!((r - start_value(&mdp, &v)).abs() < 1e-9);
    }
}

#[test]
fn two_state_chain_closed_form() {
    // From state 0 the only action moves to the absorbing state 1, which pays
    // 1 per step. d = ((1-g), g), so the return is g / (1-g).
    let g = 0.75;
    let t = vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]];
    let r = vec![vec![vec![0.0, 0.0]], vec![vec![0.0, 1.0]]];
    let mdp = TabularMdp::new(t, r, g, vec![1.0, 0.0]).unwrap();
    let pi = TabularPolicy::uniform(2, 1);
    let rho = marginal_transition_distribution(&mdp, &pi).unwrap();
    assert!((rho.rho[0][0][1] - 0.25).abs() < 1e-15);
    assert!((rho.rho[1][0][1] - 0.75).abs() < 1e-15);
    let ret = expected_return_from_marginal(&rho, mdp.reward(), g).unwrap();
    assert!((ret - 3.0).abs() < 1e-12);
}

#[test]
fn monte_carlo_agrees_with_exact_marginal() {
    let (mdp, pi) = random_instance(3, 2, 0.7, 7);
    let rho = marginal_transition_distribution(&mdp, &pi).unwrap();
    let mut rng = rng_from_seed(8);
    let est = monte_carlo_marginal(&mdp, &pi, 50_000, &mut rng).unwrap();
    let flat: Vec<f64> = est.iter().flatten().flatten().copied().collect();
    assert!(tv_distance(&flat, &rho.flat()) < 0.015);
}

/// Best start value over all deterministic policies, by enumeration.
fn brute_force_optimum(mdp: &TabularMdp) -> f64 {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut best = f64::NEG_INFINITY;
    for code in 0..na.pow(ns as u32) {
        let actions: Vec<usize> = (0..ns).map(|s| (code / na.pow(s as u32)) % na).collect();
        let pi = TabularPolicy::deterministic(&actions, na).unwrap();
        best = best.max(start_value(mdp, &policy_evaluation(mdp, &pi).unwrap()));
    }
    best
}

#[test]
fn value_iteration_matches_enumeration() {
    for seed in 0..10 {
        let (mdp, _) = random_instance(4, 3, 0.9, 200 + seed);
        let v = value_iteration(&mdp, 1e-12);
        assert!((start_value(&mdp, &v) - brute_force_optimum(&mdp)).abs() < 1e-8);
    }
}

#[test]
fn transition_recovery_inverts_the_marginal() {
    let (mdp, pi) = random_instance(5, 3, 0.95, 3);
    let rho = marginal_transition_distribution(&mdp, &pi).unwrap();
    let rec = recover_transition(&rho, &pi).unwrap();
    for s in 0..5 {
        for a in 0..3 {
            if rec.is_visited(s, a) {
                for s2 in 0..5 {
                    assert!((rec.transition[s][a][s2] - mdp.transition()[s][a][s2]).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn jensen_shannon_reference_values() {
    assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]) - LN_2).abs() < 1e-15);
    assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    // p = (1/2, 1/2), q = (1, 0): m = (3/4, 1/4),
    // JS = 1/2 [1/2 ln(2/3) + 1/2 ln 2] + 1/2 ln(4/3).
    let expected =
        0.5 * (0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2.0f64.ln()) + 0.5 * (4.0f64 / 3.0).ln();
    assert!((js_divergence(&[0.5, 0.5], &[1.0, 0.0]) - expected).abs() < 1e-15);
}

#[test]
fn discriminator_optimum_and_loss_identity() {
    let (sim, pi) = random_instance(3, 2, 0.9, 11);
    let mut rng = rng_from_seed(12);
    let real = sim
        .with_transition(
            TabularMdp::random(3, 2, 0.9, &mut rng)
                .unwrap()
                .transition()
                .clone(),
        )
        .unwrap();
    let rho_g = marginal_transition_distribution(&sim, &pi).unwrap();
    let rho_r = marginal_transition_distribution(&real, &pi).unwrap();
    let d = optimal_discriminator(&rho_g, &rho_r);
    let (g, r) = (rho_g.flat(), rho_r.flat());
    let mut loss = 0.0;
    for i in 0..g.len() {
        match d[i] {
            Some(p) => {
                assert!((p - g[i] / (g[i] + r[i])).abs() < 1e-15);
                if g[i] > 0.0 {
                    loss -= g[i] * p.ln();
                }
                if r[i] > 0.0 {
                    loss -= r[i] * (1.0 - p).ln();
                }
            }
            None => assert!(g[i] + r[i] == 0.0),
        }
    }
    assert!((loss - (2.0 * LN_2 - 2.0 * marginal_js(&rho_g, &rho_r))).abs() < 1e-12);
}

#[test]
fn transformer_reward_values() {
    assert!((reward_from_prob(0.5) - LN_2).abs() < 1e-15);
    assert!((reward_from_prob(0.25) - 4.0f64.ln()).abs() < 1e-15);
    // An all-zero logistic table outputs 1/2 everywhere.
    let d = Discriminator::tabular(2, 2);
    let r = transformer_reward(&d, &[0.0], &[1.0], &[1.0]).unwrap();
    assert!((r - LN_2).abs() < 1e-15);
}

#[test]
fn identity_transformer_leaves_the_simulator_unchanged() {
    let (sim, pi) = random_instance(4, 3, 0.9, 21);
    let id = identity_probs(4, 3);
    assert_eq!(
        &grounded_transition(sim.transition(), &id).unwrap(),
        sim.transition()
    );
    let a = grounded_marginal(&sim, &pi, &id).unwrap();
    let b = marginal_transition_distribution(&sim, &pi).unwrap();
    assert!(tv_distance(&a.flat(), &b.flat()) < 1e-15);
}

#[test]
fn action_transformation_mdp_occupancy_factorizes() {
    // With the identity transformer the AT-MDP occupancy over (s, a) is the
    // simulator occupancy times the agent policy.
    let (sim, pi) = random_instance(3, 2, 0.9, 31);
    let at = build_at_mdp(&sim, &pi).unwrap();
    let ident: Vec<Vec<f64>> = (0..6)
        .map(|x| (0..2).map(|b| f64::from(at.split(x).1 == b)).collect())
        .collect();
    let dx = state_occupancy(&at.mdp, &TabularPolicy::new(ident).unwrap()).unwrap();
    let ds = state_occupancy(&sim, &pi).unwrap();
    for s in 0..3 {
        for a in 0..2 {
            assert!((dx[at.index(s, a)] - ds[s] * pi.prob(s, a)).abs() < 1e-12);
        }
    }
}

#[test]
fn exact_minimizer_finds_a_realizable_grounding() {
    let (sim, pi) = random_instance(3, 2, 0.9, 41);
    let mut rng = rng_from_seed(42);
    let mix: Tensor3 = (0..3)
        .map(|_| (0..2).map(|_| random_simplex(2, &mut rng)).collect())
        .collect();
    let real = grounded_mdp(&sim, &mix).unwrap();
    let rho_real = marginal_transition_distribution(&real, &pi).unwrap();
    let best = exact_divergence_minimizer(&sim, &pi, &rho_real, 10, 0).unwrap();
    let start = marginal_js(
        &marginal_transition_distribution(&sim, &pi).unwrap(),
        &rho_real,
    );
    assert!(best.js < 1e-6, "{}", best.js);
    assert!(best.js <= start);
}

#[test]
fn exact_minimizer_refuses_large_instances() {
    let (sim, pi) = random_instance(17, 4, 0.9, 1);
    let rho = marginal_transition_distribution(&sim, &pi).unwrap();
    assert!(matches!(
        exact_divergence_minimizer(&sim, &pi, &rho, 1, 0),
        Err(garat::Error::TooLarge(_))
    ));
}

#[test]
fn model_based_composition_with_exact_models_recovers_real_dynamics() {
    // Simulator: action b moves deterministically to state b. Real: action a
    // reaches state a with probability 0.8. With the exact real forward model
    // and the exact simulator inverse model, the composed transformer
    // reproduces the real dynamics.
    let sim_t: Tensor3 = (0..2)
        .map(|_| {
            (0..2)
                .map(|b| (0..2).map(|s2| f64::from(s2 == b)).collect())
                .collect()
        })
        .collect();
    let real_t: Tensor3 = (0..2)
        .map(|_| {
            (0..2)
                .map(|a| (0..2).map(|s2| if s2 == a { 0.8 } else { 0.2 }).collect())
                .collect()
        })
        .collect();
    let inverse: Tensor3 = (0..2)
        .map(|_| {
            (0..2)
                .map(|s2| (0..2).map(|b| f64::from(b == s2)).collect())
                .collect()
        })
        .collect();
    let probs = compose_tabular(&real_t, &inverse, 1.0);
    let g = grounded_transition(&sim_t, &probs).unwrap();
    for s in 0..2 {
        for a in 0..2 {
            for s2 in 0..2 {
                assert!((g[s][a][s2] - real_t[s][a][s2]).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn equal_dynamics_share_greedy_actions() {
    let (sim, _) = random_instance(4, 3, 0.9, 51);
    let copy = sim.with_transition(sim.transition().clone()).unwrap();
    assert_eq!(greedy_action_sets(&sim), greedy_action_sets(&copy));
}

#[test]
fn gae_hand_computed() {
    // Three steps, gamma 0.5, lambda 0.5, episode ends in a true termination.
    let rewards = [1.0, 2.0, 3.0];
    let values = [0.5, 1.0, 1.5];
    let next_values = [1.0, 1.5, 9.0];
    let dones = [false, false, true];
    let ends = [false, false, true];
    let (adv, ret) = gae(&rewards, &values, &next_values, &dones, &ends, 0.5, 0.5);
    let d2 = 3.0 - 1.5;
    let d1 = 2.0 + 0.5 * 1.5 - 1.0;
    let d0 = 1.0 + 0.5 * 1.0 - 0.5;
    let a2 = d2;
    let a1 = d1 + 0.25 * a2;
    let a0 = d0 + 0.25 * a1;
    for (x, y) in adv.iter().zip([a0, a1, a2]) {
        assert!((x - y).abs() < 1e-15);
    }
    for i in 0..3 {
        assert!((ret[i] - (adv[i] + values[i])).abs() < 1e-15);
    }
    // lambda = 1 gives discounted Monte-Carlo returns minus the baseline.
    let (adv, _) = gae(&rewards, &values, &next_values, &dones, &ends, 0.5, 1.0);
    assert!((adv[0] - (1.0 + 0.5 * 2.0 + 0.25 * 3.0 - 0.5)).abs() < 1e-15);
}

#[test]
fn clipped_surrogate_cases() {
    assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), (1.2, 0.0));
    assert_eq!(clipped_surrogate(0.5, 1.0, 0.2), (0.5, 1.0));
    assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), (-0.8, 0.0));
    assert_eq!(clipped_surrogate(1.5, -1.0, 0.2), (-1.5, -1.0));
    assert_eq!(clipped_surrogate(1.0, 2.0, 0.2), (2.0, 2.0));
}

#[test]
fn pendulum_step_by_hand() {
    let p = PendulumParams::with_mass(2.0);
    let (theta, omega, action) = (0.1f64, -0.2, 0.5);
    let inertia = 10.0 + 2.0;
    let acc = (2.0 * 9.81 * theta.sin() + 300.0) / inertia;
    let omega2 = omega + 0.02 * acc;
    let theta2 = theta + 0.02 * omega2;
    let mut env = Pendulum::new(p).unwrap();
    env.set_state(&[theta, omega]).unwrap();
    let out = env.step(&[action], &mut rng_from_seed(0));
    assert!((out.next_state[0] - theta2).abs() < 1e-15);
    assert!((out.next_state[1] - omega2).abs() < 1e-15);
    assert_eq!(out.reward, 1.0);
    assert!(!out.done);
    // Actions beyond the bounds act like the bound.
    env.set_state(&[theta, omega]).unwrap();
    let clipped = env.step(&[7.0], &mut rng_from_seed(0));
    env.set_state(&[theta, omega]).unwrap();
    let bound = env.step(&[1.0], &mut rng_from_seed(0));
    assert_eq!(clipped, bound);
}

#[test]
fn default_pendulum_pair_masses() {
    assert_eq!(DEFAULT_SIM_MASS, 4.89);
    assert_eq!(DEFAULT_REAL_MASS, 100.0);
    let pair = make_pair(&PairConfig::pendulum_default()).unwrap();
    assert_eq!(pair.modification.default_value, 4.89);
    assert_eq!(pair.modification.modified_value, 100.0);
    // The same torque from rest at a tilt: the heavy bob falls faster.
    let (mut sim, mut real) = (pair.sim.clone(), pair.real.clone());
    sim.set_state(&[0.1, 0.0]).unwrap();
    real.set_state(&[0.1, 0.0]).unwrap();
    let mut rng = rng_from_seed(0);
    let (s, r) = (sim.step(&[0.0], &mut rng), real.step(&[0.0], &mut rng));
    assert!(r.next_state[1] > s.next_state[1]);
}

#[test]
fn gridworld_slip_distribution() {
    // 2x2 grid, state 0 is top-left; "right" (1) leads to state 1. With slip
    // 0.4: up and left bump into walls (stay), down leads to 2.
    let g = Gridworld::new(GridworldParams::new(2, 0.4)).unwrap();
    let t = &g.tabular_view().unwrap().transition()[0][1];
    assert!((t[0] - 0.2).abs() < 1e-15);
    assert!((t[1] - (0.6 + 0.1)).abs() < 1e-15);
    assert!((t[2] - 0.1).abs() < 1e-15);
    assert_eq!(t[3], 0.0);
}

#[test]
fn five_point_stencil_is_exact_on_quartics() {
    let f = |x: &[f64]| x[0].powi(4) - 3.0 * x[0] * x[1] + x[1].powi(3);
    let g = five_point_difference(f, &[1.3, -0.7], 0.1);
    let exact = [4.0 * 1.3f64.powi(3) - 3.0 * -0.7, -3.0 * 1.3 + 3.0 * 0.49];
    assert!((g[0] - exact[0]).abs() < 1e-12);
    assert!((g[1] - exact[1]).abs() < 1e-12);
}

#[test]
fn scaled_return_anchoring() {
    assert_eq!(scaled_return(67.0, 67.0, 200.0).unwrap(), 0.0);
    assert_eq!(scaled_return(200.0, 67.0, 200.0).unwrap(), 1.0);
    assert!((scaled_return(133.5, 67.0, 200.0).unwrap() - 0.5).abs() < 1e-15);
}
