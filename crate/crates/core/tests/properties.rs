//! Invariants over randomly generated instances.

use proptest::prelude::*;

use garat::adversarial::{project_simplex, reward_from_prob};
use garat::envs::{rng_from_seed, ActionSpace};
use garat::grounding::{grounded_marginal, grounded_transition, ActionTransformer};
use garat::harness::{median, scaled_return};
use garat::mdp::{
    expected_return_from_marginal, js_divergence, marginal_transition_distribution,
    policy_evaluation, random_simplex, recover_transition, start_value, tv_distance, TabularMdp,
    TabularPolicy, Tensor3,
};
use garat::nn::softmax;

fn instance() -> impl Strategy<Value = (TabularMdp, TabularPolicy)> {
    (1usize..6, 1usize..4, 0.0f64..0.99, any::<u64>()).prop_map(|(ns, na, gamma, seed)| {
        let mut rng = rng_from_seed(seed);
        let mdp = TabularMdp::random(ns, na, gamma, &mut rng).unwrap();
        let pi = TabularPolicy::random(ns, na, &mut rng);
        (mdp, pi)
    })
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    any::<u64>().prop_map(move |seed| random_simplex(n, &mut rng_from_seed(seed)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn marginal_is_a_distribution((mdp, pi) in instance()) {
        let rho = marginal_transition_distribution(&mdp, &pi).unwrap();
        prop_assert!((rho.total() - 1.0).abs() < 1e-9);
        prop_assert!(rho.flat().iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn return_identity((mdp, pi) in instance()) {
        let rho = marginal_transition_distribution(&mdp, &pi).unwrap();
        let r = expected_return_from_marginal(&rho, mdp.reward(), mdp.gamma()).unwrap();
        let v = start_value(&mdp, &policy_evaluation(&mdp, &pi).unwrap());
        prop_assert!((r - v).abs() < 1e-9 * (1.0 + v.abs()));
    }

    #[test]
    fn recovery_round_trip((mdp, pi) in instance()) {
        let rho = marginal_transition_distribution(&mdp, &pi).unwrap();
        let rec = recover_transition(&rho, &pi).unwrap();
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                if rec.is_visited(s, a) {
                    for (x, y) in rec.transition[s][a].iter().zip(&mdp.transition()[s][a]) {
                        prop_assert!((x - y).abs() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn grounded_dynamics_stay_stochastic((mdp, pi) in instance(), seed in any::<u64>()) {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut rng = rng_from_seed(seed);
        let probs: Tensor3 = (0..ns).map(|_| (0..na).map(|_| random_simplex(na, &mut rng)).collect()).collect();
        let t = grounded_transition(mdp.transition(), &probs).unwrap();
        for row in t.iter().flatten() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let rho = grounded_marginal(&mdp, &pi, &probs).unwrap();
        prop_assert!((rho.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn jensen_shannon_bounds(p in distribution(6), q in distribution(6)) {
        let js = js_divergence(&p, &q);
        prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&js));
        prop_assert!((js - js_divergence(&q, &p)).abs() < 1e-12);
        prop_assert!(js_divergence(&p, &p) < 1e-12);
        // JS <= TV ln 2 (both are f-divergences with this ordering).
        prop_assert!(js <= tv_distance(&p, &q) * std::f64::consts::LN_2 + 1e-12);
    }

    #[test]
    fn projection_lands_on_the_simplex(v in prop::collection::vec(-3.0f64..3.0, 1..8)) {
        let p = project_simplex(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        // Projecting a point already on the simplex leaves it there.
        let again = project_simplex(&p);
        for (a, b) in p.iter().zip(&again) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transformer_reward_is_decreasing(a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
        prop_assume!(a < b);
        prop_assert!(reward_from_prob(a) > reward_from_prob(b));
        prop_assert!(reward_from_prob(b) >= 0.0);
    }

    #[test]
    fn softmax_is_shift_invariant(v in prop::collection::vec(-20.0f64..20.0, 1..6), c in -50.0f64..50.0) {
        let p = softmax(&v);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let q = softmax(&shifted);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in p.iter().zip(&q) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_return_is_affine(s in -100.0f64..100.0, gap in 1.0f64..100.0, t in -1.0f64..2.0) {
        let r = s + gap;
        let x = scaled_return(s + t * gap, s, r).unwrap();
        prop_assert!((x - t).abs() < 1e-9);
    }

    #[test]
    fn median_lies_between_extremes(v in prop::collection::vec(-1e3f64..1e3, 1..20)) {
        let m = median(&v);
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= m && m <= hi);
    }

    #[test]
    fn box_clipping_is_idempotent(x in prop::collection::vec(-5.0f64..5.0, 2)) {
        let space = ActionSpace::Box { low: vec![-1.0, -2.0], high: vec![1.0, 0.5] };
        let once = space.clip(&x);
        prop_assert_eq!(space.clip(&once), once.clone());
        prop_assert!(once[0].abs() <= 1.0 && (-2.0..=0.5).contains(&once[1]));
    }

    #[test]
    fn transformer_checkpoints_round_trip(seed in any::<u64>(), ns in 1usize..4, na in 1usize..4) {
        let mut rng = rng_from_seed(seed);
        let probs: Tensor3 = (0..ns).map(|_| (0..na).map(|_| random_simplex(na, &mut rng)).collect()).collect();
        let t = ActionTransformer::table(probs).unwrap();
        let back = ActionTransformer::from_json(&t.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, t);
    }
}
