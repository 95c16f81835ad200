//! Independent reference computations used to check the exact solvers and
//! the learned components: Monte-Carlo marginals, iterative policy
//! evaluation, central finite differences, a straight-line network forward
//! pass and random-search baselines.

use rand::Rng;
use rand_distr::{Distribution, Geometric};

use crate::envs::SimRng;
use crate::error::{Error, Result};
use crate::mdp::{
    policy_evaluation, sample_categorical, start_value, TabularMdp, TabularPolicy, Tensor3,
};

/// Empirical marginal transition distribution from `n_samples` independent
/// draws: start from `rho0`, run for `t ~ Geometric(1 - gamma)` steps, then
/// record the transition taken at step `t`.
pub fn monte_carlo_marginal(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    n_samples: usize,
    rng: &mut SimRng,
) -> Result<Tensor3> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    if policy.n_states() != ns || policy.n_actions() != na {
        return Err(Error::Dimension("policy does not match MDP".into()));
    }
    if n_samples == 0 {
        return Err(Error::Empty("Monte-Carlo sample count".into()));
    }
    let geo =
        Geometric::new(1.0 - mdp.gamma()).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut counts = vec![vec![vec![0.0; ns]; na]; ns];
    let t = mdp.transition();
    for _ in 0..n_samples {
        let steps = geo.sample(rng);
        let mut s = sample_categorical(mdp.rho0(), rng);
        for _ in 0..steps {
            let a = policy.sample(s, rng);
            s = sample_categorical(&t[s][a], rng);
        }
        let a = policy.sample(s, rng);
        let s2 = sample_categorical(&t[s][a], rng);
        counts[s][a][s2] += 1.0;
    }
    let n = n_samples as f64;
    counts.iter_mut().flatten().flatten().for_each(|c| *c /= n);
    Ok(counts)
}

/// Policy evaluation by repeated Bellman backups from zero.
pub fn iterative_policy_evaluation(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    iterations: usize,
) -> Vec<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let (t, r, g) = (mdp.transition(), mdp.reward(), mdp.gamma());
    let mut v = vec![0.0; ns];
    for _ in 0..iterations {
        v = (0..ns)
            .map(|s| {
                (0..na)
                    .map(|a| {
                        policy.prob(s, a)
                            * (0..ns)
                                .map(|s2| t[s][a][s2] * (r[s][a][s2] + g * v[s2]))
                                .sum::<f64>()
                    })
                    .sum()
            })
            .collect();
    }
    v
}

/// Central finite-difference gradient of `f` at `x` with step `eps`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Fourth-order five-point finite-difference gradient of `f` at `x`:
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`. Truncation error is
/// `O(h^4)`, so a larger `h` keeps roundoff small.
pub fn five_point_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let mut at = |d: f64| {
                probe[i] = x[i] + d;
                f(&probe)
            };
            let g = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            probe[i] = x[i];
            g
        })
        .collect()
}

/// Largest relative error `|a - b| / max(|a|, |b|, floor)` over two gradients.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Forward pass of a tanh network written with explicit loops over the flat
/// parameter layout (per layer: `in x out` row-major weights, then biases).
pub fn straight_line_forward(sizes: &[usize], params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut offset = 0;
    let n_layers = sizes.len() - 1;
    for l in 0..n_layers {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let mut z = vec![0.0; n_out];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut acc = params[offset + n_in * n_out + j];
            for (i, hi) in h.iter().enumerate() {
                acc += hi * params[offset + i * n_out + j];
            }
            *zj = if l + 1 < n_layers { acc.tanh() } else { acc };
        }
        offset += (n_in + 1) * n_out;
        h = z;
    }
    h
}

/// Best start-state value among `n` uniformly random stochastic policies.
pub fn best_random_policy_value(mdp: &TabularMdp, n: usize, rng: &mut SimRng) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for _ in 0..n {
        let pi = if rng.random_bool(0.5) {
            TabularPolicy::random(mdp.n_states(), mdp.n_actions(), rng)
        } else {
            let acts: Vec<usize> = (0..mdp.n_states())
                .map(|_| rng.random_range(0..mdp.n_actions()))
                .collect();
            TabularPolicy::deterministic(&acts, mdp.n_actions())?
        };
        best = best.max(start_value(mdp, &policy_evaluation(mdp, &pi)?));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::rng_from_seed;

    #[test]
    fn finite_difference_of_quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn five_point_is_exact_on_quartics() {
        let g = five_point_difference(|x| x[0].powi(4) - 2.0 * x[0] * x[1], &[1.5, 0.5], 1e-2);
        assert!((g[0] - (4.0 * 1.5f64.powi(3) - 1.0)).abs() < 1e-9);
        assert!((g[1] + 3.0).abs() < 1e-9);
    }

    #[test]
    fn straight_line_matches_hand_arithmetic() {
        // 1 -> 1 -> 1 with w1 = 2, b1 = 0.5, w2 = -1, b2 = 0.25.
        let y = straight_line_forward(&[1, 1, 1], &[2.0, 0.5, -1.0, 0.25], &[0.3]);
        assert!((y[0] - (0.25 - (0.6f64 + 0.5).tanh())).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_sums_to_one() {
        let mut rng = rng_from_seed(1);
        let mdp = TabularMdp::random(3, 2, 0.8, &mut rng).unwrap();
        let pi = TabularPolicy::uniform(3, 2);
        let rho = monte_carlo_marginal(&mdp, &pi, 1000, &mut rng).unwrap();
        let total: f64 = rho.iter().flatten().flatten().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
