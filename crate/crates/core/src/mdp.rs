//! Exact finite-MDP machinery: transition tensors, tabular policies, marginal
//! transition distributions and dynamic-programming solvers.
//!
//! Every quantity here is computed by a direct linear solve, never by a
//! truncated sum, so the results can serve as ground truth for the sampled
//! estimators elsewhere in the crate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `[s][a][s']` tensor.
pub type Tensor3 = Vec<Vec<Vec<f64>>>;

/// Row sums further than this from 1 are rejected outright.
pub const NORMALIZE_TOL: f64 = 1e-9;
/// Row sums within this of 1 are left untouched, which keeps JSON round trips
/// bit-stable.
pub const EXACT_TOL: f64 = 1e-12;
/// State-action pairs with less marginal mass than this count as unvisited.
pub const UNVISITED_MASS: f64 = 1e-12;

fn normalize_row(row: &mut [f64], what: &str) -> Result<()> {
    if row
        .iter()
        .any(|p| !p.is_finite() || *p < -EXACT_TOL || *p > 1.0 + NORMALIZE_TOL)
    {
        return Err(Error::InvalidDistribution(format!(
            "{what}: entry outside [0,1]"
        )));
    }
    for p in row.iter_mut() {
        if *p < 0.0 {
            *p = 0.0;
        }
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > NORMALIZE_TOL {
        return Err(Error::InvalidDistribution(format!("{what}: sums to {sum}")));
    }
    if (sum - 1.0).abs() > EXACT_TOL {
        row.iter_mut().for_each(|p| *p /= sum);
    }
    Ok(())
}

/// A finite MDP `<S, A, R, T, gamma, rho0>` with explicit tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    rho0: Vec<f64>,
    transition: Tensor3,
    reward: Tensor3,
}

/// On-disk JSON layout of a [`TabularMdp`].
#[derive(Serialize, Deserialize)]
struct MdpDocument {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    rho0: Vec<f64>,
    #[serde(rename = "T")]
    transition: Tensor3,
    #[serde(rename = "R")]
    reward: Tensor3,
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        let mdp = TabularMdp::new(doc.transition, doc.reward, doc.gamma, doc.rho0)?;
        if mdp.n_states != doc.n_states || mdp.n_actions != doc.n_actions {
            return Err(Error::Dimension(format!(
                "header says {}x{}, tensors are {}x{}",
                doc.n_states, doc.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(mdp)
    }
}

impl From<TabularMdp> for MdpDocument {
    fn from(m: TabularMdp) -> Self {
        MdpDocument {
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: m.gamma,
            rho0: m.rho0,
            transition: m.transition,
            reward: m.reward,
        }
    }
}

pub(crate) fn check_tensor_shape(
    t: &Tensor3,
    ns: usize,
    na: usize,
    ns2: usize,
    what: &str,
) -> Result<()> {
    if t.len() != ns
        || t.iter()
            .any(|r| r.len() != na || r.iter().any(|c| c.len() != ns2))
    {
        return Err(Error::Dimension(format!("{what} is not {ns}x{na}x{ns2}")));
    }
    Ok(())
}

impl TabularMdp {
    /// Validates and (within [`NORMALIZE_TOL`]) renormalizes the stochastic parts.
    pub fn new(
        mut transition: Tensor3,
        reward: Tensor3,
        gamma: f64,
        mut rho0: Vec<f64>,
    ) -> Result<Self> {
        let n_states = transition.len();
        if n_states == 0 {
            return Err(Error::Empty("transition tensor".into()));
        }
        let n_actions = transition[0].len();
        if n_actions == 0 {
            return Err(Error::Empty("action set".into()));
        }
        check_tensor_shape(&transition, n_states, n_actions, n_states, "transition")?;
        check_tensor_shape(&reward, n_states, n_actions, n_states, "reward")?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidParameter(format!(
                "gamma = {gamma} must lie in [0,1)"
            )));
        }
        if reward.iter().flatten().flatten().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("reward".into()));
        }
        if rho0.len() != n_states {
            return Err(Error::Dimension("rho0 length".into()));
        }
        for (s, rows) in transition.iter_mut().enumerate() {
            for (a, row) in rows.iter_mut().enumerate() {
                normalize_row(row, &format!("T[{s}][{a}]"))?;
            }
        }
        normalize_row(&mut rho0, "rho0")?;
        Ok(Self {
            n_states,
            n_actions,
            gamma,
            rho0,
            transition,
            reward,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rho0(&self) -> &[f64] {
        &self.rho0
    }

    pub fn transition(&self) -> &Tensor3 {
        &self.transition
    }

    pub fn reward(&self) -> &Tensor3 {
        &self.reward
    }

    /// Same rewards, discount and start distribution with a different transition tensor.
    pub fn with_transition(&self, transition: Tensor3) -> Result<Self> {
        Self::new(
            transition,
            self.reward.clone(),
            self.gamma,
            self.rho0.clone(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Random instance with dense positive transitions and rewards in [0, 1).
    pub fn random<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let transition = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| random_simplex(n_states, rng))
                    .collect()
            })
            .collect();
        let reward = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| (0..n_states).map(|_| rng.random::<f64>()).collect())
                    .collect()
            })
            .collect();
        let rho0 = random_simplex(n_states, rng);
        Self::new(transition, reward, gamma, rho0)
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(Error::Dimension(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }

    /// State-to-state kernel `P[s][s'] = sum_a pi(a|s) T(s'|s,a)`.
    fn state_kernel(&self, policy: &TabularPolicy) -> DMatrix<f64> {
        let n = self.n_states;
        DMatrix::from_fn(n, n, |s, s2| {
            (0..self.n_actions)
                .map(|a| policy.probs[s][a] * self.transition[s][a][s2])
                .sum()
        })
    }
}

/// Uniformly random point on the probability simplex.
pub fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    // Normalized exponentials give a flat Dirichlet.
    let mut v: Vec<f64> = (0..n)
        .map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-3)
        .collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// A stationary stochastic policy `pi[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(mut probs: Vec<Vec<f64>>) -> Result<Self> {
        if probs.is_empty() || probs[0].is_empty() {
            return Err(Error::Empty("policy table".into()));
        }
        let na = probs[0].len();
        for (s, row) in probs.iter_mut().enumerate() {
            if row.len() != na {
                return Err(Error::Dimension(format!(
                    "policy row {s} has {} actions",
                    row.len()
                )));
            }
            normalize_row(row, &format!("pi[{s}]"))?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        if actions.iter().any(|&a| a >= n_actions) {
            return Err(Error::Dimension("action index out of range".into()));
        }
        Self::new(
            actions
                .iter()
                .map(|&a| {
                    (0..n_actions)
                        .map(|b| if a == b { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect(),
        )
    }

    /// Random policy with every action probability positive.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        Self {
            probs: (0..n_states)
                .map(|_| random_simplex(n_actions, rng))
                .collect(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.probs[0].len()
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }

    /// Greedy action of a deterministic policy (lowest index among maxima).
    pub fn argmax(&self, s: usize) -> usize {
        argmax_lowest(&self.probs[s], 0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_categorical(&self.probs[s], rng)
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the total; take the last supported entry.
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

fn argmax_lowest(v: &[f64], tol: f64) -> usize {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter().position(|&x| x >= max - tol).unwrap_or(0)
}

/// The discounted, normalized joint distribution over `(s, a, s')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTransitionDistribution {
    pub rho: Tensor3,
    pub discount: f64,
}

impl MarginalTransitionDistribution {
    pub fn n_states(&self) -> usize {
        self.rho.len()
    }

    pub fn n_actions(&self) -> usize {
        self.rho.first().map_or(0, |r| r.len())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.rho.iter().flatten().flatten().copied().collect()
    }

    pub fn total(&self) -> f64 {
        self.rho.iter().flatten().flatten().sum()
    }

    /// Marginal over states, `rho(s) = sum_{a,s'} rho(s,a,s')`.
    pub fn state_marginal(&self) -> Vec<f64> {
        self.rho.iter().map(|r| r.iter().flatten().sum()).collect()
    }
}

/// Discounted state occupancy `d = (1-gamma)(I - gamma P^T)^{-1} rho0`.
pub fn state_occupancy(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Vec<f64>> {
    mdp.check_policy(policy)?;
    let n = mdp.n_states;
    let p = mdp.state_kernel(policy);
    let a = DMatrix::identity(n, n) - p.transpose() * mdp.gamma;
    let b = DVector::from_iterator(n, mdp.rho0.iter().map(|x| (1.0 - mdp.gamma) * x));
    let d = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Internal("singular occupancy system".into()))?;
    Ok(d.iter().map(|x| x.max(0.0)).collect())
}

/// `rho(s,a,s') = d(s) pi(a|s) T(s'|s,a)` with `d` from an exact linear solve.
pub fn marginal_transition_distribution(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
) -> Result<MarginalTransitionDistribution> {
    let d = state_occupancy(mdp, policy)?;
    let rho = (0..mdp.n_states)
        .map(|s| {
            (0..mdp.n_actions)
                .map(|a| {
                    let w = d[s] * policy.probs[s][a];
                    mdp.transition[s][a].iter().map(|t| w * t).collect()
                })
                .collect()
        })
        .collect();
    Ok(MarginalTransitionDistribution {
        rho,
        discount: mdp.gamma,
    })
}

/// Expected discounted return written in terms of the marginal:
/// `(1/(1-gamma)) sum rho(s,a,s') R(s,a,s')`.
pub fn expected_return_from_marginal(
    rho: &MarginalTransitionDistribution,
    reward: &Tensor3,
    discount: f64,
) -> Result<f64> {
    check_tensor_shape(
        reward,
        rho.n_states(),
        rho.n_actions(),
        rho.n_states(),
        "reward",
    )?;
    if !(0.0..1.0).contains(&discount) {
        return Err(Error::InvalidParameter(format!("discount {discount}")));
    }
    let total: f64 = rho
        .rho
        .iter()
        .flatten()
        .flatten()
        .zip(reward.iter().flatten().flatten())
        .map(|(p, r)| p * r)
        .sum();
    Ok(total / (1.0 - discount))
}

/// Exact policy evaluation by solving `(I - gamma P) V = r_pi`.
pub fn policy_evaluation(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Vec<f64>> {
    mdp.check_policy(policy)?;
    let n = mdp.n_states;
    let p = mdp.state_kernel(policy);
    let r = DVector::from_fn(n, |s, _| {
        (0..mdp.n_actions)
            .map(|a| {
                policy.probs[s][a]
                    * mdp.transition[s][a]
                        .iter()
                        .zip(&mdp.reward[s][a])
                        .map(|(t, r)| t * r)
                        .sum::<f64>()
            })
            .sum()
    });
    let a = DMatrix::identity(n, n) - p * mdp.gamma;
    let v = a
        .lu()
        .solve(&r)
        .ok_or_else(|| Error::Internal("singular evaluation system".into()))?;
    Ok(v.iter().copied().collect())
}

/// `sum_s rho0(s) V(s)`.
pub fn start_value(mdp: &TabularMdp, v: &[f64]) -> f64 {
    mdp.rho0.iter().zip(v).map(|(p, v)| p * v).sum()
}

pub fn q_values(mdp: &TabularMdp, v: &[f64]) -> Vec<Vec<f64>> {
    (0..mdp.n_states)
        .map(|s| {
            (0..mdp.n_actions)
                .map(|a| {
                    mdp.transition[s][a]
                        .iter()
                        .zip(&mdp.reward[s][a])
                        .zip(v)
                        .map(|((t, r), v2)| t * (r + mdp.gamma * v2))
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Optimal values by value iteration until the sup-norm residual is below `tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Vec<f64> {
    let mut v = vec![0.0; mdp.n_states];
    loop {
        let next: Vec<f64> = q_values(mdp, &v)
            .iter()
            .map(|q| q.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let residual = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if residual < tol {
            return v;
        }
    }
}

/// Relative slack under which two Q-values count as tied.
pub const TIE_TOL: f64 = 1e-9;

/// Deterministic greedy policy from value iteration (residual < 1e-10).
/// Ties are broken toward the lowest action index.
pub fn optimal_policy(mdp: &TabularMdp) -> TabularPolicy {
    let v = value_iteration(mdp, 1e-10);
    let q = q_values(mdp, &v);
    let actions: Vec<usize> = q
        .iter()
        .map(|row| {
            let scale = row.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            argmax_lowest(row, TIE_TOL * scale)
        })
        .collect();
    TabularPolicy::deterministic(&actions, mdp.n_actions).expect("greedy actions are in range")
}

/// Per-state set of maximizing actions (within [`TIE_TOL`]).
pub fn greedy_action_sets(mdp: &TabularMdp) -> Vec<Vec<usize>> {
    let v = value_iteration(mdp, 1e-10);
    q_values(mdp, &v)
        .iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let scale = row.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            (0..row.len())
                .filter(|&a| row[a] >= max - TIE_TOL * scale)
                .collect()
        })
        .collect()
}

/// Transition tensor reconstructed from a marginal, plus the mask of
/// `(s, a)` pairs with no mass (those rows are filled uniformly).
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredTransition {
    pub transition: Tensor3,
    pub unvisited: Vec<Vec<bool>>,
}

impl RecoveredTransition {
    pub fn is_visited(&self, s: usize, a: usize) -> bool {
        !self.unvisited[s][a]
    }
}

/// `T(s'|s,a) = rho(s,a,s') / sum_{s''} rho(s,a,s'')`.
pub fn recover_transition(
    rho: &MarginalTransitionDistribution,
    policy: &TabularPolicy,
) -> Result<RecoveredTransition> {
    let ns = rho.n_states();
    let na = rho.n_actions();
    if policy.n_states() != ns || policy.n_actions() != na {
        return Err(Error::Dimension("policy does not match marginal".into()));
    }
    check_tensor_shape(&rho.rho, ns, na, ns, "rho")?;
    let mut unvisited = vec![vec![false; na]; ns];
    let transition = (0..ns)
        .map(|s| {
            (0..na)
                .map(|a| {
                    let row = &rho.rho[s][a];
                    let mass: f64 = row.iter().sum();
                    if mass <= UNVISITED_MASS {
                        unvisited[s][a] = true;
                        vec![1.0 / ns as f64; ns]
                    } else {
                        row.iter().map(|x| x / mass).collect()
                    }
                })
                .collect()
        })
        .collect();
    Ok(RecoveredTransition {
        transition,
        unvisited,
    })
}

/// Total-variation distance `0.5 * sum |p - q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut js = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            js += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            js += 0.5 * b * (b / m).ln();
        }
    }
    js.max(0.0)
}

pub fn marginal_js(p: &MarginalTransitionDistribution, q: &MarginalTransitionDistribution) -> f64 {
    js_divergence(&p.flat(), &q.flat())
}

pub fn marginal_tv(p: &MarginalTransitionDistribution, q: &MarginalTransitionDistribution) -> f64 {
    tv_distance(&p.flat(), &q.flat())
}

/// Largest element-wise absolute difference between two tensors of equal shape.
pub fn max_abs_diff(a: &Tensor3, b: &Tensor3) -> f64 {
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain() -> TabularMdp {
        TabularMdp::new(
            vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]],
            vec![vec![vec![0.0; 2]]; 2],
            0.5,
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn single_state_marginal_is_one() {
        for gamma in [0.0, 0.3, 0.99] {
            let mdp = TabularMdp::new(
                vec![vec![vec![1.0]]],
                vec![vec![vec![2.0]]],
                gamma,
                vec![1.0],
            )
            .unwrap();
            let rho =
                marginal_transition_distribution(&mdp, &TabularPolicy::uniform(1, 1)).unwrap();
            assert_eq!(rho.rho, vec![vec![vec![1.0]]]);
        }
    }

    #[test]
    fn two_state_chain_splits_at_first_step() {
        let mdp = chain();
        let rho = marginal_transition_distribution(&mdp, &TabularPolicy::uniform(2, 1)).unwrap();
        assert!((rho.rho[0][0][1] - 0.5).abs() < 1e-15);
        assert!((rho.rho[1][0][1] - 0.5).abs() < 1e-15);
        assert_eq!(rho.rho[0][0][0], 0.0);
        assert_eq!(rho.rho[1][0][0], 0.0);
    }

    #[test]
    fn constant_reward_returns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mdp = TabularMdp::random(4, 2, 0.9, &mut rng).unwrap();
        let pi = TabularPolicy::random(4, 2, &mut rng);
        let rho = marginal_transition_distribution(&mdp, &pi).unwrap();
        let ones = vec![vec![vec![1.0; 4]; 2]; 4];
        let zeros = vec![vec![vec![0.0; 4]; 2]; 4];
        assert!((expected_return_from_marginal(&rho, &ones, 0.9).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(
            expected_return_from_marginal(&rho, &zeros, 0.9).unwrap(),
            0.0
        );
        let bad = vec![vec![vec![1.0; 3]; 2]; 4];
        assert!(matches!(
            expected_return_from_marginal(&rho, &bad, 0.9),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn evaluation_closed_forms() {
        let mdp =
            TabularMdp::new(vec![vec![vec![1.0]]], vec![vec![vec![3.0]]], 0.8, vec![1.0]).unwrap();
        let v = policy_evaluation(&mdp, &TabularPolicy::uniform(1, 1)).unwrap();
        assert!((v[0] - 15.0).abs() < 1e-12);
        let v = policy_evaluation(&chain(), &TabularPolicy::uniform(2, 1)).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mdp = chain();
        let pi = TabularPolicy::uniform(3, 1);
        assert!(matches!(
            marginal_transition_distribution(&mdp, &pi),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            policy_evaluation(&mdp, &pi),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn construction_rejects_and_renormalizes() {
        let r = vec![vec![vec![0.0; 2]]; 2];
        let nearly = 0.5 + 5e-10;
        let ok = TabularMdp::new(
            vec![vec![vec![nearly, 0.5]], vec![vec![0.0, 1.0]]],
            r.clone(),
            0.9,
            vec![1.0, 0.0],
        )
        .unwrap();
        let sum: f64 = ok.transition()[0][0].iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
        assert!(TabularMdp::new(
            vec![vec![vec![0.6, 0.5]], vec![vec![0.0, 1.0]]],
            r.clone(),
            0.9,
            vec![1.0, 0.0]
        )
        .is_err());
        assert!(TabularMdp::new(
            vec![vec![vec![0.5, 0.5]], vec![vec![0.0, 1.0]]],
            r,
            1.0,
            vec![1.0, 0.0]
        )
        .is_err());
    }

    #[test]
    fn dominant_action_is_chosen_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = TabularMdp::random(5, 3, 0.9, &mut rng).unwrap();
        let mut reward = base.reward().clone();
        for s in 0..5 {
            for s2 in 0..5 {
                reward[s][2][s2] = 100.0;
            }
        }
        // Same dynamics for every action, so only the immediate reward matters.
        let t: Tensor3 = (0..5)
            .map(|s| vec![base.transition()[s][0].clone(); 3])
            .collect();
        let mdp = TabularMdp::new(t, reward, 0.9, base.rho0().to_vec()).unwrap();
        let pi = optimal_policy(&mdp);
        for s in 0..5 {
            assert_eq!(pi.argmax(s), 2);
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mdp = TabularMdp::new(
            vec![vec![vec![1.0], vec![1.0]]],
            vec![vec![vec![1.0], vec![1.0]]],
            0.9,
            vec![1.0],
        )
        .unwrap();
        assert_eq!(optimal_policy(&mdp).argmax(0), 0);
        assert_eq!(greedy_action_sets(&mdp), vec![vec![0, 1]]);
    }

    #[test]
    fn recover_marks_unvisited_pairs() {
        let mdp = chain();
        let pi = TabularPolicy::uniform(2, 1);
        let rho = marginal_transition_distribution(&mdp, &pi).unwrap();
        let rec = recover_transition(&rho, &pi).unwrap();
        assert!(rec.is_visited(0, 0) && rec.is_visited(1, 0));

        // Start in state 0 and stay there: state 1 is never reached.
        let stuck = TabularMdp::new(
            vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
            vec![vec![vec![0.0; 2]]; 2],
            0.9,
            vec![1.0, 0.0],
        )
        .unwrap();
        let rho = marginal_transition_distribution(&stuck, &pi).unwrap();
        let rec = recover_transition(&rho, &pi).unwrap();
        assert!(rec.is_visited(0, 0));
        assert!(rec.unvisited[1][0]);
        assert_eq!(rec.transition[1][0], vec![0.5, 0.5]);

        let one =
            TabularMdp::new(vec![vec![vec![1.0]]], vec![vec![vec![0.0]]], 0.5, vec![1.0]).unwrap();
        let pi1 = TabularPolicy::uniform(1, 1);
        let rec = recover_transition(&marginal_transition_distribution(&one, &pi1).unwrap(), &pi1)
            .unwrap();
        assert_eq!(rec.transition, vec![vec![vec![1.0]]]);
    }

    #[test]
    fn json_round_trip_is_bit_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mdp = TabularMdp::random(3, 2, 0.95, &mut rng).unwrap();
        let text = mdp.to_json().unwrap();
        let back = TabularMdp::from_json(&text).unwrap();
        assert_eq!(back, mdp);
        assert_eq!(back.to_json().unwrap(), text);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["n_states", "n_actions", "gamma", "rho0", "T", "R"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn divergences() {
        let p = [0.5, 0.5, 0.0];
        let q = [0.0, 0.5, 0.5];
        assert!((tv_distance(&p, &q) - 0.5).abs() < 1e-15);
        assert!(js_divergence(&p, &p).abs() < 1e-15);
        // Disjoint supports reach ln 2.
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
