//! Built-in simulator/"real" environment pairs.
//!
//! Two families share one stepping interface: a slippery gridworld with an
//! exact tabular view, and a torque-driven inverted pendulum whose mass is the
//! mismatched property. Both support `set_state`, which the per-step
//! transition-error metric needs. Physical robots cannot do this; the metric
//! is only available between simulators.

mod config;
mod gridworld;
mod pendulum;
mod tabular;
mod trajectory;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{EnvKind, PairConfig};
pub use gridworld::{make_gridworld_pair, Gridworld, GridworldParams};
pub use pendulum::{
    make_pendulum_pair, Pendulum, PendulumParams, DEFAULT_REAL_MASS, DEFAULT_SIM_MASS,
};
pub use tabular::{make_tabular_pair, TabularEnv};
pub use trajectory::{
    read_trajectories_csv, total_transitions, write_trajectories_csv, Trajectory, Transition,
};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

/// The random source threaded through every stochastic step.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    Box { low: Vec<f64>, high: Vec<f64> },
}

impl ActionSpace {
    /// Number of reals used to encode one action.
    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Discrete(_) => 1,
            ActionSpace::Box { low, .. } => low.len(),
        }
    }

    pub fn clip(&self, action: &[f64]) -> Vec<f64> {
        match self {
            ActionSpace::Discrete(n) => {
                vec![action[0].round().clamp(0.0, (*n - 1) as f64)]
            }
            ActionSpace::Box { low, high } => action
                .iter()
                .zip(low.iter().zip(high))
                .map(|(a, (l, h))| a.clamp(*l, *h))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ObservationSpace {
    /// A single integer state index stored as one real.
    Discrete(usize),
    Box {
        low: Vec<f64>,
        high: Vec<f64>,
    },
}

impl ObservationSpace {
    pub fn dim(&self) -> usize {
        match self {
            ObservationSpace::Discrete(_) => 1,
            ObservationSpace::Box { low, .. } => low.len(),
        }
    }

    pub fn contains(&self, state: &[f64]) -> bool {
        match self {
            ObservationSpace::Discrete(n) => {
                state.len() == 1
                    && state[0] >= 0.0
                    && state[0] < *n as f64
                    && state[0].fract() == 0.0
            }
            ObservationSpace::Box { low, high } => {
                state.len() == low.len()
                    && state
                        .iter()
                        .zip(low.iter().zip(high))
                        .all(|(x, (l, h))| x.is_finite() && x >= l && x <= h)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub observation: ObservationSpace,
    pub action: ActionSpace,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// True termination (fall, goal). Horizon truncation is handled by the caller.
    pub done: bool,
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Draws a start state and makes it current.
    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64>;

    fn state(&self) -> Vec<f64>;

    /// Makes `state` current; the next `step` proceeds from it exactly.
    fn set_state(&mut self, state: &[f64]) -> Result<()>;

    /// Advances one step. Continuous actions are clipped to the action bounds.
    fn step(&mut self, action: &[f64], rng: &mut SimRng) -> StepOutcome;

    /// Whether `step` ignores its random source.
    fn is_deterministic(&self) -> bool;

    /// Exact MDP view, for tabular environments.
    fn tabular_view(&self) -> Option<&TabularMdp> {
        None
    }

    fn boxed_clone(&self) -> Box<dyn Environment>;
}

impl Clone for Box<dyn Environment> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

/// Anything that maps a state to an action.
pub trait Policy {
    fn act(&self, state: &[f64], rng: &mut SimRng) -> Vec<f64>;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn act(&self, state: &[f64], rng: &mut SimRng) -> Vec<f64> {
        (**self).act(state, rng)
    }
}

impl Policy for crate::mdp::TabularPolicy {
    fn act(&self, state: &[f64], rng: &mut SimRng) -> Vec<f64> {
        vec![self.sample(state[0] as usize, rng) as f64]
    }
}

/// Wraps a closure as a [`Policy`].
pub struct FnPolicy<F>(pub F);

impl<F: Fn(&[f64], &mut SimRng) -> Vec<f64>> Policy for FnPolicy<F> {
    fn act(&self, state: &[f64], rng: &mut SimRng) -> Vec<f64> {
        (self.0)(state, rng)
    }
}

/// Which property differs between the two members of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModificationRecord {
    pub property_name: String,
    pub default_value: f64,
    pub modified_value: f64,
}

pub struct EnvironmentPair {
    pub sim: Box<dyn Environment>,
    pub real: Box<dyn Environment>,
    pub modification: ModificationRecord,
}

impl EnvironmentPair {
    pub fn new(
        sim: Box<dyn Environment>,
        real: Box<dyn Environment>,
        modification: ModificationRecord,
    ) -> Result<Self> {
        let (a, b) = (sim.spec(), real.spec());
        if a.observation != b.observation || a.action != b.action {
            return Err(Error::Dimension("sim and real spaces differ".into()));
        }
        Ok(Self {
            sim,
            real,
            modification,
        })
    }
}

impl Clone for EnvironmentPair {
    fn clone(&self) -> Self {
        Self {
            sim: self.sim.clone(),
            real: self.real.clone(),
            modification: self.modification.clone(),
        }
    }
}

/// Runs one episode from a fresh reset, truncated at the horizon.
pub fn run_episode<P: Policy + ?Sized>(
    env: &mut dyn Environment,
    policy: &P,
    rng: &mut SimRng,
) -> Vec<Transition> {
    let mut state = env.reset(rng);
    let mut out = Vec::new();
    for _ in 0..env.spec().horizon {
        let action = policy.act(&state, rng);
        let step = env.step(&action, rng);
        let executed = env.spec().action.clip(&action);
        out.push(Transition {
            state: state.clone(),
            action: executed,
            next_state: step.next_state.clone(),
            reward: step.reward,
            done: step.done,
        });
        if step.done {
            break;
        }
        state = step.next_state;
    }
    out
}

/// `n_episodes` episodes, deterministic in `seed`.
pub fn rollout<P: Policy + ?Sized>(
    env: &mut dyn Environment,
    policy: &P,
    n_episodes: usize,
    seed: u64,
) -> Vec<Trajectory> {
    let mut rng = rng_from_seed(seed);
    (0..n_episodes)
        .map(|_| Trajectory {
            transitions: run_episode(env, policy, &mut rng),
            seed,
        })
        .collect()
}

/// Mean undiscounted return over `n_episodes`.
pub fn evaluate<P: Policy + ?Sized>(
    env: &mut dyn Environment,
    policy: &P,
    n_episodes: usize,
    seed: u64,
) -> (f64, f64) {
    let returns: Vec<f64> = rollout(env, policy, n_episodes, seed)
        .iter()
        .map(|t| t.total_reward())
        .collect();
    mean_std(&returns)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Builds the pair described by a config document.
pub fn make_pair(config: &PairConfig) -> Result<EnvironmentPair> {
    config.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::TabularPolicy;

    #[test]
    fn discrete_clip_rounds_into_range() {
        let s = ActionSpace::Discrete(4);
        assert_eq!(s.clip(&[7.0]), vec![3.0]);
        assert_eq!(s.clip(&[-1.0]), vec![0.0]);
        let b = ActionSpace::Box {
            low: vec![-1.0],
            high: vec![1.0],
        };
        assert_eq!(b.clip(&[1.7]), vec![1.0]);
    }

    #[test]
    fn rollout_is_chain_consistent_and_seeded() {
        let pair = make_gridworld_pair(3, 0.1, 0.3, 0).unwrap();
        let mut env = pair.real;
        let pi = TabularPolicy::uniform(9, 4);
        let a = rollout(env.as_mut(), &pi, 20, 5);
        let b = rollout(env.as_mut(), &pi, 20, 5);
        assert_eq!(a, b);
        for t in &a {
            assert!(t.is_chain_consistent());
        }
    }

    #[test]
    fn full_horizon_without_termination() {
        let mut env = Pendulum::new(PendulumParams {
            terminate_on_fall: false,
            ..PendulumParams::sim()
        })
        .unwrap();
        let zero = FnPolicy(|_: &[f64], _: &mut SimRng| vec![0.0]);
        let traj = rollout(&mut env, &zero, 1, 0);
        assert_eq!(traj[0].len(), env.spec().horizon);
    }
}
