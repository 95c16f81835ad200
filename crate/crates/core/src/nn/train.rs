use serde::{Deserialize, Serialize};

use super::policy::{Actor, Encoder, Greedy, ValueFunction};
use super::ppo::{Batch, PpoConfig, PpoLearner};
use crate::envs::{evaluate, rng_from_seed, Environment, SimRng};
use crate::error::{Error, Result};

/// Agent-side training settings. The discount, GAE lambda, batch size,
/// learning rate and value-function settings follow the agent table
/// (gamma 0.995, lambda 0.97, 5000 steps, lr 4e-4, value step 1e-3 with 5
/// iterations); the optimizer itself is the same clipped PPO used for the
/// action transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentTrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub batch_timesteps: usize,
    pub learning_rate: f64,
    pub value_learning_rate: f64,
    pub value_epochs: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub clip_ratio: f64,
    pub hidden: Vec<usize>,
    pub init_std: f64,
    pub eval_episodes: usize,
    /// Stop early once the greedy evaluation return reaches this value.
    pub target_return: Option<f64>,
}

impl Default for AgentTrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.995,
            lambda: 0.97,
            batch_timesteps: 5000,
            learning_rate: 4e-4,
            value_learning_rate: 1e-3,
            value_epochs: 5,
            epochs: 10,
            minibatches: 8,
            clip_ratio: 0.2,
            hidden: vec![64, 64],
            init_std: 0.5,
            eval_episodes: 10,
            target_return: None,
        }
    }
}

impl AgentTrainConfig {
    pub fn ppo(&self) -> PpoConfig {
        PpoConfig {
            minibatches: self.minibatches,
            epochs: self.epochs,
            lambda: self.lambda,
            gamma: self.gamma,
            clip_ratio: self.clip_ratio,
            batch_timesteps: self.batch_timesteps,
            learning_rate: self.learning_rate,
            value_learning_rate: self.value_learning_rate,
            value_epochs: self.value_epochs,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            hidden: self.hidden.clone(),
            init_std: self.init_std,
        }
    }

    /// Fresh policy/value pair for an environment's spaces.
    pub fn learner(&self, env: &dyn Environment, rng: &mut SimRng) -> PpoLearner {
        let spec = env.spec();
        let actor = Actor::for_spaces(
            &spec.observation,
            &spec.action,
            &self.hidden,
            self.init_std,
            rng,
        );
        let critic = ValueFunction::new(
            Encoder::for_observation(&spec.observation),
            &self.hidden,
            rng,
        );
        PpoLearner::new(actor, critic, self.ppo())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub timestep: usize,
    pub mean_return: f64,
    pub std_return: f64,
}

pub struct TrainOutcome {
    /// Final optimizer state (continue training from here).
    pub learner: PpoLearner,
    /// Best policy seen, by greedy evaluation return.
    pub best: Actor,
    pub best_return: f64,
    pub curve: Vec<CurvePoint>,
    pub timesteps: usize,
}

/// Collects at least `n_steps` transitions (fewer if the caller asks for
/// fewer), resetting at episode ends. The last segment is truncated.
pub fn collect_batch(
    env: &mut dyn Environment,
    actor: &Actor,
    n_steps: usize,
    rng: &mut SimRng,
) -> Result<Batch> {
    let mut batch = Batch::default();
    let horizon = env.spec().horizon;
    while batch.len() < n_steps {
        let mut obs = env.reset(rng);
        for t in 0..horizon {
            let (action, lp) = actor.sample(&obs, rng)?;
            let out = env.step(&action, rng);
            batch.push(
                obs,
                action,
                out.reward,
                out.next_state.clone(),
                out.done,
                lp,
            );
            if out.done || t + 1 == horizon || batch.len() >= n_steps {
                batch.end_segment();
                break;
            }
            obs = out.next_state;
        }
    }
    Ok(batch)
}

/// Trains a policy with PPO. With `total_timesteps == 0` the initial policy
/// is returned untouched.
pub fn train_agent(
    env: &dyn Environment,
    config: &AgentTrainConfig,
    total_timesteps: usize,
    seed: u64,
    init: Option<PpoLearner>,
) -> Result<TrainOutcome> {
    config.ppo().validate()?;
    if config.eval_episodes == 0 {
        return Err(Error::InvalidParameter(
            "eval_episodes must be positive".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let mut env = env.boxed_clone();
    let mut learner = match init {
        Some(l) => l,
        None => config.learner(env.as_ref(), &mut rng),
    };
    let eval_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut eval_env = env.boxed_clone();
    let (m0, s0) = evaluate(
        eval_env.as_mut(),
        &Greedy(&learner.actor),
        config.eval_episodes,
        eval_seed,
    );
    let mut curve = vec![CurvePoint {
        timestep: 0,
        mean_return: m0,
        std_return: s0,
    }];
    let mut best = learner.actor.clone();
    let mut best_return = m0;
    let mut steps = 0;
    while steps < total_timesteps {
        if config.target_return.is_some_and(|t| best_return >= t) {
            break;
        }
        let n = config.batch_timesteps.min(total_timesteps - steps);
        let batch = collect_batch(env.as_mut(), &learner.actor, n, &mut rng)?;
        steps += batch.len();
        learner.update(&batch, &mut rng)?;
        let (m, s) = evaluate(
            eval_env.as_mut(),
            &Greedy(&learner.actor),
            config.eval_episodes,
            eval_seed,
        );
        curve.push(CurvePoint {
            timestep: steps,
            mean_return: m,
            std_return: s,
        });
        if m > best_return {
            best_return = m;
            best = learner.actor.clone();
        }
    }
    Ok(TrainOutcome {
        learner,
        best,
        best_return,
        curve,
        timesteps: steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::make_gridworld_pair;

    #[test]
    fn zero_budget_returns_initial_policy() {
        let pair = make_gridworld_pair(3, 0.0, 0.2, 0).unwrap();
        let cfg = AgentTrainConfig::default();
        let mut rng = rng_from_seed(11);
        let init = cfg.learner(pair.sim.as_ref(), &mut rng);
        let out = train_agent(pair.sim.as_ref(), &cfg, 0, 11, Some(init.clone())).unwrap();
        assert_eq!(out.learner, init);
        assert_eq!(out.best, init.actor);
        assert_eq!(out.timesteps, 0);
    }

    #[test]
    fn batches_mark_segment_ends() {
        let pair = make_gridworld_pair(3, 0.0, 0.2, 0).unwrap();
        let mut env = pair.sim;
        let cfg = AgentTrainConfig::default();
        let mut rng = rng_from_seed(1);
        let l = cfg.learner(env.as_ref(), &mut rng);
        let b = collect_batch(env.as_mut(), &l.actor, 300, &mut rng).unwrap();
        assert_eq!(b.len(), 300);
        assert!(*b.ends.last().unwrap());
        for i in 0..b.len() - 1 {
            if !b.ends[i] {
                assert_eq!(b.next_obs[i], b.obs[i + 1]);
            }
            if b.dones[i] {
                assert!(b.ends[i]);
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let pair = make_gridworld_pair(2, 0.0, 0.2, 0).unwrap();
        let cfg = AgentTrainConfig {
            batch_timesteps: 200,
            ..AgentTrainConfig::default()
        };
        let a = train_agent(pair.sim.as_ref(), &cfg, 600, 3, None).unwrap();
        let b = train_agent(pair.sim.as_ref(), &cfg, 600, 3, None).unwrap();
        assert_eq!(a.learner, b.learner);
        assert_eq!(a.curve, b.curve);
    }
}
