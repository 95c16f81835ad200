//! Clipped-surrogate policy optimization with GAE(lambda) advantages.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::policy::{Actor, ValueFunction};
use crate::envs::SimRng;
use crate::error::{Error, Result};

/// Optimizer settings. Defaults are the action-transformer settings:
/// 2 minibatches, 1 epoch, lambda 0.95, gamma 0.99, clip 0.1, 5000 steps per
/// batch, learning rate 3e-4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub minibatches: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub clip_ratio: f64,
    pub batch_timesteps: usize,
    pub learning_rate: f64,
    pub value_learning_rate: f64,
    pub value_epochs: usize,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub init_std: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            minibatches: 2,
            epochs: 1,
            lambda: 0.95,
            gamma: 0.99,
            clip_ratio: 0.1,
            batch_timesteps: 5000,
            learning_rate: 3e-4,
            value_learning_rate: 3e-4,
            value_epochs: 1,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            hidden: vec![64, 64],
            init_std: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "clip_ratio {}",
                self.clip_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidParameter(
                "gamma must lie in [0,1), lambda in [0,1]".into(),
            ));
        }
        if self.minibatches == 0 || self.batch_timesteps == 0 || self.init_std <= 0.0 {
            return Err(Error::InvalidParameter(
                "minibatches, batch_timesteps and init_std must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// On-policy experience. `ends[i]` marks the last step of an episode segment
/// (termination or truncation); `dones[i]` only true termination.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<Vec<f64>>,
    pub dones: Vec<bool>,
    pub ends: Vec<bool>,
    pub log_probs: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(
        &mut self,
        obs: Vec<f64>,
        action: Vec<f64>,
        reward: f64,
        next_obs: Vec<f64>,
        done: bool,
        log_prob: f64,
    ) {
        self.obs.push(obs);
        self.actions.push(action);
        self.rewards.push(reward);
        self.next_obs.push(next_obs);
        self.dones.push(done);
        self.ends.push(done);
        self.log_probs.push(log_prob);
    }

    /// Marks the most recent step as the end of its segment.
    pub fn end_segment(&mut self) {
        if let Some(e) = self.ends.last_mut() {
            *e = true;
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Empty("PPO batch".into()));
        }
        if [
            self.obs.len(),
            self.actions.len(),
            self.next_obs.len(),
            self.dones.len(),
            self.ends.len(),
            self.log_probs.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(Error::Dimension("batch columns differ in length".into()));
        }
        let finite = self
            .rewards
            .iter()
            .chain(&self.log_probs)
            .all(|v| v.is_finite())
            && self
                .obs
                .iter()
                .chain(&self.actions)
                .chain(&self.next_obs)
                .flatten()
                .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("PPO batch".into()));
        }
        Ok(())
    }
}

/// GAE(lambda). Returns `(advantages, lambda_returns)`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[bool],
    ends: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        if ends[t] {
            running = 0.0;
        }
        let bootstrap = if dones[t] { 0.0 } else { next_values[t] };
        let delta = rewards[t] + gamma * bootstrap - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Per-sample clipped surrogate `min(r A, clip(r, 1-eps, 1+eps) A)` and its
/// derivative with respect to `r`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    let unclipped_obj = ratio * advantage;
    let clipped_obj = clipped * advantage;
    if unclipped_obj <= clipped_obj {
        (unclipped_obj, advantage)
    } else {
        (clipped_obj, 0.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    /// Largest `|ratio - 1|` over the batch before any step.
    pub initial_ratio_error: f64,
}

/// Policy, value function and their optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoLearner {
    pub actor: Actor,
    pub critic: ValueFunction,
    pub config: PpoConfig,
    actor_opt: Adam,
    critic_opt: Adam,
}

impl PpoLearner {
    pub fn new(actor: Actor, critic: ValueFunction, config: PpoConfig) -> Self {
        let actor_opt = Adam::new(actor.n_params(), config.learning_rate)
            .with_max_grad_norm(config.max_grad_norm);
        let critic_opt = Adam::new(critic.net.n_params(), config.value_learning_rate)
            .with_max_grad_norm(config.max_grad_norm);
        Self {
            actor,
            critic,
            config,
            actor_opt,
            critic_opt,
        }
    }

    /// Sets the actor's step size (for schedules); the critic's is unchanged.
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.actor_opt.lr = lr;
    }

    /// One PPO update from a batch collected with the current actor.
    pub fn update(&mut self, batch: &Batch, rng: &mut SimRng) -> Result<PpoDiagnostics> {
        ppo_update(self, batch, rng)
    }
}

/// GAE advantages (normalized per batch), clipped-surrogate policy steps and
/// value regression toward the lambda-returns.
pub fn ppo_update(
    learner: &mut PpoLearner,
    batch: &Batch,
    rng: &mut SimRng,
) -> Result<PpoDiagnostics> {
    batch.validate()?;
    let cfg = learner.config.clone();
    let n = batch.len();
    let values = learner.critic.values(&batch.obs)?;
    let next_values = learner.critic.values(&batch.next_obs)?;
    let (mut adv, returns) = gae(
        &batch.rewards,
        &values,
        &next_values,
        &batch.dones,
        &batch.ends,
        cfg.gamma,
        cfg.lambda,
    );
    let mean = adv.iter().sum::<f64>() / n as f64;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));

    let mut diag = PpoDiagnostics::default();
    let start_lp = learner.actor.log_probs(&batch.obs, &batch.actions)?;
    diag.initial_ratio_error = start_lp
        .iter()
        .zip(&batch.log_probs)
        .map(|(a, b)| ((a - b).exp() - 1.0).abs())
        .fold(0.0, f64::max);
    let mut idx: Vec<usize> = (0..n).collect();
    let mb = cfg.minibatches.min(n);
    let mut clipped = 0usize;
    let mut counted = 0usize;
    for epoch in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in split(&idx, mb) {
            let obs: Vec<Vec<f64>> = chunk.iter().map(|&i| batch.obs[i].clone()).collect();
            let acts: Vec<Vec<f64>> = chunk.iter().map(|&i| batch.actions[i].clone()).collect();
            let cur = learner.actor.log_probs(&obs, &acts)?;
            let m = chunk.len() as f64;
            let mut coef = Vec::with_capacity(chunk.len());
            let mut loss = 0.0;
            for (k, &i) in chunk.iter().enumerate() {
                let ratio = (cur[k] - batch.log_probs[i]).exp();
                let (obj, dobj) = clipped_surrogate(ratio, adv[i], cfg.clip_ratio);
                if epoch + 1 == cfg.epochs {
                    counted += 1;
                    if (ratio - 1.0).abs() > cfg.clip_ratio {
                        clipped += 1;
                    }
                }
                loss -= obj / m;
                // d(-obj)/d logp = -dobj * ratio
                coef.push(-dobj * ratio / m);
            }
            let g = learner
                .actor
                .log_prob_grad(&obs, &acts, Some(&coef), -cfg.entropy_coef)?;
            let mut params = learner.actor.params();
            learner.actor_opt.step(&mut params, &g.grad);
            learner.actor.set_params(&params);
            diag.policy_loss = loss;
            diag.entropy = g.mean_entropy;
        }
    }

    // Value regression in standardized units.
    let rmean = returns.iter().sum::<f64>() / n as f64;
    let rstd = (returns.iter().map(|r| (r - rmean).powi(2)).sum::<f64>() / n as f64).sqrt();
    learner.critic.renormalize(rmean, rstd.max(1e-3));
    for _ in 0..cfg.value_epochs {
        idx.shuffle(rng);
        for chunk in split(&idx, mb) {
            let obs: Vec<Vec<f64>> = chunk.iter().map(|&i| batch.obs[i].clone()).collect();
            let tgt: Vec<f64> = chunk.iter().map(|&i| returns[i]).collect();
            let (loss, g) = learner.critic.mse_grad(&obs, &tgt)?;
            learner.critic_opt.step(learner.critic.net.params_mut(), &g);
            diag.value_loss = loss;
        }
    }

    let new_lp = learner.actor.log_probs(&batch.obs, &batch.actions)?;
    diag.mean_kl = new_lp
        .iter()
        .zip(&batch.log_probs)
        .map(|(new, old)| old - new)
        .sum::<f64>()
        / n as f64;
    diag.clip_fraction = if counted > 0 {
        clipped as f64 / counted as f64
    } else {
        0.0
    };
    Ok(diag)
}

fn split(idx: &[usize], parts: usize) -> Vec<&[usize]> {
    let n = idx.len();
    (0..parts)
        .map(|k| &idx[k * n / parts..(k + 1) * n / parts])
        .filter(|c| !c.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::rng_from_seed;
    use crate::nn::policy::{CategoricalPolicy, Encoder};

    #[test]
    fn clipping_definition() {
        // ratio 1.2 with positive advantage uses the clipped ratio 1.1.
        let (obj, d) = clipped_surrogate(1.2, 2.0, 0.1);
        assert!((obj - 2.2).abs() < 1e-12);
        assert_eq!(d, 0.0);
        // Inside the trust region the raw ratio is used.
        let (obj, d) = clipped_surrogate(1.05, 2.0, 0.1);
        assert!((obj - 2.1).abs() < 1e-12);
        assert_eq!(d, 2.0);
        // Negative advantage with ratio below 1-eps is clipped too.
        let (obj, d) = clipped_surrogate(0.8, -1.0, 0.1);
        assert!((obj + 0.9).abs() < 1e-12);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn gae_limits() {
        let rewards = [1.0, 0.5, -0.2, 2.0, 1.0];
        let values = [0.3, 0.1, 0.7, -0.4, 0.2];
        let next_values = [0.1, 0.7, -0.4, 0.2, 0.9];
        let dones = [false, false, false, false, false];
        let ends = [false, false, true, false, true];
        let g = 0.9;
        // lambda = 0: one-step TD errors.
        let (a0, _) = gae(&rewards, &values, &next_values, &dones, &ends, g, 0.0);
        for t in 0..5 {
            let td = rewards[t] + g * next_values[t] - values[t];
            assert!((a0[t] - td).abs() < 1e-12);
        }
        // lambda = 1: discounted return (bootstrapped at truncation) minus V.
        let (a1, r1) = gae(&rewards, &values, &next_values, &dones, &ends, g, 1.0);
        let mc0 = 1.0 + g * 0.5 + g * g * (-0.2) + g * g * g * next_values[2];
        assert!((a1[0] - (mc0 - values[0])).abs() < 1e-12);
        assert!((r1[0] - mc0).abs() < 1e-12);
        let mc3 = 2.0 + g * 1.0 + g * g * next_values[4];
        assert!((a1[3] - (mc3 - values[3])).abs() < 1e-12);

        // Termination cuts the bootstrap.
        let (a, _) = gae(&[1.0], &[0.5], &[10.0], &[true], &[true], g, 0.95);
        assert!((a[0] - 0.5).abs() < 1e-12);
    }

    fn bandit_learner(seed: u64, cfg: PpoConfig) -> PpoLearner {
        let mut rng = rng_from_seed(seed);
        let actor = Actor::Categorical(CategoricalPolicy::new(
            Encoder::OneHot { n: 1 },
            &[8],
            2,
            &mut rng,
        ));
        let critic = ValueFunction::new(Encoder::OneHot { n: 1 }, &[8], &mut rng);
        PpoLearner::new(actor, critic, cfg)
    }

    fn bandit_batch(l: &PpoLearner, n: usize, rng: &mut SimRng) -> Batch {
        let mut b = Batch::default();
        for _ in 0..n {
            let (a, lp) = l.actor.sample(&[0.0], rng).unwrap();
            let r = if a[0] == 0.0 { 1.0 } else { 0.0 };
            b.push(vec![0.0], a, r, vec![0.0], true, lp);
        }
        b
    }

    #[test]
    fn zero_advantages_leave_policy_unchanged() {
        let mut l = bandit_learner(
            0,
            PpoConfig {
                epochs: 3,
                ..PpoConfig::default()
            },
        );
        let mut rng = rng_from_seed(1);
        let mut b = bandit_batch(&l, 64, &mut rng);
        // Constant reward with a value function that already predicts it exactly.
        b.rewards = l.critic.values(&b.obs).unwrap();
        let before = l.actor.params();
        l.update(&b, &mut rng).unwrap();
        assert_eq!(before, l.actor.params());
    }

    #[test]
    fn ratios_start_at_one() {
        let mut l = bandit_learner(2, PpoConfig::default());
        let mut rng = rng_from_seed(3);
        let b = bandit_batch(&l, 100, &mut rng);
        let d = l.update(&b, &mut rng).unwrap();
        assert!(d.initial_ratio_error < 1e-9);
    }

    #[test]
    fn bandit_converges_to_rewarding_arm() {
        let cfg = PpoConfig {
            learning_rate: 3e-3,
            epochs: 4,
            clip_ratio: 0.2,
            ..PpoConfig::default()
        };
        let mut l = bandit_learner(4, cfg);
        let mut rng = rng_from_seed(5);
        let mut p0 = 0.0;
        for _ in 0..200 {
            let b = bandit_batch(&l, 64, &mut rng);
            l.update(&b, &mut rng).unwrap();
            let Actor::Categorical(c) = &l.actor else {
                unreachable!()
            };
            p0 = c.probs(&[0.0]).unwrap()[0];
            if p0 > 0.9 {
                break;
            }
        }
        assert!(p0 > 0.9, "p(action 0) = {p0}");
    }

    #[test]
    fn rejects_empty_and_nan_batches() {
        let mut l = bandit_learner(6, PpoConfig::default());
        let mut rng = rng_from_seed(7);
        assert!(matches!(
            l.update(&Batch::default(), &mut rng),
            Err(Error::Empty(_))
        ));
        let mut b = bandit_batch(&l, 4, &mut rng);
        b.rewards[2] = f64::NAN;
        assert!(matches!(l.update(&b, &mut rng), Err(Error::NonFinite(_))));
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        assert!(PpoConfig {
            clip_ratio: 1.0,
            ..PpoConfig::default()
        }
        .validate()
        .is_err());
        assert!(PpoConfig {
            gamma: 1.0,
            ..PpoConfig::default()
        }
        .validate()
        .is_err());
    }
}
