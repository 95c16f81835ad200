use super::{
    ActionSpace, EnvSpec, Environment, EnvironmentPair, ModificationRecord, ObservationSpace,
    SimRng, StepOutcome,
};
use crate::error::{Error, Result};
use crate::mdp::{sample_categorical, TabularMdp};

/// Any finite MDP as an environment. Episodes never terminate early; they
/// are truncated at `horizon`, so sampled transitions weighted by
/// `gamma^t` follow the MDP's discounted marginal up to `gamma^horizon`.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: TabularMdp,
    spec: EnvSpec,
    state: usize,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be positive".into()));
        }
        let spec = EnvSpec {
            name: "tabular".into(),
            observation: ObservationSpace::Discrete(mdp.n_states()),
            action: ActionSpace::Discrete(mdp.n_actions()),
            horizon,
        };
        Ok(Self {
            mdp,
            spec,
            state: 0,
        })
    }

    /// Horizon after which the discount weight `gamma^t` drops below `tail`.
    pub fn horizon_for(gamma: f64, tail: f64) -> usize {
        if gamma <= 0.0 {
            return 1;
        }
        ((tail.ln() / gamma.ln()).ceil() as usize).max(1)
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }
}

impl Environment for TabularEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        self.state = sample_categorical(self.mdp.rho0(), rng);
        vec![self.state as f64]
    }

    fn state(&self) -> Vec<f64> {
        vec![self.state as f64]
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        if !self.spec.observation.contains(state) {
            return Err(Error::OutOfBounds(format!(
                "{state:?} is not a state index"
            )));
        }
        self.state = state[0] as usize;
        Ok(())
    }

    fn step(&mut self, action: &[f64], rng: &mut SimRng) -> StepOutcome {
        let a = self.spec.action.clip(action)[0] as usize;
        let s = self.state;
        let next = sample_categorical(&self.mdp.transition()[s][a], rng);
        let reward = self.mdp.reward()[s][a][next];
        self.state = next;
        StepOutcome {
            next_state: vec![next as f64],
            reward,
            done: false,
        }
    }

    fn is_deterministic(&self) -> bool {
        self.mdp
            .transition()
            .iter()
            .flatten()
            .all(|row| row.iter().all(|&p| p == 0.0 || p == 1.0))
    }

    fn tabular_view(&self) -> Option<&TabularMdp> {
        Some(&self.mdp)
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

/// Pair of finite MDPs that share sizes, rewards, discount and start
/// distribution but differ in their transition tensors.
pub fn make_tabular_pair(
    sim: TabularMdp,
    real: TabularMdp,
    horizon: usize,
) -> Result<EnvironmentPair> {
    if sim.n_states() != real.n_states() || sim.n_actions() != real.n_actions() {
        return Err(Error::Dimension("sim and real MDP sizes differ".into()));
    }
    EnvironmentPair::new(
        Box::new(TabularEnv::new(sim, horizon)?),
        Box::new(TabularEnv::new(real, horizon)?),
        ModificationRecord {
            property_name: "transition".into(),
            default_value: 0.0,
            modified_value: 1.0,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{rng_from_seed, rollout};
    use crate::mdp::{tv_distance, TabularPolicy};

    #[test]
    fn horizon_for_discount_tail() {
        assert_eq!(TabularEnv::horizon_for(0.5, 0.25), 2);
        assert!(0.9f64.powi(TabularEnv::horizon_for(0.9, 1e-4) as i32) <= 1e-4);
    }

    #[test]
    fn empirical_transitions_match_tensor() {
        let mut rng = rng_from_seed(4);
        let mdp = TabularMdp::random(3, 2, 0.9, &mut rng).unwrap();
        let mut env = TabularEnv::new(mdp.clone(), 20).unwrap();
        let pi = TabularPolicy::uniform(3, 2);
        let trajs = rollout(&mut env, &pi, 2000, 1);
        let mut counts = vec![vec![vec![0.0; 3]; 2]; 3];
        for t in trajs.iter().flat_map(|t| &t.transitions) {
            counts[t.state[0] as usize][t.action[0] as usize][t.next_state[0] as usize] += 1.0;
        }
        for s in 0..3 {
            for a in 0..2 {
                let n: f64 = counts[s][a].iter().sum();
                let emp: Vec<f64> = counts[s][a].iter().map(|c| c / n).collect();
                assert!(tv_distance(&emp, &mdp.transition()[s][a]) < 0.03);
            }
        }
    }
}
