use serde::{Deserialize, Serialize};

use super::{
    ActionSpace, EnvSpec, Environment, EnvironmentPair, ModificationRecord, ObservationSpace,
    SimRng, StepOutcome,
};
use crate::error::{Error, Result};
use crate::mdp::{sample_categorical, TabularMdp, Tensor3};

/// Moves in action order: up, right, down, left.
const MOVES: [(i64, i64); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridworldParams {
    pub size: usize,
    /// Probability the commanded move is replaced by a uniformly random one.
    pub slip: f64,
    pub gamma: f64,
    pub horizon: usize,
}

impl GridworldParams {
    pub fn new(size: usize, slip: f64) -> Self {
        Self {
            size,
            slip,
            gamma: 0.95,
            horizon: 50,
        }
    }
}

/// A `size x size` grid. The bottom-right cell is the goal: entering it pays
/// 1 and ends the episode; in the tabular view it is absorbing with zero
/// reward. Episodes start uniformly on the non-goal cells.
#[derive(Debug, Clone)]
pub struct Gridworld {
    params: GridworldParams,
    spec: EnvSpec,
    mdp: TabularMdp,
    state: usize,
}

impl Gridworld {
    pub fn new(params: GridworldParams) -> Result<Self> {
        if params.size < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid size {} < 2",
                params.size
            )));
        }
        if !(0.0..=1.0).contains(&params.slip) {
            return Err(Error::InvalidParameter(format!(
                "slip {} not a probability",
                params.slip
            )));
        }
        let mdp = Self::build_mdp(&params)?;
        let n = params.size * params.size;
        let spec = EnvSpec {
            name: "gridworld".into(),
            observation: ObservationSpace::Discrete(n),
            action: ActionSpace::Discrete(4),
            horizon: params.horizon,
        };
        Ok(Self {
            params,
            spec,
            mdp,
            state: 0,
        })
    }

    pub fn goal(&self) -> usize {
        self.params.size * self.params.size - 1
    }

    pub fn params(&self) -> &GridworldParams {
        &self.params
    }

    fn target(size: usize, s: usize, m: usize) -> usize {
        let (r, c) = ((s / size) as i64, (s % size) as i64);
        let (dr, dc) = MOVES[m];
        let (nr, nc) = (r + dr, c + dc);
        if nr < 0 || nc < 0 || nr >= size as i64 || nc >= size as i64 {
            s
        } else {
            (nr as usize) * size + nc as usize
        }
    }

    fn build_mdp(p: &GridworldParams) -> Result<TabularMdp> {
        let n = p.size * p.size;
        let goal = n - 1;
        let mut t: Tensor3 = vec![vec![vec![0.0; n]; 4]; n];
        let mut r: Tensor3 = vec![vec![vec![0.0; n]; 4]; n];
        for s in 0..n {
            for a in 0..4 {
                if s == goal {
                    t[s][a][goal] = 1.0;
                    continue;
                }
                t[s][a][Self::target(p.size, s, a)] += 1.0 - p.slip;
                for m in 0..4 {
                    t[s][a][Self::target(p.size, s, m)] += p.slip / 4.0;
                }
                r[s][a][goal] = 1.0;
            }
        }
        let mut rho0 = vec![1.0 / (n - 1) as f64; n];
        rho0[goal] = 0.0;
        TabularMdp::new(t, r, p.gamma, rho0)
    }
}

impl Environment for Gridworld {
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
            return Err(Error::OutOfBounds(format!("{state:?} is not a grid cell")));
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
            done: next == self.goal(),
        }
    }

    fn is_deterministic(&self) -> bool {
        self.params.slip == 0.0
    }

    fn tabular_view(&self) -> Option<&TabularMdp> {
        Some(&self.mdp)
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

/// Gridworld pair differing only in slip probability. `_seed` is accepted
/// for interface symmetry; construction is deterministic.
pub fn make_gridworld_pair(
    size: usize,
    sim_slip: f64,
    real_slip: f64,
    _seed: u64,
) -> Result<EnvironmentPair> {
    let sim = Gridworld::new(GridworldParams::new(size, sim_slip))?;
    let real = Gridworld::new(GridworldParams::new(size, real_slip))?;
    EnvironmentPair::new(
        Box::new(sim),
        Box::new(real),
        ModificationRecord {
            property_name: "slip".into(),
            default_value: sim_slip,
            modified_value: real_slip,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::max_abs_diff;

    #[test]
    fn equal_slip_gives_identical_views() {
        let p = make_gridworld_pair(3, 0.2, 0.2, 0).unwrap();
        assert_eq!(p.sim.tabular_view(), p.real.tabular_view());
    }

    #[test]
    fn max_transition_gap_is_three_quarters_slip() {
        let p = make_gridworld_pair(4, 0.0, 0.3, 0).unwrap();
        let gap = max_abs_diff(
            p.sim.tabular_view().unwrap().transition(),
            p.real.tabular_view().unwrap().transition(),
        );
        assert!((gap - 0.3 * 0.75).abs() < 1e-12, "gap {gap}");
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_gridworld_pair(4, -0.1, 0.3, 0).is_err());
        assert!(make_gridworld_pair(4, 0.0, 1.3, 0).is_err());
        assert!(make_gridworld_pair(1, 0.0, 0.3, 0).is_err());
    }

    #[test]
    fn set_state_bounds() {
        let mut g = Gridworld::new(GridworldParams::new(3, 0.1)).unwrap();
        g.set_state(&[4.0]).unwrap();
        assert_eq!(g.state(), vec![4.0]);
        assert!(g.set_state(&[9.0]).is_err());
        assert!(g.set_state(&[1.5]).is_err());
    }
}
