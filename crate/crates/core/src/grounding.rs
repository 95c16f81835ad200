//! Action transformations and grounded simulators.
//!
//! An action transformer `pi_g(a~ | s, a)` sits between the agent and the
//! simulator: the agent picks `a`, the simulator executes `a~`. For tabular
//! simulators the induced dynamics are
//! `T_g(s'|s,a) = sum_a~ T_sim(s'|s,a~) pi_g(a~|s,a)`, and learning the
//! transformer is itself an MDP over joint states `x = (s, a)`.
//!
//! Grounded rollouts always record the agent action `a`; the executed `a~`
//! is only available through [`GroundedEnvironment::last_transformed`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines::GatTransformer;
use crate::envs::{ActionSpace, EnvSpec, Environment, ObservationSpace, SimRng, StepOutcome};
use crate::error::{Error, Result};
use crate::mdp::{
    check_tensor_shape, marginal_transition_distribution, sample_categorical,
    MarginalTransitionDistribution, TabularMdp, TabularPolicy, Tensor3, NORMALIZE_TOL,
};
use crate::nn::Actor;

/// A policy over replacement actions, conditioned on state and agent action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ActionTransformer {
    /// Executes the agent action unchanged.
    Identity,
    /// Explicit tensor `probs[s][a][a~]`.
    Table { probs: Tensor3 },
    /// Learned categorical policy over `a~`, input `[s, a]` as a joint one-hot.
    Categorical { actor: Actor },
    /// Learned Gaussian over a shift: `a~ = clip(a + delta)`, input `[s..., a...]`.
    Residual {
        actor: Actor,
        low: Vec<f64>,
        high: Vec<f64>,
    },
    /// Forward-model / inverse-model composition.
    Gat(GatTransformer),
}

/// On-disk form: the transformer plus a header naming what it is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerCheckpoint {
    pub kind: String,
    pub residual: bool,
    pub transformer: ActionTransformer,
}

pub const TRANSFORMER_KIND: &str = "action_transformer";

fn clip_box(x: &[f64], low: &[f64], high: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(low.iter().zip(high))
        .map(|(v, (l, h))| v.clamp(*l, *h))
        .collect()
}

impl ActionTransformer {
    /// Identity tensor `probs[s][a][a~] = [a~ == a]`.
    pub fn identity_table(n_states: usize, n_actions: usize) -> Self {
        ActionTransformer::Table {
            probs: identity_probs(n_states, n_actions),
        }
    }

    pub fn table(probs: Tensor3) -> Result<Self> {
        let ns = probs.len();
        let na = probs.first().map_or(0, Vec::len);
        check_tensor_shape(&probs, ns, na, na, "transformer")?;
        let mut probs = probs;
        for row in probs.iter_mut().flatten() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > NORMALIZE_TOL {
                return Err(Error::InvalidDistribution(format!(
                    "transformer row sums to {total}"
                )));
            }
            row.iter_mut().for_each(|p| *p /= total);
        }
        Ok(ActionTransformer::Table { probs })
    }

    pub fn is_residual(&self) -> bool {
        matches!(self, ActionTransformer::Residual { .. })
    }

    /// The learned policy, when there is one.
    pub fn actor(&self) -> Option<&Actor> {
        match self {
            ActionTransformer::Categorical { actor }
            | ActionTransformer::Residual { actor, .. } => Some(actor),
            _ => None,
        }
    }

    pub fn actor_mut(&mut self) -> Option<&mut Actor> {
        match self {
            ActionTransformer::Categorical { actor }
            | ActionTransformer::Residual { actor, .. } => Some(actor),
            _ => None,
        }
    }

    /// Input of the learned policy: the state followed by the agent action.
    pub fn input(state: &[f64], action: &[f64]) -> Vec<f64> {
        state.iter().chain(action).copied().collect()
    }

    /// Executed action for a raw policy output `u` (a shift for residual
    /// transformers, the replacement action itself otherwise).
    pub fn apply(&self, action: &[f64], u: &[f64]) -> Vec<f64> {
        match self {
            ActionTransformer::Residual { low, high, .. } => {
                let shifted: Vec<f64> = action.iter().zip(u).map(|(a, d)| a + d).collect();
                clip_box(&shifted, low, high)
            }
            _ => u.to_vec(),
        }
    }

    /// Draws a replacement action.
    pub fn transform(&self, state: &[f64], action: &[f64], rng: &mut SimRng) -> Result<Vec<f64>> {
        match self {
            ActionTransformer::Identity => Ok(action.to_vec()),
            ActionTransformer::Table { probs } => {
                let (s, a) = tabular_indices(state, action, probs.len(), probs[0].len())?;
                Ok(vec![sample_categorical(&probs[s][a], rng) as f64])
            }
            ActionTransformer::Categorical { actor }
            | ActionTransformer::Residual { actor, .. } => {
                let (u, _) = actor.sample(&Self::input(state, action), rng)?;
                Ok(self.apply(action, &u))
            }
            ActionTransformer::Gat(g) => g.transform(state, action),
        }
    }

    /// Deployment-time action: the mean for Gaussian transformers and the
    /// deterministic composition for GAT. Discrete transformers still sample,
    /// since their grounded dynamics are defined by the full distribution.
    pub fn deploy(&self, state: &[f64], action: &[f64], rng: &mut SimRng) -> Result<Vec<f64>> {
        match self {
            ActionTransformer::Residual { actor, .. } => {
                let mean = actor.mode(&Self::input(state, action))?;
                Ok(self.apply(action, &mean))
            }
            _ => self.transform(state, action, rng),
        }
    }

    /// The full `probs[s][a][a~]` tensor for discrete transformers.
    pub fn tabular_probs(&self, n_states: usize, n_actions: usize) -> Option<Result<Tensor3>> {
        match self {
            ActionTransformer::Identity => Some(Ok(identity_probs(n_states, n_actions))),
            ActionTransformer::Table { probs } => Some(Ok(probs.clone())),
            ActionTransformer::Categorical {
                actor: Actor::Categorical(p),
            } => Some(
                (0..n_states)
                    .map(|s| {
                        (0..n_actions)
                            .map(|a| p.probs(&[s as f64, a as f64]))
                            .collect()
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    pub fn checkpoint(&self) -> TransformerCheckpoint {
        TransformerCheckpoint {
            kind: TRANSFORMER_KIND.into(),
            residual: self.is_residual(),
            transformer: self.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.checkpoint())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: TransformerCheckpoint = serde_json::from_str(s)?;
        if c.kind != TRANSFORMER_KIND {
            return Err(Error::Unknown(format!("checkpoint kind {:?}", c.kind)));
        }
        if c.residual != c.transformer.is_residual() {
            return Err(Error::InvalidParameter(
                "residual flag does not match the transformer".into(),
            ));
        }
        Ok(c.transformer)
    }
}

fn tabular_indices(state: &[f64], action: &[f64], ns: usize, na: usize) -> Result<(usize, usize)> {
    let s = state.first().copied().unwrap_or(-1.0);
    let a = action.first().copied().unwrap_or(-1.0);
    if !(s >= 0.0 && (s as usize) < ns && a >= 0.0 && (a as usize) < na) {
        return Err(Error::OutOfBounds(format!(
            "({s}, {a}) outside a {ns}x{na} table"
        )));
    }
    Ok((s as usize, a as usize))
}

pub fn identity_probs(n_states: usize, n_actions: usize) -> Tensor3 {
    (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|a| {
                    (0..n_actions)
                        .map(|b| if a == b { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// `T_g(s'|s,a) = sum_a~ T_sim(s'|s,a~) pi_g(a~|s,a)`.
pub fn grounded_transition(t_sim: &Tensor3, probs: &Tensor3) -> Result<Tensor3> {
    let ns = t_sim.len();
    let na = t_sim.first().map_or(0, Vec::len);
    check_tensor_shape(t_sim, ns, na, ns, "simulator transition")?;
    check_tensor_shape(probs, ns, na, na, "transformer")?;
    Ok((0..ns)
        .map(|s| {
            (0..na)
                .map(|a| {
                    let mut row = vec![0.0; ns];
                    for (b, &w) in probs[s][a].iter().enumerate() {
                        if w != 0.0 {
                            for (r, t) in row.iter_mut().zip(&t_sim[s][b]) {
                                *r += w * t;
                            }
                        }
                    }
                    row
                })
                .collect()
        })
        .collect())
}

/// The simulator with its transition replaced by the grounded one.
pub fn grounded_mdp(sim: &TabularMdp, probs: &Tensor3) -> Result<TabularMdp> {
    sim.with_transition(grounded_transition(sim.transition(), probs)?)
}

/// Marginal transition distribution of the agent in the grounded simulator.
pub fn grounded_marginal(
    sim: &TabularMdp,
    agent: &TabularPolicy,
    probs: &Tensor3,
) -> Result<MarginalTransitionDistribution> {
    marginal_transition_distribution(&grounded_mdp(sim, probs)?, agent)
}

/// Per `(s, a)`, the least-squares (minimum-norm) mixture weights `w` with
/// `T_real(.|s,a) = sum_a~ w_a~ T_sim(.|s,a~)`. Returns the transformer when
/// every mixture is a valid distribution, together with the largest
/// residual.
pub fn realizing_transformer(
    sim: &TabularMdp,
    real: &TabularMdp,
) -> Result<Option<(Tensor3, f64)>> {
    let (ns, na) = (sim.n_states(), sim.n_actions());
    if real.n_states() != ns || real.n_actions() != na {
        return Err(Error::Dimension("sim and real sizes differ".into()));
    }
    let mut probs = vec![vec![vec![0.0; na]; na]; ns];
    let mut worst: f64 = 0.0;
    for s in 0..ns {
        let m = DMatrix::from_fn(ns, na, |i, b| sim.transition()[s][b][i]);
        let svd = m.clone().svd(true, true);
        for a in 0..na {
            let target = DVector::from_column_slice(&real.transition()[s][a]);
            let w = svd
                .solve(&target, 1e-12)
                .map_err(|e| Error::Internal(e.to_string()))?;
            if w.iter().any(|&x| x < -1e-9) {
                return Ok(None);
            }
            let mut row: Vec<f64> = w.iter().map(|x| x.max(0.0)).collect();
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Ok(None);
            }
            row.iter_mut().for_each(|x| *x /= total);
            let fit = &m * DVector::from_column_slice(&row);
            worst = worst.max((fit - target).amax());
            probs[s][a] = row;
        }
    }
    Ok(Some((probs, worst)))
}

/// Simulator with an action transformer in front of it.
pub struct GroundedEnvironment {
    inner: Box<dyn Environment>,
    transformer: ActionTransformer,
    /// Sample Gaussian transformers instead of deploying their mean.
    stochastic: bool,
    /// Keep the executed action of the last step for diagnostics.
    pub expose_transformed_action: bool,
    last_transformed: Option<Vec<f64>>,
    grounded: Option<TabularMdp>,
}

impl GroundedEnvironment {
    pub fn new(
        inner: Box<dyn Environment>,
        transformer: ActionTransformer,
        stochastic: bool,
    ) -> Result<Self> {
        let grounded = match inner.tabular_view() {
            Some(mdp) => match transformer.tabular_probs(mdp.n_states(), mdp.n_actions()) {
                Some(probs) => Some(grounded_mdp(mdp, &probs?)?),
                None => None,
            },
            None => None,
        };
        Ok(Self {
            inner,
            transformer,
            stochastic,
            expose_transformed_action: false,
            last_transformed: None,
            grounded,
        })
    }

    pub fn transformer(&self) -> &ActionTransformer {
        &self.transformer
    }

    pub fn inner(&self) -> &dyn Environment {
        self.inner.as_ref()
    }

    /// Executed action of the most recent step, when exposure is enabled.
    pub fn last_transformed(&self) -> Option<&[f64]> {
        self.last_transformed.as_deref()
    }
}

impl Clone for GroundedEnvironment {
    fn clone(&self) -> Self {
        Self {
            inner: self.inner.boxed_clone(),
            transformer: self.transformer.clone(),
            stochastic: self.stochastic,
            expose_transformed_action: self.expose_transformed_action,
            last_transformed: self.last_transformed.clone(),
            grounded: self.grounded.clone(),
        }
    }
}

impl Environment for GroundedEnvironment {
    fn spec(&self) -> &EnvSpec {
        self.inner.spec()
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        self.last_transformed = None;
        self.inner.reset(rng)
    }

    fn state(&self) -> Vec<f64> {
        self.inner.state()
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        self.inner.set_state(state)
    }

    fn step(&mut self, action: &[f64], rng: &mut SimRng) -> StepOutcome {
        let state = self.inner.state();
        let a = self.inner.spec().action.clip(action);
        let executed = if self.stochastic {
            self.transformer.transform(&state, &a, rng)
        } else {
            self.transformer.deploy(&state, &a, rng)
        }
        .expect("transformer input matches the simulator spaces");
        if self.expose_transformed_action {
            self.last_transformed = Some(executed.clone());
        }
        self.inner.step(&executed, rng)
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
            && matches!(
                (&self.transformer, self.stochastic),
                (ActionTransformer::Identity, _)
                    | (ActionTransformer::Gat(_), _)
                    | (ActionTransformer::Residual { .. }, false)
            )
    }

    fn tabular_view(&self) -> Option<&TabularMdp> {
        self.grounded.as_ref()
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

/// The action-transformation MDP: states are pairs `x = (s, a)` indexed
/// `s * |A| + a`, actions are replacement actions, and the agent policy is
/// folded into the dynamics:
/// `T_x((s',a') | (s,a), a~) = T_sim(s'|s,a~) pi(a'|s')`.
///
/// Its reward tensor is a zero placeholder and its discount copies the
/// simulator's; the transformer is trained with the adversarial reward
/// instead.
#[derive(Debug, Clone, PartialEq)]
pub struct AtMdp {
    pub mdp: TabularMdp,
    pub n_states: usize,
    pub n_actions: usize,
    pub agent: TabularPolicy,
}

impl AtMdp {
    pub fn index(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn split(&self, x: usize) -> (usize, usize) {
        (x / self.n_actions, x % self.n_actions)
    }
}

pub fn build_at_mdp(sim: &TabularMdp, agent: &TabularPolicy) -> Result<AtMdp> {
    let (ns, na) = (sim.n_states(), sim.n_actions());
    if agent.n_states() != ns || agent.n_actions() != na {
        return Err(Error::Dimension(
            "agent policy does not match simulator".into(),
        ));
    }
    let nx = ns * na;
    let mut t = vec![vec![vec![0.0; nx]; na]; nx];
    for s in 0..ns {
        for a in 0..na {
            for b in 0..na {
                let row = &mut t[s * na + a][b];
                for s2 in 0..ns {
                    let p = sim.transition()[s][b][s2];
                    for a2 in 0..na {
                        row[s2 * na + a2] = p * agent.prob(s2, a2);
                    }
                }
            }
        }
    }
    let rho0: Vec<f64> = (0..nx)
        .map(|x| sim.rho0()[x / na] * agent.prob(x / na, x % na))
        .collect();
    let mdp = TabularMdp::new(t, vec![vec![vec![0.0; nx]; na]; nx], sim.gamma(), rho0)?;
    Ok(AtMdp {
        mdp,
        n_states: ns,
        n_actions: na,
        agent: agent.clone(),
    })
}

/// Sampler for the action-transformation MDP with observations `[s, a]`.
/// A step draws `s'` from the simulator and then `a'` from the agent, which
/// is the factorized form of the joint kernel in [`AtMdp`].
#[derive(Debug, Clone)]
pub struct AtEnvironment {
    sim: TabularMdp,
    agent: TabularPolicy,
    spec: EnvSpec,
    state: (usize, usize),
}

impl AtEnvironment {
    pub fn new(sim: TabularMdp, agent: TabularPolicy, horizon: usize) -> Result<Self> {
        let (ns, na) = (sim.n_states(), sim.n_actions());
        if agent.n_states() != ns || agent.n_actions() != na {
            return Err(Error::Dimension(
                "agent policy does not match simulator".into(),
            ));
        }
        let spec = EnvSpec {
            name: "action_transformation".into(),
            observation: ObservationSpace::Box {
                low: vec![0.0, 0.0],
                high: vec![(ns - 1) as f64, (na - 1) as f64],
            },
            action: ActionSpace::Discrete(na),
            horizon,
        };
        Ok(Self {
            sim,
            agent,
            spec,
            state: (0, 0),
        })
    }
}

impl Environment for AtEnvironment {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        let s = sample_categorical(self.sim.rho0(), rng);
        let a = self.agent.sample(s, rng);
        self.state = (s, a);
        self.state()
    }

    fn state(&self) -> Vec<f64> {
        vec![self.state.0 as f64, self.state.1 as f64]
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        if state.len() != 2 || state.iter().any(|v| v.fract() != 0.0) {
            return Err(Error::OutOfBounds(format!(
                "{state:?} is not an (s, a) pair"
            )));
        }
        self.state = tabular_indices(
            &state[..1],
            &state[1..],
            self.sim.n_states(),
            self.sim.n_actions(),
        )?;
        Ok(())
    }

    fn step(&mut self, action: &[f64], rng: &mut SimRng) -> StepOutcome {
        let b = self.spec.action.clip(action)[0] as usize;
        let (s, _) = self.state;
        let s2 = sample_categorical(&self.sim.transition()[s][b], rng);
        let a2 = self.agent.sample(s2, rng);
        self.state = (s2, a2);
        StepOutcome {
            next_state: self.state(),
            reward: 0.0,
            done: false,
        }
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}
