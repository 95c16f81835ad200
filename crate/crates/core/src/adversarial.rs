//! Adversarial grounding.
//!
//! A discriminator `D(s, a, s')` is trained to tell grounded-simulator
//! transitions (label 1) from real ones (label 0); the action transformer is
//! trained by PPO on the action-transformation MDP with reward
//! `-log D(s, a, s')`, which is large where the grounded simulator looks
//! real. At the optimal discriminator `D* = rho_g / (rho_g + rho_real)` the
//! classification loss equals `2 ln 2 - 2 JS(rho_g, rho_real)`, so the game
//! minimizes the Jensen-Shannon divergence between the two marginal
//! transition distributions. [`exact_divergence_minimizer`] solves that
//! problem directly on small tabular instances.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{
    evaluate, rng_from_seed, ActionSpace, Environment, EnvironmentPair, ObservationSpace, Policy,
    SimRng, Trajectory, Transition,
};
use crate::error::{Error, Result};
use crate::grounding::{
    grounded_marginal, grounded_transition, ActionTransformer, GroundedEnvironment,
};
use crate::mdp::{
    marginal_js, random_simplex, MarginalTransitionDistribution, TabularMdp, TabularPolicy, Tensor3,
};
use crate::nn::{
    train_agent, Actor, Adam, AgentTrainConfig, Batch, CategoricalPolicy, CurvePoint, Encoder,
    GaussianPolicy, Greedy, Init, Mlp, PpoConfig, PpoLearner, ValueFunction,
};

/// Clamp applied to discriminator outputs so every log term is finite.
pub const DISC_EPS: f64 = 1e-7;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// How a transition is turned into discriminator input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// One-hot of the joint index `(s * |A| + a) * |S| + s'`.
    Tabular { n_states: usize, n_actions: usize },
    /// `[s, a, s' - s]`, standardized per dimension.
    Continuous { shift: Vec<f64>, scale: Vec<f64> },
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        match self {
            FeatureMap::Tabular {
                n_states,
                n_actions,
            } => n_states * n_actions * n_states,
            FeatureMap::Continuous { shift, .. } => shift.len(),
        }
    }

    fn raw(s: &[f64], a: &[f64], s2: &[f64]) -> Vec<f64> {
        s.iter()
            .chain(a)
            .copied()
            .chain(s2.iter().zip(s).map(|(x, y)| x - y))
            .collect()
    }

    /// Standardization fitted to a batch.
    pub fn fit(batch: &TransitionBatch) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Empty("feature statistics batch".into()));
        }
        let rows: Vec<Vec<f64>> = (0..batch.len())
            .map(|i| Self::raw(&batch.states[i], &batch.actions[i], &batch.next_states[i]))
            .collect();
        let d = rows[0].len();
        let mut shift = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for (r, w) in rows.iter().zip(&batch.weights) {
            for j in 0..d {
                shift[j] += w * r[j];
            }
        }
        for (r, w) in rows.iter().zip(&batch.weights) {
            for j in 0..d {
                scale[j] += w * (r[j] - shift[j]).powi(2);
            }
        }
        Ok(FeatureMap::Continuous {
            shift,
            scale: scale.iter().map(|v| v.sqrt().max(1e-6)).collect(),
        })
    }

    pub fn encode(&self, s: &[f64], a: &[f64], s2: &[f64]) -> Result<Vec<f64>> {
        match self {
            FeatureMap::Tabular {
                n_states,
                n_actions,
            } => {
                let idx = |v: &[f64], n: usize| -> Result<usize> {
                    match v.first() {
                        Some(&x) if x >= 0.0 && (x as usize) < n && x.fract() == 0.0 => {
                            Ok(x as usize)
                        }
                        _ => Err(Error::OutOfBounds(format!("{v:?} not an index below {n}"))),
                    }
                };
                let k = (idx(s, *n_states)? * n_actions + idx(a, *n_actions)?) * n_states
                    + idx(s2, *n_states)?;
                let mut out = vec![0.0; self.dim()];
                out[k] = 1.0;
                Ok(out)
            }
            FeatureMap::Continuous { shift, scale } => {
                let raw = Self::raw(s, a, s2);
                if raw.len() != shift.len() {
                    return Err(Error::Dimension(format!(
                        "{} features, expected {}",
                        raw.len(),
                        shift.len()
                    )));
                }
                Ok(raw
                    .iter()
                    .zip(shift)
                    .zip(scale)
                    .map(|((x, m), s)| (x - m) / s)
                    .collect())
            }
        }
    }
}

/// Classifier `D(s, a, s') in (0, 1)`: a network over transition features
/// followed by a sigmoid, clamped to `[DISC_EPS, 1 - DISC_EPS]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub net: Mlp,
    pub features: FeatureMap,
}

impl Discriminator {
    /// A logistic table over `(s, a, s')`, starting at `D = 0.5` everywhere.
    pub fn tabular(n_states: usize, n_actions: usize) -> Self {
        let features = FeatureMap::Tabular {
            n_states,
            n_actions,
        };
        Self {
            net: Mlp::zeros(&[features.dim(), 1]),
            features,
        }
    }

    pub fn new(features: FeatureMap, hidden: &[usize], rng: &mut SimRng) -> Self {
        let mut sizes = vec![features.dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self {
            net: Mlp::new(&sizes, Init::POLICY, rng),
            features,
        }
    }

    fn encode_batch(&self, batch: &TransitionBatch) -> Result<ndarray::Array2<f64>> {
        let d = self.features.dim();
        let mut m = ndarray::Array2::zeros((batch.len(), d));
        for i in 0..batch.len() {
            let f =
                self.features
                    .encode(&batch.states[i], &batch.actions[i], &batch.next_states[i])?;
            m.row_mut(i).assign(&ndarray::ArrayView1::from(&f));
        }
        Ok(m)
    }

    fn logits(&self, batch: &TransitionBatch) -> Result<Vec<f64>> {
        let x = self.encode_batch(batch)?;
        Ok(self.net.forward(x.view())?.column(0).to_vec())
    }

    pub fn prob(&self, s: &[f64], a: &[f64], s2: &[f64]) -> Result<f64> {
        let z = self.net.forward_one(&self.features.encode(s, a, s2)?)?[0];
        Ok(sigmoid(z).clamp(DISC_EPS, 1.0 - DISC_EPS))
    }

    /// Clamped probabilities for every transition of a batch.
    pub fn probs(&self, batch: &TransitionBatch) -> Result<Vec<f64>> {
        Ok(self
            .logits(batch)?
            .into_iter()
            .map(|z| sigmoid(z).clamp(DISC_EPS, 1.0 - DISC_EPS))
            .collect())
    }
}

/// `-log D(s, a, s')`, bounded in `[-ln(1 - DISC_EPS), -ln DISC_EPS]`.
pub fn transformer_reward(d: &Discriminator, s: &[f64], a: &[f64], s2: &[f64]) -> Result<f64> {
    Ok(reward_from_prob(d.prob(s, a, s2)?))
}

pub fn reward_from_prob(p: f64) -> f64 {
    -p.clamp(DISC_EPS, 1.0 - DISC_EPS).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    GroundedSim,
    Real,
}

/// Weighted `(s, a, s')` triples from one source. Weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub source: Source,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub next_states: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl TransitionBatch {
    pub fn new(source: Source) -> Self {
        Self {
            source,
            states: Vec::new(),
            actions: Vec::new(),
            next_states: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn push(&mut self, s: Vec<f64>, a: Vec<f64>, s2: Vec<f64>, w: f64) {
        self.states.push(s);
        self.actions.push(a);
        self.next_states.push(s2);
        self.weights.push(w);
    }

    pub fn normalize(&mut self) -> Result<()> {
        let total: f64 = self.weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Empty("transition batch has no weight".into()));
        }
        self.weights.iter_mut().for_each(|w| *w /= total);
        Ok(())
    }

    /// Transitions weighted by `gamma^t` within each trajectory (uniformly when
    /// `gamma` is `None`), normalized.
    pub fn from_trajectories(
        trajs: &[Trajectory],
        source: Source,
        gamma: Option<f64>,
    ) -> Result<Self> {
        let mut b = Self::new(source);
        for traj in trajs {
            let mut w = 1.0;
            for t in &traj.transitions {
                b.push(t.state.clone(), t.action.clone(), t.next_state.clone(), w);
                if let Some(g) = gamma {
                    w *= g;
                }
            }
        }
        b.normalize()?;
        Ok(b)
    }

    /// One entry per cell with positive mass of an exact marginal.
    pub fn from_marginal(rho: &MarginalTransitionDistribution, source: Source) -> Result<Self> {
        let mut b = Self::new(source);
        for (s, row) in rho.rho.iter().enumerate() {
            for (a, cells) in row.iter().enumerate() {
                for (s2, &p) in cells.iter().enumerate() {
                    if p > 0.0 {
                        b.push(vec![s as f64], vec![a as f64], vec![s2 as f64], p);
                    }
                }
            }
        }
        b.normalize()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty(format!("{:?} transition batch", self.source)));
        }
        let finite = self.weights.iter().all(|w| w.is_finite() && *w >= 0.0)
            && self
                .states
                .iter()
                .chain(&self.actions)
                .chain(&self.next_states)
                .flatten()
                .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite(format!(
                "{:?} transition batch",
                self.source
            )));
        }
        Ok(())
    }
}

/// Discriminator objective and its parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorLoss {
    /// `-(E_gsim log D + E_real log(1 - D))` with clamped `D`.
    pub data: f64,
    pub gradient_penalty: f64,
    pub l2: f64,
    pub total: f64,
    pub grads: Vec<f64>,
}

/// Regularizer settings of the discriminator loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscRegularizers {
    pub gp_coef: f64,
    pub l2_coef: f64,
    /// Interpolates used for the gradient penalty.
    pub gp_samples: usize,
}

impl DiscRegularizers {
    pub const NONE: DiscRegularizers = DiscRegularizers {
        gp_coef: 0.0,
        l2_coef: 0.0,
        gp_samples: 0,
    };
}

/// Classification loss with the grounded simulator labelled 1 and real data
/// labelled 0, plus a one-sided gradient penalty on random interpolates of
/// gsim/real feature vectors and an L2 penalty on the weights.
pub fn discriminator_loss(
    d: &Discriminator,
    gsim: &TransitionBatch,
    real: &TransitionBatch,
    reg: DiscRegularizers,
    rng: &mut SimRng,
) -> Result<DiscriminatorLoss> {
    gsim.validate()?;
    real.validate()?;
    let xg = d.encode_batch(gsim)?;
    let xr = d.encode_batch(real)?;
    let mut data = 0.0;
    let mut grads = vec![0.0; d.net.n_params()];
    for (x, batch, label) in [(&xg, gsim, 1.0), (&xr, real, 0.0)] {
        let tape = d.net.forward_tape(x.view())?;
        let z = tape.output().column(0).to_owned();
        let mut g = ndarray::Array2::zeros((batch.len(), 1));
        for i in 0..batch.len() {
            let p = sigmoid(z[i]);
            let w = batch.weights[i];
            let pc = p.clamp(DISC_EPS, 1.0 - DISC_EPS);
            data -= w * if label == 1.0 {
                pc.ln()
            } else {
                (1.0 - pc).ln()
            };
            // d/dz of -log sigma(z) is -(1 - p); of -log(1 - sigma(z)) is p.
            g[[i, 0]] = w * (p - label);
        }
        for (dst, v) in grads.iter_mut().zip(d.net.backward(&tape, g.view())?) {
            *dst += v;
        }
    }
    let mut gp = 0.0;
    if reg.gp_coef > 0.0 && reg.gp_samples > 0 {
        let dim = d.features.dim();
        let mut x = ndarray::Array2::zeros((reg.gp_samples, dim));
        for k in 0..reg.gp_samples {
            let i = rng.random_range(0..gsim.len());
            let j = rng.random_range(0..real.len());
            let e: f64 = rng.random();
            for c in 0..dim {
                x[[k, c]] = e * xg[[i, c]] + (1.0 - e) * xr[[j, c]];
            }
        }
        let (v, g) = d.net.gradient_penalty(x.view(), reg.gp_coef)?;
        gp = v;
        for (dst, v) in grads.iter_mut().zip(g) {
            *dst += v;
        }
    }
    let (l2, g) = d.net.l2_penalty(reg.l2_coef);
    for (dst, v) in grads.iter_mut().zip(g) {
        *dst += v;
    }
    Ok(DiscriminatorLoss {
        data,
        gradient_penalty: gp,
        l2,
        total: data + gp + l2,
        grads,
    })
}

/// Trains a discriminator on fixed batches for `steps` Adam steps and
/// returns the final loss.
pub fn train_discriminator(
    d: &mut Discriminator,
    gsim: &TransitionBatch,
    real: &TransitionBatch,
    reg: DiscRegularizers,
    steps: usize,
    learning_rate: f64,
    rng: &mut SimRng,
) -> Result<DiscriminatorLoss> {
    let mut opt = Adam::new(d.net.n_params(), learning_rate);
    for _ in 0..steps {
        let loss = discriminator_loss(d, gsim, real, reg, rng)?;
        opt.step(d.net.params_mut(), &loss.grads);
    }
    discriminator_loss(d, gsim, real, reg, rng)
}

/// Closed-form optimal discriminator `rho_g / (rho_g + rho_real)`; cells
/// where both vanish are `None`.
pub fn optimal_discriminator(
    rho_g: &MarginalTransitionDistribution,
    rho_real: &MarginalTransitionDistribution,
) -> Vec<Option<f64>> {
    rho_g
        .flat()
        .iter()
        .zip(rho_real.flat())
        .map(|(&g, r)| if g + r > 0.0 { Some(g / (g + r)) } else { None })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaratConfig {
    /// Inner iterations `N` per grounding call.
    pub n_transformer_updates: usize,
    pub disc_updates_per_policy_update: usize,
    /// Minibatches per discriminator update (one Adam step each).
    pub disc_minibatches: usize,
    pub disc_learning_rate: f64,
    pub disc_hidden: Vec<usize>,
    /// Real episodes collected per outer iteration.
    pub real_episodes: usize,
    pub transformer: PpoConfig,
    pub gp_coef: f64,
    pub l2_coef: f64,
    pub gp_samples: usize,
    /// Weight discriminator samples by `gamma^t` (transformer discount).
    pub discount_weighting: bool,
    /// Bootstrap the transformer's value through environment terminations
    /// instead of treating them as the end of reward. Rewards `-log D` are
    /// positive, so without this the transformer is paid for prolonging
    /// episodes rather than for matching the real transitions.
    pub bootstrap_terminal: bool,
    /// Decay the transformer's learning rate linearly to zero over the `N`
    /// updates, damping the oscillation around the adversarial equilibrium.
    pub anneal_learning_rate: bool,
}

impl Default for GaratConfig {
    fn default() -> Self {
        Self {
            n_transformer_updates: 50,
            disc_updates_per_policy_update: 1,
            disc_minibatches: 1,
            disc_learning_rate: 3e-4,
            disc_hidden: vec![64, 64],
            real_episodes: 10,
            transformer: PpoConfig::default(),
            gp_coef: 10.0,
            l2_coef: 1e-4,
            gp_samples: 256,
            discount_weighting: true,
            bootstrap_terminal: true,
            anneal_learning_rate: false,
        }
    }
}

impl GaratConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.n_transformer_updates == 0 || self.disc_minibatches == 0 {
            return Err(Error::InvalidParameter(
                "need at least one transformer update and one minibatch".into(),
            ));
        }
        if self.gp_coef < 0.0 || self.l2_coef < 0.0 || !(self.disc_learning_rate > 0.0) {
            return Err(Error::InvalidParameter(
                "regularizer coefficients must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn regularizers(&self) -> DiscRegularizers {
        DiscRegularizers {
            gp_coef: self.gp_coef,
            l2_coef: self.l2_coef,
            gp_samples: self.gp_samples,
        }
    }
}

/// Per-iteration record of a grounding run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundDiagnostics {
    pub iteration: usize,
    pub disc_loss: f64,
    pub mean_reward: f64,
    /// Exact divergence between grounded and real marginals (tabular only).
    pub js_divergence: Option<f64>,
    pub wall_ms: u128,
}

/// Exact quantities for tabular runs, used only for diagnostics.
#[derive(Debug, Clone)]
pub struct ExactContext {
    pub sim: TabularMdp,
    pub agent: TabularPolicy,
    pub rho_real: MarginalTransitionDistribution,
}

pub struct GroundOutcome {
    pub transformer: ActionTransformer,
    pub discriminator: Discriminator,
    pub diagnostics: Vec<GroundDiagnostics>,
}

/// Fresh transformer for the simulator's spaces: categorical over
/// replacement actions for discrete actions, a residual Gaussian otherwise.
/// Continuous inputs are standardized with the real data statistics.
fn initial_transformer(
    sim: &dyn Environment,
    real: &TransitionBatch,
    config: &PpoConfig,
    rng: &mut SimRng,
) -> Result<(ActionTransformer, ValueFunction)> {
    let spec = sim.spec();
    match (&spec.observation, &spec.action) {
        (ObservationSpace::Discrete(ns), ActionSpace::Discrete(na)) => {
            let enc = Encoder::JointOneHot {
                sizes: vec![*ns, *na],
            };
            let actor = Actor::Categorical(CategoricalPolicy::new(
                enc.clone(),
                &config.hidden,
                *na,
                rng,
            ));
            Ok((
                ActionTransformer::Categorical { actor },
                ValueFunction::new(enc, &config.hidden, rng),
            ))
        }
        (_, ActionSpace::Box { low, high }) => {
            let rows: Vec<Vec<f64>> = real
                .states
                .iter()
                .zip(&real.actions)
                .map(|(s, a)| ActionTransformer::input(s, a))
                .collect();
            let d = rows[0].len();
            let n = rows.len() as f64;
            let shift: Vec<f64> = (0..d)
                .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
                .collect();
            let scale: Vec<f64> = (0..d)
                .map(|j| {
                    (rows.iter().map(|r| (r[j] - shift[j]).powi(2)).sum::<f64>() / n)
                        .sqrt()
                        .max(1e-6)
                })
                .collect();
            let enc = Encoder::Affine { shift, scale };
            let actor = Actor::Gaussian(GaussianPolicy::new(
                enc.clone(),
                &config.hidden,
                low.len(),
                config.init_std,
                rng,
            ));
            let t = ActionTransformer::Residual {
                actor,
                low: low.clone(),
                high: high.clone(),
            };
            Ok((t, ValueFunction::new(enc, &config.hidden, rng)))
        }
        _ => Err(Error::Dimension(
            "discrete actions need discrete states".into(),
        )),
    }
}

/// Rolls out the frozen agent in the simulator with the transformer sampling
/// replacement actions. Returns the PPO batch over joint states `[s, a]`
/// (rewards left at zero) and the `(s, a, s')` triples with their discount
/// weights.
fn grounded_rollouts(
    sim: &mut dyn Environment,
    agent: &dyn Policy,
    transformer: &ActionTransformer,
    n_steps: usize,
    gamma: Option<f64>,
    bootstrap_terminal: bool,
    rng: &mut SimRng,
) -> Result<(Batch, TransitionBatch)> {
    let actor = transformer
        .actor()
        .ok_or_else(|| Error::Internal("transformer has no learnable policy".into()))?;
    let horizon = sim.spec().horizon;
    let space = sim.spec().action.clone();
    let mut batch = Batch::default();
    let mut triples = TransitionBatch::new(Source::GroundedSim);
    while batch.len() < n_steps {
        let mut s = sim.reset(rng);
        let mut a = space.clip(&agent.act(&s, rng));
        let mut w = 1.0;
        for t in 0..horizon {
            let x = ActionTransformer::input(&s, &a);
            let (u, lp) = actor.sample(&x, rng)?;
            let executed = transformer.apply(&a, &u);
            let out = sim.step(&executed, rng);
            triples.push(s.clone(), a.clone(), out.next_state.clone(), w);
            if let Some(g) = gamma {
                w *= g;
            }
            let a2 = space.clip(&agent.act(&out.next_state, rng));
            let x2 = ActionTransformer::input(&out.next_state, &a2);
            batch.push(x, u, 0.0, x2, out.done && !bootstrap_terminal, lp);
            if out.done || t + 1 == horizon || batch.len() >= n_steps {
                batch.end_segment();
                break;
            }
            s = out.next_state;
            a = a2;
        }
    }
    triples.normalize()?;
    Ok((batch, triples))
}

fn minibatch(b: &TransitionBatch, idx: &[usize]) -> TransitionBatch {
    let mut out = TransitionBatch::new(b.source);
    for &i in idx {
        out.push(
            b.states[i].clone(),
            b.actions[i].clone(),
            b.next_states[i].clone(),
            b.weights[i],
        );
    }
    out
}

/// Mean `|a~ - a|` of a transformer's deployed action over real transitions.
pub fn mean_abs_shift(
    transformer: &ActionTransformer,
    trajs: &[Trajectory],
    seed: u64,
) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let mut total = 0.0;
    let mut n = 0usize;
    for t in trajs.iter().flat_map(|t| &t.transitions) {
        let ex = transformer.deploy(&t.state, &t.action, &mut rng)?;
        total += ex
            .iter()
            .zip(&t.action)
            .map(|(x, a)| (x - a).abs())
            .sum::<f64>();
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// The inner loop: `N` iterations of {roll out the frozen agent in the
/// grounded simulator, update the discriminator, one PPO update of the
/// transformer with reward `-log D}`. The same real data is reused by every
/// iteration.
pub fn ground(
    sim: &dyn Environment,
    real_trajectories: &[Trajectory],
    agent: &dyn Policy,
    config: &GaratConfig,
    seed: u64,
    exact: Option<&ExactContext>,
) -> Result<GroundOutcome> {
    config.validate()?;
    let ppo = &config.transformer;
    let gamma = config.discount_weighting.then_some(ppo.gamma);
    let real = TransitionBatch::from_trajectories(real_trajectories, Source::Real, gamma)
        .map_err(|_| Error::Empty("real trajectories".into()))?;
    let mut rng = rng_from_seed(seed);
    let mut env = sim.boxed_clone();
    let (mut transformer, critic) = initial_transformer(sim, &real, ppo, &mut rng)?;
    let mut disc = match &env.spec().observation {
        ObservationSpace::Discrete(ns) if config.disc_hidden.is_empty() => Discriminator::tabular(
            *ns,
            env.spec().action.dim().max(match env.spec().action {
                ActionSpace::Discrete(n) => n,
                _ => 1,
            }),
        ),
        ObservationSpace::Discrete(ns) => {
            let na = match env.spec().action {
                ActionSpace::Discrete(n) => n,
                _ => {
                    return Err(Error::Dimension(
                        "discrete states need discrete actions".into(),
                    ))
                }
            };
            Discriminator::new(
                FeatureMap::Tabular {
                    n_states: *ns,
                    n_actions: na,
                },
                &config.disc_hidden,
                &mut rng,
            )
        }
        ObservationSpace::Box { .. } => {
            Discriminator::new(FeatureMap::fit(&real)?, &config.disc_hidden, &mut rng)
        }
    };
    let mut disc_opt = Adam::new(disc.net.n_params(), config.disc_learning_rate);
    let actor = transformer.actor().expect("learned transformer").clone();
    let mut learner = PpoLearner::new(actor, critic, ppo.clone());
    let reg = config.regularizers();
    let mut diagnostics = Vec::with_capacity(config.n_transformer_updates);
    let start = Instant::now();
    for iteration in 0..config.n_transformer_updates {
        if config.anneal_learning_rate {
            let remaining = 1.0 - iteration as f64 / config.n_transformer_updates as f64;
            learner.set_learning_rate(ppo.learning_rate * remaining);
        }
        *transformer.actor_mut().expect("learned transformer") = learner.actor.clone();
        let (mut batch, gsim) = grounded_rollouts(
            env.as_mut(),
            agent,
            &transformer,
            ppo.batch_timesteps,
            gamma,
            config.bootstrap_terminal,
            &mut rng,
        )?;

        let mut disc_loss = 0.0;
        for _ in 0..config.disc_updates_per_policy_update {
            let mut order: Vec<usize> = (0..gsim.len()).collect();
            rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
            let mut rorder: Vec<usize> = (0..real.len()).collect();
            rand::seq::SliceRandom::shuffle(&mut rorder[..], &mut rng);
            let k = config.disc_minibatches;
            for m in 0..k {
                let gi = &order[m * gsim.len() / k..(m + 1) * gsim.len() / k];
                let ri = &rorder[m * real.len() / k..(m + 1) * real.len() / k];
                if gi.is_empty() || ri.is_empty() {
                    continue;
                }
                let (mut g, mut r) = (minibatch(&gsim, gi), minibatch(&real, ri));
                g.normalize()?;
                r.normalize()?;
                let loss = discriminator_loss(&disc, &g, &r, reg, &mut rng)?;
                disc_opt.step(disc.net.params_mut(), &loss.grads);
                disc_loss = loss.data;
            }
        }

        let probs = disc.probs(&gsim)?;
        for (r, p) in batch.rewards.iter_mut().zip(&probs) {
            *r = reward_from_prob(*p);
        }
        let mean_reward = batch.rewards.iter().sum::<f64>() / batch.len() as f64;
        learner.update(&batch, &mut rng)?;
        *transformer.actor_mut().expect("learned transformer") = learner.actor.clone();

        let js_divergence = match exact {
            Some(ctx) => {
                let (ns, na) = (ctx.sim.n_states(), ctx.sim.n_actions());
                let p = transformer
                    .tabular_probs(ns, na)
                    .ok_or_else(|| Error::Internal("not tabular".into()))??;
                Some(marginal_js(
                    &grounded_marginal(&ctx.sim, &ctx.agent, &p)?,
                    &ctx.rho_real,
                ))
            }
            None => None,
        };
        diagnostics.push(GroundDiagnostics {
            iteration,
            disc_loss,
            mean_reward,
            js_divergence,
            wall_ms: start.elapsed().as_millis(),
        });
    }
    Ok(GroundOutcome {
        transformer,
        discriminator: disc,
        diagnostics,
    })
}

/// Writes grounding diagnostics as CSV:
/// `iteration,disc_loss,mean_reward,js_divergence,wall_ms` (empty divergence
/// for non-tabular runs).
pub fn write_diagnostics_csv<W: std::io::Write>(out: W, rows: &[GroundDiagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iteration",
        "disc_loss",
        "mean_reward",
        "js_divergence",
        "wall_ms",
    ])?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.disc_loss.to_string(),
            r.mean_reward.to_string(),
            r.js_divergence.map(|v| v.to_string()).unwrap_or_default(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// JS divergence between the grounded and real marginals and its gradient
/// with respect to the transformer tensor.
///
/// With `g = dJS/drho = 0.5 ln(rho_g / m)`, the occupancy `d` and the
/// adjoint `lambda` solving `(I - gamma P_g) lambda = h`,
/// `h(s) = sum_{a,s'} g pi T_g`, the gradient with respect to `T_g` is
/// `d(s) pi(a|s) (g(s,a,s') + gamma lambda(s'))`, which is then pulled back
/// through the mixture over replacement actions.
pub fn js_and_gradient(
    sim: &TabularMdp,
    agent: &TabularPolicy,
    probs: &Tensor3,
    rho_real: &MarginalTransitionDistribution,
) -> Result<(f64, Tensor3, MarginalTransitionDistribution)> {
    let (ns, na) = (sim.n_states(), sim.n_actions());
    let gamma = sim.gamma();
    let tg = grounded_transition(sim.transition(), probs)?;
    let pg = DMatrix::from_fn(ns, ns, |s, s2| {
        (0..na)
            .map(|a| agent.prob(s, a) * tg[s][a][s2])
            .sum::<f64>()
    });
    let lhs = DMatrix::identity(ns, ns) - pg.transpose() * gamma;
    let b = DVector::from_iterator(ns, sim.rho0().iter().map(|x| (1.0 - gamma) * x));
    let d = lhs
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Internal("singular occupancy system".into()))?;
    let rho: Tensor3 = (0..ns)
        .map(|s| {
            (0..na)
                .map(|a| {
                    tg[s][a]
                        .iter()
                        .map(|t| d[s] * agent.prob(s, a) * t)
                        .collect()
                })
                .collect()
        })
        .collect();
    let rho_g = MarginalTransitionDistribution {
        rho,
        discount: gamma,
    };
    let js = marginal_js(&rho_g, rho_real);
    let g: Tensor3 = (0..ns)
        .map(|s| {
            (0..na)
                .map(|a| {
                    (0..ns)
                        .map(|s2| {
                            let (p, q) = (rho_g.rho[s][a][s2], rho_real.rho[s][a][s2]);
                            if p + q <= 0.0 {
                                0.0
                            } else {
                                0.5 * (p.max(1e-300) / (0.5 * (p + q))).ln()
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let h = DVector::from_fn(ns, |s, _| {
        (0..na)
            .map(|a| agent.prob(s, a) * (0..ns).map(|s2| g[s][a][s2] * tg[s][a][s2]).sum::<f64>())
            .sum::<f64>()
    });
    let adj = DMatrix::identity(ns, ns) - pg * gamma;
    let lam = adj
        .lu()
        .solve(&h)
        .ok_or_else(|| Error::Internal("singular adjoint system".into()))?;
    let grad: Tensor3 = (0..ns)
        .map(|s| {
            (0..na)
                .map(|a| {
                    let c = d[s] * agent.prob(s, a);
                    (0..na)
                        .map(|b| {
                            (0..ns)
                                .map(|s2| {
                                    c * (g[s][a][s2] + gamma * lam[s2]) * sim.transition()[s][b][s2]
                                })
                                .sum()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok((js, grad, rho_g))
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, &x) in u.iter().enumerate() {
        css += x;
        let t = (css - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Result of the exact JS minimization over tabular transformers.
#[derive(Debug, Clone)]
pub struct ExactMinimum {
    pub transformer: ActionTransformer,
    pub probs: Tensor3,
    pub js: f64,
    pub rho_g: MarginalTransitionDistribution,
}

/// Largest `|S| * |A|` accepted by [`exact_divergence_minimizer`].
pub const EXACT_MAX_PAIRS: usize = 64;

/// Minimizes `JS(rho_g(pi_g), rho_real)` over tabular transformers by
/// projected gradient descent on the simplex rows (rows scaled by their
/// occupancy, Armijo backtracking), from the identity and `restarts - 1`
/// random starting points. Returns the best result.
pub fn exact_divergence_minimizer(
    sim: &TabularMdp,
    agent: &TabularPolicy,
    rho_real: &MarginalTransitionDistribution,
    restarts: usize,
    seed: u64,
) -> Result<ExactMinimum> {
    let (ns, na) = (sim.n_states(), sim.n_actions());
    if ns * na > EXACT_MAX_PAIRS {
        return Err(Error::TooLarge(format!(
            "{ns} states x {na} actions exceeds {EXACT_MAX_PAIRS} pairs"
        )));
    }
    if rho_real.n_states() != ns || rho_real.n_actions() != na {
        return Err(Error::Dimension(
            "real marginal does not match simulator".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let mut best: Option<ExactMinimum> = None;
    for r in 0..restarts.max(1) {
        let start: Tensor3 = if r == 0 {
            crate::grounding::identity_probs(ns, na)
        } else {
            (0..ns)
                .map(|_| (0..na).map(|_| random_simplex(na, &mut rng)).collect())
                .collect()
        };
        let found = minimize_from(sim, agent, rho_real, start)?;
        if best.as_ref().is_none_or(|b| found.js < b.js) {
            best = Some(found);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn minimize_from(
    sim: &TabularMdp,
    agent: &TabularPolicy,
    rho_real: &MarginalTransitionDistribution,
    mut probs: Tensor3,
) -> Result<ExactMinimum> {
    let (ns, na) = (sim.n_states(), sim.n_actions());
    let (mut js, mut grad, mut rho_g) = js_and_gradient(sim, agent, &probs, rho_real)?;
    let mut step = 1.0;
    for _ in 0..5000 {
        if js < 1e-15 {
            break;
        }
        // Row scaling by occupancy: rows that are rarely visited still move.
        let occ: Vec<Vec<f64>> = (0..ns)
            .map(|s| {
                (0..na)
                    .map(|a| rho_g.rho[s][a].iter().sum::<f64>().max(1e-12))
                    .collect()
            })
            .collect();
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Tensor3 = (0..ns)
                .map(|s| {
                    (0..na)
                        .map(|a| {
                            let v: Vec<f64> = probs[s][a]
                                .iter()
                                .zip(&grad[s][a])
                                .map(|(p, g)| p - step * g / occ[s][a])
                                .collect();
                            project_simplex(&v)
                        })
                        .collect()
                })
                .collect();
            // Armijo condition along the projected direction.
            let decrease: f64 = (0..ns)
                .flat_map(|s| (0..na).map(move |a| (s, a)))
                .map(|(s, a)| {
                    cand[s][a]
                        .iter()
                        .zip(&probs[s][a])
                        .zip(&grad[s][a])
                        .map(|((c, p), g)| g * (c - p))
                        .sum::<f64>()
                })
                .sum();
            let (cjs, cgrad, crho) = js_and_gradient(sim, agent, &cand, rho_real)?;
            if cjs <= js + 1e-4 * decrease && decrease <= 0.0 {
                let moved = cand
                    .iter()
                    .flatten()
                    .flatten()
                    .zip(probs.iter().flatten().flatten())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                probs = cand;
                js = cjs;
                grad = cgrad;
                rho_g = crho;
                step *= 2.0;
                accepted = moved > 1e-15;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let transformer = ActionTransformer::table(probs.clone())?;
    Ok(ExactMinimum {
        transformer,
        probs,
        js,
        rho_g,
    })
}

/// Settings of the full loop: grounding plus agent re-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuterLoopConfig {
    pub garat: GaratConfig,
    pub agent: AgentTrainConfig,
    /// Agent timesteps in the grounded simulator per outer iteration.
    pub retrain_timesteps: usize,
    /// Real transitions available for data collection, all iterations together.
    pub real_budget: usize,
    /// Real episodes used to pick the best policy (not counted in the budget).
    pub eval_episodes: usize,
}

impl Default for OuterLoopConfig {
    fn default() -> Self {
        Self {
            garat: GaratConfig::default(),
            agent: AgentTrainConfig::default(),
            retrain_timesteps: 200_000,
            real_budget: 2000,
            eval_episodes: 50,
        }
    }
}

pub struct OuterOutcome {
    pub policy: Actor,
    pub real_return: f64,
    pub real_transitions_used: usize,
    /// Real return of the initial policy followed by each retrained one.
    pub history: Vec<f64>,
    pub transformers: Vec<ActionTransformer>,
    pub diagnostics: Vec<Vec<GroundDiagnostics>>,
    pub curves: Vec<Vec<CurvePoint>>,
    /// Real trajectories collected in each iteration.
    pub real_data: Vec<Vec<Trajectory>>,
}

/// Collects up to `episodes` real episodes with the (stochastic) agent,
/// stopping early once `budget` transitions are spent; the last episode is
/// cut at the budget.
pub fn collect_real<P: Policy + ?Sized>(
    real: &dyn Environment,
    agent: &P,
    episodes: usize,
    budget: usize,
    seed: u64,
) -> Vec<Trajectory> {
    let mut env = real.boxed_clone();
    let mut rng = rng_from_seed(seed);
    let mut used = 0;
    let mut out = Vec::new();
    for _ in 0..episodes {
        if used >= budget {
            break;
        }
        let mut transitions: Vec<Transition> =
            crate::envs::run_episode(env.as_mut(), agent, &mut rng);
        transitions.truncate(budget - used);
        used += transitions.len();
        out.push(Trajectory { transitions, seed });
    }
    out
}

/// Alternates {collect real data with the agent, ground, re-train the agent
/// in the grounded simulator} for `outer_iterations` rounds and returns the
/// policy with the best real evaluation.
pub fn garat_outer_loop(
    pair: &EnvironmentPair,
    agent: PpoLearner,
    config: &OuterLoopConfig,
    outer_iterations: usize,
    seed: u64,
) -> Result<OuterOutcome> {
    outer_loop_with(
        pair,
        agent,
        config,
        outer_iterations,
        seed,
        |real_trajs, actor, s| {
            let g = ground(pair.sim.as_ref(), real_trajs, actor, &config.garat, s, None)?;
            Ok((g.transformer, g.diagnostics))
        },
    )
}

/// The outer loop with any grounding procedure plugged in, so baselines are
/// run under the same data collection, budget and re-training protocol.
pub fn outer_loop_with<F>(
    pair: &EnvironmentPair,
    agent: PpoLearner,
    config: &OuterLoopConfig,
    outer_iterations: usize,
    seed: u64,
    mut ground_step: F,
) -> Result<OuterOutcome>
where
    F: FnMut(&[Trajectory], &Actor, u64) -> Result<(ActionTransformer, Vec<GroundDiagnostics>)>,
{
    let mut out = OuterOutcome {
        policy: agent.actor.clone(),
        real_return: f64::NAN,
        real_transitions_used: 0,
        history: Vec::new(),
        transformers: Vec::new(),
        diagnostics: Vec::new(),
        curves: Vec::new(),
        real_data: Vec::new(),
    };
    if outer_iterations == 0 {
        return Ok(out);
    }
    if config.real_budget == 0 {
        return Err(Error::BudgetExhausted("zero real-data budget".into()));
    }
    let eval_seed = seed ^ 0x0e7a_1000;
    let mut real_eval = pair.real.clone();
    let (r0, _) = evaluate(
        real_eval.as_mut(),
        &Greedy(&agent.actor),
        config.eval_episodes,
        eval_seed,
    );
    out.real_return = r0;
    out.history.push(r0);
    let mut learner = agent;
    for k in 0..outer_iterations {
        let remaining = config.real_budget - out.real_transitions_used;
        if remaining == 0 {
            break;
        }
        let iter_seed = seed.wrapping_add(1000 * (k as u64 + 1));
        let real_trajs = collect_real(
            pair.real.as_ref(),
            &learner.actor,
            config.garat.real_episodes,
            remaining,
            iter_seed,
        );
        out.real_transitions_used += crate::envs::total_transitions(&real_trajs);
        let (transformer, diagnostics) =
            ground_step(&real_trajs, &learner.actor, iter_seed ^ 0x6a)?;
        let grounded = GroundedEnvironment::new(pair.sim.clone(), transformer.clone(), false)?;
        let trained = train_agent(
            &grounded,
            &config.agent,
            config.retrain_timesteps,
            iter_seed ^ 0x7b,
            Some(learner.clone()),
        )?;
        let (r, _) = evaluate(
            real_eval.as_mut(),
            &Greedy(&trained.best),
            config.eval_episodes,
            eval_seed,
        );
        out.history.push(r);
        if r > out.real_return {
            out.real_return = r;
            out.policy = trained.best.clone();
        }
        out.transformers.push(transformer);
        out.diagnostics.push(diagnostics);
        out.curves.push(trained.curve);
        out.real_data.push(real_trajs);
        learner = PpoLearner::new(trained.best, trained.learner.critic, trained.learner.config);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::marginal_transition_distribution;

    #[test]
    fn constant_half_discriminator_loss() {
        let d = Discriminator::tabular(2, 2);
        let mut g = TransitionBatch::new(Source::GroundedSim);
        g.push(vec![0.0], vec![1.0], vec![1.0], 1.0);
        let mut r = TransitionBatch::new(Source::Real);
        r.push(vec![1.0], vec![0.0], vec![0.0], 1.0);
        let mut rng = rng_from_seed(0);
        let l = discriminator_loss(&d, &g, &r, DiscRegularizers::NONE, &mut rng).unwrap();
        assert!((l.data - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn reward_limits() {
        assert!((reward_from_prob(0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((reward_from_prob(1.0) - 1e-7).abs() < 1e-12);
        assert!((reward_from_prob(0.0) - 16.118_095_650_958_32).abs() < 1e-9);
    }

    #[test]
    fn simplex_projection() {
        let p = project_simplex(&[0.5, 0.5]);
        assert_eq!(p, vec![0.5, 0.5]);
        let p = project_simplex(&[2.0, 0.0, -1.0]);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        let p = project_simplex(&[0.4, 0.3, 0.1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn js_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(8);
        let sim = TabularMdp::random(3, 2, 0.9, &mut rng).unwrap();
        let real = TabularMdp::random(3, 2, 0.9, &mut rng)
            .unwrap()
            .with_transition(
                TabularMdp::random(3, 2, 0.9, &mut rng)
                    .unwrap()
                    .transition()
                    .clone(),
            )
            .unwrap();
        let real = sim.with_transition(real.transition().clone()).unwrap();
        let agent = TabularPolicy::random(3, 2, &mut rng);
        let rho_real = marginal_transition_distribution(&real, &agent).unwrap();
        let probs: Tensor3 = (0..3)
            .map(|_| (0..2).map(|_| random_simplex(2, &mut rng)).collect())
            .collect();
        let (_, grad, _) = js_and_gradient(&sim, &agent, &probs, &rho_real).unwrap();
        let flat: Vec<f64> = probs.iter().flatten().flatten().copied().collect();
        let f = |x: &[f64]| {
            let p: Tensor3 = x
                .chunks(4)
                .map(|c| c.chunks(2).map(|r| r.to_vec()).collect())
                .collect();
            js_and_gradient(&sim, &agent, &p, &rho_real).unwrap().0
        };
        let fd = crate::oracles::central_difference(f, &flat, 1e-6);
        let an: Vec<f64> = grad.iter().flatten().flatten().copied().collect();
        assert!(
            crate::oracles::max_relative_error(&an, &fd, 1e-6) < 1e-4,
            "{an:?} vs {fd:?}"
        );
    }

    #[test]
    fn minimizer_on_matched_pair_is_exact() {
        let mut rng = rng_from_seed(2);
        let sim = TabularMdp::random(2, 2, 0.9, &mut rng).unwrap();
        let agent = TabularPolicy::random(2, 2, &mut rng);
        let rho = marginal_transition_distribution(&sim, &agent).unwrap();
        let m = exact_divergence_minimizer(&sim, &agent, &rho, 3, 0).unwrap();
        assert!(m.js < 1e-6);
    }

    #[test]
    fn minimizer_rejects_large_instances() {
        let mut rng = rng_from_seed(2);
        let sim = TabularMdp::random(20, 4, 0.9, &mut rng).unwrap();
        let agent = TabularPolicy::uniform(20, 4);
        let rho = marginal_transition_distribution(&sim, &agent).unwrap();
        assert!(matches!(
            exact_divergence_minimizer(&sim, &agent, &rho, 1, 0),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn diagnostics_csv_leaves_divergence_empty() {
        let rows = vec![GroundDiagnostics {
            iteration: 0,
            disc_loss: 1.5,
            mean_reward: 0.7,
            js_divergence: None,
            wall_ms: 3,
        }];
        let mut buf = Vec::new();
        write_diagnostics_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "iteration,disc_loss,mean_reward,js_divergence,wall_ms\n0,1.5,0.7,,3\n"
        );
    }
}
