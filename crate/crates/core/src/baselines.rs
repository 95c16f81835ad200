//! Comparison methods: grounded action transformation from a forward model
//! of the real dynamics and an inverse model of the simulator (GAT), and
//! training under a Gaussian action-noise envelope (ANE).
//!
//! GAT's smoothing parameter `alpha` is read as a convex combination toward
//! the untransformed action: continuous `a~ = alpha * g(s, a) + (1 - alpha) * a`,
//! tabular `a~ = g(s, a)` with probability `alpha`, else `a`. The continuous
//! inverse model is a deterministic regressor.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::{
    rng_from_seed, run_episode, ActionSpace, EnvSpec, Environment, EnvironmentPair, Policy, SimRng,
    StepOutcome, Trajectory, Transition,
};
use crate::error::{Error, Result};
use crate::grounding::ActionTransformer;
use crate::mdp::{TabularMdp, Tensor3};
use crate::nn::{train_agent, Actor, Adam, AgentTrainConfig, Greedy, Init, Mlp};

/// Standardized multi-output MLP regressor trained on squared error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub net: Mlp,
    pub in_shift: Vec<f64>,
    pub in_scale: Vec<f64>,
    pub out_shift: Vec<f64>,
    pub out_scale: Vec<f64>,
}

fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    (mean, std.iter().map(|v| v.sqrt().max(1e-6)).collect())
}

fn standardize(rows: &[Vec<f64>], shift: &[f64], scale: &[f64]) -> Array2<f64> {
    let d = shift.len();
    Array2::from_shape_fn((rows.len(), d), |(i, j)| (rows[i][j] - shift[j]) / scale[j])
}

/// Training settings shared by the forward and inverse regressors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            steps: 2000,
            minibatch: 128,
            learning_rate: 1e-3,
        }
    }
}

impl Regressor {
    pub fn fit(
        inputs: &[Vec<f64>],
        targets: &[Vec<f64>],
        config: &RegressorConfig,
        rng: &mut SimRng,
    ) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::Empty("regression data".into()));
        }
        let (in_shift, in_scale) = column_stats(inputs);
        let (out_shift, out_scale) = column_stats(targets);
        let x = standardize(inputs, &in_shift, &in_scale);
        let y = standardize(targets, &out_shift, &out_scale);
        let mut sizes = vec![in_shift.len()];
        sizes.extend(&config.hidden);
        sizes.push(out_shift.len());
        let mut net = Mlp::new(&sizes, Init::VALUE, rng);
        let mut opt = Adam::new(net.n_params(), config.learning_rate);
        let n = inputs.len();
        let m = config.minibatch.clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut pos = n;
        for _ in 0..config.steps {
            if pos + m > n {
                order.shuffle(rng);
                pos = 0;
            }
            let idx = &order[pos..pos + m];
            pos += m;
            let xb = x.select(ndarray::Axis(0), idx);
            let yb = y.select(ndarray::Axis(0), idx);
            let tape = net.forward_tape(xb.view())?;
            let g = (tape.output() - &yb) * (2.0 / (m * yb.ncols()) as f64);
            let grads = net.backward(&tape, g.view())?;
            opt.step(net.params_mut(), &grads);
        }
        Ok(Self {
            net,
            in_shift,
            in_scale,
            out_shift,
            out_scale,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z: Vec<f64> = x
            .iter()
            .zip(&self.in_shift)
            .zip(&self.in_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        let out = self.net.forward_one(&z)?;
        Ok(out
            .iter()
            .zip(&self.out_shift)
            .zip(&self.out_scale)
            .map(|((v, m), s)| v * s + m)
            .collect())
    }

    /// Mean squared error in target units.
    pub fn mse(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in inputs.iter().zip(targets) {
            total += self
                .predict(x)?
                .iter()
                .zip(y)
                .map(|(p, t)| (p - t).powi(2))
                .sum::<f64>();
        }
        Ok(total / inputs.len().max(1) as f64)
    }
}

/// Predicts the state change `s' - s` from `(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ForwardModel {
    /// `T[s][a][s']` from Laplace-smoothed counts.
    Tabular {
        transition: Tensor3,
    },
    Mlp(Regressor),
}

/// Predicts the action from `(s, s' - s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InverseModel {
    /// `I[s][s'][a]` from Laplace-smoothed counts.
    Tabular {
        probs: Tensor3,
    },
    Mlp(Regressor),
}

fn flat_transitions(trajs: &[Trajectory]) -> Vec<&Transition> {
    trajs.iter().flat_map(|t| &t.transitions).collect()
}

fn delta(t: &Transition) -> Vec<f64> {
    t.next_state
        .iter()
        .zip(&t.state)
        .map(|(a, b)| a - b)
        .collect()
}

impl ForwardModel {
    pub fn fit_tabular(
        trajs: &[Trajectory],
        n_states: usize,
        n_actions: usize,
        laplace: f64,
    ) -> Result<Self> {
        let data = flat_transitions(trajs);
        if data.is_empty() {
            return Err(Error::Empty("forward-model data".into()));
        }
        let mut counts = vec![vec![vec![laplace; n_states]; n_actions]; n_states];
        for t in data {
            counts[t.state[0] as usize][t.action[0] as usize][t.next_state[0] as usize] += 1.0;
        }
        normalize_rows(&mut counts)?;
        Ok(ForwardModel::Tabular { transition: counts })
    }

    pub fn fit_mlp(
        trajs: &[Trajectory],
        config: &RegressorConfig,
        rng: &mut SimRng,
    ) -> Result<Self> {
        let data = flat_transitions(trajs);
        if data.is_empty() {
            return Err(Error::Empty("forward-model data".into()));
        }
        let x: Vec<Vec<f64>> = data
            .iter()
            .map(|t| ActionTransformer::input(&t.state, &t.action))
            .collect();
        let y: Vec<Vec<f64>> = data.iter().map(|t| delta(t)).collect();
        Ok(ForwardModel::Mlp(Regressor::fit(&x, &y, config, rng)?))
    }
}

impl InverseModel {
    pub fn fit_tabular(
        trajs: &[Trajectory],
        n_states: usize,
        n_actions: usize,
        laplace: f64,
    ) -> Result<Self> {
        let data = flat_transitions(trajs);
        if data.is_empty() {
            return Err(Error::Empty("inverse-model data".into()));
        }
        let mut counts = vec![vec![vec![laplace; n_actions]; n_states]; n_states];
        for t in data {
            counts[t.state[0] as usize][t.next_state[0] as usize][t.action[0] as usize] += 1.0;
        }
        normalize_rows(&mut counts)?;
        Ok(InverseModel::Tabular { probs: counts })
    }

    pub fn fit_mlp(
        trajs: &[Trajectory],
        config: &RegressorConfig,
        rng: &mut SimRng,
    ) -> Result<Self> {
        let data = flat_transitions(trajs);
        if data.is_empty() {
            return Err(Error::Empty("inverse-model data".into()));
        }
        let x: Vec<Vec<f64>> = data
            .iter()
            .map(|t| ActionTransformer::input(&t.state, &delta(t)))
            .collect();
        let y: Vec<Vec<f64>> = data.iter().map(|t| t.action.clone()).collect();
        Ok(InverseModel::Mlp(Regressor::fit(&x, &y, config, rng)?))
    }
}

/// Rows with no data and no smoothing fall back to uniform.
fn normalize_rows(t: &mut Tensor3) -> Result<()> {
    for row in t.iter_mut().flatten() {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        } else {
            let n = row.len() as f64;
            row.iter_mut().for_each(|v| *v = 1.0 / n);
        }
    }
    Ok(())
}

/// Composition of the two models with smoothing toward the agent action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatTransformer {
    pub forward: Regressor,
    pub inverse: Regressor,
    pub alpha: f64,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl GatTransformer {
    pub fn transform(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let ds = self
            .forward
            .predict(&ActionTransformer::input(state, action))?;
        let g = self
            .inverse
            .predict(&ActionTransformer::input(state, &ds))?;
        Ok(g.iter()
            .zip(action)
            .zip(self.low.iter().zip(&self.high))
            .map(|((g, a), (l, h))| (self.alpha * g + (1.0 - self.alpha) * a).clamp(*l, *h))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatConfig {
    /// Weight on the model-composed action.
    pub alpha: f64,
    /// Pseudo-count added to every cell of the tabular models.
    pub laplace: f64,
    pub forward: RegressorConfig,
    pub inverse: RegressorConfig,
    /// Simulator episodes collected for the inverse model.
    pub sim_episodes: usize,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            laplace: 1e-3,
            forward: RegressorConfig::default(),
            inverse: RegressorConfig::default(),
            sim_episodes: 50,
        }
    }
}

impl GatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || self.laplace < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "alpha {} / laplace {}",
                self.alpha, self.laplace
            )));
        }
        Ok(())
    }
}

/// Tabular GAT transformer
/// `pi_g(a~|s,a) = alpha sum_s' F(s'|s,a) I(a~|s,s') + (1 - alpha) [a~ = a]`.
pub fn compose_tabular(forward: &Tensor3, inverse: &Tensor3, alpha: f64) -> Tensor3 {
    let ns = forward.len();
    let na = forward[0].len();
    (0..ns)
        .map(|s| {
            (0..na)
                .map(|a| {
                    let mut row = vec![0.0; na];
                    for s2 in 0..ns {
                        let f = forward[s][a][s2];
                        for (b, r) in row.iter_mut().enumerate() {
                            *r += alpha * f * inverse[s][s2][b];
                        }
                    }
                    row[a] += 1.0 - alpha;
                    row
                })
                .collect()
        })
        .collect()
}

/// Fits the real forward model and the simulator inverse model and composes
/// them into an action transformer.
pub fn gat_ground(
    sim: &dyn Environment,
    real_trajectories: &[Trajectory],
    sim_trajectories: &[Trajectory],
    config: &GatConfig,
    seed: u64,
) -> Result<ActionTransformer> {
    config.validate()?;
    if real_trajectories.iter().all(|t| t.is_empty())
        || sim_trajectories.iter().all(|t| t.is_empty())
    {
        return Err(Error::Empty(
            "GAT needs at least one real and one simulator transition".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let spec = sim.spec();
    match (&spec.action, sim.tabular_view()) {
        (ActionSpace::Discrete(na), Some(mdp)) => {
            let ns = mdp.n_states();
            let ForwardModel::Tabular { transition } =
                ForwardModel::fit_tabular(real_trajectories, ns, *na, config.laplace)?
            else {
                unreachable!()
            };
            let InverseModel::Tabular { probs } =
                InverseModel::fit_tabular(sim_trajectories, ns, *na, config.laplace)?
            else {
                unreachable!()
            };
            ActionTransformer::table(compose_tabular(&transition, &probs, config.alpha))
        }
        (ActionSpace::Box { low, high }, _) => {
            let ForwardModel::Mlp(forward) =
                ForwardModel::fit_mlp(real_trajectories, &config.forward, &mut rng)?
            else {
                unreachable!()
            };
            let InverseModel::Mlp(inverse) =
                InverseModel::fit_mlp(sim_trajectories, &config.inverse, &mut rng)?
            else {
                unreachable!()
            };
            Ok(ActionTransformer::Gat(GatTransformer {
                forward,
                inverse,
                alpha: config.alpha,
                low: low.clone(),
                high: high.clone(),
            }))
        }
        _ => Err(Error::Dimension(
            "discrete actions need a tabular simulator".into(),
        )),
    }
}

/// Simulator whose executed actions carry zero-mean Gaussian noise.
/// With `std == 0` no random numbers are drawn, so training is identical to
/// the noiseless simulator under the same seed.
#[derive(Clone)]
pub struct NoisyActionEnv {
    inner: Box<dyn Environment>,
    std: f64,
}

impl NoisyActionEnv {
    pub fn new(inner: Box<dyn Environment>, std: f64) -> Result<Self> {
        if !(std >= 0.0) {
            return Err(Error::InvalidParameter(format!("noise std {std}")));
        }
        if std > 0.0 && !matches!(inner.spec().action, ActionSpace::Box { .. }) {
            return Err(Error::InvalidParameter(
                "action noise needs a continuous action space".into(),
            ));
        }
        Ok(Self { inner, std })
    }
}

impl Environment for NoisyActionEnv {
    fn spec(&self) -> &EnvSpec {
        self.inner.spec()
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        self.inner.reset(rng)
    }

    fn state(&self) -> Vec<f64> {
        self.inner.state()
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        self.inner.set_state(state)
    }

    fn step(&mut self, action: &[f64], rng: &mut SimRng) -> StepOutcome {
        if self.std == 0.0 {
            return self.inner.step(action, rng);
        }
        let noisy: Vec<f64> = action
            .iter()
            .map(|a| a + self.std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let clipped = self.inner.spec().action.clip(&noisy);
        self.inner.step(&clipped, rng)
    }

    fn is_deterministic(&self) -> bool {
        self.std == 0.0 && self.inner.is_deterministic()
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AneConfig {
    pub stds: Vec<f64>,
    pub agent: AgentTrainConfig,
    pub train_timesteps: usize,
    /// Simulator episodes used to report `sim_return`.
    pub sim_eval_episodes: usize,
}

impl Default for AneConfig {
    fn default() -> Self {
        Self {
            stds: vec![0.1, 0.3, 0.5],
            agent: AgentTrainConfig::default(),
            train_timesteps: 200_000,
            sim_eval_episodes: 10,
        }
    }
}

/// One row of a hyperparameter sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub hyperparam: f64,
    pub seed: u64,
    pub real_return: f64,
    pub sim_return: f64,
    pub real_transitions_used: usize,
}

pub struct AneOutcome {
    pub best_std: f64,
    /// The selected policy for each seed, in seed order.
    pub best_policies: Vec<(u64, Actor)>,
    pub table: Vec<SweepRow>,
}

/// Runs episodes until `max_transitions` real steps are spent. Returns the
/// mean return of completed episodes (of the single truncated one when none
/// completed) and the number of transitions used.
pub fn evaluate_budgeted<P: Policy + ?Sized>(
    env: &mut dyn Environment,
    policy: &P,
    max_transitions: usize,
    seed: u64,
) -> Result<(f64, usize)> {
    if max_transitions == 0 {
        return Err(Error::BudgetExhausted(
            "no real transitions for evaluation".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let mut used = 0;
    let mut completed = Vec::new();
    let mut partial = None;
    while used < max_transitions {
        let mut state = env.reset(&mut rng);
        let mut ret = 0.0;
        let mut finished = false;
        for t in 0..env.spec().horizon {
            if used == max_transitions {
                break;
            }
            let out = env.step(&policy.act(&state, &mut rng), &mut rng);
            used += 1;
            ret += out.reward;
            if out.done || t + 1 == env.spec().horizon {
                finished = true;
                break;
            }
            state = out.next_state;
        }
        if finished {
            completed.push(ret);
        } else {
            partial = Some(ret);
        }
    }
    let mean = if completed.is_empty() {
        partial.unwrap_or(0.0)
    } else {
        completed.iter().sum::<f64>() / completed.len() as f64
    };
    Ok((mean, used))
}

/// Action-noise sweep: for every `(std, seed)` cell trains in the noisy
/// simulator, then spends an equal share of `real_eval_budget` evaluating in
/// the real environment. The best std maximizes the seed-averaged real
/// return.
pub fn ane_train(
    pair: &EnvironmentPair,
    config: &AneConfig,
    real_eval_budget: usize,
    seeds: &[u64],
) -> Result<AneOutcome> {
    if config.stds.is_empty() {
        return Err(Error::Empty("noise std list".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Empty("seed list".into()));
    }
    let cells = config.stds.len();
    let share = real_eval_budget / cells;
    let mut table = Vec::new();
    let mut policies: Vec<Vec<Actor>> = vec![Vec::new(); cells];
    for &seed in seeds {
        for (k, &std) in config.stds.iter().enumerate() {
            let env = NoisyActionEnv::new(pair.sim.clone(), std)?;
            let out = train_agent(&env, &config.agent, config.train_timesteps, seed, None)?;
            let mut sim = pair.sim.clone();
            let (sim_return, _) = crate::envs::evaluate(
                sim.as_mut(),
                &Greedy(&out.best),
                config.sim_eval_episodes,
                seed ^ 0x51,
            );
            let mut real = pair.real.clone();
            let (real_return, used) =
                evaluate_budgeted(real.as_mut(), &Greedy(&out.best), share, seed ^ 0xa5)?;
            table.push(SweepRow {
                method: "ane".into(),
                hyperparam: std,
                seed,
                real_return,
                sim_return,
                real_transitions_used: used,
            });
            policies[k].push(out.best);
        }
    }
    let mean_real = |k: usize| {
        let rows: Vec<f64> = table
            .iter()
            .filter(|r| r.hyperparam == config.stds[k])
            .map(|r| r.real_return)
            .collect();
        rows.iter().sum::<f64>() / rows.len() as f64
    };
    let best = (0..cells).fold(0, |b, k| if mean_real(k) > mean_real(b) { k } else { b });
    let best_policies = seeds
        .iter()
        .copied()
        .zip(policies.swap_remove(best))
        .collect();
    Ok(AneOutcome {
        best_std: config.stds[best],
        best_policies,
        table,
    })
}

/// Simulator trajectories for the inverse model.
pub fn collect_sim_data<P: Policy + ?Sized>(
    sim: &dyn Environment,
    policy: &P,
    episodes: usize,
    seed: u64,
) -> Vec<Trajectory> {
    let mut env = sim.boxed_clone();
    let mut rng = rng_from_seed(seed);
    (0..episodes)
        .map(|_| Trajectory {
            transitions: run_episode(env.as_mut(), policy, &mut rng),
            seed,
        })
        .collect()
}

/// Trajectories covering every `(s, a)` pair of a tabular simulator
/// `repeats` times, for fitting exact models.
pub fn exhaustive_tabular_data(sim: &TabularMdp, repeats: usize, seed: u64) -> Vec<Trajectory> {
    let mut rng = rng_from_seed(seed);
    let mut transitions = Vec::new();
    for s in 0..sim.n_states() {
        for a in 0..sim.n_actions() {
            for _ in 0..repeats {
                let s2 = crate::mdp::sample_categorical(&sim.transition()[s][a], &mut rng);
                transitions.push(Transition {
                    state: vec![s as f64],
                    action: vec![a as f64],
                    next_state: vec![s2 as f64],
                    reward: sim.reward()[s][a][s2],
                    done: true,
                });
            }
        }
    }
    vec![Trajectory { transitions, seed }]
}
