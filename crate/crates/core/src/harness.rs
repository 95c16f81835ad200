//! Experiment harness: transition-error and scaled-return metrics, the
//! transfer pipeline for every method, result persistence, the bundled
//! verification suites and report aggregation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adversarial::{
    discriminator_loss, exact_divergence_minimizer, garat_outer_loop, ground,
    optimal_discriminator, outer_loop_with, train_discriminator, write_diagnostics_csv,
    DiscRegularizers, Discriminator, ExactContext, GaratConfig, OuterLoopConfig, OuterOutcome,
    Source, TransitionBatch,
};
use crate::baselines::{ane_train, collect_sim_data, gat_ground, AneConfig, GatConfig};
use crate::envs::{
    evaluate, make_pair, make_tabular_pair, rng_from_seed, rollout, write_trajectories_csv,
    Environment, EnvironmentPair, Gridworld, GridworldParams, PairConfig, TabularEnv, Trajectory,
};
use crate::error::{Error, Result};
use crate::grounding::{
    grounded_marginal, grounded_mdp, realizing_transformer, ActionTransformer, GroundedEnvironment,
};
use crate::mdp::{
    expected_return_from_marginal, greedy_action_sets, marginal_js,
    marginal_transition_distribution, marginal_tv, policy_evaluation, random_simplex,
    recover_transition, start_value, tv_distance, TabularMdp, TabularPolicy, Tensor3,
};
use crate::nn::{
    train_agent, Actor, AgentTrainConfig, CategoricalPolicy, Encoder, GaussianPolicy, Greedy, Init,
    Mlp, PpoConfig, PpoLearner, ValueFunction,
};
use crate::oracles::{five_point_difference, max_relative_error, monte_carlo_marginal};

/// Next-state draws averaged per transition for stochastic simulators.
pub const STOCHASTIC_DRAWS: usize = 16;

/// Mean and per-transition L2 next-state errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionError {
    pub mean: f64,
    pub errors: Vec<f64>,
}

/// For every real transition `(s, a, s')`: reset `sim_like` to `s`, step with
/// `a` (averaging the next state over [`STOCHASTIC_DRAWS`] draws when the
/// simulator is stochastic) and record `||s_hat' - s'||_2`.
pub fn per_step_transition_error(
    sim_like: &dyn Environment,
    real_trajectories: &[Trajectory],
    seed: u64,
) -> Result<TransitionError> {
    let mut env = sim_like.boxed_clone();
    let mut rng = rng_from_seed(seed);
    let draws = if env.is_deterministic() {
        1
    } else {
        STOCHASTIC_DRAWS
    };
    let mut errors = Vec::new();
    for t in real_trajectories.iter().flat_map(|t| &t.transitions) {
        let mut mean = vec![0.0; t.next_state.len()];
        for _ in 0..draws {
            env.set_state(&t.state)?;
            let out = env.step(&t.action, &mut rng);
            if out.next_state.len() != mean.len() {
                return Err(Error::Dimension(
                    "simulator and real states differ in width".into(),
                ));
            }
            for (m, x) in mean.iter_mut().zip(&out.next_state) {
                *m += x / draws as f64;
            }
        }
        errors.push(
            mean.iter()
                .zip(&t.next_state)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt(),
        );
    }
    if errors.is_empty() {
        return Err(Error::Empty("real transitions".into()));
    }
    Ok(TransitionError {
        mean: errors.iter().sum::<f64>() / errors.len() as f64,
        errors,
    })
}

/// `(raw - anchor_sim) / (anchor_real - anchor_sim)`.
pub fn scaled_return(raw: f64, anchor_sim: f64, anchor_real: f64) -> Result<f64> {
    if (anchor_real - anchor_sim).abs() <= 1e-9 {
        return Err(Error::DegenerateAnchors {
            sim: anchor_sim,
            real: anchor_real,
        });
    }
    Ok((raw - anchor_sim) / (anchor_real - anchor_sim))
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Garat,
    Gat,
    Ane,
    SimOnly,
    RealOnly,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Garat,
        Method::Gat,
        Method::Ane,
        Method::SimOnly,
        Method::RealOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Garat => "garat",
            Method::Gat => "gat",
            Method::Ane => "ane",
            Method::SimOnly => "sim_only",
            Method::RealOnly => "real_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Unknown(format!(
                    "method '{s}' (expected garat, gat, ane, sim_only, real_only)"
                ))
            })
    }

    /// Whether the method consumes real transitions for training.
    pub fn uses_budget(self) -> bool {
        !matches!(self, Method::SimOnly | Method::RealOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub pair: PairConfig,
    pub method: Method,
    pub seeds: Vec<u64>,
    /// Real transitions available to the method's data collection.
    pub budget: usize,
    pub output_dir: Option<PathBuf>,
    /// Real episodes used to evaluate every final policy (not budgeted).
    pub eval_episodes: usize,
    pub agent: AgentTrainConfig,
    /// Agent training steps in the simulator (and, for the anchor, in the
    /// real environment).
    pub sim_timesteps: usize,
    pub real_timesteps: usize,
    pub retrain_timesteps: usize,
    pub outer_iterations: usize,
    pub garat: GaratConfig,
    pub gat: GatConfig,
    pub ane_stds: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            pair: PairConfig::pendulum_default(),
            method: Method::Garat,
            seeds: vec![0, 1, 2, 3, 4],
            budget: 2000,
            output_dir: None,
            eval_episodes: 50,
            agent: pendulum_agent_config(),
            sim_timesteps: 200_000,
            real_timesteps: 200_000,
            retrain_timesteps: 100_000,
            outer_iterations: 4,
            garat: pendulum_garat_config(),
            gat: GatConfig::default(),
            ane_stds: vec![0.1, 0.3, 0.5],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Empty("seed list".into()));
        }
        if self.method.uses_budget() && self.budget == 0 {
            return Err(Error::InvalidParameter(format!(
                "method {} needs a positive budget",
                self.method.name()
            )));
        }
        if self.eval_episodes == 0 {
            return Err(Error::InvalidParameter(
                "eval_episodes must be positive".into(),
            ));
        }
        self.garat.validate()?;
        self.gat.validate()?;
        self.agent.ppo().validate()
    }

    /// Reads TOML or JSON, by file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        Ok(cfg)
    }

    pub fn outer(&self) -> OuterLoopConfig {
        OuterLoopConfig {
            garat: self.garat.clone(),
            agent: self.agent.clone(),
            retrain_timesteps: self.retrain_timesteps,
            real_budget: self.budget,
            eval_episodes: self.eval_episodes,
        }
    }
}

/// Agent settings for the pendulum: the default PPO settings with early
/// stopping once an episode is balanced for the whole horizon.
pub fn pendulum_agent_config() -> AgentTrainConfig {
    AgentTrainConfig {
        target_return: Some(200.0),
        ..AgentTrainConfig::default()
    }
}

/// Transformer/discriminator settings used for the pendulum pair.
pub fn pendulum_garat_config() -> GaratConfig {
    GaratConfig {
        n_transformer_updates: 50,
        disc_minibatches: 32,
        disc_learning_rate: 3e-3,
        transformer: PpoConfig {
            learning_rate: 1e-3,
            epochs: 10,
            minibatches: 8,
            clip_ratio: 0.2,
            init_std: 0.3,
            gamma: 0.9,
            lambda: 0.95,
            batch_timesteps: 5000,
            ..PpoConfig::default()
        },
        ..GaratConfig::default()
    }
}

/// One result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub seed: u64,
    pub real_transitions_used: usize,
    pub raw_return: f64,
    pub scaled_return: Option<f64>,
    pub transition_error: Option<f64>,
    pub wall_ms: u128,
}

/// Reference policies of one seed: trained only in the simulator, and only
/// in the real environment, both evaluated in the real environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub seed: u64,
    pub sim_policy: Actor,
    pub sim_return: f64,
    pub real_policy: Actor,
    pub real_return: f64,
    /// Real transitions spent training the real anchor.
    pub real_training_transitions: usize,
    /// The simulator learner, the starting point of every grounding method.
    #[serde(skip)]
    pub sim_learner: Option<PpoLearner>,
}

fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x00e7_a150
}

/// Evaluates a policy in the real environment over `episodes` greedy episodes.
pub fn evaluate_real(pair: &EnvironmentPair, policy: &Actor, episodes: usize, seed: u64) -> f64 {
    let mut env = pair.real.clone();
    evaluate(env.as_mut(), &Greedy(policy), episodes, eval_seed(seed)).0
}

pub fn compute_anchors(
    pair: &EnvironmentPair,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Anchors> {
    let sim = train_agent(
        pair.sim.as_ref(),
        &config.agent,
        config.sim_timesteps,
        seed,
        None,
    )?;
    let real = train_agent(
        pair.real.as_ref(),
        &config.agent,
        config.real_timesteps,
        seed,
        None,
    )?;
    let sim_return = evaluate_real(pair, &sim.best, config.eval_episodes, seed);
    let real_return = evaluate_real(pair, &real.best, config.eval_episodes, seed);
    let sim_learner = PpoLearner::new(
        sim.best.clone(),
        sim.learner.critic.clone(),
        sim.learner.config.clone(),
    );
    Ok(Anchors {
        seed,
        sim_policy: sim.best,
        sim_return,
        real_policy: real.best,
        real_return,
        real_training_transitions: real.timesteps,
        sim_learner: Some(sim_learner),
    })
}

/// Everything one `(method, seed)` cell produced.
pub struct MethodRun {
    pub record: MetricRecord,
    pub policy: Actor,
    pub outer: Option<OuterOutcome>,
    pub ane_table: Vec<crate::baselines::SweepRow>,
}

/// Runs one method for one seed, starting from the seed's anchors.
pub fn run_method(
    pair: &EnvironmentPair,
    config: &ExperimentConfig,
    method: Method,
    anchors: &Anchors,
) -> Result<MethodRun> {
    let start = Instant::now();
    let seed = anchors.seed;
    let learner = anchors
        .sim_learner
        .clone()
        .ok_or_else(|| Error::Internal("anchors carry no simulator learner".into()))?;
    let mut outer = None;
    let mut ane_table = Vec::new();
    let mut transition_error = None;
    let (policy, used) = match method {
        Method::SimOnly => (anchors.sim_policy.clone(), 0),
        Method::RealOnly => (
            anchors.real_policy.clone(),
            anchors.real_training_transitions,
        ),
        Method::Garat => {
            let o = garat_outer_loop(
                pair,
                learner,
                &config.outer(),
                config.outer_iterations,
                seed,
            )?;
            let r = (o.policy.clone(), o.real_transitions_used);
            outer = Some(o);
            r
        }
        Method::Gat => {
            let gat = config.gat.clone();
            let o = outer_loop_with(
                pair,
                learner,
                &config.outer(),
                config.outer_iterations,
                seed,
                |real, actor, s| {
                    let sim_data = collect_sim_data(pair.sim.as_ref(), actor, gat.sim_episodes, s);
                    Ok((
                        gat_ground(pair.sim.as_ref(), real, &sim_data, &gat, s)?,
                        Vec::new(),
                    ))
                },
            )?;
            let r = (o.policy.clone(), o.real_transitions_used);
            outer = Some(o);
            r
        }
        Method::Ane => {
            let cfg = AneConfig {
                stds: config.ane_stds.clone(),
                agent: config.agent.clone(),
                train_timesteps: config.sim_timesteps,
                sim_eval_episodes: config.agent.eval_episodes,
            };
            let out = ane_train(pair, &cfg, config.budget, &[seed])?;
            let used = out.table.iter().map(|r| r.real_transitions_used).sum();
            ane_table = out.table;
            (out.best_policies[0].1.clone(), used)
        }
    };
    if let Some(o) = &outer {
        if let (Some(t), Some(data)) = (o.transformers.last(), o.real_data.last()) {
            let g = GroundedEnvironment::new(pair.sim.clone(), t.clone(), false)?;
            transition_error = Some(per_step_transition_error(&g, data, seed)?.mean);
        }
    }
    let raw_return = evaluate_real(pair, &policy, config.eval_episodes, seed);
    let scaled = scaled_return(raw_return, anchors.sim_return, anchors.real_return).ok();
    Ok(MethodRun {
        record: MetricRecord {
            method: method.name().into(),
            seed,
            real_transitions_used: used,
            raw_return,
            scaled_return: scaled,
            transition_error,
            wall_ms: start.elapsed().as_millis(),
        },
        policy,
        outer,
        ane_table,
    })
}

pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "method",
        "seed",
        "real_transitions_used",
        "raw_return",
        "scaled_return",
        "transition_error",
        "wall_ms",
    ])?;
    for r in records {
        w.write_record([
            r.method.clone(),
            r.seed.to_string(),
            r.real_transitions_used.to_string(),
            r.raw_return.to_string(),
            r.scaled_return.map(|v| v.to_string()).unwrap_or_default(),
            r.transition_error
                .map(|v| v.to_string())
                .unwrap_or_default(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let opt = |i: usize| -> Result<Option<f64>> {
            let v = &row[i];
            if v.is_empty() {
                Ok(None)
            } else {
                v.parse()
                    .map(Some)
                    .map_err(|_| Error::InvalidParameter(format!("bad number '{v}'")))
            }
        };
        let num = |i: usize| -> Result<f64> {
            row[i]
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("bad number '{}'", &row[i])))
        };
        out.push(MetricRecord {
            method: row[0].to_string(),
            seed: num(1)? as u64,
            real_transitions_used: num(2)? as usize,
            raw_return: num(3)?,
            scaled_return: opt(4)?,
            transition_error: opt(5)?,
            wall_ms: num(6)? as u128,
        });
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_curve_csv(path: &Path, curve: &[crate::nn::CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["timestep", "mean_return", "std_return"])?;
    for p in curve {
        w.write_record([
            p.timestep.to_string(),
            p.mean_return.to_string(),
            p.std_return.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Persists one cell under `dir`: config snapshot, anchors, final policy,
/// transformers, diagnostics, learning curves, collected real data and the
/// metric row.
pub fn write_run(
    dir: &Path,
    config: &ExperimentConfig,
    anchors: &Anchors,
    run: &MethodRun,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), config)?;
    write_json(&dir.join("anchors.json"), anchors)?;
    write_json(&dir.join("policy.json"), &run.policy)?;
    write_metrics_csv(&dir.join("metrics.csv"), std::slice::from_ref(&run.record))?;
    if let Some(o) = &run.outer {
        for (k, t) in o.transformers.iter().enumerate() {
            fs::write(dir.join(format!("transformer_{k}.json")), t.to_json()?)?;
        }
        for (k, d) in o.diagnostics.iter().enumerate() {
            if !d.is_empty() {
                write_diagnostics_csv(
                    fs::File::create(dir.join(format!("diagnostics_{k}.csv")))?,
                    d,
                )?;
            }
        }
        for (k, c) in o.curves.iter().enumerate() {
            write_curve_csv(&dir.join(format!("curve_{k}.csv")), c)?;
        }
        for (k, data) in o.real_data.iter().enumerate() {
            write_trajectories_csv(
                fs::File::create(dir.join(format!("real_data_{k}.csv")))?,
                data,
            )?;
        }
    }
    if !run.ane_table.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
        for row in &run.ane_table {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// The full transfer pipeline of a config for every seed: anchors, the
/// method, a final real evaluation over `eval_episodes`, and (when an output
/// directory is set) `<out>/<method>/seed_<n>/...` plus a merged
/// `<out>/<method>/metrics.csv` sorted by seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<MetricRecord>> {
    config.validate()?;
    let pair = make_pair(&config.pair)?;
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let mut records = Vec::new();
    for seed in seeds {
        let anchors = compute_anchors(&pair, config, seed)?;
        let run = run_method(&pair, config, config.method, &anchors)?;
        if let Some(out) = &config.output_dir {
            write_run(
                &out.join(config.method.name()).join(format!("seed_{seed}")),
                config,
                &anchors,
                &run,
            )?;
        }
        records.push(run.record);
    }
    if let Some(out) = &config.output_dir {
        write_metrics_csv(
            &out.join(config.method.name()).join("metrics.csv"),
            &records,
        )?;
    }
    Ok(records)
}

/// Per-method summary of metric files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub n_seeds: usize,
    pub median_raw_return: f64,
    pub median_scaled_return: Option<f64>,
    pub median_transition_error: Option<f64>,
    pub max_real_transitions_used: usize,
}

/// Aggregates every `<dir>/<method>/metrics.csv` into `<dir>/summary.csv`
/// and `<dir>/summary.json`, rows sorted by method name.
pub fn report(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path().join("metrics.csv")))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Empty(format!(
            "no metrics.csv below {}",
            dir.display()
        )));
    }
    let mut rows = Vec::new();
    for p in entries {
        let recs = read_metrics_csv(&p)?;
        if recs.is_empty() {
            continue;
        }
        let pick = |f: &dyn Fn(&MetricRecord) -> Option<f64>| {
            let v: Vec<f64> = recs.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| median(&v))
        };
        rows.push(ReportRow {
            method: recs[0].method.clone(),
            n_seeds: recs.len(),
            median_raw_return: median(&recs.iter().map(|r| r.raw_return).collect::<Vec<_>>()),
            median_scaled_return: pick(&|r| r.scaled_return),
            median_transition_error: pick(&|r| r.transition_error),
            max_real_transitions_used: recs
                .iter()
                .map(|r| r.real_transitions_used)
                .max()
                .unwrap_or(0),
        });
    }
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(&dir.join("summary.json"), &rows)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Grounding error on the pendulum
// ---------------------------------------------------------------------------

/// Per-step error of the ungrounded, GARAT-grounded and GAT-grounded
/// simulators on held-out real trajectories, all groundings using the same
/// real data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingErrorRow {
    pub seed: u64,
    pub real_transitions: usize,
    pub ungrounded: f64,
    pub garat: f64,
    pub gat: f64,
    pub garat_mean_abs_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingErrorConfig {
    pub pair: PairConfig,
    pub agent: AgentTrainConfig,
    pub sim_timesteps: usize,
    pub real_trajectories: usize,
    pub garat: GaratConfig,
    pub gat: GatConfig,
}

impl Default for GroundingErrorConfig {
    fn default() -> Self {
        Self {
            pair: PairConfig::pendulum_default(),
            agent: pendulum_agent_config(),
            sim_timesteps: 200_000,
            real_trajectories: 10,
            garat: pendulum_garat_config(),
            gat: GatConfig::default(),
        }
    }
}

pub fn grounding_error_run(config: &GroundingErrorConfig, seed: u64) -> Result<GroundingErrorRow> {
    let pair = make_pair(&config.pair)?;
    let agent = train_agent(
        pair.sim.as_ref(),
        &config.agent,
        config.sim_timesteps,
        seed,
        None,
    )?
    .best;
    let real_trajs = crate::adversarial::collect_real(
        pair.real.as_ref(),
        &agent,
        config.real_trajectories,
        usize::MAX,
        seed ^ 0x11,
    );
    let held_out = crate::adversarial::collect_real(
        pair.real.as_ref(),
        &agent,
        config.real_trajectories,
        usize::MAX,
        seed ^ 0x22,
    );
    let err_seed = seed ^ 0x33;
    let ungrounded = per_step_transition_error(pair.sim.as_ref(), &held_out, err_seed)?.mean;
    let g = ground(
        pair.sim.as_ref(),
        &real_trajs,
        &agent,
        &config.garat,
        seed ^ 0x44,
        None,
    )?;
    let garat_env = GroundedEnvironment::new(pair.sim.clone(), g.transformer.clone(), false)?;
    let garat = per_step_transition_error(&garat_env, &held_out, err_seed)?.mean;
    let sim_data = collect_sim_data(
        pair.sim.as_ref(),
        &agent,
        config.gat.sim_episodes,
        seed ^ 0x55,
    );
    let gat_t = gat_ground(
        pair.sim.as_ref(),
        &real_trajs,
        &sim_data,
        &config.gat,
        seed ^ 0x66,
    )?;
    let gat_env = GroundedEnvironment::new(pair.sim.clone(), gat_t, false)?;
    let gat = per_step_transition_error(&gat_env, &held_out, err_seed)?.mean;
    Ok(GroundingErrorRow {
        seed,
        real_transitions: crate::envs::total_transitions(&real_trajs),
        ungrounded,
        garat,
        gat,
        garat_mean_abs_shift: crate::adversarial::mean_abs_shift(&g.transformer, &held_out, seed)?,
    })
}

// ---------------------------------------------------------------------------
// Tabular suite
// ---------------------------------------------------------------------------

/// A small sim/real pair with a fixed agent policy.
#[derive(Debug, Clone)]
pub struct TabularInstance {
    pub name: String,
    pub sim: TabularMdp,
    pub real: TabularMdp,
    pub agent: TabularPolicy,
}

impl TabularInstance {
    pub fn rho_real(&self) -> Result<crate::mdp::MarginalTransitionDistribution> {
        marginal_transition_distribution(&self.real, &self.agent)
    }
}

fn random_pair_instance(name: &str, ns: usize, na: usize, seed: u64) -> Result<TabularInstance> {
    let mut rng = rng_from_seed(seed);
    let sim = TabularMdp::random(ns, na, 0.9, &mut rng)?;
    let real = sim.with_transition(
        TabularMdp::random(ns, na, 0.9, &mut rng)?
            .transition()
            .clone(),
    )?;
    let agent = TabularPolicy::random(ns, na, &mut rng);
    Ok(TabularInstance {
        name: name.into(),
        sim,
        real,
        agent,
    })
}

/// The bundled tabular instances, every one with `|S| * |A| <= 16`: five
/// random mismatched pairs of growing size and a 2x2 slippery gridworld.
pub fn tabular_suite() -> Result<Vec<TabularInstance>> {
    let mut out = vec![
        random_pair_instance("random_2x2_a", 2, 2, 100)?,
        random_pair_instance("random_2x2_b", 2, 2, 101)?,
        random_pair_instance("random_3x2", 3, 2, 102)?,
        random_pair_instance("random_4x2", 4, 2, 103)?,
        random_pair_instance("random_4x4", 4, 4, 104)?,
    ];
    let grid = |slip| -> Result<TabularMdp> {
        let mut p = GridworldParams::new(2, slip);
        p.gamma = 0.9;
        Ok(Gridworld::new(p)?
            .tabular_view()
            .expect("gridworld is tabular")
            .clone())
    };
    let mut rng = rng_from_seed(105);
    let agent = TabularPolicy::new((0..4).map(|_| random_simplex(4, &mut rng)).collect())?;
    out.push(TabularInstance {
        name: "gridworld_2x2".into(),
        sim: grid(0.0)?,
        real: grid(0.3)?,
        agent,
    });
    Ok(out)
}

/// GARAT settings for tabular instances: tabular softmax transformer with an
/// annealed step size, logistic-table discriminator without gradient
/// penalty, and discounting matched to the instance.
pub fn tabular_garat_config(gamma: f64) -> GaratConfig {
    GaratConfig {
        n_transformer_updates: 60,
        disc_minibatches: 4,
        disc_learning_rate: 0.05,
        disc_hidden: Vec::new(),
        gp_coef: 0.0,
        l2_coef: 0.0,
        anneal_learning_rate: true,
        transformer: PpoConfig {
            hidden: Vec::new(),
            gamma,
            learning_rate: 0.05,
            batch_timesteps: 4000,
            epochs: 4,
            minibatches: 4,
            ..PpoConfig::default()
        },
        ..GaratConfig::default()
    }
}

/// Outcome of the sampled-versus-exact divergence comparison on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceMinimumRow {
    pub name: String,
    pub identity_js: f64,
    pub exact_js: f64,
    pub garat_js: f64,
    pub rho_tv: f64,
    pub js_trace: Vec<f64>,
    pub passed: bool,
}

/// Runs `ground()` with sampled data and compares with the exact minimizer:
/// the divergences must agree within `max(0.01, 20%)` and the grounded
/// marginals within TV 0.05.
pub fn divergence_minimum_instance(
    inst: &TabularInstance,
    seed: u64,
) -> Result<DivergenceMinimumRow> {
    let rho_real = inst.rho_real()?;
    let exact = exact_divergence_minimizer(&inst.sim, &inst.agent, &rho_real, 20, seed)?;
    let gamma = inst.sim.gamma();
    let horizon = TabularEnv::horizon_for(gamma, 1e-3);
    let pair = make_tabular_pair(inst.sim.clone(), inst.real.clone(), horizon)?;
    let mut real_env = pair.real.clone();
    let real_trajs = rollout(real_env.as_mut(), &inst.agent, 2000, seed ^ 0x7);
    let cfg = tabular_garat_config(gamma);
    let ctx = ExactContext {
        sim: inst.sim.clone(),
        agent: inst.agent.clone(),
        rho_real: rho_real.clone(),
    };
    let out = ground(
        pair.sim.as_ref(),
        &real_trajs,
        &inst.agent,
        &cfg,
        seed ^ 0x3,
        Some(&ctx),
    )?;
    let (ns, na) = (inst.sim.n_states(), inst.sim.n_actions());
    let probs = out
        .transformer
        .tabular_probs(ns, na)
        .ok_or_else(|| Error::Internal("not tabular".into()))??;
    let rho_g = grounded_marginal(&inst.sim, &inst.agent, &probs)?;
    let garat_js = marginal_js(&rho_g, &rho_real);
    let rho_tv = marginal_tv(&rho_g, &exact.rho_g);
    let identity_js = marginal_js(
        &marginal_transition_distribution(&inst.sim, &inst.agent)?,
        &rho_real,
    );
    let passed = (garat_js - exact.js).abs() <= f64::max(0.01, 0.2 * exact.js) && rho_tv <= 0.05;
    Ok(DivergenceMinimumRow {
        name: inst.name.clone(),
        identity_js,
        exact_js: exact.js,
        garat_js,
        rho_tv,
        js_trace: out
            .diagnostics
            .iter()
            .filter_map(|d| d.js_divergence)
            .collect(),
        passed,
    })
}

/// Discriminator trained on exact marginals against the closed-form optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalDiscriminatorRow {
    pub name: String,
    pub sup_error: f64,
    pub data_loss: f64,
    pub predicted_loss: f64,
    pub passed: bool,
}

/// Freezes a random transformer, trains a tabular discriminator on the exact
/// grounded and real marginals, and compares it with
/// `rho_g / (rho_g + rho_real)` and its loss with `2 ln 2 - 2 JS`.
pub fn optimal_discriminator_instance(
    inst: &TabularInstance,
    seed: u64,
) -> Result<OptimalDiscriminatorRow> {
    let (ns, na) = (inst.sim.n_states(), inst.sim.n_actions());
    let mut rng = rng_from_seed(seed);
    let probs: Tensor3 = (0..ns)
        .map(|_| (0..na).map(|_| random_simplex(na, &mut rng)).collect())
        .collect();
    let rho_g = grounded_marginal(&inst.sim, &inst.agent, &probs)?;
    let rho_real = inst.rho_real()?;
    let gsim = TransitionBatch::from_marginal(&rho_g, Source::GroundedSim)?;
    let real = TransitionBatch::from_marginal(&rho_real, Source::Real)?;
    let mut d = Discriminator::tabular(ns, na);
    let loss = train_discriminator(
        &mut d,
        &gsim,
        &real,
        DiscRegularizers::NONE,
        3000,
        0.05,
        &mut rng,
    )?;
    let target = optimal_discriminator(&rho_g, &rho_real);
    let mut sup_error: f64 = 0.0;
    for s in 0..ns {
        for a in 0..na {
            for s2 in 0..ns {
                if let Some(t) = target[(s * na + a) * ns + s2] {
                    let p = d.prob(&[s as f64], &[a as f64], &[s2 as f64])?;
                    sup_error = sup_error.max((p - t).abs());
                }
            }
        }
    }
    let predicted_loss = 2.0 * std::f64::consts::LN_2 - 2.0 * marginal_js(&rho_g, &rho_real);
    Ok(OptimalDiscriminatorRow {
        name: inst.name.clone(),
        sup_error,
        data_loss: loss.data,
        predicted_loss,
        passed: sup_error < 0.05 && (loss.data - predicted_loss).abs() < 0.05,
    })
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

/// One finite-difference comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub name: String,
    pub n_params: usize,
    pub max_relative_error: f64,
}

const FD_STEP: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;

fn check<F: FnMut(&[f64]) -> f64>(name: &str, analytic: &[f64], x: &[f64], f: F) -> GradientCheck {
    let fd = five_point_difference(f, x, FD_STEP);
    GradientCheck {
        name: name.into(),
        n_params: x.len(),
        max_relative_error: max_relative_error(analytic, &fd, FD_FLOOR),
    }
}

fn random_rows(n: usize, d: usize, rng: &mut crate::envs::SimRng) -> Vec<Vec<f64>> {
    use rand::Rng;
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect()
}

/// Central-difference checks of every differentiable component at the
/// shapes the repository uses: agent and transformer policies (Gaussian and
/// categorical), value functions, model regressors, discriminators with and
/// without gradient penalty, and the JS transformer gradient.
pub fn gradient_checks(seed: u64) -> Result<Vec<GradientCheck>> {
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::new();
    let hidden = [64usize, 64];

    // Plain network backward at every layer-size pattern in use.
    for sizes in [
        vec![2, 64, 64, 1],
        vec![3, 64, 64, 2],
        vec![4, 64, 64, 1],
        vec![5, 64, 64, 1],
        vec![48, 1],
        vec![8, 4],
    ] {
        let net = Mlp::new(&sizes, Init::VALUE, &mut rng);
        let x = random_rows(6, sizes[0], &mut rng);
        let xm = crate::nn::rows_to_matrix(&x, sizes[0]);
        let w = random_rows(6, *sizes.last().unwrap(), &mut rng);
        let wm = crate::nn::rows_to_matrix(&w, *sizes.last().unwrap());
        let tape = net.forward_tape(xm.view())?;
        let g = net.backward(&tape, wm.view())?;
        let f = |p: &[f64]| {
            let n = Mlp::from_params(&sizes, p.to_vec()).expect("same layout");
            (&n.forward(xm.view()).expect("finite") * &wm).sum()
        };
        out.push(check(&format!("mlp {sizes:?}"), &g, net.params(), f));
    }

    // Gaussian policies: agent (state -> torque) and residual transformer
    // ((state, action) -> shift), with the entropy bonus.
    for (name, in_dim) in [("gaussian agent", 2usize), ("gaussian transformer", 3)] {
        let mut actor = Actor::Gaussian(GaussianPolicy::new(
            Encoder::identity(in_dim),
            &hidden,
            1,
            0.5,
            &mut rng,
        ));
        let mut p = actor.params();
        p.iter_mut()
            .for_each(|v| *v += 0.05 * rand::Rng::random_range(&mut rng, -1.0..1.0));
        actor.set_params(&p);
        let obs = random_rows(5, in_dim, &mut rng);
        let acts = random_rows(5, 1, &mut rng);
        let coef: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.5).collect();
        let g = actor.log_prob_grad(&obs, &acts, Some(&coef), 0.01)?.grad;
        let mut probe = actor.clone();
        let f = |q: &[f64]| {
            probe.set_params(q);
            let r = probe.log_prob_grad(&obs, &acts, None, 0.0).expect("valid");
            r.log_probs
                .iter()
                .zip(&coef)
                .map(|(l, c)| l * c)
                .sum::<f64>()
                + 0.01 * r.mean_entropy
        };
        out.push(check(name, &g, &p, f));
    }

    // Categorical policies: gridworld agent and tabular transformer.
    for (name, enc, n) in [
        ("categorical agent", Encoder::OneHot { n: 9 }, 4usize),
        (
            "categorical transformer",
            Encoder::JointOneHot { sizes: vec![4, 4] },
            4,
        ),
        (
            "categorical transformer (table)",
            Encoder::JointOneHot { sizes: vec![4, 4] },
            4,
        ),
    ] {
        let h: &[usize] = if name.ends_with("(table)") {
            &[]
        } else {
            &hidden
        };
        let mut actor = Actor::Categorical(CategoricalPolicy::new(enc.clone(), h, n, &mut rng));
        let mut p = actor.params();
        p.iter_mut()
            .for_each(|v| *v += 0.3 * rand::Rng::random_range(&mut rng, -1.0..1.0));
        actor.set_params(&p);
        let in_sizes: Vec<usize> = match &enc {
            Encoder::OneHot { n } => vec![*n],
            Encoder::JointOneHot { sizes } => sizes.clone(),
            _ => unreachable!(),
        };
        let obs: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                in_sizes
                    .iter()
                    .enumerate()
                    .map(|(k, m)| ((i * (k + 2)) % m) as f64)
                    .collect()
            })
            .collect();
        let acts: Vec<Vec<f64>> = (0..6).map(|i| vec![(i % n) as f64]).collect();
        let coef: Vec<f64> = (0..6).map(|i| 0.2 * i as f64 - 0.4).collect();
        let g = actor.log_prob_grad(&obs, &acts, Some(&coef), 0.01)?.grad;
        let mut probe = actor.clone();
        let f = |q: &[f64]| {
            probe.set_params(q);
            let r = probe.log_prob_grad(&obs, &acts, None, 0.0).expect("valid");
            r.log_probs
                .iter()
                .zip(&coef)
                .map(|(l, c)| l * c)
                .sum::<f64>()
                + 0.01 * r.mean_entropy
        };
        out.push(check(name, &g, &p, f));
    }

    // Value function regression.
    let vf = ValueFunction::new(Encoder::identity(3), &hidden, &mut rng);
    let obs = random_rows(7, 3, &mut rng);
    let targets: Vec<f64> = (0..7).map(|i| i as f64 * 0.4 - 1.0).collect();
    let (_, g) = vf.mse_grad(&obs, &targets)?;
    let f = |p: &[f64]| {
        let mut v = vf.clone();
        v.net = Mlp::from_params(v.net.sizes(), p.to_vec()).expect("same layout");
        v.mse_grad(&obs, &targets).expect("valid").0
    };
    out.push(check("value function", &g, vf.net.params(), f));

    // Discriminators: continuous with gradient penalty and L2, and tabular.
    let feats = crate::adversarial::FeatureMap::Continuous {
        shift: vec![0.1; 5],
        scale: vec![0.7; 5],
    };
    let disc = Discriminator::new(feats, &hidden, &mut rng);
    let mut disc = disc;
    let mut p = disc.net.params().to_vec();
    p.iter_mut()
        .for_each(|v| *v += 0.1 * rand::Rng::random_range(&mut rng, -1.0..1.0));
    disc.net.params_mut().copy_from_slice(&p);
    let mk = |src, rng: &mut crate::envs::SimRng| {
        let mut b = TransitionBatch::new(src);
        for _ in 0..6 {
            let r = random_rows(1, 5, rng).remove(0);
            b.push(r[0..2].to_vec(), r[2..3].to_vec(), r[3..5].to_vec(), 1.0);
        }
        b.normalize().expect("positive weights");
        b
    };
    let gsim = mk(Source::GroundedSim, &mut rng);
    let real = mk(Source::Real, &mut rng);
    let reg = DiscRegularizers {
        gp_coef: 10.0,
        l2_coef: 1e-4,
        gp_samples: 8,
    };
    let g = discriminator_loss(&disc, &gsim, &real, reg, &mut rng_from_seed(5))?.grads;
    let f = |q: &[f64]| {
        let mut d = disc.clone();
        d.net.params_mut().copy_from_slice(q);
        discriminator_loss(&d, &gsim, &real, reg, &mut rng_from_seed(5))
            .expect("valid")
            .total
    };
    out.push(check("discriminator (gradient penalty, L2)", &g, &p, f));

    let mut tdisc = Discriminator::tabular(2, 2);
    let tp: Vec<f64> = (0..tdisc.net.n_params())
        .map(|i| (i as f64 * 0.37).sin())
        .collect();
    tdisc.net.params_mut().copy_from_slice(&tp);
    let mut tg = TransitionBatch::new(Source::GroundedSim);
    let mut tr = TransitionBatch::new(Source::Real);
    for (k, (s, a, s2)) in [(0, 0, 1), (1, 1, 0), (0, 1, 1), (1, 0, 0)]
        .into_iter()
        .enumerate()
    {
        let b = if k % 2 == 0 { &mut tg } else { &mut tr };
        b.push(
            vec![s as f64],
            vec![a as f64],
            vec![s2 as f64],
            1.0 + k as f64,
        );
    }
    tg.normalize()?;
    tr.normalize()?;
    let g = discriminator_loss(
        &tdisc,
        &tg,
        &tr,
        DiscRegularizers::NONE,
        &mut rng_from_seed(1),
    )?
    .grads;
    let f = |q: &[f64]| {
        let mut d = tdisc.clone();
        d.net.params_mut().copy_from_slice(q);
        discriminator_loss(&d, &tg, &tr, DiscRegularizers::NONE, &mut rng_from_seed(1))
            .expect("valid")
            .data
    };
    out.push(check("discriminator (tabular)", &g, &tp, f));

    // Exact JS gradient with respect to the transformer tensor.
    let inst = random_pair_instance("gradient", 3, 2, seed ^ 0x99)?;
    let rho_real = inst.rho_real()?;
    let probs: Tensor3 = (0..3)
        .map(|_| (0..2).map(|_| random_simplex(2, &mut rng)).collect())
        .collect();
    let (_, grad, _) =
        crate::adversarial::js_and_gradient(&inst.sim, &inst.agent, &probs, &rho_real)?;
    let flat: Vec<f64> = probs.iter().flatten().flatten().copied().collect();
    let an: Vec<f64> = grad.iter().flatten().flatten().copied().collect();
    let f = |x: &[f64]| {
        let p: Tensor3 = x
            .chunks(4)
            .map(|c| c.chunks(2).map(|r| r.to_vec()).collect())
            .collect();
        crate::adversarial::js_and_gradient(&inst.sim, &inst.agent, &p, &rho_real)
            .expect("valid")
            .0
    };
    out.push(check("divergence wrt transformer", &an, &flat, f));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Verification suites
// ---------------------------------------------------------------------------

/// One named check of a suite with its measured value and limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

impl CheckResult {
    fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            passed: value <= limit,
        }
    }

    fn below(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            passed: value < limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: String,
    pub passed: bool,
    pub wall_ms: u128,
    pub checks: Vec<CheckResult>,
}

pub const SUITES: [&str; 5] = [
    "marginals",
    "propositions",
    "theorem1",
    "gradients",
    "grounding_error",
];

/// Normalization and return identity on 100 random instances, and
/// Monte-Carlo agreement on 5 of them.
pub fn verify_marginals(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = rng_from_seed(seed);
    let (mut norm, mut ret): (f64, f64) = (0.0, 0.0);
    let mut spot = Vec::new();
    for _ in 0..100 {
        use rand::Rng;
        let ns = rng.random_range(1..=6);
        let na = rng.random_range(1..=4);
        let gamma = rng.random_range(0.0..0.99);
        let mdp = TabularMdp::random(ns, na, gamma, &mut rng)?;
        let pi = TabularPolicy::random(ns, na, &mut rng);
        let rho = marginal_transition_distribution(&mdp, &pi)?;
        norm = norm.max((rho.total() - 1.0).abs());
        let v = start_value(&mdp, &policy_evaluation(&mdp, &pi)?);
        let r = expected_return_from_marginal(&rho, mdp.reward(), gamma)?;
        ret = ret.max((r - v).abs());
    }
    for _ in 0..5 {
        let mdp = TabularMdp::random(4, 2, 0.9, &mut rng)?;
        let pi = TabularPolicy::random(4, 2, &mut rng);
        let rho = marginal_transition_distribution(&mdp, &pi)?;
        spot.push((mdp, pi, rho));
    }
    let mut mc: f64 = 0.0;
    let mut mc_small: f64 = 0.0;
    for (mdp, pi, rho) in &spot {
        let est = monte_carlo_marginal(mdp, pi, 100_000, &mut rng)?;
        let flat: Vec<f64> = est.iter().flatten().flatten().copied().collect();
        mc = mc.max(tv_distance(&flat, &rho.flat()));
        let est = monte_carlo_marginal(mdp, pi, 1_000, &mut rng)?;
        let flat: Vec<f64> = est.iter().flatten().flatten().copied().collect();
        mc_small = mc_small.max(tv_distance(&flat, &rho.flat()));
    }
    Ok(vec![
        CheckResult::at_most("marginal sums to one (max deviation)", norm, 1e-9),
        CheckResult::at_most("return from marginal equals policy evaluation", ret, 1e-9),
        CheckResult::below("Monte-Carlo TV at 1e5 samples", mc, 0.01),
        CheckResult::below(
            "Monte-Carlo TV shrinks from 1e3 to 1e5 samples",
            mc - mc_small,
            0.0,
        ),
    ])
}

/// Transition recovery round-trips on 100 instances, and greedy-set equality
/// on 20 realizable pairs whose grounded and real tensors coincide.
pub fn verify_propositions(seed: u64) -> Result<Vec<CheckResult>> {
    use rand::Rng;
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let ns = rng.random_range(1..=6);
        let na = rng.random_range(1..=4);
        let mdp = TabularMdp::random(ns, na, rng.random_range(0.0..0.99), &mut rng)?;
        let pi = TabularPolicy::random(ns, na, &mut rng);
        let rho = marginal_transition_distribution(&mdp, &pi)?;
        let rec = recover_transition(&rho, &pi)?;
        for s in 0..ns {
            for a in 0..na {
                if rec.is_visited(s, a) {
                    let d = rec.transition[s][a]
                        .iter()
                        .zip(&mdp.transition()[s][a])
                        .map(|(x, y)| (x - y).abs());
                    worst = worst.max(d.fold(0.0, f64::max));
                }
            }
        }
    }
    let mut mismatched = 0usize;
    let mut residual: f64 = 0.0;
    for _ in 0..20 {
        let ns = rng.random_range(2..=6);
        let na = rng.random_range(2..=4);
        let sim = TabularMdp::random(ns, na, 0.9, &mut rng)?;
        // A real environment reachable by action transformation.
        let mix: Tensor3 = (0..ns)
            .map(|_| (0..na).map(|_| random_simplex(na, &mut rng)).collect())
            .collect();
        let real = grounded_mdp(&sim, &mix)?;
        let (probs, res) =
            realizing_transformer(&sim, &real)?.unwrap_or_else(|| (mix.clone(), 0.0));
        residual = residual.max(res);
        let g = grounded_mdp(&sim, &probs)?;
        if greedy_action_sets(&g) != greedy_action_sets(&real) {
            mismatched += 1;
        }
    }
    Ok(vec![
        CheckResult::at_most("recovered transition error on visited pairs", worst, 1e-8),
        CheckResult::at_most(
            "pairs with differing greedy action sets",
            mismatched as f64,
            0.0,
        ),
        CheckResult::at_most("realizing transformer residual", residual, 1e-8),
    ])
}

pub fn verify_divergence_minimum(seed: u64) -> Result<Vec<CheckResult>> {
    let suite = tabular_suite()?;
    let mut checks = Vec::new();
    for inst in &suite {
        let row = divergence_minimum_instance(inst, seed)?;
        let tol = f64::max(0.01, 0.2 * row.exact_js);
        checks.push(CheckResult::at_most(
            format!("{}: divergence gap", row.name),
            (row.garat_js - row.exact_js).abs(),
            tol,
        ));
        checks.push(CheckResult::at_most(
            format!("{}: grounded marginal TV", row.name),
            row.rho_tv,
            0.05,
        ));
    }
    for inst in suite.iter().take(3) {
        let row = optimal_discriminator_instance(inst, seed)?;
        checks.push(CheckResult::below(
            format!("{}: optimal discriminator sup error", row.name),
            row.sup_error,
            0.05,
        ));
        checks.push(CheckResult::below(
            format!("{}: loss vs 2 ln 2 - 2 JS", row.name),
            (row.data_loss - row.predicted_loss).abs(),
            0.05,
        ));
    }
    Ok(checks)
}

pub fn verify_gradients(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(gradient_checks(seed)?
        .into_iter()
        .map(|c| {
            CheckResult::below(
                format!("{} ({} parameters)", c.name, c.n_params),
                c.max_relative_error,
                1e-4,
            )
        })
        .collect())
}

/// Transition-error metric sanity: zero against itself and on a matched
/// pair, positive on the mismatched pair, and a model-based grounding that
/// reduces it.
pub fn verify_grounding_error(seed: u64) -> Result<Vec<CheckResult>> {
    let pair = make_pair(&PairConfig::pendulum_default())?;
    let matched = crate::envs::make_pendulum_pair(4.89, 4.89, 0.02, 200)?;
    let policy = crate::envs::FnPolicy(|s: &[f64], _: &mut crate::envs::SimRng| {
        vec![-400.0 * s[0] - 60.0 * s[1]]
    });
    let trajs = rollout(pair.real.clone().as_mut(), &policy, 10, seed);
    let mtrajs = rollout(matched.real.clone().as_mut(), &policy, 5, seed);
    let self_err = per_step_transition_error(pair.real.as_ref(), &trajs, seed)?.mean;
    let matched_err = per_step_transition_error(matched.sim.as_ref(), &mtrajs, seed)?.mean;
    let ungrounded = per_step_transition_error(pair.sim.as_ref(), &trajs, seed)?.mean;
    let sim_data = collect_sim_data(pair.sim.as_ref(), &policy, 50, seed ^ 1);
    let t = gat_ground(
        pair.sim.as_ref(),
        &trajs,
        &sim_data,
        &GatConfig::default(),
        seed,
    )?;
    let grounded = GroundedEnvironment::new(pair.sim.clone(), t, false)?;
    let gat = per_step_transition_error(&grounded, &trajs, seed)?.mean;
    let identity = GroundedEnvironment::new(pair.sim.clone(), ActionTransformer::Identity, false)?;
    let id_err = per_step_transition_error(&identity, &trajs, seed)?.mean;
    Ok(vec![
        CheckResult::at_most("real environment against itself", self_err, 0.0),
        CheckResult::at_most("matched pair", matched_err, 1e-12),
        CheckResult::at_most(
            "identity grounding equals ungrounded",
            (id_err - ungrounded).abs(),
            0.0,
        ),
        CheckResult {
            name: "mismatched pair error is positive".into(),
            value: ungrounded,
            limit: 0.0,
            passed: ungrounded > 0.0,
        },
        CheckResult::at_most("model-based grounding error ratio", gat / ungrounded, 0.5),
    ])
}

/// Runs a named suite with fixed seeds.
pub fn verify(suite: &str) -> Result<VerifyReport> {
    let start = Instant::now();
    let checks = match suite {
        "marginals" => verify_marginals(1)?,
        "propositions" => verify_propositions(2)?,
        "theorem1" => verify_divergence_minimum(3)?,
        "gradients" => verify_gradients(4)?,
        "grounding_error" => verify_grounding_error(5)?,
        other => {
            return Err(Error::Unknown(format!(
                "suite '{other}' (expected one of {})",
                SUITES.join(", ")
            )))
        }
    };
    Ok(VerifyReport {
        suite: suite.into(),
        passed: checks.iter().all(|c| c.passed),
        wall_ms: start.elapsed().as_millis(),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_return_anchors() {
        assert_eq!(scaled_return(10.0, 2.0, 10.0).unwrap(), 1.0);
        assert_eq!(scaled_return(2.0, 2.0, 10.0).unwrap(), 0.0);
        assert_eq!(scaled_return(6.0, 2.0, 10.0).unwrap(), 0.5);
        assert!(matches!(
            scaled_return(1.0, 3.0, 3.0 + 1e-10),
            Err(Error::DegenerateAnchors { .. })
        ));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("rarl").is_err());
    }

    #[test]
    fn suite_sizes_stay_small() {
        for inst in tabular_suite().unwrap() {
            assert!(
                inst.sim.n_states() * inst.sim.n_actions() <= 16,
                "{}",
                inst.name
            );
        }
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(matches!(verify("everything"), Err(Error::Unknown(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig {
            method: Method::Garat,
            budget: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.method = Method::SimOnly;
        assert!(c.validate().is_ok());
        c.seeds.clear();
        assert!(c.validate().is_err());
    }
}
