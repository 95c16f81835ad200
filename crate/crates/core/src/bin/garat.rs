//! Command-line front end: train, collect, ground, transfer, sweep, evaluate,
//! verify and report. Every command writes CSV/JSON and exits non-zero on
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use garat::adversarial::{collect_real, ground, write_diagnostics_csv};
use garat::baselines::{collect_sim_data, gat_ground};
use garat::envs::{make_pair, read_trajectories_csv, total_transitions, write_trajectories_csv};
use garat::grounding::{ActionTransformer, GroundedEnvironment};
use garat::harness::{
    grounding_error_run, per_step_transition_error, report, run_experiment, verify,
    ExperimentConfig, GroundingErrorConfig, Method, SUITES,
};
use garat::nn::{train_agent, Actor};

#[derive(Parser)]
#[command(
    name = "garat",
    version,
    about = "Simulator grounding by adversarial action transformation"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (TOML or JSON); defaults to the pendulum pair.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seeds with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Real-transition budget for data collection.
    #[arg(long, global = true)]
    budget: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroundMethod {
    Garat,
    Gat,
}

#[derive(Subcommand)]
enum Command {
    /// Train the agent in the simulator; writes policy.json and curve.csv.
    TrainSim,
    /// Roll out a policy in the real environment; writes real_data.csv.
    CollectReal {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Learn an action transformer from real data; writes transformer.json.
    Ground {
        method: GroundMethod,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Full transfer pipeline for the configured (or given) method.
    Transfer {
        #[arg(long)]
        method: Option<String>,
    },
    /// Action-noise sweep at the configured budget.
    SweepAne,
    /// Per-step transition error. With --transformer and --data, of that
    /// grounding; otherwise the ungrounded/GARAT/GAT comparison per seed.
    EvalGrounding {
        #[arg(long)]
        transformer: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run a verification suite (or `all`); prints a JSON report.
    Verify { suite: String },
    /// Summarize the metrics below --out.
    Report,
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            ExperimentConfig::from_path(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seeds = vec![s];
    }
    if let Some(b) = g.budget {
        cfg.budget = b;
    }
    cfg.output_dir = Some(g.out.clone());
    Ok(cfg)
}

fn first_seed(cfg: &ExperimentConfig) -> Result<u64> {
    cfg.seeds.first().copied().context("no seed configured")
}

fn read_actor(path: &Path) -> Result<Actor> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    fs::create_dir_all(&g.out)?;
    match cli.command {
        Command::TrainSim => {
            let cfg = load_config(g)?;
            let pair = make_pair(&cfg.pair)?;
            let out = train_agent(
                pair.sim.as_ref(),
                &cfg.agent,
                cfg.sim_timesteps,
                first_seed(&cfg)?,
                None,
            )?;
            write_json(&g.out.join("policy.json"), &out.best)?;
            let mut w = csv::Writer::from_path(g.out.join("curve.csv"))?;
            w.write_record(["timestep", "mean_return", "std_return"])?;
            for p in &out.curve {
                w.write_record([
                    p.timestep.to_string(),
                    p.mean_return.to_string(),
                    p.std_return.to_string(),
                ])?;
            }
            w.flush()?;
            println!(
                "best simulator return {} after {} steps",
                out.best_return, out.timesteps
            );
        }
        Command::CollectReal { policy, episodes } => {
            let cfg = load_config(g)?;
            let pair = make_pair(&cfg.pair)?;
            let actor = read_actor(&policy)?;
            let trajs = collect_real(
                pair.real.as_ref(),
                &actor,
                episodes,
                cfg.budget,
                first_seed(&cfg)?,
            );
            write_trajectories_csv(fs::File::create(g.out.join("real_data.csv"))?, &trajs)?;
            println!(
                "{} real transitions in {} episodes",
                total_transitions(&trajs),
                trajs.len()
            );
        }
        Command::Ground {
            method,
            policy,
            data,
        } => {
            let cfg = load_config(g)?;
            let pair = make_pair(&cfg.pair)?;
            let actor = read_actor(&policy)?;
            let trajs = read_trajectories_csv(fs::File::open(&data)?)?;
            let seed = first_seed(&cfg)?;
            let transformer = match method {
                GroundMethod::Garat => {
                    let out = ground(pair.sim.as_ref(), &trajs, &actor, &cfg.garat, seed, None)?;
                    write_diagnostics_csv(
                        fs::File::create(g.out.join("diagnostics.csv"))?,
                        &out.diagnostics,
                    )?;
                    out.transformer
                }
                GroundMethod::Gat => {
                    let sim_data =
                        collect_sim_data(pair.sim.as_ref(), &actor, cfg.gat.sim_episodes, seed);
                    gat_ground(pair.sim.as_ref(), &trajs, &sim_data, &cfg.gat, seed)?
                }
            };
            fs::write(g.out.join("transformer.json"), transformer.to_json()?)?;
            println!(
                "transformer written to {}",
                g.out.join("transformer.json").display()
            );
        }
        Command::Transfer { method } => {
            let mut cfg = load_config(g)?;
            if let Some(m) = method {
                cfg.method = Method::parse(&m)?;
            }
            for r in run_experiment(&cfg)? {
                println!(
                    "{} seed {}: return {} scaled {:?}",
                    r.method, r.seed, r.raw_return, r.scaled_return
                );
            }
        }
        Command::SweepAne => {
            let mut cfg = load_config(g)?;
            cfg.method = Method::Ane;
            for r in run_experiment(&cfg)? {
                println!(
                    "ane seed {}: return {} scaled {:?}",
                    r.seed, r.raw_return, r.scaled_return
                );
            }
        }
        Command::EvalGrounding { transformer, data } => {
            let cfg = load_config(g)?;
            match (transformer, data) {
                (Some(t), Some(d)) => {
                    let pair = make_pair(&cfg.pair)?;
                    let t = ActionTransformer::from_json(&fs::read_to_string(&t)?)?;
                    let trajs = read_trajectories_csv(fs::File::open(&d)?)?;
                    let seed = first_seed(&cfg)?;
                    let grounded = GroundedEnvironment::new(pair.sim.clone(), t, false)?;
                    let err = per_step_transition_error(&grounded, &trajs, seed)?;
                    let base = per_step_transition_error(pair.sim.as_ref(), &trajs, seed)?;
                    let summary =
                        serde_json::json!({ "grounded": err.mean, "ungrounded": base.mean });
                    write_json(&g.out.join("transition_error.json"), &summary)?;
                    println!("{summary}");
                }
                (None, None) => {
                    let ecfg = GroundingErrorConfig {
                        pair: cfg.pair.clone(),
                        agent: cfg.agent.clone(),
                        sim_timesteps: cfg.sim_timesteps,
                        garat: cfg.garat.clone(),
                        gat: cfg.gat.clone(),
                        ..GroundingErrorConfig::default()
                    };
                    let mut w = csv::Writer::from_path(g.out.join("grounding_error.csv"))?;
                    for &seed in &cfg.seeds {
                        let row = grounding_error_run(&ecfg, seed)?;
                        println!(
                            "seed {seed}: ungrounded {} garat {} gat {}",
                            row.ungrounded, row.garat, row.gat
                        );
                        w.serialize(&row)?;
                    }
                    w.flush()?;
                }
                _ => bail!("--transformer and --data go together"),
            }
        }
        Command::Verify { suite } => {
            let suites: Vec<&str> = if suite == "all" {
                SUITES.to_vec()
            } else {
                vec![suite.as_str()]
            };
            let mut ok = true;
            let mut reports = Vec::new();
            for s in suites {
                let r = verify(s)?;
                ok &= r.passed;
                reports.push(r);
            }
            let text = serde_json::to_string_pretty(&reports)?;
            fs::write(g.out.join("verify.json"), &text)?;
            println!("{text}");
            return Ok(ok);
        }
        Command::Report => {
            for r in report(&g.out)? {
                println!(
                    "{}: {} seeds, median return {}, median scaled {:?}",
                    r.method, r.n_seeds, r.median_raw_return, r.median_scaled_return
                );
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
