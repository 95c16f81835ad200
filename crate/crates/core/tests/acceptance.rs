//! Acceptance run: one PASS/FAIL line per criterion, each with its measured
//! value, tolerance and runtime limit. Exits non-zero if any criterion fails.
//!
//! Positional arguments select criteria by number (`cargo test --test
//! acceptance -- 1 4 9`); with none, all nine run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use garat::envs::{make_pair, PairConfig};
use garat::harness::{
    compute_anchors, divergence_minimum_instance, gradient_checks, grounding_error_run, median,
    optimal_discriminator_instance, run_experiment, run_method, tabular_suite, verify_marginals,
    verify_propositions, ExperimentConfig, GroundingErrorConfig, Method,
};
use garat::Result;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

fn marginals() -> Result<Outcome> {
    let c = verify_marginals(1)?;
    let passed = c[..3].iter().all(|c| c.passed);
    outcome(
        passed,
        format!(
            "sum deviation {:.1e} (<= 1e-9), return gap {:.1e} (<= 1e-9), Monte-Carlo TV {:.4} (< 0.01)",
            c[0].value, c[1].value, c[2].value
        ),
    )
}

fn round_trip() -> Result<Outcome> {
    let c = verify_propositions(2)?;
    outcome(
        c[0].passed,
        format!(
            "max recovered-transition error {:.1e} on visited pairs (<= 1e-8)",
            c[0].value
        ),
    )
}

fn greedy_sets() -> Result<Outcome> {
    let c = verify_propositions(2)?;
    outcome(
        c[1].passed && c[2].passed,
        format!(
            "{} of 20 pairs with differing greedy action sets (0), realizing residual {:.1e}",
            c[1].value, c[2].value
        ),
    )
}

fn divergence_minimum() -> Result<Outcome> {
    let mut passed = true;
    let mut parts = Vec::new();
    for inst in tabular_suite()? {
        let row = divergence_minimum_instance(&inst, 3)?;
        passed &= row.passed;
        parts.push(format!(
            "{} js {:.4}/{:.4} tv {:.3}",
            row.name, row.garat_js, row.exact_js, row.rho_tv
        ));
    }
    outcome(passed && parts.len() >= 5, parts.join("; "))
}

fn optimal_discriminator() -> Result<Outcome> {
    let mut passed = true;
    let mut parts = Vec::new();
    for inst in tabular_suite()?.iter().take(3) {
        let row = optimal_discriminator_instance(inst, 3)?;
        passed &= row.passed;
        parts.push(format!(
            "{} sup {:.4} loss gap {:.4}",
            row.name,
            row.sup_error,
            (row.data_loss - row.predicted_loss).abs()
        ));
    }
    outcome(passed, parts.join("; "))
}

fn grounding_error() -> Result<Outcome> {
    let cfg = GroundingErrorConfig::default();
    let rows = (0..5)
        .map(|seed| grounding_error_run(&cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let m = |f: fn(&garat::harness::GroundingErrorRow) -> f64| {
        median(&rows.iter().map(f).collect::<Vec<_>>())
    };
    let (ungrounded, garat, gat) = (m(|r| r.ungrounded), m(|r| r.garat), m(|r| r.gat));
    outcome(
        garat <= 0.5 * ungrounded && garat <= 1.1 * gat,
        format!(
            "median error: ungrounded {ungrounded:.4}, GARAT {garat:.4} ({:.3}x ungrounded, <= 0.5), GAT {gat:.4} \
             (GARAT/GAT {:.3}, <= 1.1)",
            garat / ungrounded,
            garat / gat
        ),
    )
}

fn transfer() -> Result<Outcome> {
    let cfg = ExperimentConfig::default();
    let pair = make_pair(&cfg.pair)?;
    let (mut garat, mut ane, mut used) = (Vec::new(), Vec::new(), 0usize);
    for &seed in &cfg.seeds {
        let anchors = compute_anchors(&pair, &cfg, seed)?;
        let g = run_method(&pair, &cfg, Method::Garat, &anchors)?;
        let a = run_method(&pair, &cfg, Method::Ane, &anchors)?;
        used = used
            .max(g.record.real_transitions_used)
            .max(a.record.real_transitions_used);
        garat.push(g.record.scaled_return.unwrap_or(f64::NAN));
        ane.push(a.record.scaled_return.unwrap_or(f64::NAN));
    }
    let (g, a) = (median(&garat), median(&ane));
    outcome(
        g >= 0.5 && g >= a && used <= cfg.budget,
        format!(
            "median scaled return GARAT {g:.3} (>= 0.5), ANE best-sweep {a:.3}; at most {used} of {} real transitions",
            cfg.budget
        ),
    )
}

fn gradients() -> Result<Outcome> {
    let checks = gradient_checks(4)?;
    let worst = checks
        .iter()
        .map(|c| c.max_relative_error)
        .fold(0.0, f64::max);
    outcome(
        worst < 1e-4,
        format!(
            "{} shapes, worst relative error {worst:.2e} (< 1e-4)",
            checks.len()
        ),
    )
}

/// CSV contents keyed by path relative to `root`, with `wall_ms` columns dropped.
fn csv_snapshot(root: &Path) -> Result<BTreeMap<String, Vec<Vec<String>>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let mut r = csv::ReaderBuilder::new()
                    .has_headers(false)
                    .flexible(true)
                    .from_path(&path)?;
                let mut rows: Vec<Vec<String>> = Vec::new();
                let mut skip = None;
                for rec in r.records() {
                    let rec = rec?;
                    if skip.is_none() {
                        skip = Some(rec.iter().position(|h| h == "wall_ms"));
                    }
                    let keep = skip.flatten();
                    rows.push(
                        rec.iter()
                            .enumerate()
                            .filter(|(i, _)| Some(*i) != keep)
                            .map(|(_, v)| v.to_string())
                            .collect(),
                    );
                }
                let key = path
                    .strip_prefix(root)
                    .expect("walked below root")
                    .display()
                    .to_string();
                out.insert(key, rows);
            }
        }
    }
    Ok(out)
}

fn small_config(pair: PairConfig, dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        pair,
        seeds: vec![0, 1],
        budget: 400,
        output_dir: Some(dir.to_path_buf()),
        eval_episodes: 3,
        sim_timesteps: 4000,
        real_timesteps: 4000,
        retrain_timesteps: 2000,
        outer_iterations: 2,
        ane_stds: vec![0.1, 0.3],
        ..ExperimentConfig::default()
    };
    cfg.agent.batch_timesteps = 1000;
    cfg.agent.eval_episodes = 2;
    cfg.garat.n_transformer_updates = 3;
    cfg.garat.real_episodes = 3;
    cfg.garat.transformer.batch_timesteps = 500;
    cfg.gat.sim_episodes = 3;
    cfg
}

fn determinism() -> Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let pairs = [
        ("pendulum", PairConfig::pendulum_default()),
        ("gridworld", PairConfig::gridworld(3, 0.0, 0.2)),
    ];
    let mut files = 0;
    let mut diffs = Vec::new();
    for (name, pair) in pairs {
        let mut snaps = Vec::new();
        for run in 0..2 {
            let dir = tmp.path().join(format!("{name}_{run}"));
            // Action noise needs a continuous action space.
            for method in Method::ALL
                .into_iter()
                .filter(|m| name == "pendulum" || *m != Method::Ane)
            {
                let mut cfg = small_config(pair.clone(), &dir);
                cfg.method = method;
                run_experiment(&cfg)?;
            }
            snaps.push(csv_snapshot(&dir)?);
        }
        files += snaps[0].len();
        if snaps[0].keys().ne(snaps[1].keys()) {
            diffs.push(format!("{name}: different file sets"));
        }
        for (k, v) in &snaps[0] {
            if snaps[1].get(k) != Some(v) {
                diffs.push(format!("{name}/{k}"));
            }
        }
    }
    outcome(
        diffs.is_empty() && files > 0,
        if diffs.is_empty() {
            format!("{files} CSV files identical across re-runs (wall_ms excluded)")
        } else {
            format!("differing: {}", diffs.join(", "))
        },
    )
}

type Criterion = (u32, &'static str, Duration, fn() -> Result<Outcome>);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (
            1,
            "marginal correctness",
            Duration::from_secs(30),
            marginals,
        ),
        (
            2,
            "transition recovery round trip",
            Duration::from_secs(10),
            round_trip,
        ),
        (
            3,
            "equal dynamics give equal greedy actions",
            Duration::from_secs(10),
            greedy_sets,
        ),
        (
            4,
            "sampled grounding reaches the exact divergence minimum",
            Duration::from_secs(300),
            divergence_minimum,
        ),
        (
            5,
            "optimal discriminator",
            Duration::from_secs(120),
            optimal_discriminator,
        ),
        (
            6,
            "pendulum grounding error",
            Duration::from_secs(600),
            grounding_error,
        ),
        (7, "pendulum transfer", Duration::from_secs(1800), transfer),
        (8, "gradient checks", Duration::from_secs(30), gradients),
        (9, "determinism", Duration::MAX, determinism),
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut all = true;
    for (id, name, limit, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let (passed, detail) = match result {
            Ok(o) => (o.passed && elapsed < limit, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let limit_text = if limit == Duration::MAX {
            String::new()
        } else {
            format!(" (limit {}s)", limit.as_secs())
        };
        println!(
            "{} criterion {id} [{name}]: {detail}; {:.1}s{limit_text}",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        all &= passed;
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
