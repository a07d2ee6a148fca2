//! Parallel execution of (arm, seed) cells.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use damavl_core::certify::CertifiedPolicy;
use damavl_core::eval::{mc_value, EvalOptions, Evaluator, Start};
use damavl_core::game::MarkovGame;
use damavl_core::rng::substream;
use damavl_core::training::{run_training, TrainingTrace};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{EvalMethod, ExperimentConfig, ResolvedArm, ResolvedExperiment};
use crate::output::{write_json, write_rows, Manifest, Row, RunSummary, RunTiming};
use crate::{HarnessError, Result};

/// Result of one cell.
#[derive(Debug, Clone)]
pub struct CellOutput {
    pub summary: RunSummary,
    pub rows: Vec<Row>,
    pub timing: RunTiming,
    pub trace: Option<TrainingTrace>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub manifest: Manifest,
    pub summaries: Vec<RunSummary>,
}

pub fn run_id(label: &str, seed: u64) -> String {
    format!("{label}-s{seed}")
}

/// Gap and per-agent values of `π^k` at every evaluation episode.
pub fn evaluate_trace(
    trace: &TrainingTrace,
    game: &MarkovGame,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<(u64, f64, Vec<(f64, f64)>)>> {
    let cert = CertifiedPolicy::new(trace);
    let opts = EvalOptions {
        observation: cfg.observation,
        max_tree_nodes: cfg.guards.max_tree_nodes,
        max_components: cfg.guards.max_components,
        ..EvalOptions::default()
    };
    let ev = Evaluator::new(&cert, game, opts)?;
    let mut rng = substream(seed, "evaluation");
    let s0 = game.initial_state();
    let mut out = Vec::new();
    for k in cfg.eval_episodes() {
        let start = Start::Episode { k, h: 0, s: s0 };
        let values = match cfg.eval_method {
            EvalMethod::Exact => ev.values(start)?,
            EvalMethod::Mc => (0..game.agents())
                .map(|m| mc_value(&cert, game, m, start, cfg.mc_rollouts, &mut rng).map(|(mean, _)| mean))
                .collect::<damavl_core::Result<_>>()?,
        };
        let agents: Vec<(f64, f64)> = values
            .iter()
            .enumerate()
            .map(|(m, &v)| Ok((v, ev.best_response(m, start)?)))
            .collect::<Result<_>>()?;
        let gap = agents.iter().map(|(v, br)| br - v).fold(f64::NEG_INFINITY, f64::max);
        out.push((k, gap, agents));
    }
    Ok(out)
}

pub fn run_cell(exp: &ResolvedExperiment, arm: &ResolvedArm, seed: u64) -> Result<CellOutput> {
    let cfg = &exp.config;
    let id = run_id(&arm.label, seed);
    let variant = arm.variant.variant.name().to_string();
    let t0 = Instant::now();
    let trace = run_training(&exp.game, &arm.delays, &arm.variant, seed)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let evals = evaluate_trace(&trace, &exp.game, cfg, seed)?;
    let eval_seconds = t1.elapsed().as_secs_f64();

    let row = |episode: u64, agent: String, metric: &str, value: f64| Row {
        run_id: id.clone(),
        variant: variant.clone(),
        seed,
        episode,
        agent,
        metric: metric.to_string(),
        value,
    };
    let na = exp.game.agents();
    let mut rows = Vec::new();
    let mut optimistic = vec![0u64; na];
    let mut counted = 0u64;
    for (k, gap, agents) in &evals {
        rows.push(row(*k, "all".into(), "gap", *gap));
        let after_burn_in = *k > cfg.burn_in();
        if after_burn_in {
            counted += 1;
        }
        for (m, &(v_pi, v_br)) in agents.iter().enumerate() {
            let d = trace.agents[m].diag[(*k - 1) as usize];
            let a = m.to_string();
            rows.push(row(*k, a.clone(), "v_pi", v_pi));
            rows.push(row(*k, a.clone(), "v_br", v_br));
            rows.push(row(*k, a.clone(), "v_over", d.v_over));
            rows.push(row(*k, a.clone(), "v_under", d.v_under));
            rows.push(row(*k, a.clone(), "used", d.used as f64));
            rows.push(row(*k, a.clone(), "holding", d.holding as f64));
            rows.push(row(*k, a, "skipped", d.skipped as f64));
            if after_burn_in && d.v_over >= v_br - 1e-9 {
                optimistic[m] += 1;
            }
        }
    }
    let window_start = cfg.episodes.saturating_sub(cfg.window);
    let tail: Vec<f64> = evals.iter().filter(|e| e.0 > window_start).map(|e| e.1).collect();
    let final_gap = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    let last = trace.agents.iter().map(|a| a.diag.last().copied().unwrap_or_default());
    let summary = RunSummary {
        run_id: id.clone(),
        label: arm.label.clone(),
        variant,
        seed,
        episodes: cfg.episodes,
        final_gap,
        last_gap: evals.last().map_or(f64::NAN, |e| e.1),
        optimism: optimistic
            .iter()
            .map(|&c| if counted == 0 { f64::NAN } else { c as f64 / counted as f64 })
            .collect(),
        skipped: last.clone().map(|d| d.skipped).collect(),
        used: last.map(|d| d.used).collect(),
    };
    Ok(CellOutput {
        summary,
        rows,
        timing: RunTiming {
            run_id: id,
            train_seconds,
            eval_seconds,
        },
        trace: cfg.save_traces.then_some(trace),
    })
}

/// Run every cell on `workers` threads and write all artefacts below `out`.
pub fn run_experiment(exp: &ResolvedExperiment, out: &Path, workers: usize) -> Result<Outcome> {
    let t0 = Instant::now();
    let cells: Vec<(&ResolvedArm, u64)> = exp
        .arms
        .iter()
        .flat_map(|arm| exp.config.seeds.iter().map(move |&s| (arm, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Malformed(format!("worker pool: {e}")))?;
    let mut outputs: Vec<CellOutput> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(arm, seed)| {
                let cell = run_cell(exp, arm, seed)?;
                write_rows(&out.join("runs").join(format!("{}.csv", cell.summary.run_id)), &cell.rows)?;
                if let Some(trace) = &cell.trace {
                    write_json(&out.join("traces").join(format!("{}.json", cell.summary.run_id)), trace)?;
                }
                Ok(cell)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    outputs.sort_by(|a, b| a.summary.run_id.cmp(&b.summary.run_id));

    let mut files: Vec<PathBuf> = Vec::new();
    let merged: Vec<Row> = outputs.iter().flat_map(|c| c.rows.iter().cloned()).collect();
    write_rows(&out.join("results.csv"), &merged)?;
    files.push("results.csv".into());
    let summaries: Vec<RunSummary> = outputs.iter().map(|c| c.summary.clone()).collect();
    write_json(&out.join("summary.json"), &SummaryFile::new(exp, &summaries))?;
    files.push("summary.json".into());
    for c in &outputs {
        files.push(PathBuf::from("runs").join(format!("{}.csv", c.summary.run_id)));
        if c.trace.is_some() {
            files.push(PathBuf::from("traces").join(format!("{}.json", c.summary.run_id)));
        }
    }
    let manifest = Manifest {
        name: exp.config.name.clone(),
        config_hash: exp.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: exp.config.seeds.clone(),
        arms: exp.arms.iter().map(|a| a.label.clone()).collect(),
        workers: workers.max(1),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        wall_seconds: t0.elapsed().as_secs_f64(),
        runs: outputs.iter().map(|c| c.timing.clone()).collect(),
        files,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(Outcome { manifest, summaries })
}

/// Contents of `summary.json`: per-run summaries plus per-arm means.
#[derive(Debug, Serialize)]
pub struct SummaryFile<'a> {
    pub name: &'a str,
    pub runs: &'a [RunSummary],
    pub arms: Vec<ArmSummary>,
}

#[derive(Debug, Serialize)]
pub struct ArmSummary {
    pub label: String,
    pub mean_final_gap: f64,
    pub max_final_gap: f64,
}

impl<'a> SummaryFile<'a> {
    fn new(exp: &'a ResolvedExperiment, runs: &'a [RunSummary]) -> Self {
        let arms = exp
            .arms
            .iter()
            .map(|arm| {
                let gaps: Vec<f64> = runs.iter().filter(|r| r.label == arm.label).map(|r| r.final_gap).collect();
                ArmSummary {
                    label: arm.label.clone(),
                    mean_final_gap: gaps.iter().sum::<f64>() / gaps.len().max(1) as f64,
                    max_final_gap: gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect();
        Self {
            name: &exp.config.name,
            runs,
            arms,
        }
    }
}
