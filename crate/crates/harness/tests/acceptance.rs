//! Acceptance suite. Prints one line per criterion and exits non-zero when a
//! gating criterion fails. Criterion 10 is a report only.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use damavl_core::audit::{AlignmentAudit, SkipBoundAudit};
use damavl_core::certify::{CertifiedPolicy, DeviceMode};
use damavl_core::delay::{infinite_plan, sequence_plan, Delay, DelayPlan, DelayRule, DelaySchedule};
use damavl_core::eval::oracle::{brute_force_best_response, brute_force_value};
use damavl_core::eval::{mc_value, EvalOptions, Evaluator, Observation, Start};
use damavl_core::game::{appendix_b_game, random_game, MarkovGame};
use damavl_core::ledger::oracle::compare_incremental;
use damavl_core::ledger::SkipMetric;
use damavl_core::params::{alpha, AlphaTable, ParamContext};
use damavl_core::rng::substream;
use damavl_core::training::{run_training, run_training_observed, TrainingTrace, VariantConfig};
use damavl_harness::output::RunSummary;
use damavl_harness::plot::{plot_file, PlotSpec};
use damavl_harness::presets::{fig1_center, fig1_left, fig1_right};
use damavl_harness::runner::run_experiment;
use damavl_harness::worker_count;
use rand::Rng;

type Check = Result<(bool, String), String>;

const HORIZON: f64 = 2.0;
const GAP_CEILING: f64 = 0.15 * HORIZON;
const SEEDS_NEEDED: usize = 4;

fn criterion_1() -> Check {
    let t0 = Instant::now();
    let mut worst_sum: f64 = 0.0;
    let mut max_violations = 0u64;
    let mut worst_rel: f64 = 0.0;
    let mut partial = Vec::new();
    for horizon in [1usize, 2, 5] {
        let table = AlphaTable::with_capacity(horizon, 5000 + 10_020);
        let mut prod = vec![1.0f64, 1.0];
        for j in 2..=5000u64 {
            prod.push(prod[j as usize - 1] * (1.0 - alpha(j, horizon).map_err(|e| e.to_string())?));
        }
        for n in 1..=5000u64 {
            let mut sum = 0.0;
            for i in 0..=n {
                let w = table.weight(n, i);
                sum += w;
                if w > 2.0 * horizon as f64 / n as f64 {
                    max_violations += 1;
                }
                if i >= 1 {
                    let direct = alpha(i, horizon).unwrap() / prod[i as usize] * prod[n as usize];
                    worst_rel = worst_rel.max((w - direct).abs() / direct);
                }
            }
            worst_sum = worst_sum.max((sum - 1.0).abs());
        }
        let limit = 1.0 + 1.0 / horizon as f64;
        let mut lowest = f64::INFINITY;
        let mut above = false;
        for i in 1..=20u64 {
            let s: f64 = (i..=i + 10_000).map(|n| table.weight(n, i)).sum();
            lowest = lowest.min(s);
            above |= s > limit;
        }
        partial.push((horizon, lowest, !above && lowest >= limit - 1e-4));
    }
    let secs = t0.elapsed().as_secs_f64();
    let partial_ok = partial.iter().all(|p| p.2);
    let pass = worst_sum <= 1e-12 && max_violations == 0 && worst_rel <= 1e-10 && partial_ok && secs < 30.0;
    let partial_txt: Vec<String> = partial
        .iter()
        .map(|(h, low, ok)| format!("H={h} min partial sum {low:.6} ({})", if *ok { "ok" } else { "below 1+1/H-1e-4" }))
        .collect();
    Ok((
        pass,
        format!(
            "sum error {worst_sum:.1e}, max-bound violations {max_violations}, product-form rel error {worst_rel:.1e}, {}, {secs:.1}s",
            partial_txt.join(", ")
        ),
    ))
}

fn criterion_2() -> Check {
    let t0 = Instant::now();
    let mut ledgers = 0;
    for seed in 0..1000u64 {
        let mut rng = substream(seed, "acceptance-ledger");
        let mut per_state: Vec<(Vec<Delay>, Vec<u64>)> = vec![(Vec::new(), Vec::new()); 3];
        for k in 1..=500u64 {
            let s = rng.gen_range(0..3);
            per_state[s].0.push(Delay::Finite(rng.gen_range(0..=30)));
            per_state[s].1.push(k);
        }
        for (delays, episodes) in &per_state {
            if let Err(e) = compare_incremental(delays, episodes) {
                return Ok((false, format!("schedule {seed}: {e}")));
            }
            ledgers += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((secs < 60.0, format!("{ledgers} ledgers over 1000 schedules match exactly, {secs:.1}s")))
}

fn bench_params(episodes: u64) -> ParamContext {
    ParamContext::new(2, 3, 3, 2, episodes, 0.01).expect("valid")
}

fn learning_differences(a: &TrainingTrace, b: &TrainingTrace, with_under: bool) -> usize {
    let mut diff = usize::from(a.paths != b.paths);
    for (x, y) in a.agents.iter().zip(&b.agents) {
        for (cx, cy) in x.cells.iter().zip(&y.cells) {
            diff += usize::from(cx.actions != cy.actions);
            diff += usize::from(cx.usable_at_visit != cy.usable_at_visit);
            diff += usize::from(cx.holding != cy.holding);
            diff += usize::from(
                cx.policies.len() != cy.policies.len()
                    || cx.policies.iter().zip(&cy.policies).any(|(p, q)| p.to_bits() != q.to_bits()),
            );
        }
        for (dx, dy) in x.diag.iter().zip(&y.diag) {
            diff += usize::from(dx.v_over.to_bits() != dy.v_over.to_bits());
            diff += usize::from((dx.used, dx.happened, dx.holding) != (dy.used, dy.happened, dy.holding));
            if with_under {
                diff += usize::from(dx.v_under.to_bits() != dy.v_under.to_bits());
            }
        }
    }
    diff
}

fn criterion_3() -> Check {
    let game = appendix_b_game();
    let plan = DelayPlan::zero();
    let p = bench_params(2000);
    let seed = 7;
    let err = |e: damavl_core::Error| e.to_string();
    let damavl = run_training(&game, &plan, &VariantConfig::damavl(p.clone(), 0), seed).map_err(err)?;
    let naive = run_training(&game, &plan, &VariantConfig::naive(p.clone(), 0), seed).map_err(err)?;
    let skip = run_training(&game, &plan, &VariantConfig::skip(p, SkipMetric::PaperPhi, 0.0), seed).map_err(err)?;
    let dn = learning_differences(&damavl, &naive, true);
    let ds = learning_differences(&damavl, &skip, false);
    let skips: usize = skip.agents.iter().flat_map(|a| &a.cells).map(|c| c.skipped.len()).sum();
    Ok((
        dn == 0 && ds == 0 && skips == 0,
        format!("K=2000: damavl/naive differences {dn}, damavl/skip differences {ds}, skipped visits {skips}"),
    ))
}

fn criterion_4() -> Check {
    let game = appendix_b_game();
    let cfg = VariantConfig::damavl(bench_params(20_000), sequence_plan(1).max_finite(20_000));
    let mut audit = AlignmentAudit::default();
    match run_training_observed(&game, &sequence_plan(1), &cfg, 1, &mut audit) {
        Ok(trace) => {
            let cells = trace.agents[0].cells.len();
            let mut mismatched = 0;
            for c in 0..cells {
                let lens: Vec<usize> = trace.agents.iter().map(|a| a.cells[c].consumed.len()).collect();
                let n = *lens.iter().min().unwrap();
                let first = &trace.agents[0].cells[c].consumed[..n];
                mismatched += trace.agents.iter().filter(|a| &a.cells[c].consumed[..n] != first).count();
            }
            Ok((
                mismatched == 0 && audit.episodes == 20_000,
                format!("K=20000: happening-order consumption checked after all {} episodes, cross-agent mismatches {mismatched}", audit.episodes),
            ))
        }
        Err(e) => Ok((false, format!("after episode {}: {e}", audit.episodes))),
    }
}

fn criterion_5() -> Check {
    let game = appendix_b_game();
    let plan = infinite_plan();
    let k = 20_000;
    let c = plan.c_bound(k) as f64;
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    let mut violations = 0;
    let mut first = None;
    for seed in 1..=20u64 {
        let cfg = VariantConfig::skip(bench_params(k), SkipMetric::PaperPhi, c);
        let mut audit = SkipBoundAudit::new(c);
        run_training_observed(&game, &plan, &cfg, seed, &mut audit).map_err(|e| e.to_string())?;
        let r = &audit.report;
        worst = (worst.0.max(r.skipped_ratio), worst.1.max(r.blocking_ratio), worst.2.max(r.phi_ratio));
        violations += r.violations;
        if first.is_none() {
            first = r.examples.first().map(|e| format!("seed {seed} {e}"));
        }
    }
    Ok((
        violations == 0,
        format!(
            "20 runs, K=20000, C={c}: violations {violations}, worst value/bound: skipped {:.3}, blocking {:.3}, phi {:.2e}{}",
            worst.0,
            worst.1,
            worst.2,
            first.map(|f| format!(", first: {f}")).unwrap_or_default()
        ),
    ))
}

fn micro(seed: u64, variant: usize, episodes: u64) -> (MarkovGame, TrainingTrace) {
    let mut rng = substream(seed, "acceptance-micro");
    let game = random_game(&mut rng, 2, 2, vec![2, 2]);
    let rules = (0..2)
        .map(|m| DelayRule {
            agent: Some(m),
            step: None,
            state: None,
            schedule: DelaySchedule::Explicit {
                table: (0..8).map(|_| Delay::Finite(rng.gen_range(0..3))).collect(),
                default: Delay::Finite(0),
            },
        })
        .collect();
    let plan = DelayPlan {
        default: DelaySchedule::Zero,
        rules,
    };
    let params = ParamContext {
        bonus_scale: 0.01,
        ..ParamContext::new(2, 2, 2, 2, episodes, 0.1).expect("valid")
    };
    let cfg = match variant {
        0 => VariantConfig::damavl(params, 2),
        1 => VariantConfig::naive(params, 2),
        _ => VariantConfig::skip(params, SkipMetric::PaperPhi, 3.0),
    };
    let trace = run_training(&game, &plan, &cfg, seed).expect("micro run");
    (game, trace)
}

fn criterion_6() -> Check {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for seed in 0..50u64 {
        let (game, trace) = micro(seed, (seed % 3) as usize, 1 + seed % 5);
        let cert = CertifiedPolicy::new(&trace);
        let mut observations = vec![Observation::JointActions];
        if cert.mode() == DeviceMode::Shared {
            observations.push(Observation::StatesOnly);
        }
        let mut starts = vec![Start::Episode { k: trace.episodes, h: 0, s: 0 }, Start::Episode { k: 1, h: 0, s: 0 }];
        if cert.mode() == DeviceMode::Shared || trace.episodes <= 3 {
            starts.push(Start::Output);
        }
        for obs in observations {
            let opts = EvalOptions {
                observation: obs,
                ..EvalOptions::default()
            };
            let ev = Evaluator::new(&cert, &game, opts).map_err(|e| e.to_string())?;
            for &start in &starts {
                for m in 0..2 {
                    let v = ev.value(m, start).map_err(|e| e.to_string())?;
                    let bv = brute_force_value(&trace, &game, cert.mode(), m, start);
                    let br = ev.best_response(m, start).map_err(|e| e.to_string())?;
                    let bb = brute_force_best_response(&trace, &game, cert.mode(), m, start, obs).map_err(|e| e.to_string())?;
                    worst = worst.max((v - bv).abs()).max((br - bb).abs());
                    compared += 2;
                }
            }
        }
    }
    let (game, trace) = micro(7, 0, 5);
    let cert = CertifiedPolicy::new(&trace);
    let exact = Evaluator::new(&cert, &game, EvalOptions::default())
        .and_then(|ev| ev.value(0, Start::Output))
        .map_err(|e| e.to_string())?;
    let mut rng = substream(6, "acceptance-mc");
    let mut inside = 0;
    for _ in 0..100 {
        let (mean, se) = mc_value(&cert, &game, 0, Start::Output, 2000, &mut rng).map_err(|e| e.to_string())?;
        if (mean - exact).abs() <= 4.0 * se {
            inside += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-10 && inside >= 99 && secs < 300.0,
        format!("{compared} exact/enumeration pairs, worst difference {worst:.1e}; Monte-Carlo within 4 se in {inside}/100; {secs:.1}s"),
    ))
}

/// Final gaps by arm label, then by seed.
fn by_arm(summaries: &[RunSummary]) -> BTreeMap<String, BTreeMap<u64, &RunSummary>> {
    let mut out: BTreeMap<String, BTreeMap<u64, &RunSummary>> = BTreeMap::new();
    for s in summaries {
        out.entry(s.label.clone()).or_default().insert(s.seed, s);
    }
    out
}

fn gaps_line(label: &str, runs: &BTreeMap<u64, &RunSummary>) -> String {
    let g: Vec<String> = runs.values().map(|r| format!("{:.4}", r.final_gap)).collect();
    format!("{label} [{}]", g.join(" "))
}

fn run_preset(cfg: damavl_harness::config::ExperimentConfig, dir: &PathBuf) -> Result<(Vec<RunSummary>, f64), String> {
    let exp = cfg.resolve().map_err(|e| e.to_string())?;
    let out = dir.join(&cfg.name);
    let outcome = run_experiment(&exp, &out, worker_count()).map_err(|e| e.to_string())?;
    plot_file(
        &out.join("results.csv"),
        &out.join("gap.svg"),
        &PlotSpec {
            title: cfg.name.clone(),
            window: 10,
        },
    )
    .map_err(|e| e.to_string())?;
    let slowest = outcome
        .manifest
        .runs
        .iter()
        .map(|r| r.train_seconds + r.eval_seconds)
        .fold(0.0, f64::max);
    Ok((outcome.summaries, slowest))
}

fn criterion_7(left: &[RunSummary], slowest: f64) -> Check {
    let arms = by_arm(left);
    let (damavl, naive) = (&arms["damavl"], &arms["naive"]);
    let good = damavl
        .iter()
        .filter(|(seed, d)| d.final_gap <= GAP_CEILING && d.final_gap <= 0.5 * naive[seed].final_gap)
        .count();
    let below_ceiling = damavl.values().filter(|d| d.final_gap <= GAP_CEILING).count();
    Ok((
        good >= SEEDS_NEEDED && slowest <= 600.0,
        format!(
            "{}; {}; seeds with gap <= {GAP_CEILING} and <= 0.5x naive: {good}/5 (below ceiling alone: {below_ceiling}/5); slowest run {slowest:.1}s",
            gaps_line("damavl", damavl),
            gaps_line("naive", naive)
        ),
    ))
}

fn criterion_8(center: &[RunSummary]) -> Check {
    let arms = by_arm(center);
    let (s1, s2, s3) = (&arms["damavl-seq1"], &arms["damavl-seq2"], &arms["damavl-seq3"]);
    let ordered = s1
        .iter()
        .filter(|(seed, a)| a.final_gap <= s2[seed].final_gap && s2[seed].final_gap <= s3[seed].final_gap)
        .count();
    Ok((
        ordered >= SEEDS_NEEDED,
        format!(
            "{}; {}; {}; ordered seeds {ordered}/5",
            gaps_line("seq1", s1),
            gaps_line("seq2", s2),
            gaps_line("seq3", s3)
        ),
    ))
}

fn criterion_9(right: &[RunSummary]) -> Check {
    let arms = by_arm(right);
    let (phi, prev, none) = (&arms["skip-phi"], &arms["skip-previous"], &arms["damavl-no-skip"]);
    let low = phi.values().filter(|r| r.final_gap <= GAP_CEILING).count();
    let stalls = phi.iter().filter(|(seed, r)| none[seed].final_gap >= 2.0 * r.final_gap).count();
    let better = phi.iter().filter(|(seed, r)| r.final_gap <= prev[seed].final_gap).count();
    Ok((
        low >= SEEDS_NEEDED && stalls >= SEEDS_NEEDED && better >= SEEDS_NEEDED,
        format!(
            "{}; {}; {}; phi <= {GAP_CEILING}: {low}/5, no-skip >= 2x phi: {stalls}/5, phi <= previous: {better}/5",
            gaps_line("skip-phi", phi),
            gaps_line("skip-previous", prev),
            gaps_line("no-skip", none)
        ),
    ))
}

fn criterion_10(left: &[RunSummary]) -> String {
    let mut parts = Vec::new();
    let mut all_high = true;
    for r in left.iter().filter(|r| r.label == "damavl") {
        let min = r.optimism.iter().copied().fold(f64::INFINITY, f64::min);
        all_high &= min >= 0.95;
        let per: Vec<String> = r.optimism.iter().map(|f| format!("{f:.3}")).collect();
        parts.push(format!("seed {} [{}]", r.seed, per.join(" ")));
    }
    format!(
        "optimism fractions per agent after burn-in: {}; {}",
        parts.join(", "),
        if all_high { "all >= 0.95" } else { "some below 0.95" }
    )
}

fn line(n: usize, check: Check) -> bool {
    match check {
        Ok((pass, detail)) => {
            println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
            pass
        }
        Err(e) => {
            println!("criterion {n}: FAIL error: {e}");
            false
        }
    }
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut ok = true;
    ok &= line(1, criterion_1());
    ok &= line(2, criterion_2());
    ok &= line(3, criterion_3());
    ok &= line(4, criterion_4());
    ok &= line(5, criterion_5());
    ok &= line(6, criterion_6());
    let left = run_preset(fig1_left(), &dir);
    match &left {
        Ok((runs, slowest)) => ok &= line(7, criterion_7(runs, *slowest)),
        Err(e) => ok &= line(7, Err(e.clone())),
    }
    ok &= line(8, run_preset(fig1_center(), &dir).and_then(|(runs, _)| criterion_8(&runs)));
    ok &= line(9, run_preset(fig1_right(), &dir).and_then(|(runs, _)| criterion_9(&runs)));
    match &left {
        Ok((runs, _)) => println!("criterion 10: REPORT {}", criterion_10(runs)),
        Err(e) => println!("criterion 10: REPORT unavailable: {e}"),
    }
    println!("outputs in {}", dir.display());
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
