use damavl_core::audit::{AlignmentAudit, SkipBoundAudit};
use damavl_core::certify::CertifiedPolicy;
use damavl_core::delay::{infinite_plan, sequence_plan, DelayPlan};
use damavl_core::game::appendix_b_game;
use damavl_core::ledger::{SkipMetric, ThresholdTiming};
use damavl_core::params::ParamContext;
use damavl_core::rng::substream;
use damavl_core::training::{run_training, run_training_observed, TrainingTrace, VariantConfig};

fn params(episodes: u64) -> ParamContext {
    ParamContext::new(2, 3, 3, 2, episodes, 0.01).unwrap()
}

fn same_learning(a: &TrainingTrace, b: &TrainingTrace, compare_under: bool) {
    assert_eq!(a.paths, b.paths);
    for (x, y) in a.agents.iter().zip(&b.agents) {
        for (cx, cy) in x.cells.iter().zip(&y.cells) {
            assert_eq!(cx.actions, cy.actions);
            assert_eq!(cx.usable_at_visit, cy.usable_at_visit);
            assert_eq!(cx.holding, cy.holding);
            assert!(cx.policies.iter().zip(&cy.policies).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        for (dx, dy) in x.diag.iter().zip(&y.diag) {
            assert_eq!(dx.v_over.to_bits(), dy.v_over.to_bits());
            assert_eq!((dx.used, dx.happened, dx.holding), (dy.used, dy.happened, dy.holding));
            if compare_under {
                assert_eq!(dx.v_under.to_bits(), dy.v_under.to_bits());
            }
        }
    }
}

#[test]
fn zero_delays_make_the_variants_coincide() {
    let game = appendix_b_game();
    let plan = DelayPlan::zero();
    let p = params(400);
    let damavl = run_training(&game, &plan, &VariantConfig::damavl(p.clone(), 0), 3).unwrap();
    let naive = run_training(&game, &plan, &VariantConfig::naive(p.clone(), 0), 3).unwrap();
    let skip = run_training(&game, &plan, &VariantConfig::skip(p, SkipMetric::PaperPhi, 1.0), 3).unwrap();
    same_learning(&damavl, &naive, true);
    same_learning(&damavl, &skip, false);
    assert!(skip.agents.iter().all(|a| a.cells.iter().all(|c| c.skipped.is_empty())));
}

#[test]
fn heterogeneous_delays_keep_visits_aligned() {
    let game = appendix_b_game();
    let cfg = VariantConfig::damavl(params(2000), 20);
    let mut audit = AlignmentAudit::default();
    let trace = run_training_observed(&game, &sequence_plan(1), &cfg, 11, &mut audit).unwrap();
    assert_eq!(audit.episodes, 2000);
    let first = &trace.agents[0].cells[0].consumed;
    assert!(first.len() > 1900);
    for a in &trace.agents {
        let c = &a.cells[0].consumed;
        let n = c.len().min(first.len());
        assert_eq!(c[..n], first[..n]);
    }
}

#[test]
fn naive_consumption_follows_arrivals() {
    let game = appendix_b_game();
    let cfg = VariantConfig::naive(params(300), 20);
    let mut audit = AlignmentAudit::default();
    let err = run_training_observed(&game, &sequence_plan(1), &cfg, 11, &mut audit).unwrap_err();
    assert!(matches!(err, damavl_core::Error::Invariant(_)));
}

#[test]
fn runs_replay_bit_for_bit() {
    let game = appendix_b_game();
    let cfg = VariantConfig::skip(params(500), SkipMetric::PaperPhi, 30.0);
    let a = run_training(&game, &infinite_plan(), &cfg, 5).unwrap();
    let b = run_training(&game, &infinite_plan(), &cfg, 5).unwrap();
    let c = run_training(&game, &infinite_plan(), &cfg, 6).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_ne!(a.paths, c.paths);
    let back = TrainingTrace::from_json(&a.to_json().unwrap()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn skip_bounds_hold_under_the_infinite_pattern() {
    let game = appendix_b_game();
    let plan = infinite_plan();
    let k = 3000;
    let c = plan.c_bound(k) as f64;
    for seed in 0..3 {
        let cfg = VariantConfig::skip(params(k), SkipMetric::PaperPhi, c);
        let mut audit = SkipBoundAudit::new(c);
        run_training_observed(&game, &plan, &cfg, seed, &mut audit).unwrap();
        assert!(audit.report.holds(), "{:?}", audit.report.examples);
        assert!(audit.report.checks > 0);
    }
}

#[test]
fn committed_threshold_skips_every_late_reward() {
    let game = appendix_b_game();
    let mut cfg = VariantConfig::skip(params(300), SkipMetric::PaperPhi, 30.0);
    cfg.threshold_timing = ThresholdTiming::Committed;
    let trace = run_training(&game, &sequence_plan(1), &cfg, 2).unwrap();
    // agents 1 and 2 have delay 5 at the initial cell: nothing ever arrives in time
    let cell = &trace.agents[1].cells[0];
    assert!(cell.skipped.len() + 2 >= cell.consumed.len(), "{} of {}", cell.skipped.len(), cell.consumed.len());
}

#[test]
fn decentralized_devices_agree() {
    let game = appendix_b_game();
    let trace = run_training(&game, &sequence_plan(1), &VariantConfig::damavl(params(300), 20), 9).unwrap();
    let cert = CertifiedPolicy::new(&trace);
    for r in 0..50 {
        let mut devices: Vec<_> = (0..3).map(|_| substream(r, "device")).collect();
        let mut actions: Vec<_> = (0..3).map(|m| substream(r, &format!("action-{m}"))).collect();
        let mut env = substream(r, "env");
        let (ep, chains) = cert.execute_decentralized(&game, &mut devices, &mut actions, &mut env).unwrap();
        assert_eq!(ep.steps.len(), 2);
        assert!(chains.iter().all(|ks| ks.iter().all(|&k| k == ks[0])));
    }
    let mut devices: Vec<_> = (0..3).map(|m| substream(m, "device")).collect();
    let mut actions: Vec<_> = (0..3).map(|m| substream(m, "action")).collect();
    let mut env = substream(0, "env");
    let mut disagreed = false;
    for _ in 0..50 {
        if cert.execute_decentralized(&game, &mut devices, &mut actions, &mut env).is_err() {
            disagreed = true;
            break;
        }
    }
    assert!(disagreed, "independent device streams should eventually disagree");
}
