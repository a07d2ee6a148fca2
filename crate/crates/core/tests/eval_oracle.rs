use damavl_core::certify::{CertifiedPolicy, DeviceMode};
use damavl_core::delay::{Delay, DelayPlan, DelayRule, DelaySchedule};
use damavl_core::eval::oracle::{brute_force_best_response, brute_force_value};
use damavl_core::eval::{mc_value, EvalOptions, Evaluator, Observation, Start};
use damavl_core::game::{random_game, MarkovGame};
use damavl_core::ledger::SkipMetric;
use damavl_core::params::ParamContext;
use damavl_core::rng::substream;
use damavl_core::training::{run_training, AgentTrace, CellTrace, TrainingTrace, Variant, VariantConfig, TRACE_VERSION};
use rand::Rng;

fn micro(seed: u64, variant: usize, episodes: u64) -> (MarkovGame, TrainingTrace) {
    let mut rng = substream(seed, "micro");
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
        ..ParamContext::new(2, 2, 2, 2, episodes, 0.1).unwrap()
    };
    let cfg = match variant {
        0 => VariantConfig::damavl(params, 2),
        1 => VariantConfig::naive(params, 2),
        _ => VariantConfig::skip(params, SkipMetric::PaperPhi, 3.0),
    };
    let trace = run_training(&game, &plan, &cfg, seed).unwrap();
    (game, trace)
}

fn starts(trace: &TrainingTrace, naive: bool) -> Vec<Start> {
    let mut out = Vec::new();
    if !naive || trace.episodes <= 3 {
        out.push(Start::Output);
    }
    for k in [1, trace.episodes] {
        out.push(Start::Episode { k, h: 0, s: 0 });
    }
    out.push(Start::Episode {
        k: trace.episodes,
        h: 1,
        s: 1,
    });
    out
}

#[test]
fn exact_values_match_enumeration() {
    for seed in 0..50 {
        for variant in 0..3 {
            let episodes = 1 + seed % 5;
            let (game, trace) = micro(seed, variant, episodes);
            let cert = CertifiedPolicy::new(&trace);
            let ev = Evaluator::new(&cert, &game, EvalOptions::default()).unwrap();
            for start in starts(&trace, variant == 1) {
                for m in 0..2 {
                    let exact = ev.value(m, start).unwrap();
                    let brute = brute_force_value(&trace, &game, cert.mode(), m, start);
                    assert!((exact - brute).abs() <= 1e-10, "seed {seed} variant {variant} {start:?} m={m}: {exact} vs {brute}");
                }
            }
        }
    }
}

#[test]
fn best_responses_match_enumeration() {
    let mut positive_gaps = 0;
    for seed in 0..50 {
        for variant in 0..3 {
            let episodes = 1 + seed % 5;
            let (game, trace) = micro(seed, variant, episodes);
            let cert = CertifiedPolicy::new(&trace);
            let mut observations = vec![Observation::JointActions];
            if cert.mode() == DeviceMode::Shared {
                observations.push(Observation::StatesOnly);
            }
            for obs in observations {
                let opts = EvalOptions {
                    observation: obs,
                    ..EvalOptions::default()
                };
                let ev = Evaluator::new(&cert, &game, opts).unwrap();
                for start in starts(&trace, variant == 1) {
                    for m in 0..2 {
                        let exact = ev.best_response(m, start).unwrap();
                        let brute = brute_force_best_response(&trace, &game, cert.mode(), m, start, obs).unwrap();
                        assert!(
                            (exact - brute).abs() <= 1e-10,
                            "seed {seed} variant {variant} {obs:?} {start:?} m={m}: {exact} vs {brute}"
                        );
                        let v = ev.value(m, start).unwrap();
                        assert!(exact >= v - 1e-9);
                        if exact > v + 1e-3 {
                            positive_gaps += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(positive_gaps > 100, "only {positive_gaps} instances with a visible gap");
}

#[test]
fn observation_modes_are_ordered() {
    for seed in 0..20 {
        let (game, trace) = micro(seed, 0, 200);
        let cert = CertifiedPolicy::new(&trace);
        let br = |obs| {
            let opts = EvalOptions {
                observation: obs,
                ..EvalOptions::default()
            };
            Evaluator::new(&cert, &game, opts).unwrap().best_response(0, Start::Output).unwrap()
        };
        let (states, joint, device) = (br(Observation::StatesOnly), br(Observation::JointActions), br(Observation::Device));
        assert!(states <= joint + 1e-12 && joint <= device + 1e-12, "{states} {joint} {device}");
    }
}

/// One state, two steps. The opponent's first action reveals which stored
/// visit the device drew, and that visit determines the second-step mixture.
fn revealing_trace() -> (MarkovGame, TrainingTrace) {
    let transition = vec![vec![vec![vec![1.0]; 4]; 1]; 2];
    let mut reward = vec![vec![vec![vec![0.0; 4]; 1]; 2]; 2];
    for j in [0, 3] {
        reward[0][1][0][j] = 1.0;
    }
    let game = MarkovGame::new(2, 1, vec![2, 2], 0, transition, reward).unwrap();
    let cell = |usable: Vec<u64>, policies: Vec<f64>| CellTrace {
        usable_at_visit: usable,
        policies,
        ..CellTrace::default()
    };
    let uniform = AgentTrace {
        actions_count: 2,
        cells: vec![cell(vec![0, 2], vec![0.5; 4]), cell(vec![1, 2], vec![0.5; 4])],
        diag: Vec::new(),
    };
    let opponent = AgentTrace {
        actions_count: 2,
        cells: vec![cell(vec![0, 2], vec![1.0, 0.0, 0.0, 1.0]), cell(vec![1, 2], vec![1.0, 0.0, 0.0, 1.0])],
        diag: Vec::new(),
    };
    let trace = TrainingTrace {
        version: TRACE_VERSION,
        variant: Variant::Damavl,
        horizon: 2,
        states: 1,
        action_counts: vec![2, 2],
        initial_state: 0,
        episodes: 2,
        visit_episodes: vec![vec![1, 2], vec![1, 2]],
        paths: vec![vec![0, 0, 0]; 2],
        agents: vec![uniform, opponent],
    };
    (game, trace)
}

#[test]
fn observed_actions_inform_the_deviator() {
    let (game, trace) = revealing_trace();
    let cert = CertifiedPolicy::new(&trace);
    let start = Start::Episode { k: 2, h: 0, s: 0 };
    let br = |obs| {
        let opts = EvalOptions {
            observation: obs,
            ..EvalOptions::default()
        };
        Evaluator::new(&cert, &game, opts).unwrap().best_response(0, start).unwrap()
    };
    // first draw: visit 1 w.p. 1/4, visit 2 w.p. 3/4; the second step then
    // plays action 0 surely after visit 1 and w.p. 1/4 after visit 2; seeing
    // the device itself reveals the second-step draw too
    assert!((br(Observation::StatesOnly) - 0.5625).abs() < 1e-12);
    assert!((br(Observation::JointActions) - 0.8125).abs() < 1e-12);
    assert!((br(Observation::Device) - 1.0).abs() < 1e-12);
    for obs in [Observation::StatesOnly, Observation::JointActions] {
        let brute = brute_force_best_response(&trace, &game, DeviceMode::Shared, 0, start, obs).unwrap();
        assert!((br(obs) - brute).abs() < 1e-12);
    }
}

#[test]
fn pruning_changes_best_response_negligibly() {
    for seed in 0..20 {
        let (game, trace) = micro(seed, 0, 5);
        let cert = CertifiedPolicy::new(&trace);
        let exact = Evaluator::new(&cert, &game, EvalOptions::default()).unwrap();
        let pruned = Evaluator::new(
            &cert,
            &game,
            EvalOptions {
                prune: 1e-12,
                ..EvalOptions::default()
            },
        )
        .unwrap();
        for m in 0..2 {
            let a = exact.best_response(m, Start::Output).unwrap();
            let b = pruned.best_response(m, Start::Output).unwrap();
            assert!((a - b).abs() <= 1e-8);
        }
    }
}

#[test]
fn monte_carlo_agrees_with_exact() {
    let (game, trace) = micro(7, 0, 5);
    let cert = CertifiedPolicy::new(&trace);
    let exact = Evaluator::new(&cert, &game, EvalOptions::default()).unwrap().value(0, Start::Output).unwrap();
    let mut rng = substream(99, "mc");
    let mut inside = 0;
    for _ in 0..100 {
        let (mean, se) = mc_value(&cert, &game, 0, Start::Output, 2000, &mut rng).unwrap();
        if (mean - exact).abs() <= 4.0 * se {
            inside += 1;
        }
    }
    assert!(inside >= 99, "{inside}/100 within 4 standard errors");
}

#[test]
fn size_guard_refuses_large_trees() {
    let (game, trace) = micro(1, 0, 3);
    let cert = CertifiedPolicy::new(&trace);
    let opts = EvalOptions {
        max_tree_nodes: 2,
        ..EvalOptions::default()
    };
    assert!(matches!(Evaluator::new(&cert, &game, opts), Err(damavl_core::Error::Guard { .. })));
}
