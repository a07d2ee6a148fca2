//! Built-in experiments on the three-agent benchmark game.
//!
//! No horizon of training, confidence level or seed count comes with the
//! benchmark; the presets use `K = 50000`, `δ = 0.01` and seeds 1 to 5.

use std::path::PathBuf;

use damavl_core::delay::{infinite_plan, sequence_plan};
use damavl_core::eval::Observation;
use damavl_core::ledger::SkipMetric;
use damavl_core::training::Variant;

use crate::config::{ArmConfig, Bound, EvalMethod, ExperimentConfig, GameSpec, Guards};
use crate::{HarnessError, Result};

pub const PRESETS: [&str; 3] = ["fig1-left", "fig1-center", "fig1-right"];

pub const PRESET_EPISODES: u64 = 50_000;
pub const PRESET_DELTA: f64 = 0.01;
pub const PRESET_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn arm(label: &str, variant: Variant) -> ArmConfig {
    ArmConfig {
        label: label.into(),
        variant,
        delays: None,
        skip_metric: None,
        threshold_timing: None,
        d_max: Bound::default(),
        c: Bound::default(),
    }
}

fn base(name: &str, arms: Vec<ArmConfig>) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        game: GameSpec::Named("appendix-b".into()),
        delays: sequence_plan(1),
        arms,
        episodes: PRESET_EPISODES,
        seeds: PRESET_SEEDS.to_vec(),
        delta: PRESET_DELTA,
        eval_every: 100,
        eval_method: EvalMethod::Exact,
        mc_rollouts: 2000,
        observation: Observation::JointActions,
        window: 1000,
        burn_in: None,
        bonus_scale: 1.0,
        guards: Guards::default(),
        save_traces: false,
        output_dir: PathBuf::from("out").join(name),
    }
}

/// DA-MAVL against the naive variant under delay sequence 1.
pub fn fig1_left() -> ExperimentConfig {
    base("fig1-left", vec![arm("damavl", Variant::Damavl), arm("naive", Variant::Naive)])
}

/// DA-MAVL under delay sequences 1 to 3 (delays scaled by 1, 4 and 9).
pub fn fig1_center() -> ExperimentConfig {
    let arms = [(1, "damavl-seq1"), (4, "damavl-seq2"), (9, "damavl-seq3")]
        .into_iter()
        .map(|(factor, label)| ArmConfig {
            delays: Some(sequence_plan(factor)),
            ..arm(label, Variant::Damavl)
        })
        .collect();
    base("fig1-center", arms)
}

/// Skipping with the accumulated metric, skipping with the plain lag, and
/// DA-MAVL without skipping, under the infinite-delay pattern.
pub fn fig1_right() -> ExperimentConfig {
    let skip = |label: &str, metric| ArmConfig {
        skip_metric: Some(metric),
        ..arm(label, Variant::Skip)
    };
    let mut cfg = base(
        "fig1-right",
        vec![
            skip("skip-phi", SkipMetric::PaperPhi),
            skip("skip-previous", SkipMetric::PreviousNMinusI),
            arm("damavl-no-skip", Variant::Damavl),
        ],
    );
    cfg.delays = infinite_plan();
    cfg
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    match name {
        "fig1-left" => Ok(fig1_left()),
        "fig1-center" => Ok(fig1_center()),
        "fig1-right" => Ok(fig1_right()),
        other => Err(HarnessError::config(format!(
            "preset: unknown preset {other:?} (expected one of {})",
            PRESETS.join(", ")
        ))),
    }
}
