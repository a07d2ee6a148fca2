//! Experiment configuration and its resolution into runnable arms.

use std::path::{Path, PathBuf};

use damavl_core::delay::DelayPlan;
use damavl_core::eval::Observation;
use damavl_core::game::{appendix_b_game, validate_game, MarkovGame};
use damavl_core::ledger::{SkipMetric, ThresholdTiming};
use damavl_core::params::ParamContext;
use damavl_core::training::{Variant, VariantConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GameSpec {
    /// Built-in game by name (`"appendix-b"`).
    Named(String),
    File { file: PathBuf },
    Inline { inline: serde_json::Value },
}

/// `"auto"` or an explicit value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bound<T> {
    Value(T),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AutoTag {
    Auto,
}

impl<T> Default for Bound<T> {
    fn default() -> Self {
        Bound::Auto(AutoTag::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ArmConfig {
    pub label: String,
    pub variant: Variant,
    /// Overrides the experiment-level delays.
    #[serde(default)]
    pub delays: Option<DelayPlan>,
    #[serde(default)]
    pub skip_metric: Option<SkipMetric>,
    #[serde(default)]
    pub threshold_timing: Option<ThresholdTiming>,
    /// Finite-delay bound; `auto` takes the largest finite scheduled delay.
    #[serde(default)]
    pub d_max: Bound<u64>,
    /// Outstanding-visit bound for skipping; `auto` scans the schedule.
    #[serde(default)]
    pub c: Bound<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMethod {
    #[default]
    Exact,
    Mc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Guards {
    #[serde(default = "default_tree_nodes")]
    pub max_tree_nodes: u64,
    #[serde(default = "default_components")]
    pub max_components: u64,
    /// Largest admissible `K`.
    #[serde(default = "default_max_episodes")]
    pub max_episodes: u64,
}

fn default_tree_nodes() -> u64 {
    1_000_000
}
fn default_components() -> u64 {
    10_000_000
}
fn default_max_episodes() -> u64 {
    10_000_000
}

impl Default for Guards {
    fn default() -> Self {
        Self {
            max_tree_nodes: default_tree_nodes(),
            max_components: default_components(),
            max_episodes: default_max_episodes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub game: GameSpec,
    #[serde(default)]
    pub delays: DelayPlan,
    pub arms: Vec<ArmConfig>,
    pub episodes: u64,
    pub seeds: Vec<u64>,
    pub delta: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub eval_method: EvalMethod,
    #[serde(default = "default_rollouts")]
    pub mc_rollouts: usize,
    #[serde(default)]
    pub observation: Observation,
    /// Episodes averaged for the smoothed final gap.
    #[serde(default = "default_window")]
    pub window: u64,
    /// Episodes excluded from the optimism fraction.
    #[serde(default)]
    pub burn_in: Option<u64>,
    #[serde(default = "default_scale")]
    pub bonus_scale: f64,
    #[serde(default)]
    pub guards: Guards,
    #[serde(default)]
    pub save_traces: bool,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

fn default_eval_every() -> u64 {
    100
}
fn default_rollouts() -> usize {
    2000
}
fn default_window() -> u64 {
    1000
}
fn default_scale() -> f64 {
    1.0
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Arm with every bound resolved.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedArm {
    pub label: String,
    pub delays: DelayPlan,
    pub variant: VariantConfig,
}

#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub config: ExperimentConfig,
    pub game: MarkovGame,
    pub arms: Vec<ResolvedArm>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Evaluation episodes: every `eval_every`-th episode plus the last.
    pub fn eval_episodes(&self) -> Vec<u64> {
        let mut out: Vec<u64> = (1..=self.episodes / self.eval_every.max(1))
            .map(|i| i * self.eval_every)
            .collect();
        if out.last() != Some(&self.episodes) {
            out.push(self.episodes);
        }
        out
    }

    pub fn burn_in(&self) -> u64 {
        self.burn_in.unwrap_or(self.episodes / 10)
    }

    fn load_game(&self) -> Result<MarkovGame> {
        let game = match &self.game {
            GameSpec::Named(name) if name == "appendix-b" => appendix_b_game(),
            GameSpec::Named(name) => return Err(HarnessError::config(format!("game: unknown built-in game {name:?}"))),
            GameSpec::File { file } => {
                let text = std::fs::read_to_string(file).map_err(|e| HarnessError::io(file, e))?;
                MarkovGame::from_json(&text).map_err(|e| HarnessError::config(format!("game: {e}")))?
            }
            GameSpec::Inline { inline } => {
                MarkovGame::from_json(&inline.to_string()).map_err(|e| HarnessError::config(format!("game: {e}")))?
            }
        };
        let report = validate_game(&game);
        if !report.is_ok() {
            return Err(HarnessError::Config(
                report.violations.iter().map(|v| format!("game: {v}")).collect(),
            ));
        }
        Ok(game)
    }

    /// Check every field and resolve automatic bounds. All problems are
    /// reported together.
    pub fn resolve(&self) -> Result<ResolvedExperiment> {
        let mut errors = Vec::new();
        if self.episodes == 0 {
            errors.push("episodes: must be at least 1".to_string());
        }
        if self.episodes > self.guards.max_episodes {
            return Err(damavl_core::Error::Guard {
                what: "episodes".into(),
                value: u128::from(self.episodes),
                limit: u128::from(self.guards.max_episodes),
            }
            .into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            errors.push(format!("delta: must lie in (0,1), got {}", self.delta));
        }
        if self.seeds.is_empty() {
            errors.push("seeds: at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            errors.push("seeds: duplicates are not allowed".into());
        }
        if self.eval_every == 0 {
            errors.push("eval-every: must be at least 1".into());
        }
        if self.eval_method == EvalMethod::Mc && self.mc_rollouts == 0 {
            errors.push("mc-rollouts: must be at least 1".into());
        }
        if self.window == 0 {
            errors.push("window: must be at least 1".into());
        }
        if !(self.bonus_scale.is_finite() && self.bonus_scale >= 0.0) {
            errors.push("bonus-scale: must be finite and non-negative".into());
        }
        if self.arms.is_empty() {
            errors.push("arms: at least one arm is required".into());
        }
        if let Err(e) = self.delays.check() {
            errors.push(format!("delays: {e}"));
        }
        let game = match self.load_game() {
            Ok(g) => Some(g),
            Err(HarnessError::Config(list)) => {
                errors.extend(list);
                None
            }
            Err(e) => return Err(e),
        };
        let mut labels: Vec<&str> = Vec::new();
        let mut arms = Vec::new();
        for (idx, arm) in self.arms.iter().enumerate() {
            let at = format!("arms[{idx}] ({})", arm.label);
            if arm.label.is_empty() || !arm.label.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                errors.push(format!("{at}.label: use letters, digits, '-' or '_'"));
            }
            if labels.contains(&arm.label.as_str()) {
                errors.push(format!("{at}.label: duplicate label"));
            }
            labels.push(&arm.label);
            let delays = arm.delays.clone().unwrap_or_else(|| self.delays.clone());
            if let Err(e) = delays.check() {
                errors.push(format!("{at}.delays: {e}"));
                continue;
            }
            let Some(game) = &game else { continue };
            let params = ParamContext {
                bonus_scale: self.bonus_scale,
                horizon: game.horizon(),
                agents: game.agents(),
                states: game.states(),
                actions: game.max_actions(),
                episodes: self.episodes.max(1),
                delta: self.delta,
            };
            let d_max = match arm.d_max {
                Bound::Value(d) => {
                    let scanned = delays.max_finite(self.episodes);
                    if arm.variant != Variant::Skip && d < scanned {
                        errors.push(format!("{at}.d-max: {d} is below the scheduled maximum {scanned}"));
                    }
                    d
                }
                Bound::Auto(_) => delays.max_finite(self.episodes),
            };
            let mut cfg = match arm.variant {
                Variant::Damavl => VariantConfig::damavl(params, d_max),
                Variant::Naive => VariantConfig::naive(params, d_max),
                Variant::Skip => {
                    let c = match arm.c {
                        Bound::Value(c) => {
                            let scanned = delays.c_bound(self.episodes);
                            if c < scanned as f64 {
                                errors.push(format!("{at}.c: {c} is below the scanned bound {scanned}"));
                            }
                            c
                        }
                        Bound::Auto(_) => delays.c_bound(self.episodes) as f64,
                    };
                    let Some(metric) = arm.skip_metric else {
                        errors.push(format!("{at}.skip-metric: required for the skip variant"));
                        continue;
                    };
                    VariantConfig::skip(params, metric, c)
                }
            };
            if arm.variant != Variant::Skip {
                if arm.skip_metric.is_some() || arm.threshold_timing.is_some() {
                    errors.push(format!("{at}: skip options are only valid with the skip variant"));
                }
                if matches!(arm.c, Bound::Value(_)) {
                    errors.push(format!("{at}.c: only valid with the skip variant"));
                }
            } else if matches!(arm.d_max, Bound::Value(_)) {
                errors.push(format!("{at}.d-max: not used by the skip variant"));
            }
            if let Some(t) = arm.threshold_timing {
                cfg.threshold_timing = t;
            }
            if let Err(e) = cfg.check() {
                errors.push(format!("{at}: {e}"));
            }
            arms.push(ResolvedArm {
                label: arm.label.clone(),
                delays,
                variant: cfg,
            });
        }
        if !errors.is_empty() {
            return Err(HarnessError::Config(errors));
        }
        Ok(ResolvedExperiment {
            config: self.clone(),
            game: game.expect("checked above"),
            arms,
        })
    }
}

impl ResolvedExperiment {
    /// SHA-256 of the resolved configuration, excluding the output directory.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            name: &'a str,
            game: &'a MarkovGame,
            arms: &'a [ResolvedArm],
            episodes: u64,
            seeds: &'a [u64],
            eval_every: u64,
            eval_method: EvalMethod,
            mc_rollouts: usize,
            observation: Observation,
            window: u64,
            burn_in: u64,
            guards: &'a Guards,
        }
        let c = &self.config;
        let canonical = Canonical {
            name: &c.name,
            game: &self.game,
            arms: &self.arms,
            episodes: c.episodes,
            seeds: &c.seeds,
            eval_every: c.eval_every,
            eval_method: c.eval_method,
            mc_rollouts: c.mc_rollouts,
            observation: c.observation,
            window: c.window,
            burn_in: c.burn_in(),
            guards: &c.guards,
        };
        let bytes = serde_json::to_vec(&canonical).expect("serialisable");
        hex::encode(Sha256::digest(&bytes))
    }
}
