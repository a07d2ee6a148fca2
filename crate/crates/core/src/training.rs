//! Episode loop for the three training variants.
//!
//! Each agent is an [`AgentLearner`] that only sees the shared state
//! sequence, its own actions and its own (delayed) rewards. The loop draws
//! actions from per-agent streams and transitions from a separate
//! environment stream, so variants facing identical histories make identical
//! draws.

use serde::{Deserialize, Serialize};

use crate::delay::{Delay, DelayPlan};
use crate::error::{Error, Result};
use crate::game::{sample_index, JointAction, MarkovGame};
use crate::learner::{LearnerCell, Weighting};
use crate::ledger::{LedgerMode, SkipMetric, SkipRule, ThresholdTiming, VisitLedger};
use crate::params::{bonuses_finite, bonuses_skip, eta_gamma, AlphaTable, Bonus, ParamContext};
use crate::rng::{agent_action_stream, environment_stream, StreamRng};

/// Archive format version of [`TrainingTrace`].
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Delay-adaptive learning on usable visits in happening order.
    Damavl,
    /// Learning on visits in arrival order.
    Naive,
    /// Delay-adaptive learning that skips long-outstanding rewards.
    Skip,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Damavl => "damavl",
            Variant::Naive => "naive",
            Variant::Skip => "skip",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub variant: Variant,
    /// Skip variant only.
    #[serde(default)]
    pub skip_metric: Option<SkipMetric>,
    #[serde(default = "default_timing")]
    pub threshold_timing: ThresholdTiming,
    pub params: ParamContext,
    /// Delay bound used by the finite-delay bonuses.
    #[serde(default)]
    pub d_max: Option<u64>,
    /// Outstanding-visit bound used by the skip bonuses.
    #[serde(default)]
    pub c_bound: Option<f64>,
}

fn default_timing() -> ThresholdTiming {
    ThresholdTiming::Provisional
}

impl VariantConfig {
    pub fn damavl(params: ParamContext, d_max: u64) -> Self {
        Self {
            variant: Variant::Damavl,
            skip_metric: None,
            threshold_timing: default_timing(),
            params,
            d_max: Some(d_max),
            c_bound: None,
        }
    }

    pub fn naive(params: ParamContext, d_max: u64) -> Self {
        Self {
            variant: Variant::Naive,
            ..Self::damavl(params, d_max)
        }
    }

    pub fn skip(params: ParamContext, metric: SkipMetric, c_bound: f64) -> Self {
        Self {
            variant: Variant::Skip,
            skip_metric: Some(metric),
            threshold_timing: default_timing(),
            params,
            d_max: None,
            c_bound: Some(c_bound),
        }
    }

    pub fn check(&self) -> Result<()> {
        self.params.check()?;
        match self.variant {
            Variant::Skip => {
                if self.skip_metric.is_none() {
                    return Err(Error::Config("skip variant needs a skip metric".into()));
                }
                match self.c_bound {
                    Some(c) if c.is_finite() && c >= 0.0 => Ok(()),
                    _ => Err(Error::Config("skip variant needs a finite non-negative C".into())),
                }
            }
            Variant::Damavl | Variant::Naive => {
                if self.skip_metric.is_some() {
                    return Err(Error::Config("skip options are only valid with the skip variant".into()));
                }
                if self.d_max.is_none() {
                    return Err(Error::Config(format!("{} needs d_max", self.variant.name())));
                }
                Ok(())
            }
        }
    }

    fn ledger_mode(&self) -> LedgerMode {
        match self.variant {
            Variant::Naive => LedgerMode::Naive,
            _ => LedgerMode::Aligned,
        }
    }

    fn weighting(&self) -> Weighting {
        match self.variant {
            Variant::Naive => Weighting::LocalCounter,
            _ => Weighting::HappeningOrder,
        }
    }

    fn skip_rule(&self) -> Option<SkipRule> {
        self.skip_metric.map(|metric| SkipRule {
            metric,
            timing: self.threshold_timing,
        })
    }
}

/// Per-(h, s) artefacts one agent leaves behind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellTrace {
    /// `n` after the preparation of visit `i` (index `i - 1`).
    pub usable_at_visit: Vec<u64>,
    /// Sampling policy at visit `i`, flattened with stride `A_m`.
    pub policies: Vec<f64>,
    pub actions: Vec<usize>,
    /// Happening orders in the order they were fed to learning.
    pub consumed: Vec<u64>,
    /// `T^i`.
    pub holding: Vec<u64>,
    pub skipped: Vec<u64>,
    pub delays: Vec<Delay>,
}

/// Per-episode values at the first step of the initial state, after the episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDiag {
    pub v_over: f64,
    pub v_under: f64,
    pub used: u64,
    pub happened: u64,
    pub holding: u64,
    pub skipped: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub actions_count: usize,
    /// Indexed `h * S + s`.
    pub cells: Vec<CellTrace>,
    pub diag: Vec<EpisodeDiag>,
}

impl AgentTrace {
    pub fn policy(&self, h: usize, s: usize, states: usize, i: u64) -> &[f64] {
        let a = self.actions_count;
        let c = &self.cells[h * states + s];
        let start = (i as usize - 1) * a;
        &c.policies[start..start + a]
    }
}

/// Frozen training artefacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub version: u32,
    pub variant: Variant,
    pub horizon: usize,
    pub states: usize,
    pub action_counts: Vec<usize>,
    pub initial_state: usize,
    pub episodes: u64,
    /// Episode of visit `i` of (h, s), indexed `[h * S + s][i - 1]`.
    pub visit_episodes: Vec<Vec<u64>>,
    /// States `s_0 … s_{H}` of every episode; the last entry is the terminal state.
    pub paths: Vec<Vec<usize>>,
    pub agents: Vec<AgentTrace>,
}

impl TrainingTrace {
    pub fn cell_index(&self, h: usize, s: usize) -> usize {
        h * self.states + s
    }

    /// Stored sampling policy of agent `m` at visit `i` of (h, s).
    pub fn snapshot_policy(&self, m: usize, h: usize, s: usize, i: u64) -> Result<&[f64]> {
        let visits = self.visit_episodes[self.cell_index(h, s)].len();
        if i == 0 || i as usize > visits {
            return Err(Error::IndexOutOfRange {
                what: "visit",
                index: i as usize,
                limit: visits,
            });
        }
        Ok(self.agents[m].policy(h, s, self.states, i))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        if t.version != TRACE_VERSION {
            return Err(Error::Config(format!(
                "trace version {} is not supported (expected {TRACE_VERSION})",
                t.version
            )));
        }
        Ok(t)
    }
}

struct PendingVisit {
    h: usize,
    s: usize,
    action: usize,
    prob: f64,
    gamma: f64,
}

/// One decentralised learner. It reads only the shared states, its own
/// actions and its own rewards.
#[derive(Debug)]
pub struct AgentLearner {
    index: usize,
    horizon: usize,
    states: usize,
    cfg: VariantConfig,
    iota: f64,
    alpha: AlphaTable,
    cells: Vec<LearnerCell>,
    ledgers: Vec<VisitLedger>,
    rng: StreamRng,
    pending: Vec<PendingVisit>,
    trace: AgentTrace,
}

impl std::fmt::Debug for PendingVisit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PendingVisit(h={}, s={}, a={})", self.h, self.s, self.action)
    }
}

impl AgentLearner {
    pub fn new(index: usize, horizon: usize, states: usize, actions: usize, cfg: &VariantConfig, rng: StreamRng) -> Self {
        let mode = cfg.ledger_mode();
        let cells = (0..horizon)
            .flat_map(|h| {
                (0..states).map(move |_| match cfg.variant {
                    Variant::Skip => LearnerCell::with_accumulator(horizon, h, actions, 0.0),
                    _ => LearnerCell::new(horizon, h, actions),
                })
            })
            .collect();
        let ledgers = (0..horizon * states).map(|_| VisitLedger::new(mode, horizon)).collect();
        Self {
            index,
            horizon,
            states,
            cfg: cfg.clone(),
            iota: cfg.params.iota(),
            alpha: AlphaTable::with_capacity(horizon, 1024),
            cells,
            ledgers,
            rng,
            pending: Vec::with_capacity(horizon),
            trace: AgentTrace {
                actions_count: actions,
                cells: vec![CellTrace::default(); horizon * states],
                diag: Vec::new(),
            },
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }
    pub fn ledger(&self, h: usize, s: usize) -> &VisitLedger {
        &self.ledgers[h * self.states + s]
    }
    /// All ledgers, indexed `h * S + s`.
    pub fn ledgers(&self) -> &[VisitLedger] {
        &self.ledgers
    }
    pub fn cell(&self, h: usize, s: usize) -> &LearnerCell {
        &self.cells[h * self.states + s]
    }
    pub fn trace(&self) -> &AgentTrace {
        &self.trace
    }

    fn bonus(&self, ledger: &VisitLedger, used: u64, holding_now: u64) -> Bonus {
        let p = &self.cfg.params;
        let b = match self.cfg.variant {
            Variant::Damavl | Variant::Naive => {
                let t_n = if used == 0 { 0 } else { ledger.holding_at(used) };
                bonuses_finite(used, p.actions, t_n, self.cfg.d_max.unwrap_or(0), p.horizon, self.iota)
            }
            Variant::Skip => bonuses_skip(used, holding_now, self.cfg.c_bound.unwrap_or(0.0), p.actions, p.horizon, self.iota),
        };
        Bonus {
            over: b.over * p.bonus_scale,
            under: b.under * p.bonus_scale,
        }
    }

    /// Preparation, learning and sampling at step `h` in state `s`.
    pub fn act(&mut self, h: usize, s: usize) -> usize {
        let idx = h * self.states + s;
        let prep = self.ledgers[idx].prepare(self.cfg.skip_rule());
        self.alpha.ensure(prep.order + 1);
        let bonus = self.bonus(&self.ledgers[idx], prep.used, prep.holding);
        let eta = eta_gamma(prep.order, self.cfg.params.actions, prep.holding, self.iota);
        let weighting = self.cfg.weighting();
        let cell = &mut self.cells[idx];
        cell.value_update(&prep.fed, prep.used, bonus, weighting, &self.alpha);
        cell.policy_opt(&prep.fed, prep.used, prep.order, eta, weighting, &self.alpha);
        let policy = cell.policy();
        let action = sample_index(policy, &mut self.rng);
        let ct = &mut self.trace.cells[idx];
        ct.usable_at_visit.push(prep.used);
        ct.policies.extend_from_slice(policy);
        ct.actions.push(action);
        self.pending.push(PendingVisit {
            h,
            s,
            action,
            prob: policy[action],
            gamma: eta,
        });
        action
    }

    /// Store this episode's visits and receive rewards due by `episode`.
    /// `path` holds `s_0 … s_H`; `rewards[h]` and `delays[h]` belong to the
    /// visit at step `h`.
    pub fn finish_episode(&mut self, episode: u64, path: &[usize], rewards: &[f64], delays: &[Delay]) {
        let pending = std::mem::take(&mut self.pending);
        assert_eq!(pending.len(), self.horizon, "one action per step");
        for p in pending {
            let (v_over, v_under) = if p.h + 1 < self.horizon {
                let next = &self.cells[(p.h + 1) * self.states + path[p.h + 1]];
                (next.v_over, next.v_under)
            } else {
                (0.0, 0.0)
            };
            debug_assert_eq!(path[p.h], p.s);
            let idx = p.h * self.states + p.s;
            self.ledgers[idx].record_visit(episode, p.action, p.prob, v_over, v_under, p.gamma, delays[p.h], rewards[p.h]);
            self.trace.cells[idx].delays.push(delays[p.h]);
        }
        for l in &mut self.ledgers {
            l.deliver(episode);
        }
        let s0 = path[0];
        let cell = &self.cells[s0];
        let ledger = &self.ledgers[s0];
        self.trace.diag.push(EpisodeDiag {
            v_over: cell.v_over,
            v_under: cell.v_under,
            used: ledger.used(),
            happened: ledger.happened(),
            holding: ledger.holding(),
            skipped: ledger.skipped().len() as u64,
        });
    }

    /// Close the learner and return its trace.
    pub fn into_trace(mut self) -> AgentTrace {
        for (ct, l) in self.trace.cells.iter_mut().zip(&self.ledgers) {
            ct.consumed = l.consumed().to_vec();
            ct.holding = l.holding_history().to_vec();
            ct.skipped = l.skipped().to_vec();
        }
        self.trace
    }
}

/// Hook called after every episode, for run-time invariant checks.
pub trait EpisodeObserver {
    fn after_episode(&mut self, episode: u64, agents: &[AgentLearner]) -> Result<()>;
}

/// Observer that does nothing.
pub struct NoObserver;

impl EpisodeObserver for NoObserver {
    fn after_episode(&mut self, _: u64, _: &[AgentLearner]) -> Result<()> {
        Ok(())
    }
}

/// Train for `cfg.params.episodes` episodes.
pub fn run_training(game: &MarkovGame, plan: &DelayPlan, cfg: &VariantConfig, seed: u64) -> Result<TrainingTrace> {
    run_training_observed(game, plan, cfg, seed, &mut NoObserver)
}

pub fn run_training_observed(
    game: &MarkovGame,
    plan: &DelayPlan,
    cfg: &VariantConfig,
    seed: u64,
    observer: &mut dyn EpisodeObserver,
) -> Result<TrainingTrace> {
    cfg.check()?;
    plan.check()?;
    let report = crate::game::validate_game(game);
    if !report.is_ok() {
        return Err(Error::InvalidGame(report.violations[0].to_string()));
    }
    let p = &cfg.params;
    if p.horizon != game.horizon() || p.agents != game.agents() || p.states != game.states() || p.actions != game.max_actions() {
        return Err(Error::Config("parameter context does not match the game".into()));
    }
    let (hz, ns, na) = (game.horizon(), game.states(), game.agents());
    let mut agents: Vec<AgentLearner> = (0..na)
        .map(|m| AgentLearner::new(m, hz, ns, game.action_counts()[m], cfg, agent_action_stream(seed, m)))
        .collect();
    let mut env = environment_stream(seed);
    let mut visit_episodes = vec![Vec::new(); hz * ns];
    let mut paths = Vec::with_capacity(p.episodes as usize);
    let mut rewards = vec![vec![0.0; hz]; na];
    let mut delays = vec![vec![Delay::Finite(0); hz]; na];
    let mut joint = vec![0usize; na];
    for k in 1..=p.episodes {
        let mut path = Vec::with_capacity(hz + 1);
        let mut s = game.initial_state();
        path.push(s);
        for h in 0..hz {
            let cell = h * ns + s;
            visit_episodes[cell].push(k);
            let order = visit_episodes[cell].len() as u64;
            for (m, agent) in agents.iter_mut().enumerate() {
                joint[m] = agent.act(h, s);
                delays[m][h] = plan.delay(m, h, s, order);
            }
            let j = game.joint_index(&joint);
            for (m, r) in rewards.iter_mut().enumerate() {
                r[h] = game.reward(m, h, s, j);
            }
            s = sample_index(game.transition_row(h, s, j), &mut env);
            path.push(s);
        }
        for (m, agent) in agents.iter_mut().enumerate() {
            agent.finish_episode(k, &path, &rewards[m], &delays[m]);
        }
        observer.after_episode(k, &agents)?;
        paths.push(path);
    }
    Ok(TrainingTrace {
        version: TRACE_VERSION,
        variant: cfg.variant,
        horizon: hz,
        states: ns,
        action_counts: game.action_counts().to_vec(),
        initial_state: game.initial_state(),
        episodes: p.episodes,
        visit_episodes,
        paths,
        agents: agents.into_iter().map(AgentLearner::into_trace).collect(),
    })
}

/// Replay helper: joint action taken at step `h` of episode `k` according to
/// a trace (used to rebuild reward streams for isolated agents).
pub fn joint_action_at(trace: &TrainingTrace, k: u64, h: usize) -> JointAction {
    let s = trace.paths[(k - 1) as usize][h];
    let cell = trace.cell_index(h, s);
    let i = trace.visit_episodes[cell].partition_point(|&e| e < k);
    JointAction(trace.agents.iter().map(|a| a.cells[cell].actions[i]).collect())
}

