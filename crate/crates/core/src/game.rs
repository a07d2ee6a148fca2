//! Episodic tabular general-sum Markov games.
//!
//! Steps, states and actions are 0-based in code. A game with horizon `H` acts
//! at steps `0..H`; step `H` is terminal with zero value.
//!
//! Joint actions are flattened row-major in agent order, agent 0 slowest.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for transition rows summing to one.
pub const ROW_TOLERANCE: f64 = 1e-12;

/// Per-agent action indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointAction(pub Vec<usize>);

/// Dense game tensors.
///
/// `transition` is indexed `[h][s][joint][s']` and `reward` `[m][h][s][joint]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovGame {
    horizon: usize,
    states: usize,
    action_counts: Vec<usize>,
    initial_state: usize,
    transition: Vec<Vec<Vec<Vec<f64>>>>,
    reward: Vec<Vec<Vec<Vec<f64>>>>,
    #[serde(skip)]
    cache: Option<Box<Flat>>,
}

/// Flattened copies for hot loops.
#[derive(Debug, Clone, PartialEq)]
struct Flat {
    joint: usize,
    strides: Vec<usize>,
    transition: Vec<f64>,
    reward: Vec<f64>,
}

/// One step of a rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: usize,
    pub action: JointAction,
    pub rewards: Vec<f64>,
    pub next_state: usize,
}

/// A full or partial rollout, one entry per acted step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeTrace {
    /// Step at which the rollout started.
    pub start_step: usize,
    pub steps: Vec<StepRecord>,
}

impl EpisodeTrace {
    /// Sum of agent `m`'s rewards.
    pub fn return_of(&self, m: usize) -> f64 {
        self.steps.iter().map(|s| s.rewards[m]).sum()
    }
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    RowSum { h: usize, s: usize, joint: usize, sum: f64 },
    NegativeProbability { h: usize, s: usize, joint: usize, next: usize, value: f64 },
    RewardOutOfRange { m: usize, h: usize, s: usize, joint: usize, value: f64 },
    InitialStateOutOfRange { state: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::RowSum { h, s, joint, sum } => {
                write!(f, "transition row (h={h}, s={s}, a={joint}) sums to {sum}")
            }
            Violation::NegativeProbability { h, s, joint, next, value } => {
                write!(f, "negative transition probability {value} at (h={h}, s={s}, a={joint}, s'={next})")
            }
            Violation::RewardOutOfRange { m, h, s, joint, value } => {
                write!(f, "reward out of [0,1]: {value} at (m={m}, h={h}, s={s}, a={joint})")
            }
            Violation::InitialStateOutOfRange { state } => write!(f, "initial state {state} out of range"),
        }
    }
}

/// Result of [`validate_game`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl MarkovGame {
    /// Build a game, checking tensor shapes only. Use [`validate_game`] for
    /// the probabilistic invariants.
    pub fn new(
        horizon: usize,
        states: usize,
        action_counts: Vec<usize>,
        initial_state: usize,
        transition: Vec<Vec<Vec<Vec<f64>>>>,
        reward: Vec<Vec<Vec<Vec<f64>>>>,
    ) -> Result<Self> {
        if horizon == 0 || states == 0 || action_counts.is_empty() || action_counts.iter().any(|&a| a == 0) {
            return Err(Error::Dimension("H, S, M and every A_m must be positive".into()));
        }
        let joint: usize = action_counts.iter().product();
        let shape_err = |what: &str| Error::Dimension(format!("{what} has the wrong shape"));
        if transition.len() != horizon {
            return Err(shape_err("transition"));
        }
        for th in &transition {
            if th.len() != states || th.iter().any(|ts| ts.len() != joint || ts.iter().any(|row| row.len() != states)) {
                return Err(shape_err("transition"));
            }
        }
        if reward.len() != action_counts.len() {
            return Err(shape_err("reward"));
        }
        for rm in &reward {
            if rm.len() != horizon || rm.iter().any(|rh| rh.len() != states || rh.iter().any(|rs| rs.len() != joint)) {
                return Err(shape_err("reward"));
            }
        }
        let mut g = Self {
            horizon,
            states,
            action_counts,
            initial_state,
            transition,
            reward,
            cache: None,
        };
        g.build_cache();
        Ok(g)
    }

    fn build_cache(&mut self) {
        let joint: usize = self.action_counts.iter().product();
        let m = self.action_counts.len();
        let mut strides = vec![1; m];
        for i in (0..m.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.action_counts[i + 1];
        }
        let transition = self.transition.iter().flatten().flatten().flatten().copied().collect();
        let reward = self.reward.iter().flatten().flatten().flatten().copied().collect();
        self.cache = Some(Box::new(Flat {
            joint,
            strides,
            transition,
            reward,
        }));
    }

    fn flat(&self) -> &Flat {
        self.cache.as_deref().expect("cache is built on construction")
    }

    /// Load from the JSON document layout and rebuild caches.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: MarkovGame = serde_json::from_str(text)?;
        Self::new(
            raw.horizon,
            raw.states,
            raw.action_counts,
            raw.initial_state,
            raw.transition,
            raw.reward,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn states(&self) -> usize {
        self.states
    }
    pub fn agents(&self) -> usize {
        self.action_counts.len()
    }
    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }
    pub fn max_actions(&self) -> usize {
        self.action_counts.iter().copied().max().unwrap_or(0)
    }
    pub fn initial_state(&self) -> usize {
        self.initial_state
    }
    /// Number of joint actions `∏_m A_m`.
    pub fn joint_count(&self) -> usize {
        self.flat().joint
    }

    /// Row-major flat index of a joint action.
    pub fn joint_index(&self, a: &[usize]) -> usize {
        let st = &self.flat().strides;
        a.iter().zip(st).map(|(x, s)| x * s).sum()
    }

    /// Inverse of [`Self::joint_index`].
    pub fn joint_from_index(&self, mut idx: usize) -> Vec<usize> {
        let st = &self.flat().strides;
        st.iter()
            .map(|s| {
                let a = idx / s;
                idx %= s;
                a
            })
            .collect()
    }

    /// Action of agent `m` inside flat joint index `idx`.
    #[inline]
    pub fn agent_action(&self, idx: usize, m: usize) -> usize {
        let f = self.flat();
        (idx / f.strides[m]) % self.action_counts[m]
    }

    /// Transition row over next states.
    #[inline]
    pub fn transition_row(&self, h: usize, s: usize, joint: usize) -> &[f64] {
        let f = self.flat();
        let start = ((h * self.states + s) * f.joint + joint) * self.states;
        &f.transition[start..start + self.states]
    }

    #[inline]
    pub fn reward(&self, m: usize, h: usize, s: usize, joint: usize) -> f64 {
        let f = self.flat();
        f.reward[((m * self.horizon + h) * self.states + s) * f.joint + joint]
    }

    fn check_step(&self, h: usize, s: usize, a: &JointAction) -> Result<()> {
        if h >= self.horizon {
            return Err(Error::IndexOutOfRange {
                what: "step",
                index: h,
                limit: self.horizon,
            });
        }
        if s >= self.states {
            return Err(Error::IndexOutOfRange {
                what: "state",
                index: s,
                limit: self.states,
            });
        }
        if a.0.len() != self.agents() {
            return Err(Error::Dimension(format!(
                "joint action has {} entries for {} agents",
                a.0.len(),
                self.agents()
            )));
        }
        for (&am, &cnt) in a.0.iter().zip(&self.action_counts) {
            if am >= cnt {
                return Err(Error::IndexOutOfRange {
                    what: "action",
                    index: am,
                    limit: cnt,
                });
            }
        }
        Ok(())
    }

    /// Rewards of every agent and a sampled next state.
    pub fn step<R: Rng + ?Sized>(&self, h: usize, s: usize, a: &JointAction, rng: &mut R) -> Result<(Vec<f64>, usize)> {
        self.check_step(h, s, a)?;
        let j = self.joint_index(&a.0);
        let rewards = (0..self.agents()).map(|m| self.reward(m, h, s, j)).collect();
        let next = sample_index(self.transition_row(h, s, j), rng);
        Ok((rewards, next))
    }
}

/// Inverse-CDF draw from a probability vector. The final index absorbs
/// rounding slack.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding slack: last index with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Check every probabilistic invariant of `g`.
pub fn validate_game(g: &MarkovGame) -> ValidationReport {
    let mut violations = Vec::new();
    if g.initial_state >= g.states {
        violations.push(Violation::InitialStateOutOfRange { state: g.initial_state });
    }
    for (h, th) in g.transition.iter().enumerate() {
        for (s, ts) in th.iter().enumerate() {
            for (joint, row) in ts.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOLERANCE {
                    violations.push(Violation::RowSum { h, s, joint, sum });
                }
                for (next, &value) in row.iter().enumerate() {
                    if value < 0.0 || !value.is_finite() {
                        violations.push(Violation::NegativeProbability { h, s, joint, next, value });
                    }
                }
            }
        }
    }
    for (m, rm) in g.reward.iter().enumerate() {
        for (h, rh) in rm.iter().enumerate() {
            for (s, rs) in rh.iter().enumerate() {
                for (joint, &value) in rs.iter().enumerate() {
                    if !(0.0..=1.0).contains(&value) {
                        violations.push(Violation::RewardOutOfRange { m, h, s, joint, value });
                    }
                }
            }
        }
    }
    ValidationReport { violations }
}

/// The three-agent coordination game used in the experiments.
///
/// States `s1 = 0`, `s2 = 1`, `s3 = 2`, two actions each, two steps. At `s1`
/// and `s3` every agent receives 1 if all play action 0, 0.5 if all play
/// action 1, and 0 otherwise; `s2` pays nothing. From `s1` at the first step
/// the game moves to `s3` after a positive reward and to `s2` otherwise; `s2`
/// and `s3` self-loop. Second-step rows self-loop and are never used for
/// value since the episode ends after step 2.
pub fn appendix_b_game() -> MarkovGame {
    let agents = 3;
    let horizon = 2;
    let states = 3;
    let joint = 8;
    let pay = |j: usize| match j {
        0 => 1.0,
        7 => 0.5,
        _ => 0.0,
    };
    let mut transition = vec![vec![vec![vec![0.0; states]; joint]; states]; horizon];
    let mut reward = vec![vec![vec![vec![0.0; joint]; states]; horizon]; agents];
    for h in 0..horizon {
        for s in 0..states {
            for j in 0..joint {
                let next = match (h, s) {
                    (0, 0) | (0, 2) => {
                        if pay(j) > 0.0 {
                            2
                        } else {
                            1
                        }
                    }
                    _ => s,
                };
                transition[h][s][j][next] = 1.0;
                if s != 1 {
                    for r in reward.iter_mut() {
                        r[h][s][j] = pay(j);
                    }
                }
            }
        }
    }
    MarkovGame::new(horizon, states, vec![2; agents], 0, transition, reward).expect("well-shaped")
}

/// Random game with Dirichlet(1)-like transition rows and uniform rewards,
/// used for fuzzing and oracle checks.
pub fn random_game<R: Rng + ?Sized>(rng: &mut R, horizon: usize, states: usize, action_counts: Vec<usize>) -> MarkovGame {
    let joint: usize = action_counts.iter().product();
    let agents = action_counts.len();
    let transition = (0..horizon)
        .map(|_| {
            (0..states)
                .map(|_| {
                    (0..joint)
                        .map(|_| {
                            let raw: Vec<f64> = (0..states).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
                            let total: f64 = raw.iter().sum();
                            let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
                            let head: f64 = row[..states - 1].iter().sum();
                            row[states - 1] = (1.0 - head).max(0.0);
                            row
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let reward = (0..agents)
        .map(|_| (0..horizon).map(|_| (0..states).map(|_| (0..joint).map(|_| rng.gen::<f64>()).collect()).collect()).collect())
        .collect();
    MarkovGame::new(horizon, states, action_counts, 0, transition, reward).expect("well-shaped")
}
