//! Correlated output policy built from a training trace.
//!
//! A device episode `k` and the current (h, s) determine a count `n`. The
//! device draws a component `i` with probability `α_n^i`, every agent plays
//! its stored policy from visit `i`, and the device moves to that visit's
//! episode `k_i`. With a shared device all agents use the same `n` (the
//! maximum of their counts) and the same draws. Per-agent devices are used
//! for the naive variant, whose agents fed visits in different orders.

use rand::Rng;

use crate::error::{Error, Result};
use crate::game::{sample_index, EpisodeTrace, JointAction, MarkovGame, StepRecord};
use crate::params::AlphaTable;
use crate::rng::StreamRng;
use crate::training::{TrainingTrace, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceMode {
    /// One device shared by all agents.
    Shared,
    /// Independent device per agent, indexed by that agent's processing order.
    PerAgent,
}

/// Component chosen by the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    /// Stored policy of visit (or processed index) `i`.
    Visit(u64),
    /// No usable data: uniform play, device unchanged.
    Fallback,
}

/// One weighted entry of [`CertifiedPolicy::mixture_at`].
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureEntry {
    pub component: Component,
    pub weight: f64,
    /// Device episode after this draw.
    pub next_episode: u64,
}

#[derive(Debug, Clone)]
pub struct CertifiedPolicy<'a> {
    trace: &'a TrainingTrace,
    alpha: AlphaTable,
    mode: DeviceMode,
    uniform: Vec<Vec<f64>>,
}

impl<'a> CertifiedPolicy<'a> {
    /// Device mode follows the variant: per-agent for naive, shared otherwise.
    pub fn new(trace: &'a TrainingTrace) -> Self {
        let mode = match trace.variant {
            Variant::Naive => DeviceMode::PerAgent,
            _ => DeviceMode::Shared,
        };
        Self::with_mode(trace, mode)
    }

    pub fn with_mode(trace: &'a TrainingTrace, mode: DeviceMode) -> Self {
        let max_visits = trace.visit_episodes.iter().map(Vec::len).max().unwrap_or(0) as u64;
        Self {
            trace,
            alpha: AlphaTable::with_capacity(trace.horizon, max_visits + 1),
            mode,
            uniform: trace.action_counts.iter().map(|&a| vec![1.0 / a as f64; a]).collect(),
        }
    }

    pub fn trace(&self) -> &TrainingTrace {
        self.trace
    }
    pub fn mode(&self) -> DeviceMode {
        self.mode
    }
    pub fn alpha(&self) -> &AlphaTable {
        &self.alpha
    }
    pub fn episodes(&self) -> u64 {
        self.trace.episodes
    }
    pub fn agents(&self) -> usize {
        self.trace.agents.len()
    }

    /// Number of visits of (h, s) in episodes `≤ k`.
    pub fn visits_up_to(&self, h: usize, s: usize, k: u64) -> usize {
        self.trace.visit_episodes[self.trace.cell_index(h, s)].partition_point(|&e| e <= k)
    }

    /// `n_m(h, s, k)`: agent `m`'s usable count in force at episode `k`.
    pub fn usable_count(&self, m: usize, h: usize, s: usize, k: u64) -> u64 {
        let v = self.visits_up_to(h, s, k);
        if v == 0 {
            0
        } else {
            self.trace.agents[m].cells[self.trace.cell_index(h, s)].usable_at_visit[v - 1]
        }
    }

    /// `max_m n_m(h, s, k)`.
    pub fn joint_count(&self, h: usize, s: usize, k: u64) -> u64 {
        (0..self.agents()).map(|m| self.usable_count(m, h, s, k)).max().unwrap_or(0)
    }

    /// Count the device of agent `m` uses at (h, s, k) under the current mode.
    pub fn device_count(&self, m: usize, h: usize, s: usize, k: u64) -> u64 {
        match self.mode {
            DeviceMode::Shared => self.joint_count(h, s, k),
            DeviceMode::PerAgent => self.usable_count(m, h, s, k),
        }
    }

    /// Happening order of component `i` for agent `m`.
    fn visit_of(&self, m: usize, h: usize, s: usize, i: u64) -> u64 {
        match self.mode {
            DeviceMode::Shared => i,
            DeviceMode::PerAgent => self.trace.agents[m].cells[self.trace.cell_index(h, s)].consumed[(i - 1) as usize],
        }
    }

    /// Device episode after drawing component `i` (agent `m`'s view).
    pub fn component_episode(&self, m: usize, h: usize, s: usize, i: u64) -> u64 {
        let v = self.visit_of(m, h, s, i);
        self.trace.visit_episodes[self.trace.cell_index(h, s)][(v - 1) as usize]
    }

    /// Policy agent `m` plays under component `c` at (h, s).
    pub fn component_policy(&self, m: usize, h: usize, s: usize, c: Component) -> &[f64] {
        match c {
            Component::Fallback => &self.uniform[m],
            Component::Visit(i) => {
                let v = self.visit_of(m, h, s, i);
                self.trace.agents[m].policy(h, s, self.trace.states, v)
            }
        }
    }

    /// Exact device distribution at (h, s, k) for the shared device.
    pub fn mixture_at(&self, h: usize, s: usize, k: u64) -> Result<Vec<MixtureEntry>> {
        if self.mode != DeviceMode::Shared {
            return Err(Error::Unsupported("a joint mixture exists only for a shared device".into()));
        }
        Ok(self.agent_mixture(0, h, s, k))
    }

    /// Distribution of agent `m`'s device draw at (h, s, k).
    pub fn agent_mixture(&self, m: usize, h: usize, s: usize, k: u64) -> Vec<MixtureEntry> {
        let n = self.device_count(m, h, s, k);
        if n == 0 {
            return vec![MixtureEntry {
                component: Component::Fallback,
                weight: 1.0,
                next_episode: k,
            }];
        }
        (1..=n)
            .map(|i| MixtureEntry {
                component: Component::Visit(i),
                weight: self.alpha.weight(n, i),
                next_episode: self.component_episode(m, h, s, i),
            })
            .collect()
    }

    /// Draw `i ~ α_n^·` by inverting `P(i ≤ j) = ∏_{l=j+1}^n (1 - α_l)`.
    pub fn sample_component<R: Rng + ?Sized>(&self, n: u64, rng: &mut R) -> u64 {
        let u: f64 = rng.gen();
        let cdf = |j: u64| -> f64 {
            if j >= n {
                1.0
            } else {
                // α_n^1 + … + α_n^j = α_n^j / α_j · (…) collapses to a product ratio
                (self.alpha.weight(n, j) / self.alpha.alpha(j)).min(1.0)
            }
        };
        let (mut lo, mut hi) = (1u64, n);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if u < cdf(mid) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        lo
    }

    /// One draw of agent `m`'s device at (h, s, k): component and next episode.
    pub fn draw<R: Rng + ?Sized>(&self, m: usize, h: usize, s: usize, k: u64, rng: &mut R) -> (Component, u64) {
        let n = self.device_count(m, h, s, k);
        if n == 0 {
            return (Component::Fallback, k);
        }
        let i = self.sample_component(n, rng);
        (Component::Visit(i), self.component_episode(m, h, s, i))
    }

    /// One rollout of the output policy with a single stream for all draws.
    pub fn execute_output<R: Rng + ?Sized>(&self, game: &MarkovGame, rng: &mut R) -> Result<EpisodeTrace> {
        let starts: Vec<u64> = match self.mode {
            DeviceMode::Shared => vec![rng.gen_range(1..=self.episodes()); 1],
            DeviceMode::PerAgent => (0..self.agents()).map(|_| rng.gen_range(1..=self.episodes())).collect(),
        };
        self.rollout(game, &starts, 0, game.initial_state(), rng)
    }

    /// Rollout from step `h` in state `s` with the device at episode `k`.
    pub fn execute_subpolicy<R: Rng + ?Sized>(&self, game: &MarkovGame, k: u64, h: usize, s: usize, rng: &mut R) -> Result<EpisodeTrace> {
        if k == 0 || k > self.episodes() {
            return Err(Error::IndexOutOfRange {
                what: "episode",
                index: k as usize,
                limit: self.episodes() as usize,
            });
        }
        let starts = match self.mode {
            DeviceMode::Shared => vec![k],
            DeviceMode::PerAgent => vec![k; self.agents()],
        };
        self.rollout(game, &starts, h, s, rng)
    }

    fn rollout<R: Rng + ?Sized>(&self, game: &MarkovGame, starts: &[u64], h0: usize, s0: usize, rng: &mut R) -> Result<EpisodeTrace> {
        let na = self.agents();
        let mut ks = starts.to_vec();
        let mut s = s0;
        let mut out = EpisodeTrace {
            start_step: h0,
            steps: Vec::with_capacity(game.horizon() - h0),
        };
        for h in h0..game.horizon() {
            let comps: Vec<Component> = match self.mode {
                DeviceMode::Shared => {
                    let (c, next) = self.draw(0, h, s, ks[0], rng);
                    ks[0] = next;
                    vec![c; na]
                }
                DeviceMode::PerAgent => (0..na)
                    .map(|m| {
                        let (c, next) = self.draw(m, h, s, ks[m], rng);
                        ks[m] = next;
                        c
                    })
                    .collect(),
            };
            let action: Vec<usize> = (0..na)
                .map(|m| sample_index(self.component_policy(m, h, s, comps[m]), rng))
                .collect();
            let (rewards, next) = game.step(h, s, &JointAction(action.clone()), rng)?;
            out.steps.push(StepRecord {
                state: s,
                action: JointAction(action),
                rewards,
                next_state: next,
            });
            s = next;
        }
        Ok(out)
    }

    /// Rollout with one device stream per agent, a separate action stream per
    /// agent and an environment stream. With a shared device every agent
    /// computes the draw from its own copy of the device stream; the copies
    /// must agree, which is checked at every step.
    pub fn execute_decentralized(
        &self,
        game: &MarkovGame,
        devices: &mut [StreamRng],
        actions: &mut [StreamRng],
        env: &mut StreamRng,
    ) -> Result<(EpisodeTrace, Vec<Vec<u64>>)> {
        let na = self.agents();
        if devices.len() != na || actions.len() != na {
            return Err(Error::Dimension("need one device and one action stream per agent".into()));
        }
        let mut ks: Vec<u64> = devices.iter_mut().map(|d| d.gen_range(1..=self.episodes())).collect();
        let mut chains = vec![ks.clone()];
        let mut s = game.initial_state();
        let mut out = EpisodeTrace::default();
        for h in 0..game.horizon() {
            let mut comps = Vec::with_capacity(na);
            for m in 0..na {
                let (c, next) = self.draw(m, h, s, ks[m], &mut devices[m]);
                ks[m] = next;
                comps.push(c);
            }
            if self.mode == DeviceMode::Shared && comps.iter().any(|c| *c != comps[0]) {
                return Err(Error::Invariant("agents disagree on the shared device draw".into()));
            }
            chains.push(ks.clone());
            let action: Vec<usize> = (0..na)
                .map(|m| sample_index(self.component_policy(m, h, s, comps[m]), &mut actions[m]))
                .collect();
            let (rewards, next) = game.step(h, s, &JointAction(action.clone()), env)?;
            out.steps.push(StepRecord {
                state: s,
                action: JointAction(action),
                rewards,
                next_state: next,
            });
            s = next;
        }
        Ok((out, chains))
    }
}
