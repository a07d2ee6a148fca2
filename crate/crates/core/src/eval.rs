//! Exact and Monte-Carlo evaluation of certified output policies.
//!
//! Values under a shared device are computed for every device episode at
//! once: for fixed (h, s) the value at count `n` obeys
//! `U(n) = (1 - α_n) U(n-1) + α_n G(n)`, where `G(i)` is the value of
//! component `i`. Best responses run a dynamic program over the deviator's
//! belief about the device episode. Under per-agent devices the agents'
//! beliefs stay independent given the observed joint actions, so the same
//! program runs over one belief per agent.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::certify::{CertifiedPolicy, Component, DeviceMode};
use crate::error::{Error, Result};
use crate::game::MarkovGame;

/// Where evaluation starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Start {
    /// Full output policy: device episode uniform over `1..=K`, initial state.
    Output,
    /// Truncated policy from step `h` in state `s` with the device at `k`.
    Episode { k: u64, h: usize, s: usize },
}

/// What the deviating agent observes between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Observation {
    /// States, its own actions and the other agents' actions.
    #[default]
    JointActions,
    /// States and its own actions.
    StatesOnly,
    /// Additionally the device component at every step (upper bound).
    Device,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub observation: Observation,
    /// Belief entries below this probability are dropped (0 keeps all).
    pub prune: f64,
    /// Largest admissible number of belief-tree nodes per evaluation.
    pub max_tree_nodes: u64,
    /// Largest admissible number of stored visits per (h, s).
    pub max_components: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            observation: Observation::JointActions,
            prune: 0.0,
            max_tree_nodes: 1_000_000,
            max_components: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentGap {
    pub v_pi: f64,
    pub v_br: f64,
    /// Standard error of `v_pi` (Monte-Carlo only).
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub agents: Vec<AgentGap>,
    pub gap: f64,
    pub method: Method,
    /// Half-width of a 4-sigma band on the gap (Monte-Carlo only).
    pub radius: Option<f64>,
}

/// Tolerance below zero tolerated for a gap.
pub const GAP_TOLERANCE: f64 = 1e-9;

/// Normalised sparse distribution over device episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    entries: Vec<(u64, f64)>,
}

impl Belief {
    pub fn point(k: u64) -> Self {
        Self { entries: vec![(k, 1.0)] }
    }

    pub fn uniform(k_max: u64) -> Self {
        let p = 1.0 / k_max as f64;
        Self {
            entries: (1..=k_max).map(|k| (k, p)).collect(),
        }
    }

    /// Normalise unnormalised weights, merging equal episodes and dropping
    /// entries whose probability falls below `prune`. Returns the belief and
    /// the total mass, or `None` when the mass is zero.
    pub fn from_weights(mut w: Vec<(u64, f64)>, prune: f64) -> Option<(Self, f64)> {
        w.retain(|e| e.1 > 0.0);
        if w.is_empty() {
            return None;
        }
        if !w.windows(2).all(|p| p[0].0 < p[1].0) {
            w.sort_by_key(|e| e.0);
            let mut merged: Vec<(u64, f64)> = Vec::with_capacity(w.len());
            for (k, p) in w {
                match merged.last_mut() {
                    Some(last) if last.0 == k => last.1 += p,
                    _ => merged.push((k, p)),
                }
            }
            w = merged;
        }
        let total: f64 = w.iter().map(|e| e.1).sum();
        if total <= 0.0 {
            return None;
        }
        for e in &mut w {
            e.1 /= total;
        }
        if prune > 0.0 {
            w.retain(|e| e.1 >= prune);
            let kept: f64 = w.iter().map(|e| e.1).sum();
            if kept <= 0.0 {
                return None;
            }
            for e in &mut w {
                e.1 /= kept;
            }
        }
        Some((Self { entries: w }, total))
    }

    pub fn entries(&self) -> &[(u64, f64)] {
        &self.entries
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }
}

/// Weighted component after expanding a belief at some (h, s).
#[derive(Debug, Clone, Copy)]
struct Weighted {
    comp: Component,
    weight: f64,
    next: u64,
}

/// Indexing of joint actions as (own action, opponents' profile).
#[derive(Debug, Clone)]
struct Split {
    own: usize,
    opp: usize,
    /// `joint[a * opp + o]`.
    joint: Vec<usize>,
    /// Opponent actions of profile `o` as (agent, action) pairs.
    profile: Vec<Vec<(usize, usize)>>,
}

impl Split {
    fn new(game: &MarkovGame, m: usize) -> Self {
        let own = game.action_counts()[m];
        let opp = game.joint_count() / own;
        let mut joint = vec![0; own * opp];
        let mut profile = vec![Vec::new(); opp];
        let mut counter = vec![0usize; own];
        for j in 0..game.joint_count() {
            let a = game.agent_action(j, m);
            let o = counter[a];
            counter[a] += 1;
            joint[a * opp + o] = j;
            if a == 0 {
                profile[o] = (0..game.agents())
                    .filter(|&x| x != m)
                    .map(|x| (x, game.agent_action(j, x)))
                    .collect();
            }
        }
        Self { own, opp, joint, profile }
    }
}

/// Exact evaluator bound to one certified policy and game.
pub struct Evaluator<'a> {
    cert: &'a CertifiedPolicy<'a>,
    game: &'a MarkovGame,
    opts: EvalOptions,
    /// Device counts `[device][cell][k]`; one device when shared.
    counts: Vec<Vec<Vec<u32>>>,
    /// Shared device: `[cell][n * M + m]` values of the output policy.
    values: Vec<Vec<f64>>,
    /// Shared device: `[m][cell][n * A_m + a]` expected immediate reward of
    /// own action `a` against the mixture at count `n`.
    reward_tables: Vec<Vec<Vec<f64>>>,
    /// Per-agent devices: `[m][cell][n * A_m + a]` marginal action probabilities.
    marginal_tables: Vec<Vec<Vec<f64>>>,
    splits: Vec<Split>,
}

impl<'a> Evaluator<'a> {
    pub fn new(cert: &'a CertifiedPolicy<'a>, game: &'a MarkovGame, opts: EvalOptions) -> Result<Self> {
        let trace = cert.trace();
        if trace.horizon != game.horizon() || trace.states != game.states() || trace.action_counts != game.action_counts() {
            return Err(Error::Dimension("trace does not match the game".into()));
        }
        for v in &trace.visit_episodes {
            if v.len() as u64 > opts.max_components {
                return Err(Error::Guard {
                    what: "visits per (h, s)".into(),
                    value: v.len() as u128,
                    limit: opts.max_components as u128,
                });
            }
        }
        let branching = match (cert.mode(), opts.observation) {
            (_, Observation::Device) => 1,
            (DeviceMode::Shared, Observation::StatesOnly) => (game.max_actions() * game.states()) as u128,
            _ => (game.joint_count() * game.states()) as u128,
        };
        let nodes: u128 = (0..game.horizon() as u32).map(|h| branching.saturating_pow(h)).sum();
        if nodes > opts.max_tree_nodes as u128 {
            return Err(Error::Guard {
                what: "belief-tree nodes".into(),
                value: nodes,
                limit: opts.max_tree_nodes as u128,
            });
        }
        let devices = match cert.mode() {
            DeviceMode::Shared => 1,
            DeviceMode::PerAgent => cert.agents(),
        };
        let cells = game.horizon() * game.states();
        let kmax = cert.episodes();
        let mut counts = vec![vec![vec![0u32; kmax as usize + 1]; cells]; devices];
        for (d, dc) in counts.iter_mut().enumerate() {
            for (cell, row) in dc.iter_mut().enumerate() {
                let (h, s) = (cell / game.states(), cell % game.states());
                for (k, slot) in row.iter_mut().enumerate().skip(1) {
                    *slot = cert.device_count(d, h, s, k as u64) as u32;
                }
            }
        }
        let splits = (0..game.agents()).map(|m| Split::new(game, m)).collect();
        let mut ev = Self {
            cert,
            game,
            opts,
            counts,
            values: Vec::new(),
            reward_tables: Vec::new(),
            marginal_tables: Vec::new(),
            splits,
        };
        match cert.mode() {
            DeviceMode::Shared => {
                ev.build_value_tables();
                ev.build_reward_tables();
            }
            DeviceMode::PerAgent => ev.build_marginal_tables(),
        }
        Ok(ev)
    }

    fn cell(&self, h: usize, s: usize) -> usize {
        h * self.game.states() + s
    }

    fn count(&self, device: usize, h: usize, s: usize, k: u64) -> u64 {
        let d = if self.counts.len() == 1 { 0 } else { device };
        u64::from(self.counts[d][self.cell(h, s)][k as usize])
    }

    fn max_count(&self, device: usize, h: usize, s: usize) -> u64 {
        let d = if self.counts.len() == 1 { 0 } else { device };
        u64::from(*self.counts[d][self.cell(h, s)].iter().max().unwrap_or(&0))
    }

    /// Probability of joint action `j` when every agent plays component `c`.
    fn joint_prob(&self, h: usize, s: usize, c: Component, j: usize) -> f64 {
        let mut p = 1.0;
        for m in 0..self.game.agents() {
            p *= self.cert.component_policy(m, h, s, c)[self.game.agent_action(j, m)];
        }
        p
    }

    // ---------- shared-device values ----------

    /// Value vector at (h, s) with the device at `k`, shared device.
    fn shared_value(&self, h: usize, s: usize, k: u64) -> Vec<f64> {
        let na = self.game.agents();
        if h == self.game.horizon() {
            return vec![0.0; na];
        }
        let n = self.count(0, h, s, k) as usize;
        if n > 0 {
            return self.values[self.cell(h, s)][n * na..(n + 1) * na].to_vec();
        }
        self.component_value(h, s, Component::Fallback, k)
    }

    /// `G` for component `c` whose continuation device episode is `next`.
    fn component_value(&self, h: usize, s: usize, c: Component, next: u64) -> Vec<f64> {
        let na = self.game.agents();
        let mut g = vec![0.0; na];
        let mut cont: HashMap<usize, Vec<f64>> = HashMap::new();
        for j in 0..self.game.joint_count() {
            let p = self.joint_prob(h, s, c, j);
            if p == 0.0 {
                continue;
            }
            for (m, gm) in g.iter_mut().enumerate() {
                *gm += p * self.game.reward(m, h, s, j);
            }
            if h + 1 < self.game.horizon() {
                for (s2, &q) in self.game.transition_row(h, s, j).iter().enumerate() {
                    if q == 0.0 {
                        continue;
                    }
                    let v = cont.entry(s2).or_insert_with(|| self.shared_value(h + 1, s2, next));
                    for (gm, vm) in g.iter_mut().zip(v.iter()) {
                        *gm += p * q * vm;
                    }
                }
            }
        }
        g
    }

    fn build_value_tables(&mut self) {
        let (hz, ns, na) = (self.game.horizon(), self.game.states(), self.game.agents());
        self.values = vec![Vec::new(); hz * ns];
        let alpha = self.cert.alpha();
        for h in (0..hz).rev() {
            for s in 0..ns {
                let nmax = self.max_count(0, h, s) as usize;
                let mut u = vec![0.0; (nmax + 1) * na];
                for i in 1..=nmax {
                    let next = self.cert.component_episode(0, h, s, i as u64);
                    let g = self.component_value(h, s, Component::Visit(i as u64), next);
                    let a = alpha.alpha(i as u64);
                    for m in 0..na {
                        u[i * na + m] = (1.0 - a) * u[(i - 1) * na + m] + a * g[m];
                    }
                }
                let cell = self.cell(h, s);
                self.values[cell] = u;
            }
        }
    }

    /// `Σ_o p_c(o) r_m(h, s, (a, o))` for every own action `a`.
    fn own_rewards(&self, m: usize, h: usize, s: usize, c: Component) -> Vec<f64> {
        let sp = &self.splits[m];
        let mut out = vec![0.0; sp.own];
        for o in 0..sp.opp {
            let p = self.opp_prob(m, h, s, c, o);
            if p == 0.0 {
                continue;
            }
            for (a, slot) in out.iter_mut().enumerate() {
                *slot += p * self.game.reward(m, h, s, sp.joint[a * sp.opp + o]);
            }
        }
        out
    }

    fn opp_prob(&self, m: usize, h: usize, s: usize, c: Component, o: usize) -> f64 {
        let mut p = 1.0;
        for &(x, a) in &self.splits[m].profile[o] {
            p *= self.cert.component_policy(x, h, s, c)[a];
        }
        p
    }

    fn build_reward_tables(&mut self) {
        let (hz, ns, na) = (self.game.horizon(), self.game.states(), self.game.agents());
        let alpha = self.cert.alpha();
        let mut tables = vec![vec![Vec::new(); hz * ns]; na];
        for (m, tm) in tables.iter_mut().enumerate() {
            let own = self.splits[m].own;
            for h in 0..hz {
                for s in 0..ns {
                    let nmax = self.max_count(0, h, s) as usize;
                    let mut u = vec![0.0; (nmax + 1) * own];
                    u[..own].copy_from_slice(&self.own_rewards(m, h, s, Component::Fallback));
                    for i in 1..=nmax {
                        let r = self.own_rewards(m, h, s, Component::Visit(i as u64));
                        let a = alpha.alpha(i as u64);
                        for x in 0..own {
                            let prev = if i == 1 { 0.0 } else { u[(i - 1) * own + x] };
                            u[i * own + x] = (1.0 - a) * prev + a * r[x];
                        }
                    }
                    tm[h * ns + s] = u;
                }
            }
        }
        self.reward_tables = tables;
    }

    fn build_marginal_tables(&mut self) {
        let (hz, ns, na) = (self.game.horizon(), self.game.states(), self.game.agents());
        let alpha = self.cert.alpha();
        let mut tables = vec![vec![Vec::new(); hz * ns]; na];
        for (m, tm) in tables.iter_mut().enumerate() {
            let own = self.game.action_counts()[m];
            for h in 0..hz {
                for s in 0..ns {
                    let nmax = self.max_count(m, h, s) as usize;
                    let mut u = vec![0.0; (nmax + 1) * own];
                    u[..own].copy_from_slice(self.cert.component_policy(m, h, s, Component::Fallback));
                    for i in 1..=nmax {
                        let p = self.cert.component_policy(m, h, s, Component::Visit(i as u64));
                        let a = alpha.alpha(i as u64);
                        for x in 0..own {
                            let prev = if i == 1 { 0.0 } else { u[(i - 1) * own + x] };
                            u[i * own + x] = (1.0 - a) * prev + a * p[x];
                        }
                    }
                    tm[h * ns + s] = u;
                }
            }
        }
        self.marginal_tables = tables;
    }

    // ---------- belief machinery ----------

    /// Component weights of `belief` at (h, s) for device `device`.
    fn expand(&self, device: usize, h: usize, s: usize, belief: &Belief) -> Vec<Weighted> {
        let alpha = self.cert.alpha();
        let mut out = Vec::new();
        let mut by_count: Vec<f64> = Vec::new();
        for &(k, p) in belief.entries() {
            let n = self.count(device, h, s, k) as usize;
            if n == 0 {
                out.push(Weighted {
                    comp: Component::Fallback,
                    weight: p,
                    next: k,
                });
            } else {
                if by_count.len() <= n {
                    by_count.resize(n + 1, 0.0);
                }
                by_count[n] += p;
            }
        }
        if by_count.is_empty() {
            return out;
        }
        // R(i) = B(i) α_i + ρ_i R(i+1) gives Σ_{n ≥ i} B(n) α_n^i
        let top = by_count.len() - 1;
        let mut r = 0.0;
        let mut comps = Vec::with_capacity(top);
        for i in (1..=top).rev() {
            r = if i == top { 0.0 } else { alpha.ratio(i as u64) * r };
            r += by_count[i] * alpha.alpha(i as u64);
            if r > 0.0 {
                comps.push(Weighted {
                    comp: Component::Visit(i as u64),
                    weight: r,
                    next: self.cert.component_episode(device, h, s, i as u64),
                });
            }
        }
        comps.reverse();
        out.extend(comps);
        out
    }

    fn initial_belief(&self, start: Start) -> (usize, usize, Belief) {
        match start {
            Start::Output => (0, self.game.initial_state(), Belief::uniform(self.cert.episodes())),
            Start::Episode { k, h, s } => (h, s, Belief::point(k)),
        }
    }

    fn check_start(&self, start: Start) -> Result<()> {
        if let Start::Episode { k, h, s } = start {
            if k == 0 || k > self.cert.episodes() || h >= self.game.horizon() || s >= self.game.states() {
                return Err(Error::Config(format!("invalid start (k={k}, h={h}, s={s})")));
            }
        }
        Ok(())
    }

    // ---------- public evaluators ----------

    /// `V^π` of every agent.
    pub fn values(&self, start: Start) -> Result<Vec<f64>> {
        self.check_start(start)?;
        match self.cert.mode() {
            DeviceMode::Shared => Ok(match start {
                Start::Episode { k, h, s } => self.shared_value(h, s, k),
                Start::Output => {
                    let na = self.game.agents();
                    let mut acc = vec![0.0; na];
                    let kmax = self.cert.episodes();
                    for k in 1..=kmax {
                        let v = self.shared_value(0, self.game.initial_state(), k);
                        for (a, x) in acc.iter_mut().zip(v) {
                            *a += x;
                        }
                    }
                    acc.iter().map(|a| a / kmax as f64).collect()
                }
            }),
            DeviceMode::PerAgent => {
                let (h, s, b) = self.initial_belief(start);
                let beliefs = vec![b; self.game.agents()];
                Ok(self.indep_value(h, s, &beliefs))
            }
        }
    }

    pub fn value(&self, m: usize, start: Start) -> Result<f64> {
        Ok(self.values(start)?[m])
    }

    /// Shared device: values at `(0, s_0)` for every device episode `k`.
    pub fn value_curve(&self) -> Result<Vec<Vec<f64>>> {
        if self.cert.mode() != DeviceMode::Shared {
            return Err(Error::Unsupported("value curves need a shared device".into()));
        }
        Ok((1..=self.cert.episodes())
            .map(|k| self.shared_value(0, self.game.initial_state(), k))
            .collect())
    }

    /// Best-response value of agent `m` against the other agents' parts of the output policy.
    pub fn best_response(&self, m: usize, start: Start) -> Result<f64> {
        self.check_start(start)?;
        match (self.cert.mode(), self.opts.observation) {
            (DeviceMode::Shared, Observation::Device) => Ok(match start {
                Start::Episode { k, h, s } => self.device_br(m, h, s, k),
                Start::Output => {
                    let kmax = self.cert.episodes();
                    (1..=kmax)
                        .map(|k| self.device_br(m, 0, self.game.initial_state(), k))
                        .sum::<f64>()
                        / kmax as f64
                }
            }),
            (DeviceMode::Shared, obs) => {
                let (h, s, b) = self.initial_belief(start);
                Ok(self.shared_br(m, h, s, &b, obs))
            }
            (DeviceMode::PerAgent, Observation::JointActions) => {
                let (h, s, b) = self.initial_belief(start);
                let beliefs = vec![b; self.game.agents()];
                Ok(self.indep_br(m, h, s, &beliefs))
            }
            (DeviceMode::PerAgent, obs) => Err(Error::Unsupported(format!(
                "best response with per-agent devices under {obs:?} observations"
            ))),
        }
    }

    /// Values and best responses of every agent.
    pub fn gap(&self, start: Start) -> Result<GapReport> {
        let v = self.values(start)?;
        let agents: Vec<AgentGap> = v
            .iter()
            .enumerate()
            .map(|(m, &v_pi)| {
                Ok(AgentGap {
                    v_pi,
                    v_br: self.best_response(m, start)?,
                    stderr: None,
                })
            })
            .collect::<Result<_>>()?;
        let gap = agents.iter().map(|a| a.v_br - a.v_pi).fold(f64::NEG_INFINITY, f64::max);
        Ok(GapReport {
            agents,
            gap,
            method: Method::Exact,
            radius: None,
        })
    }

    // ---------- shared-device best responses ----------

    fn shared_br(&self, m: usize, h: usize, s: usize, belief: &Belief, obs: Observation) -> f64 {
        let sp = &self.splits[m];
        if h + 1 == self.game.horizon() {
            // last step: own-reward tables indexed by count
            let table = &self.reward_tables[m][self.cell(h, s)];
            let mut best = f64::NEG_INFINITY;
            for a in 0..sp.own {
                let v: f64 = belief
                    .entries()
                    .iter()
                    .map(|&(k, p)| p * table[self.count(0, h, s, k) as usize * sp.own + a])
                    .sum();
                best = best.max(v);
            }
            return best;
        }
        let comps = self.expand(0, h, s, belief);
        let opp: Vec<Vec<f64>> = comps
            .iter()
            .map(|c| (0..sp.opp).map(|o| self.opp_prob(m, h, s, c.comp, o)).collect())
            .collect();
        let mut immediate = vec![0.0; sp.own];
        for (c, po) in comps.iter().zip(&opp) {
            for (o, &p) in po.iter().enumerate() {
                let w = c.weight * p;
                for (a, imm) in immediate.iter_mut().enumerate() {
                    *imm += w * self.game.reward(m, h, s, sp.joint[a * sp.opp + o]);
                }
            }
        }
        let ns = self.game.states();
        let mut totals = immediate;
        match obs {
            Observation::JointActions => {
                for o in 0..sp.opp {
                    let weights: Vec<(u64, f64)> = comps.iter().zip(&opp).map(|(c, po)| (c.next, c.weight * po[o])).collect();
                    let Some((post, mass)) = Belief::from_weights(weights, self.opts.prune) else {
                        continue;
                    };
                    let mut child: Vec<Option<f64>> = vec![None; ns];
                    for (a, total) in totals.iter_mut().enumerate() {
                        let row = self.game.transition_row(h, s, sp.joint[a * sp.opp + o]);
                        for (s2, &q) in row.iter().enumerate() {
                            if q == 0.0 {
                                continue;
                            }
                            let v = *child[s2].get_or_insert_with(|| self.shared_br(m, h + 1, s2, &post, obs));
                            *total += mass * q * v;
                        }
                    }
                }
            }
            Observation::StatesOnly => {
                for (a, total) in totals.iter_mut().enumerate() {
                    for s2 in 0..ns {
                        let weights: Vec<(u64, f64)> = comps
                            .iter()
                            .zip(&opp)
                            .map(|(c, po)| {
                                let lik: f64 = po
                                    .iter()
                                    .enumerate()
                                    .map(|(o, &p)| p * self.game.transition_row(h, s, sp.joint[a * sp.opp + o])[s2])
                                    .sum();
                                (c.next, c.weight * lik)
                            })
                            .collect();
                        if let Some((post, mass)) = Belief::from_weights(weights, self.opts.prune) {
                            *total += mass * self.shared_br(m, h + 1, s2, &post, obs);
                        }
                    }
                }
            }
            Observation::Device => unreachable!("handled by device_br"),
        }
        totals.into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Best response when the deviator also sees the device; backward
    /// induction with the same count recursion as the values.
    fn device_br(&self, m: usize, h: usize, s: usize, k: u64) -> f64 {
        if h == self.game.horizon() {
            return 0.0;
        }
        let n = self.count(0, h, s, k);
        if n == 0 {
            return self.device_component(m, h, s, Component::Fallback, k);
        }
        let alpha = self.cert.alpha();
        (1..=n)
            .map(|i| {
                let next = self.cert.component_episode(0, h, s, i);
                alpha.weight(n, i) * self.device_component(m, h, s, Component::Visit(i), next)
            })
            .sum()
    }

    fn device_component(&self, m: usize, h: usize, s: usize, c: Component, next: u64) -> f64 {
        let sp = &self.splits[m];
        let mut cont: HashMap<usize, f64> = HashMap::new();
        let mut best = f64::NEG_INFINITY;
        for a in 0..sp.own {
            let mut v = 0.0;
            for o in 0..sp.opp {
                let p = self.opp_prob(m, h, s, c, o);
                if p == 0.0 {
                    continue;
                }
                let j = sp.joint[a * sp.opp + o];
                v += p * self.game.reward(m, h, s, j);
                if h + 1 < self.game.horizon() {
                    for (s2, &q) in self.game.transition_row(h, s, j).iter().enumerate() {
                        if q > 0.0 {
                            let c2 = *cont.entry(s2).or_insert_with(|| self.device_br(m, h + 1, s2, next));
                            v += p * q * c2;
                        }
                    }
                }
            }
            best = best.max(v);
        }
        best
    }

    // ---------- per-agent devices ----------

    /// Marginal action distribution of agent `x` at (h, s) under `belief`.
    fn marginal(&self, x: usize, h: usize, s: usize, belief: &Belief) -> Vec<f64> {
        let own = self.game.action_counts()[x];
        let table = &self.marginal_tables[x][self.cell(h, s)];
        let mut out = vec![0.0; own];
        for &(k, p) in belief.entries() {
            let n = self.count(x, h, s, k) as usize;
            for (a, o) in out.iter_mut().enumerate() {
                *o += p * table[n * own + a];
            }
        }
        out
    }

    /// Posterior of agent `x`'s device after it played each of its actions.
    fn posteriors(&self, x: usize, h: usize, s: usize, belief: &Belief) -> Vec<Option<(Belief, f64)>> {
        let comps = self.expand(x, h, s, belief);
        (0..self.game.action_counts()[x])
            .map(|a| {
                let w: Vec<(u64, f64)> = comps
                    .iter()
                    .map(|c| (c.next, c.weight * self.cert.component_policy(x, h, s, c.comp)[a]))
                    .collect();
                Belief::from_weights(w, self.opts.prune)
            })
            .collect()
    }

    fn indep_value(&self, h: usize, s: usize, beliefs: &[Belief]) -> Vec<f64> {
        let na = self.game.agents();
        let last = h + 1 == self.game.horizon();
        let marg: Vec<Vec<f64>> = (0..na).map(|x| self.marginal(x, h, s, &beliefs[x])).collect();
        let post: Vec<Vec<Option<(Belief, f64)>>> = if last {
            Vec::new()
        } else {
            (0..na).map(|x| self.posteriors(x, h, s, &beliefs[x])).collect()
        };
        let mut out = vec![0.0; na];
        let mut children: HashMap<(Vec<usize>, usize), Vec<f64>> = HashMap::new();
        for j in 0..self.game.joint_count() {
            let acts: Vec<usize> = (0..na).map(|x| self.game.agent_action(j, x)).collect();
            let p: f64 = acts.iter().enumerate().map(|(x, &a)| marg[x][a]).product();
            if p == 0.0 {
                continue;
            }
            for (m, o) in out.iter_mut().enumerate() {
                *o += p * self.game.reward(m, h, s, j);
            }
            if last {
                continue;
            }
            let Some(next_beliefs) = acts
                .iter()
                .enumerate()
                .map(|(x, &a)| post[x][a].as_ref().map(|b| b.0.clone()))
                .collect::<Option<Vec<Belief>>>()
            else {
                continue;
            };
            for (s2, &q) in self.game.transition_row(h, s, j).iter().enumerate() {
                if q == 0.0 {
                    continue;
                }
                let v = children
                    .entry((acts.clone(), s2))
                    .or_insert_with(|| self.indep_value(h + 1, s2, &next_beliefs));
                for (o, vm) in out.iter_mut().zip(v.iter()) {
                    *o += p * q * vm;
                }
            }
        }
        out
    }

    fn indep_br(&self, m: usize, h: usize, s: usize, beliefs: &[Belief]) -> f64 {
        let sp = &self.splits[m];
        let last = h + 1 == self.game.horizon();
        let marg: Vec<Vec<f64>> = (0..self.game.agents())
            .map(|x| if x == m { Vec::new() } else { self.marginal(x, h, s, &beliefs[x]) })
            .collect();
        let post: Vec<Vec<Option<(Belief, f64)>>> = if last {
            Vec::new()
        } else {
            (0..self.game.agents())
                .map(|x| if x == m { Vec::new() } else { self.posteriors(x, h, s, &beliefs[x]) })
                .collect()
        };
        let mut totals = vec![0.0; sp.own];
        for o in 0..sp.opp {
            let prof = &sp.profile[o];
            let q: f64 = prof.iter().map(|&(x, a)| marg[x][a]).product();
            if q == 0.0 {
                continue;
            }
            let next_beliefs: Option<Vec<Belief>> = if last {
                None
            } else {
                let mut nb = beliefs.to_vec();
                let mut ok = true;
                for &(x, a) in prof {
                    match &post[x][a] {
                        Some((b, _)) => nb[x] = b.clone(),
                        None => ok = false,
                    }
                }
                ok.then_some(nb)
            };
            let mut child: HashMap<usize, f64> = HashMap::new();
            for (a, total) in totals.iter_mut().enumerate() {
                let j = sp.joint[a * sp.opp + o];
                *total += q * self.game.reward(m, h, s, j);
                if let Some(nb) = &next_beliefs {
                    for (s2, &pr) in self.game.transition_row(h, s, j).iter().enumerate() {
                        if pr == 0.0 {
                            continue;
                        }
                        let v = *child.entry(s2).or_insert_with(|| self.indep_br(m, h + 1, s2, nb));
                        *total += q * pr * v;
                    }
                }
            }
        }
        totals.into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Exact `V^π_m` from `start` with default options.
pub fn exact_value(cert: &CertifiedPolicy<'_>, game: &MarkovGame, m: usize, start: Start) -> Result<f64> {
    Evaluator::new(cert, game, EvalOptions::default())?.value(m, start)
}

/// Exact best-response value of agent `m` with the given options.
pub fn exact_best_response(cert: &CertifiedPolicy<'_>, game: &MarkovGame, m: usize, start: Start, opts: EvalOptions) -> Result<f64> {
    Evaluator::new(cert, game, opts)?.best_response(m, start)
}

/// CCE-gap report. With [`Method::MonteCarlo`] the policy values are
/// estimated from `rollouts` rollouts while best responses stay exact.
pub fn cce_gap<R: Rng + ?Sized>(
    cert: &CertifiedPolicy<'_>,
    game: &MarkovGame,
    start: Start,
    method: Method,
    opts: EvalOptions,
    rollouts: usize,
    rng: &mut R,
) -> Result<GapReport> {
    let ev = Evaluator::new(cert, game, opts)?;
    match method {
        Method::Exact => ev.gap(start),
        Method::MonteCarlo => {
            let mut agents = Vec::new();
            let mut radius: f64 = 0.0;
            for m in 0..game.agents() {
                let (mean, se) = mc_value(cert, game, m, start, rollouts, rng)?;
                radius = radius.max(4.0 * se);
                agents.push(AgentGap {
                    v_pi: mean,
                    v_br: ev.best_response(m, start)?,
                    stderr: Some(se),
                });
            }
            let gap = agents.iter().map(|a| a.v_br - a.v_pi).fold(f64::NEG_INFINITY, f64::max);
            Ok(GapReport {
                agents,
                gap,
                method,
                radius: Some(radius),
            })
        }
    }
}

/// Sample mean and standard error of agent `m`'s return over `rollouts` rollouts.
pub fn mc_value<R: Rng + ?Sized>(
    cert: &CertifiedPolicy<'_>,
    game: &MarkovGame,
    m: usize,
    start: Start,
    rollouts: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if rollouts == 0 {
        return Err(Error::Config("at least one rollout is required".into()));
    }
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..rollouts {
        let t = match start {
            Start::Output => cert.execute_output(game, rng)?,
            Start::Episode { k, h, s } => cert.execute_subpolicy(game, k, h, s, rng)?,
        };
        let r = t.return_of(m);
        sum += r;
        sq += r * r;
    }
    let n = rollouts as f64;
    let mean = sum / n;
    let var = if rollouts > 1 { ((sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    Ok((mean, (var / n).sqrt()))
}

/// Exhaustive enumeration used to check the evaluators on tiny instances.
/// Everything is recomputed from the raw trace with direct formulas.
pub mod oracle {
    use crate::certify::DeviceMode;
    use crate::error::{Error, Result};
    use crate::eval::{Observation, Start};
    use crate::game::MarkovGame;
    use crate::training::TrainingTrace;

    /// Largest admissible number of enumerated deviation policies.
    pub const MAX_POLICIES: u128 = 1 << 20;

    fn alpha(i: u64, h: usize) -> f64 {
        (h as f64 + 1.0) / (h as f64 + i as f64)
    }

    /// `α_n^i` by its product definition.
    pub fn mixture_weight(n: u64, i: u64, horizon: usize) -> f64 {
        if n == 0 {
            return if i == 0 { 1.0 } else { 0.0 };
        }
        if i == 0 {
            return 0.0;
        }
        let mut w = alpha(i, horizon);
        for j in i + 1..=n {
            w *= 1.0 - alpha(j, horizon);
        }
        w
    }

    struct View<'a> {
        trace: &'a TrainingTrace,
        game: &'a MarkovGame,
        mode: DeviceMode,
    }

    impl View<'_> {
        fn count(&self, m: usize, h: usize, s: usize, k: u64) -> u64 {
            let cell = h * self.trace.states + s;
            let visits = self.trace.visit_episodes[cell].iter().filter(|&&e| e <= k).count();
            let of = |x: usize| {
                if visits == 0 {
                    0
                } else {
                    self.trace.agents[x].cells[cell].usable_at_visit[visits - 1]
                }
            };
            match self.mode {
                DeviceMode::Shared => (0..self.trace.agents.len()).map(of).max().unwrap_or(0),
                DeviceMode::PerAgent => of(m),
            }
        }

        fn visit(&self, m: usize, h: usize, s: usize, i: u64) -> u64 {
            match self.mode {
                DeviceMode::Shared => i,
                DeviceMode::PerAgent => self.trace.agents[m].cells[h * self.trace.states + s].consumed[(i - 1) as usize],
            }
        }

        /// (weight, policy, next episode) draws of agent `m`'s device.
        fn draws(&self, m: usize, h: usize, s: usize, k: u64) -> Vec<(f64, Vec<f64>, u64)> {
            let n = self.count(m, h, s, k);
            let a = self.trace.action_counts[m];
            if n == 0 {
                return vec![(1.0, vec![1.0 / a as f64; a], k)];
            }
            (1..=n)
                .map(|i| {
                    let v = self.visit(m, h, s, i);
                    let cell = h * self.trace.states + s;
                    let pol = self.trace.agents[m].cells[cell].policies[(v as usize - 1) * a..v as usize * a].to_vec();
                    let next = self.trace.visit_episodes[cell][(v - 1) as usize];
                    (mixture_weight(n, i, self.trace.horizon), pol, next)
                })
                .collect()
        }

        /// Joint distribution over (policies per agent, next device state).
        fn joint_draws(&self, h: usize, s: usize, ks: &[u64]) -> Vec<(f64, Vec<Vec<f64>>, Vec<u64>)> {
            let na = self.trace.agents.len();
            match self.mode {
                DeviceMode::Shared => {
                    let n = self.count(0, h, s, ks[0]);
                    if n == 0 {
                        let pols = (0..na).map(|x| vec![1.0 / self.trace.action_counts[x] as f64; self.trace.action_counts[x]]).collect();
                        return vec![(1.0, pols, ks.to_vec())];
                    }
                    let cell = h * self.trace.states + s;
                    (1..=n)
                        .map(|i| {
                            let pols = (0..na)
                                .map(|x| {
                                    let a = self.trace.action_counts[x];
                                    self.trace.agents[x].cells[cell].policies[(i as usize - 1) * a..i as usize * a].to_vec()
                                })
                                .collect();
                            let next = self.trace.visit_episodes[cell][(i - 1) as usize];
                            (mixture_weight(n, i, self.trace.horizon), pols, vec![next])
                        })
                        .collect()
                }
                DeviceMode::PerAgent => {
                    let mut acc: Vec<(f64, Vec<Vec<f64>>, Vec<u64>)> = vec![(1.0, Vec::new(), Vec::new())];
                    for (x, &k) in ks.iter().enumerate() {
                        let d = self.draws(x, h, s, k);
                        let mut nxt = Vec::new();
                        for (w0, p0, k0) in &acc {
                            for (w, p, kn) in &d {
                                let mut p1 = p0.clone();
                                p1.push(p.clone());
                                let mut k1 = k0.clone();
                                k1.push(*kn);
                                nxt.push((w0 * w, p1, k1));
                            }
                        }
                        acc = nxt;
                    }
                    acc
                }
            }
        }

        fn starts(&self, start: Start) -> (usize, usize, Vec<(f64, Vec<u64>)>) {
            let na = self.trace.agents.len();
            let devices = match self.mode {
                DeviceMode::Shared => 1,
                DeviceMode::PerAgent => na,
            };
            match start {
                Start::Episode { k, h, s } => (h, s, vec![(1.0, vec![k; devices])]),
                Start::Output => {
                    let kk = self.trace.episodes;
                    let mut out: Vec<(f64, Vec<u64>)> = vec![(1.0, Vec::new())];
                    for _ in 0..devices {
                        let mut nxt = Vec::new();
                        for (w, ks) in &out {
                            for k in 1..=kk {
                                let mut k1 = ks.clone();
                                k1.push(k);
                                nxt.push((w / kk as f64, k1));
                            }
                        }
                        out = nxt;
                    }
                    (0, self.game.initial_state(), out)
                }
            }
        }
    }

    fn joint_index(game: &MarkovGame, acts: &[usize]) -> usize {
        game.joint_index(acts)
    }

    /// Expected return of agent `m`, with agent `m`'s action chosen by
    /// `deviation` when given.
    fn expand(
        v: &View<'_>,
        m: usize,
        h: usize,
        s: usize,
        ks: &[u64],
        history: &mut Vec<usize>,
        deviation: Option<&dyn Fn(usize, &[usize]) -> usize>,
        obs: Observation,
    ) -> f64 {
        let game = v.game;
        if h == game.horizon() {
            return 0.0;
        }
        let na = game.agents();
        let mut total = 0.0;
        for (w, pols, next) in v.joint_draws(h, s, ks) {
            for j in 0..game.joint_count() {
                let acts = game.joint_from_index(j);
                let mut p = w;
                for x in 0..na {
                    if x == m {
                        if let Some(dev) = deviation {
                            if dev(h, history) != acts[x] {
                                p = 0.0;
                            }
                            continue;
                        }
                    }
                    p *= pols[x][acts[x]];
                }
                if p == 0.0 {
                    continue;
                }
                let jj = joint_index(game, &acts);
                total += p * game.reward(m, h, s, jj);
                for (s2, &q) in game.transition_row(h, s, jj).iter().enumerate() {
                    if q == 0.0 {
                        continue;
                    }
                    let mark = history.len();
                    if obs == Observation::JointActions {
                        history.push(jj);
                    } else {
                        history.push(acts[m]);
                    }
                    history.push(s2);
                    total += p * q * expand(v, m, h + 1, s2, &next, history, deviation, obs);
                    history.truncate(mark);
                }
            }
        }
        total
    }

    fn view<'a>(trace: &'a TrainingTrace, game: &'a MarkovGame, mode: DeviceMode) -> View<'a> {
        View { trace, game, mode }
    }

    /// `V^π_m` by total enumeration of device draws, actions and transitions.
    pub fn brute_force_value(trace: &TrainingTrace, game: &MarkovGame, mode: DeviceMode, m: usize, start: Start) -> f64 {
        let v = view(trace, game, mode);
        let (h, s, starts) = v.starts(start);
        starts
            .iter()
            .map(|(w, ks)| w * expand(&v, m, h, s, ks, &mut Vec::new(), None, Observation::JointActions))
            .sum()
    }

    /// Best deterministic history-dependent deviation of agent `m`, found by
    /// enumerating every such policy. Histories record either the joint
    /// action (`JointActions`) or the own action (`StatesOnly`) followed by
    /// the next state.
    pub fn brute_force_best_response(
        trace: &TrainingTrace,
        game: &MarkovGame,
        mode: DeviceMode,
        m: usize,
        start: Start,
        obs: Observation,
    ) -> Result<f64> {
        if obs == Observation::Device {
            return Err(Error::Unsupported("device-observing deviations are not enumerated".into()));
        }
        let v = view(trace, game, mode);
        let (h0, s0, starts) = v.starts(start);
        let per_step = match obs {
            Observation::JointActions => game.joint_count(),
            _ => game.action_counts()[m],
        } * game.states();
        // histories reachable at each step, as flat keys
        let mut histories: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new()]];
        for _ in h0 + 1..game.horizon() {
            let prev = histories.last().expect("non-empty");
            let mut nxt = Vec::new();
            for hist in prev {
                for x in 0..per_step {
                    let mut hh = hist.clone();
                    let (a, s2) = (x / game.states(), x % game.states());
                    hh.push(a);
                    hh.push(s2);
                    nxt.push(hh);
                }
            }
            histories.push(nxt);
        }
        let slots: Vec<(usize, Vec<usize>)> = histories
            .iter()
            .enumerate()
            .flat_map(|(d, hs)| hs.iter().map(move |x| (h0 + d, x.clone())))
            .collect();
        let own = game.action_counts()[m] as u128;
        let total = own.checked_pow(slots.len() as u32).unwrap_or(u128::MAX);
        if total > MAX_POLICIES {
            return Err(Error::Guard {
                what: "deviation policies".into(),
                value: total,
                limit: MAX_POLICIES,
            });
        }
        let index: std::collections::HashMap<(usize, Vec<usize>), usize> =
            slots.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect();
        let mut best = f64::NEG_INFINITY;
        let mut choice = vec![0usize; slots.len()];
        for code in 0..total {
            let mut c = code;
            for slot in choice.iter_mut() {
                *slot = (c % own) as usize;
                c /= own;
            }
            let dev = |h: usize, hist: &[usize]| -> usize { choice[index[&(h, hist.to_vec())]] };
            let val: f64 = starts
                .iter()
                .map(|(w, ks)| w * expand(&v, m, h0, s0, ks, &mut Vec::new(), Some(&dev), obs))
                .sum();
            best = best.max(val);
        }
        Ok(best)
    }
}
