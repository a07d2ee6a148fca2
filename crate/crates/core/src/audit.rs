//! Training observers that check ledger invariants after every episode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{AgentLearner, EpisodeObserver};

/// Fails as soon as some agent consumed a visit out of happening order.
#[derive(Debug, Default)]
pub struct AlignmentAudit {
    pub episodes: u64,
}

impl EpisodeObserver for AlignmentAudit {
    fn after_episode(&mut self, episode: u64, agents: &[AgentLearner]) -> Result<()> {
        for agent in agents {
            for (cell, ledger) in agent.ledgers().iter().enumerate() {
                let consumed = ledger.consumed();
                if let Some(pos) = consumed.iter().enumerate().position(|(j, &i)| i != j as u64 + 1) {
                    return Err(Error::Invariant(format!(
                        "episode {episode}: agent {} cell {cell} consumed visit {} at position {}",
                        agent.index(),
                        consumed[pos],
                        pos + 1
                    )));
                }
            }
        }
        self.episodes = episode;
        Ok(())
    }
}

/// Largest observed ratio of each skip bound (value / bound) and the number
/// of violations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipBoundReport {
    pub checks: u64,
    pub skipped_ratio: f64,
    pub blocking_ratio: f64,
    pub phi_ratio: f64,
    pub violations: u64,
    /// First few violations, for diagnostics.
    pub examples: Vec<String>,
}

impl SkipBoundReport {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Checks, for every (agent, step, state) ledger after every episode, with
/// `T` the holding counter:
/// skipped visits `≤ 2C√T`, largest blocking lag `≤ ⁴√(4T) + 1`, and
/// `Σ φ ≤ C·T`.
#[derive(Debug)]
pub struct SkipBoundAudit {
    c: f64,
    pub report: SkipBoundReport,
}

impl SkipBoundAudit {
    pub fn new(c: f64) -> Self {
        Self {
            c,
            report: SkipBoundReport::default(),
        }
    }

    fn check(&mut self, what: &str, value: f64, bound: f64, at: impl FnOnce() -> String) -> f64 {
        if value > bound {
            self.report.violations += 1;
            if self.report.examples.len() < 10 {
                self.report.examples.push(format!("{}: {what} = {value} > {bound}", at()));
            }
        }
        if bound > 0.0 {
            value / bound
        } else if value > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }
}

impl EpisodeObserver for SkipBoundAudit {
    fn after_episode(&mut self, episode: u64, agents: &[AgentLearner]) -> Result<()> {
        for agent in agents {
            for (cell, ledger) in agent.ledgers().iter().enumerate() {
                if ledger.happened() == 0 {
                    continue;
                }
                let t = ledger.holding() as f64;
                let at = || format!("episode {episode} agent {} cell {cell}", agent.index());
                let r = self.check("skipped", ledger.skipped().len() as f64, 2.0 * self.c * t.sqrt(), at);
                self.report.skipped_ratio = self.report.skipped_ratio.max(r);
                let r = self.check("blocking", ledger.max_blocking() as f64, (4.0 * t).powf(0.25) + 1.0, at);
                self.report.blocking_ratio = self.report.blocking_ratio.max(r);
                let r = self.check("phi", ledger.phi_total() as f64, self.c * t, at);
                self.report.phi_ratio = self.report.phi_ratio.max(r);
                self.report.checks += 1;
            }
        }
        Ok(())
    }
}
