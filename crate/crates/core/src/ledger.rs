//! Per-(agent, step, state) visit ledger.
//!
//! Every visit of a fixed (h, s) is recorded with its happening order
//! `i = 1, 2, …`. A record starts unreceived, becomes received once its delay
//! elapses, and is fed to learning when it is usable. In aligned mode a
//! received record is usable only when every earlier record is received or
//! skipped, so all agents consume visits in the same order `1, 2, 3, …`. Naive
//! mode feeds records in arrival order.
//!
//! The running counters follow the training loop: `happened` is `n′`,
//! `used` is `n`, `holding` is `T`.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::delay::Delay;

/// Lifecycle of a visit record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VisitStatus {
    Unreceived,
    ReceivedUnusable,
    Ready,
    Consumed,
    Skipped,
}

/// One stored visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub order: u64,
    pub episode: u64,
    pub action: usize,
    /// Probability the sampling policy gave to `action`.
    pub prob: f64,
    pub v_over_next: f64,
    pub v_under_next: f64,
    /// Present once delivered.
    pub reward: Option<f64>,
    pub status: VisitStatus,
    /// Exploration rate frozen at visit time.
    pub gamma: f64,
    pub delay: Delay,
    /// Skipping metric `φ_i`.
    pub phi: u64,
}

/// Tuple handed to the learners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedVisit {
    pub order: u64,
    pub action: usize,
    pub prob: f64,
    pub v_over_next: f64,
    pub v_under_next: f64,
    pub reward: f64,
    pub gamma: f64,
    pub skipped: bool,
}

/// Promotion discipline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LedgerMode {
    /// Feed in happening order once every earlier visit is received or skipped.
    Aligned,
    /// Feed every received visit as soon as it arrives.
    Naive,
}

/// Quantity compared against the skip threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipMetric {
    /// Accumulated `φ_i = Σ_j (j - i)` over the visits `j` at which `i` was unreceived.
    PaperPhi,
    /// Plain lag `n′ - i`.
    PreviousNMinusI,
}

/// Which holding value the threshold `√T` uses during the scan of visit `n′`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdTiming {
    /// `T(n′-1) + |M|`, the value `T(n′)` would take if nothing were skipped.
    Provisional,
    /// `T(n′-1)`, the last committed value.
    Committed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRule {
    pub metric: SkipMetric,
    pub timing: ThresholdTiming,
}

/// Outcome of the preparation phase of one visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preparation {
    /// Happening order `n′` of the incoming visit.
    pub order: u64,
    /// Records to learn from, ascending by order in aligned mode.
    pub fed: Vec<FedVisit>,
    /// `n` after promotion.
    pub used: u64,
    /// `T(n′)`.
    pub holding: u64,
    /// `|M|` added to the holding counter.
    pub outstanding: u64,
    pub newly_skipped: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct VisitLedger {
    mode: LedgerMode,
    skip_value: f64,
    records: Vec<VisitRecord>,
    hidden: Vec<f64>,
    pending: BinaryHeap<Reverse<(u64, u64)>>,
    unreceived: BTreeSet<u64>,
    blocked: BTreeSet<u64>,
    arrivals: Vec<u64>,
    skipped_now: Vec<u64>,
    skipped: Vec<u64>,
    used: u64,
    holding: u64,
    holding_history: Vec<u64>,
    consumed: Vec<u64>,
    prepared: bool,
    phi_total: u64,
    max_blocking: u64,
}

impl VisitLedger {
    /// `horizon` is the optimistic bootstrap value given to skipped visits.
    pub fn new(mode: LedgerMode, horizon: usize) -> Self {
        Self {
            mode,
            skip_value: horizon as f64,
            records: Vec::new(),
            hidden: Vec::new(),
            pending: BinaryHeap::new(),
            unreceived: BTreeSet::new(),
            blocked: BTreeSet::new(),
            arrivals: Vec::new(),
            skipped_now: Vec::new(),
            skipped: Vec::new(),
            used: 0,
            holding: 0,
            holding_history: Vec::new(),
            consumed: Vec::new(),
            prepared: false,
            phi_total: 0,
            max_blocking: 0,
        }
    }

    pub fn mode(&self) -> LedgerMode {
        self.mode
    }
    /// `n′`: visits recorded so far.
    pub fn happened(&self) -> u64 {
        self.records.len() as u64
    }
    /// `n`: visits fed to learning so far (skips included).
    pub fn used(&self) -> u64 {
        self.used
    }
    /// Running holding counter `T`.
    pub fn holding(&self) -> u64 {
        self.holding
    }
    /// `T^i` for visit `i ≥ 1`.
    pub fn holding_at(&self, i: u64) -> u64 {
        self.holding_history[(i - 1) as usize]
    }
    pub fn holding_history(&self) -> &[u64] {
        &self.holding_history
    }
    pub fn records(&self) -> &[VisitRecord] {
        &self.records
    }
    pub fn record(&self, i: u64) -> &VisitRecord {
        &self.records[(i - 1) as usize]
    }
    /// Orders in the order they were fed to learning.
    pub fn consumed(&self) -> &[u64] {
        &self.consumed
    }
    /// Skipped set `𝒪`.
    pub fn skipped(&self) -> &[u64] {
        &self.skipped
    }
    /// `|M|`: unreceived plus received-but-unusable.
    pub fn outstanding(&self) -> u64 {
        (self.unreceived.len() + self.blocked.len() + self.arrivals.len()) as u64
    }
    pub fn unreceived(&self) -> impl Iterator<Item = u64> + '_ {
        self.unreceived.iter().copied()
    }
    /// Earliest unreceived order, or the incoming order when all are received.
    pub fn earliest_unreceived(&self) -> u64 {
        self.unreceived.first().copied().unwrap_or(self.happened() + 1)
    }
    /// `Σ_i φ_i`.
    pub fn phi_total(&self) -> u64 {
        self.phi_total
    }
    /// Largest number of visits any record stayed unreceived before being
    /// received or skipped, counted in visits of this (h, s).
    pub fn max_blocking(&self) -> u64 {
        self.max_blocking
    }

    /// Skipping block for the incoming visit. Must precede [`Self::promote_usable`].
    pub fn skip_scan(&mut self, rule: SkipRule) -> Vec<u64> {
        assert_eq!(self.mode, LedgerMode::Aligned, "skipping requires aligned mode");
        assert!(!self.prepared, "skip_scan called twice for one visit");
        let incoming = self.happened() + 1;
        if let Some(&first) = self.unreceived.first() {
            self.max_blocking = self.max_blocking.max(incoming - first);
        }
        let threshold = match rule.timing {
            ThresholdTiming::Provisional => self.holding + self.outstanding(),
            ThresholdTiming::Committed => self.holding,
        };
        let threshold = (threshold as f64).sqrt();
        let mut newly = Vec::new();
        let candidates: Vec<u64> = self.unreceived.iter().copied().collect();
        for i in candidates {
            let rec = &mut self.records[(i - 1) as usize];
            rec.phi += incoming - i;
            self.phi_total += incoming - i;
            let metric = match rule.metric {
                SkipMetric::PaperPhi => rec.phi,
                SkipMetric::PreviousNMinusI => incoming - i,
            };
            if metric as f64 > threshold {
                rec.status = VisitStatus::Skipped;
                self.unreceived.remove(&i);
                self.skipped_now.push(i);
                self.skipped.push(i);
                newly.push(i);
            }
        }
        newly
    }

    /// Move usable records to `F` and advance `n`.
    pub fn promote_usable(&mut self) -> Vec<FedVisit> {
        assert!(!self.prepared, "promote_usable called twice for one visit");
        let mut orders: Vec<u64> = match self.mode {
            LedgerMode::Aligned => {
                let bound = self.unreceived.first().copied().unwrap_or(u64::MAX);
                let mut f: Vec<u64> = self.blocked.range(..bound).copied().collect();
                for i in &f {
                    self.blocked.remove(i);
                }
                f.append(&mut self.skipped_now);
                f.sort_unstable();
                for (j, &i) in f.iter().enumerate() {
                    assert_eq!(i, self.used + 1 + j as u64, "happening-order discipline violated");
                }
                f
            }
            LedgerMode::Naive => std::mem::take(&mut self.arrivals),
        };
        self.used += orders.len() as u64;
        let fed = orders
            .drain(..)
            .map(|i| {
                let rec = &mut self.records[(i - 1) as usize];
                let skipped = rec.status == VisitStatus::Skipped;
                if !skipped {
                    rec.status = VisitStatus::Consumed;
                }
                self.consumed.push(i);
                FedVisit {
                    order: i,
                    action: rec.action,
                    prob: rec.prob,
                    v_over_next: if skipped { self.skip_value } else { rec.v_over_next },
                    v_under_next: if skipped { 0.0 } else { rec.v_under_next },
                    reward: if skipped { 0.0 } else { rec.reward.expect("consumed records are received") },
                    gamma: rec.gamma,
                    skipped,
                }
            })
            .collect();
        fed
    }

    /// `T(n′) = T(n′-1) + |M|`; completes the preparation of the incoming visit.
    pub fn holding_update(&mut self) -> u64 {
        assert!(!self.prepared, "holding_update called twice for one visit");
        let m = self.outstanding();
        self.holding += m;
        self.holding_history.push(self.holding);
        self.prepared = true;
        m
    }

    /// Full preparation: optional skip scan, promotion and holding update.
    pub fn prepare(&mut self, skip: Option<SkipRule>) -> Preparation {
        let order = self.happened() + 1;
        let newly_skipped = match skip {
            Some(rule) => self.skip_scan(rule),
            None => Vec::new(),
        };
        let fed = self.promote_usable();
        let outstanding = self.holding_update();
        Preparation {
            order,
            fed,
            used: self.used,
            holding: self.holding,
            outstanding,
            newly_skipped,
        }
    }

    /// Store the visit prepared last. Returns its order.
    #[allow(clippy::too_many_arguments)]
    pub fn record_visit(
        &mut self,
        episode: u64,
        action: usize,
        prob: f64,
        v_over_next: f64,
        v_under_next: f64,
        gamma: f64,
        delay: Delay,
        reward: f64,
    ) -> u64 {
        assert!(self.prepared, "record_visit without preparation");
        if let Some(last) = self.records.last() {
            assert!(last.episode < episode, "one visit per (h, s) per episode");
        }
        self.prepared = false;
        let order = self.happened() + 1;
        self.records.push(VisitRecord {
            order,
            episode,
            action,
            prob,
            v_over_next,
            v_under_next,
            reward: None,
            status: VisitStatus::Unreceived,
            gamma,
            delay,
            phi: 0,
        });
        self.hidden.push(reward);
        self.unreceived.insert(order);
        if let Some(due) = delay.due(episode) {
            self.pending.push(Reverse((due, order)));
        }
        order
    }

    /// End-of-episode delivery of every reward due by `episode`.
    /// Returns the orders whose rewards were attached.
    pub fn deliver(&mut self, episode: u64) -> Vec<u64> {
        let mut got = Vec::new();
        while let Some(&Reverse((due, i))) = self.pending.peek() {
            if due > episode {
                break;
            }
            self.pending.pop();
            let idx = (i - 1) as usize;
            if self.records[idx].status != VisitStatus::Unreceived {
                // skipped earlier; the late reward is discarded
                continue;
            }
            self.records[idx].reward = Some(self.hidden[idx]);
            self.unreceived.remove(&i);
            match self.mode {
                LedgerMode::Aligned => {
                    self.records[idx].status = VisitStatus::ReceivedUnusable;
                    self.blocked.insert(i);
                }
                LedgerMode::Naive => {
                    self.records[idx].status = VisitStatus::Ready;
                    self.arrivals.push(i);
                }
            }
            got.push(i);
        }
        got
    }
}

/// Direct evaluation of the `e` and `T` definitions from a full delay
/// schedule. Used as an oracle for the incremental ledger.
pub mod oracle {
    use super::{LedgerMode, VisitLedger};
    use crate::delay::Delay;
    use std::collections::BTreeSet;

    fn unreceived_at(delays: &[Delay], episodes: &[u64], j: usize, n: usize) -> bool {
        // visit j (1-based) is unreceived at the start of visit n's episode
        match delays[j - 1].due(episodes[j - 1]) {
            Some(due) => due > episodes[n - 1] - 1,
            None => true,
        }
    }

    /// `e^n = min{j ∈ [n-1] \ L : d_j + k_j > k_n - 1}`, or `n` if none.
    pub fn brute_force_e_excluding(delays: &[Delay], episodes: &[u64], n: usize, excluded: &BTreeSet<usize>) -> usize {
        (1..n)
            .filter(|j| !excluded.contains(j))
            .find(|&j| unreceived_at(delays, episodes, j, n))
            .unwrap_or(n)
    }

    pub fn brute_force_e(delays: &[Delay], episodes: &[u64], n: usize) -> usize {
        brute_force_e_excluding(delays, episodes, n, &BTreeSet::new())
    }

    /// `T^{n,L} = Σ_{i=1}^n (i - e^{i,L})`.
    pub fn brute_force_t_excluding(delays: &[Delay], episodes: &[u64], n: usize, excluded: &BTreeSet<usize>) -> u64 {
        (1..=n)
            .map(|i| (i - brute_force_e_excluding(delays, episodes, i, excluded)) as u64)
            .sum()
    }

    pub fn brute_force_t(delays: &[Delay], episodes: &[u64], n: usize) -> u64 {
        brute_force_t_excluding(delays, episodes, n, &BTreeSet::new())
    }

    /// Replay one aligned ledger without skipping and compare the earliest
    /// unreceived order and `T` with the direct definitions at every visit.
    /// Returns the first mismatch.
    pub fn compare_incremental(delays: &[Delay], episodes: &[u64]) -> Result<(), String> {
        let mut ledger = VisitLedger::new(LedgerMode::Aligned, 1);
        let mut t_direct = 0u64;
        for n in 1..=delays.len() {
            let k = episodes[n - 1];
            ledger.deliver(k - 1);
            let e_direct = brute_force_e(delays, episodes, n);
            let e = ledger.earliest_unreceived() as usize;
            if e != e_direct {
                return Err(format!("visit {n}: e = {e}, direct {e_direct}"));
            }
            ledger.prepare(None);
            t_direct += (n - e_direct) as u64;
            if ledger.holding() != t_direct || ledger.holding() != brute_force_t(delays, episodes, n) {
                return Err(format!("visit {n}: T = {}, direct {t_direct}", ledger.holding()));
            }
            ledger.record_visit(k, 0, 1.0, 0.0, 0.0, 0.0, delays[n - 1], 0.0);
            ledger.deliver(k);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;

    fn d(v: &[u64]) -> Vec<Delay> {
        v.iter().map(|&x| Delay::Finite(x)).collect()
    }

    /// One visit per episode; returns the preparations.
    fn drive(ledger: &mut VisitLedger, delays: &[Delay], skip: Option<SkipRule>, extra_episodes: u64) -> Vec<Preparation> {
        let mut preps = Vec::new();
        for (idx, &dl) in delays.iter().enumerate() {
            let k = idx as u64 + 1;
            preps.push(ledger.prepare(skip));
            ledger.record_visit(k, 0, 0.5, 1.0, 0.0, 0.1, dl, 1.0);
            ledger.deliver(k);
        }
        for j in 0..extra_episodes {
            let k = delays.len() as u64 + 1 + j;
            preps.push(ledger.prepare(skip));
            ledger.record_visit(k, 0, 0.5, 1.0, 0.0, 0.1, Delay::Finite(0), 1.0);
            ledger.deliver(k);
        }
        preps
    }

    #[test]
    fn first_orders() {
        let mut l = VisitLedger::new(LedgerMode::Aligned, 2);
        l.prepare(None);
        assert_eq!(l.record_visit(1, 0, 0.5, 0.0, 0.0, 1.0, Delay::Finite(0), 0.0), 1);
        for k in 2..=3 {
            l.prepare(None);
            l.record_visit(k, 0, 0.5, 0.0, 0.0, 1.0, Delay::Finite(0), 0.0);
        }
        assert_eq!(l.happened(), 3);
        l.prepare(None);
        assert_eq!(l.record_visit(4, 0, 0.5, 0.0, 0.0, 1.0, Delay::Finite(0), 0.0), 4);
    }

    #[test]
    fn blocked_prefix_released_together() {
        let mut l = VisitLedger::new(LedgerMode::Aligned, 2);
        let preps = drive(&mut l, &d(&[3, 0, 0, 0]), None, 1);
        let orders: Vec<Vec<u64>> = preps.iter().map(|p| p.fed.iter().map(|f| f.order).collect()).collect();
        assert_eq!(orders[3], Vec::<u64>::new());
        assert_eq!(orders[4], vec![1, 2, 3, 4]);
        assert_eq!(l.holding_at(4), 6);
    }

    #[test]
    fn zero_delay_feeds_previous() {
        let mut l = VisitLedger::new(LedgerMode::Aligned, 2);
        let preps = drive(&mut l, &d(&[0; 6]), None, 0);
        for (i, p) in preps.iter().enumerate() {
            let want: Vec<u64> = if i == 0 { vec![] } else { vec![i as u64] };
            assert_eq!(p.fed.iter().map(|f| f.order).collect::<Vec<_>>(), want);
            assert_eq!(p.used, p.order - 1);
            assert_eq!(p.holding, 0);
        }
    }

    #[test]
    fn delivery_timing() {
        let mut l = VisitLedger::new(LedgerMode::Aligned, 2);
        l.prepare(None);
        l.record_visit(1, 0, 0.5, 0.0, 0.0, 1.0, Delay::Finite(3), 0.7);
        for k in 1..=3 {
            assert!(l.deliver(k).is_empty());
        }
        assert_eq!(l.deliver(4), vec![1]);
        assert_eq!(l.record(1).reward, Some(0.7));

        let mut l = VisitLedger::new(LedgerMode::Aligned, 2);
        l.prepare(None);
        l.record_visit(1, 0, 0.5, 0.0, 0.0, 1.0, Delay::Infinite, 0.7);
        assert!(l.deliver(u64::MAX).is_empty());
    }

    #[test]
    fn skip_example() {
        let rule = SkipRule {
            metric: SkipMetric::PaperPhi,
            timing: ThresholdTiming::Provisional,
        };
        let mut l = VisitLedger::new(LedgerMode::Aligned, 2);
        let mut dl = vec![Delay::Infinite];
        dl.extend(d(&[0, 0]));
        let preps = drive(&mut l, &dl, Some(rule), 1);
        assert!(preps[1].newly_skipped.is_empty());
        assert_eq!(l.record(1).phi, 3);
        assert_eq!(preps[1].holding, 1);
        assert_eq!(preps[2].newly_skipped, vec![1]);
        // skipping 1 unblocks 2 in the same preparation
        let orders: Vec<u64> = preps[2].fed.iter().map(|f| f.order).collect();
        assert_eq!(orders, vec![1, 2]);
        assert!(preps[2].fed[0].skipped);
        assert_eq!(preps[2].fed[0].v_over_next, 2.0);
        assert_eq!(preps[2].fed[0].reward, 0.0);
        assert_eq!(l.skipped(), &[1]);
    }

    #[test]
    fn committed_timing_skips_early() {
        let rule = SkipRule {
            metric: SkipMetric::PaperPhi,
            timing: ThresholdTiming::Committed,
        };
        let mut l = VisitLedger::new(LedgerMode::Aligned, 2);
        let mut dl = vec![Delay::Infinite];
        dl.extend(d(&[0, 0]));
        let preps = drive(&mut l, &dl, Some(rule), 0);
        assert_eq!(preps[1].newly_skipped, vec![1]);
    }

    #[test]
    fn naive_feeds_arrivals() {
        let mut l = VisitLedger::new(LedgerMode::Naive, 2);
        let preps = drive(&mut l, &d(&[3, 0, 0, 0]), None, 1);
        let orders: Vec<Vec<u64>> = preps.iter().map(|p| p.fed.iter().map(|f| f.order).collect()).collect();
        assert_eq!(orders[2], vec![2]);
        assert_eq!(orders[3], vec![3]);
        assert_eq!(orders[4], vec![1, 4]);
    }

    #[test]
    fn oracle_examples() {
        let dl = d(&[3, 0, 0, 0]);
        let ep = [1, 2, 3, 4];
        assert_eq!(brute_force_e(&dl, &ep, 4), 1);
        assert_eq!(brute_force_t(&dl, &ep, 4), 6);
        let zero = d(&[0, 0, 0, 0]);
        assert_eq!(brute_force_e(&zero, &ep, 4), 4);
        let ex: BTreeSet<usize> = [1].into_iter().collect();
        assert_eq!(brute_force_t_excluding(&dl, &ep, 4, &ex), 0);
    }
}
