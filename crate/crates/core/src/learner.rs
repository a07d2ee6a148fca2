//! Per-(agent, step, state) learner: optimistic/pessimistic value estimates
//! and the importance-weighted bandit that produces the local policy.

use serde::{Deserialize, Serialize};

use crate::ledger::FedVisit;
use crate::params::{AlphaTable, Bonus};

/// How each fed record is indexed in the α and w sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weighting {
    /// By the record's happening order.
    HappeningOrder,
    /// By a local counter running from `n - |F| + 1` to `n`.
    LocalCounter,
}

/// Smallest probability an action may receive.
pub const PROB_FLOOR: f64 = f64::MIN_POSITIVE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerCell {
    horizon: f64,
    cap: f64,
    pub v_over: f64,
    pub v_under: f64,
    acc_over: f64,
    acc_under: f64,
    bonus: Bonus,
    /// Whether the optimistic accumulator enters the clamp before any data.
    clamp_empty: bool,
    /// Cumulative loss divided by `w_{loss_ref}`.
    scaled_loss: Vec<f64>,
    loss_ref: u64,
    policy: Vec<f64>,
}

impl LearnerCell {
    /// Cell for 0-based `step` of a horizon-`horizon` game, so the value cap
    /// is `horizon - step`. The optimistic accumulator starts at the cap.
    pub fn new(horizon: usize, step: usize, actions: usize) -> Self {
        let cap = (horizon - step) as f64;
        Self::with_accumulator(horizon, step, actions, cap)
    }

    /// As [`Self::new`] with the optimistic accumulator starting at
    /// `acc_over_init`. A start below the cap is ignored by the clamp until
    /// the first record arrives, so it cannot pin `V̄` there.
    pub fn with_accumulator(horizon: usize, step: usize, actions: usize, acc_over_init: f64) -> Self {
        let cap = (horizon - step) as f64;
        Self {
            horizon: horizon as f64,
            cap,
            v_over: cap,
            v_under: 0.0,
            acc_over: acc_over_init,
            acc_under: 0.0,
            bonus: Bonus::default(),
            clamp_empty: acc_over_init >= cap,
            scaled_loss: vec![0.0; actions],
            loss_ref: 0,
            policy: vec![1.0 / actions as f64; actions],
        }
    }

    pub fn policy(&self) -> &[f64] {
        &self.policy
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    /// Bonus currently folded into the accumulators.
    pub fn bonus(&self) -> Bonus {
        self.bonus
    }

    /// Fold `fed` into the value estimates; `used` is `n` after promotion and
    /// `bonus` the bonus pair for that `n`.
    pub fn value_update(&mut self, fed: &[FedVisit], used: u64, bonus: Bonus, weighting: Weighting, alpha: &AlphaTable) {
        self.acc_over -= self.bonus.over;
        self.acc_under += self.bonus.under;
        let mut local = used - fed.len() as u64;
        let mut last = 0;
        for f in fed {
            local += 1;
            let idx = match weighting {
                Weighting::HappeningOrder => {
                    assert!(f.order > last, "fed records must be ascending");
                    last = f.order;
                    f.order
                }
                Weighting::LocalCounter => local,
            };
            let a = alpha.alpha(idx);
            self.acc_over = (1.0 - a) * self.acc_over + a * (f.reward + f.v_over_next);
            self.acc_under = (1.0 - a) * self.acc_under + a * (f.reward + f.v_under_next);
        }
        self.acc_over += bonus.over;
        self.acc_under -= bonus.under;
        self.bonus = bonus;
        let over = if used >= 1 || self.clamp_empty { self.acc_over } else { self.cap };
        self.v_over = self.cap.min(over).min(self.v_over);
        self.v_under = 0.0f64.max(self.acc_under).max(self.v_under);
    }

    fn add_loss(&mut self, idx: u64, action: usize, value: f64, alpha: &AlphaTable) {
        if self.loss_ref == 0 {
            self.loss_ref = idx;
        } else if idx > self.loss_ref {
            let scale = (alpha.log_w(self.loss_ref) - alpha.log_w(idx)).exp();
            for l in &mut self.scaled_loss {
                *l *= scale;
            }
            self.loss_ref = idx;
        }
        let rel = if idx == self.loss_ref {
            1.0
        } else {
            (alpha.log_w(idx) - alpha.log_w(self.loss_ref)).exp()
        };
        self.scaled_loss[action] += rel * value;
    }

    fn refresh_policy(&mut self, happened: u64, eta: f64, alpha: &AlphaTable) {
        if self.loss_ref == 0 {
            let u = 1.0 / self.policy.len() as f64;
            self.policy.iter_mut().for_each(|p| *p = u);
            return;
        }
        let factor = -eta * (alpha.log_w(self.loss_ref) - alpha.log_w(happened)).exp();
        softmax_into(&self.scaled_loss, factor, &mut self.policy);
    }

    /// Bandit update with the records in `fed`; `happened` is `n′` and `eta`
    /// is `η_{n′}`.
    pub fn policy_opt(&mut self, fed: &[FedVisit], used: u64, happened: u64, eta: f64, weighting: Weighting, alpha: &AlphaTable) {
        let h = self.horizon;
        match weighting {
            Weighting::HappeningOrder => {
                for f in fed {
                    let loss = ((h - f.reward - f.v_over_next) / h) / (f.prob + f.gamma);
                    self.add_loss(f.order, f.action, loss, alpha);
                    self.refresh_policy(happened, eta, alpha);
                }
            }
            Weighting::LocalCounter => {
                let mut local = used - fed.len() as u64;
                for f in fed {
                    local += 1;
                    let loss = ((h - f.reward - f.v_over_next) / h) / (f.prob + f.gamma);
                    self.add_loss(local, f.action, loss, alpha);
                }
                self.refresh_policy(happened, eta, alpha);
            }
        }
    }
}

/// `out ∝ exp(factor · v)` with max-subtraction and a positive floor.
pub fn softmax_into(v: &[f64], factor: f64, out: &mut [f64]) {
    let mut hi = f64::NEG_INFINITY;
    for &x in v {
        hi = hi.max(factor * x);
    }
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (factor * x - hi).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = (*o / sum).max(PROB_FLOOR);
    }
}
