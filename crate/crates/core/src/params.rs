//! Closed-form parameter sequences: learning rates, mixture weights, loss
//! weights, exploration rates and bonuses.
//!
//! Products of `(1 - α_j)` and the loss weights `w_n` grow or shrink like
//! `n^{±(H+1)}`, so they are kept in log domain and only exponentiated when a
//! concrete weight is needed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning rate `α_n = (H+1)/(H+n)` for `n ≥ 1`.
pub fn alpha(n: u64, horizon: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("alpha is defined for n >= 1".into()));
    }
    Ok(alpha_unchecked(n, horizon))
}

#[inline]
fn alpha_unchecked(n: u64, horizon: usize) -> f64 {
    (horizon as f64 + 1.0) / (horizon as f64 + n as f64)
}

/// `ln(1 - α_j) = ln((j-1)/(H+j))` for `j ≥ 2`.
#[inline]
fn log_one_minus_alpha(j: u64, horizon: usize) -> f64 {
    ((j - 1) as f64).ln() - ((horizon as u64 + j) as f64).ln()
}

/// Cached prefix sums `L(n) = Σ_{j=2}^n ln(1-α_j)` for one horizon.
///
/// Gives `α_n^i = α_i · exp(L(n) - L(i))` and `w_n = α_n · exp(-L(n))`.
#[derive(Debug, Clone)]
pub struct AlphaTable {
    horizon: usize,
    log_prod: Vec<f64>,
}

impl AlphaTable {
    pub fn new(horizon: usize) -> Self {
        // index 0 and 1 both hold the empty product
        Self {
            horizon,
            log_prod: vec![0.0, 0.0],
        }
    }

    pub fn with_capacity(horizon: usize, n: u64) -> Self {
        let mut t = Self::new(horizon);
        t.ensure(n);
        t
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Extend the cache so that indices up to `n` are available.
    pub fn ensure(&mut self, n: u64) {
        let n = n as usize;
        while self.log_prod.len() <= n {
            let j = self.log_prod.len() as u64;
            let last = *self.log_prod.last().expect("non-empty");
            self.log_prod.push(last + log_one_minus_alpha(j, self.horizon));
        }
    }

    fn lp(&self, n: u64) -> f64 {
        self.log_prod[n as usize]
    }

    /// `α_n`; panics on `n = 0`.
    pub fn alpha(&self, n: u64) -> f64 {
        assert!(n >= 1, "alpha index must be >= 1");
        alpha_unchecked(n, self.horizon)
    }

    /// `ln w_n` for `n ≥ 1`. Requires `ensure(n)`.
    pub fn log_w(&self, n: u64) -> f64 {
        self.alpha(n).ln() - self.lp(n)
    }

    /// Mixture weight `α_n^i` for `0 ≤ i ≤ n`. Requires `ensure(n)`.
    pub fn weight(&self, n: u64, i: u64) -> f64 {
        debug_assert!(i <= n);
        if i == 0 {
            return if n == 0 { 1.0 } else { 0.0 };
        }
        if i == n {
            return self.alpha(n);
        }
        (self.alpha(i).ln() + self.lp(n) - self.lp(i)).exp()
    }

    /// `(α_n^0, …, α_n^n)`. Requires `ensure(n)`.
    pub fn weights(&self, n: u64) -> Vec<f64> {
        (0..=n).map(|i| self.weight(n, i)).collect()
    }

    /// Ratio `ρ_i = α_n^i / α_n^{i+1} = α_i (1 - α_{i+1}) / α_{i+1}`, independent of `n`.
    pub fn ratio(&self, i: u64) -> f64 {
        let a_i = self.alpha(i);
        let a_next = self.alpha(i + 1);
        a_i * (1.0 - a_next) / a_next
    }
}

/// `(α_n^0, α_n^1, …, α_n^n)`; `α_0^0 = 1` and `α_n^0 = 0` for `n ≥ 1`.
pub fn alpha_weights(n: u64, horizon: usize) -> Vec<f64> {
    AlphaTable::with_capacity(horizon, n).weights(n)
}

/// `ln w_n` where `w_n = α_n ∏_{i=2}^n (1-α_i)^{-1}`.
pub fn log_w(n: u64, horizon: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("w is defined for n >= 1".into()));
    }
    Ok(AlphaTable::with_capacity(horizon, n).log_w(n))
}

/// Loss weight `w_n`; `w_1 = 1`.
pub fn w(n: u64, horizon: usize) -> Result<f64> {
    log_w(n, horizon).map(f64::exp)
}

/// Shared exploration / step-size rate `γ_n = η_n = √(ι/(nA+T))`.
pub fn eta_gamma(n: u64, actions: usize, holding: u64, iota: f64) -> f64 {
    (iota / (n as f64 * actions as f64 + holding as f64)).sqrt()
}

/// `ι = ln(4MHSAK/δ)`.
pub fn iota(agents: usize, horizon: usize, states: usize, actions: usize, episodes: u64, delta: f64) -> f64 {
    (4.0 * agents as f64 * horizon as f64 * states as f64 * actions as f64 * episodes as f64 / delta).ln()
}

/// Optimistic and pessimistic bonus pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Bonus {
    pub over: f64,
    pub under: f64,
}

/// Bonuses of the finite-delay variants.
///
/// `β̄ = 12H²√((nA+T)/n² · ι) + 4H²(d_max/n)ι` and
/// `β_ = 2√(H³ι/n) + 2H²(d_max/n)ι`, both zero at `n = 0`.
pub fn bonuses_finite(n: u64, actions: usize, holding: u64, d_max: u64, horizon: usize, iota: f64) -> Bonus {
    if n == 0 {
        return Bonus::default();
    }
    let h = horizon as f64;
    let nf = n as f64;
    let na_t = nf * actions as f64 + holding as f64;
    let d = d_max as f64;
    Bonus {
        over: 12.0 * h * h * (na_t / (nf * nf) * iota).sqrt() + 4.0 * h * h * (d / nf) * iota,
        under: 2.0 * (h * h * h * iota / nf).sqrt() + 2.0 * h * h * (d / nf) * iota,
    }
}

/// Bonuses of the reward-skipping variant.
///
/// `β̄(n,n′) = 24H²C√(T(n′)/n²)ι + 18H²√(A/n)ι` and
/// `β_(n,n′) = 2H²(⁴√(4T(n′))+2)/n + 2√(H³ι/n)`, both zero at `n = 0`.
pub fn bonuses_skip(n: u64, holding: u64, c_bound: f64, actions: usize, horizon: usize, iota: f64) -> Bonus {
    if n == 0 {
        return Bonus::default();
    }
    let h = horizon as f64;
    let nf = n as f64;
    let t = holding as f64;
    Bonus {
        over: 24.0 * h * h * c_bound * (t / (nf * nf)).sqrt() * iota
            + 18.0 * h * h * (actions as f64 / nf).sqrt() * iota,
        under: 2.0 * h * h * ((4.0 * t).powf(0.25) + 2.0) / nf + 2.0 * (h * h * h * iota / nf).sqrt(),
    }
}

/// Run-level constants shared by every parameter computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamContext {
    pub horizon: usize,
    pub agents: usize,
    pub states: usize,
    /// Largest per-agent action count.
    pub actions: usize,
    /// Planned number of episodes `K`.
    pub episodes: u64,
    pub delta: f64,
    /// Multiplier applied to both bonuses; 1.0 reproduces the formulas.
    #[serde(default = "one")]
    pub bonus_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl ParamContext {
    pub fn new(horizon: usize, agents: usize, states: usize, actions: usize, episodes: u64, delta: f64) -> Result<Self> {
        let ctx = Self {
            horizon,
            agents,
            states,
            actions,
            episodes,
            delta,
            bonus_scale: 1.0,
        };
        ctx.check()?;
        Ok(ctx)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Domain(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if self.horizon == 0 || self.agents == 0 || self.states == 0 || self.actions == 0 || self.episodes == 0 {
            return Err(Error::Domain("H, M, S, A and K must all be positive".into()));
        }
        if !(self.bonus_scale.is_finite() && self.bonus_scale >= 0.0) {
            return Err(Error::Domain("bonus scale must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn iota(&self) -> f64 {
        iota(self.agents, self.horizon, self.states, self.actions, self.episodes, self.delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn alpha_values() {
        assert_eq!(alpha(1, 7).unwrap(), 1.0);
        assert_relative_eq!(alpha(2, 2).unwrap(), 0.75);
        assert_relative_eq!(alpha(3, 2).unwrap(), 0.6);
        assert!(alpha(0, 2).is_err());
    }

    #[test]
    fn weights_small_case() {
        let v = alpha_weights(3, 2);
        let want = [0.0, 0.1, 0.3, 0.6];
        for (a, b) in v.iter().zip(want) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
        assert_eq!(alpha_weights(0, 2), vec![1.0]);
    }

    #[test]
    fn loss_weights() {
        assert_relative_eq!(w(1, 2).unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(w(2, 2).unwrap(), 3.0, epsilon = 1e-13);
        assert_relative_eq!(w(3, 2).unwrap(), 6.0, epsilon = 1e-13);
    }

    #[test]
    fn eta_gamma_value() {
        assert_relative_eq!(eta_gamma(10, 2, 6, 20.394), 0.8857, epsilon = 5e-5);
        assert_eq!(eta_gamma(10, 2, 0, 20.0), (20.0f64 / 20.0).sqrt());
    }

    #[test]
    fn finite_bonus_values() {
        assert_eq!(bonuses_finite(0, 2, 3, 5, 2, 20.0), Bonus::default());
        let b = bonuses_finite(100, 2, 0, 0, 2, 20.394);
        assert_relative_eq!(b.over, 30.6554, epsilon = 1e-4);
        assert_relative_eq!(b.under, 2.5546, epsilon = 1e-4);
    }

    #[test]
    fn skip_bonus_values() {
        assert_eq!(bonuses_skip(0, 3, 5.0, 2, 2, 20.0), Bonus::default());
        let b = bonuses_skip(100, 50, 5.0, 2, 2, 20.394);
        assert_relative_eq!(b.over, 900.0, epsilon = 0.5);
        let z = bonuses_skip(100, 0, 123.0, 2, 2, 20.394);
        assert_relative_eq!(z.over, 18.0 * 4.0 * (0.02f64).sqrt() * 20.394, epsilon = 1e-12);
    }

    #[test]
    fn context_rejects_bad_delta() {
        assert!(ParamContext::new(2, 3, 3, 2, 10, 1.5).is_err());
        assert!(ParamContext::new(2, 3, 3, 2, 10, 0.01).unwrap().iota() > 0.0);
    }
}
