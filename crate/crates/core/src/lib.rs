//! Delay-adaptive V-learning for tabular general-sum Markov games.
//!
//! The crate is organised bottom-up:
//!
//! * [`game`] defines and simulates episodic tabular Markov games.
//! * [`delay`] holds delay schedules and [`ledger`] tracks per-visit delay status.
//! * [`params`] has the closed-form learning-rate, weight and bonus sequences.
//! * [`learner`] and [`training`] run the three training variants.
//! * [`certify`] replays the stored per-visit policies as a correlated output policy.
//! * [`eval`] computes exact values, best responses and CCE-gaps.

pub mod audit;
pub mod certify;
pub mod delay;
pub mod error;
pub mod eval;
pub mod game;
pub mod learner;
pub mod ledger;
pub mod params;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
