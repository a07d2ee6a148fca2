//! Reward-delay schedules and their assignment to (agent, step, state).
//!
//! A schedule maps the 1-based visit order `n` of a fixed (agent, step, state)
//! to a delay in episodes, possibly infinite.

use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Delay in episodes. `Infinite` is a sentinel, never a large number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Delay {
    Finite(u64),
    Infinite,
}

impl Delay {
    /// Episode at whose end the reward arrives, if ever.
    pub fn due(self, episode: u64) -> Option<u64> {
        match self {
            Delay::Finite(d) => episode.checked_add(d),
            Delay::Infinite => None,
        }
    }

    pub fn finite(self) -> Option<u64> {
        match self {
            Delay::Finite(d) => Some(d),
            Delay::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Delay::Infinite)
    }

    /// `d ≥ x` with `∞ ≥` everything.
    pub fn at_least(self, x: u64) -> bool {
        match self {
            Delay::Finite(d) => d >= x,
            Delay::Infinite => true,
        }
    }
}

impl fmt::Display for Delay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Delay::Finite(d) => write!(f, "{d}"),
            Delay::Infinite => write!(f, "inf"),
        }
    }
}

impl Serialize for Delay {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Delay::Finite(d) => s.serialize_u64(*d),
            Delay::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Delay {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Delay;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a non-negative integer or \"inf\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Delay, E> {
                Ok(Delay::Finite(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Delay, E> {
                u64::try_from(v).map(Delay::Finite).map_err(|_| E::custom("delay must be non-negative"))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Delay, E> {
                match v {
                    "inf" | "infinite" | "∞" => Ok(Delay::Infinite),
                    _ => Err(E::custom(format!("unknown delay literal {v:?}"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// Delay as a function of the visit order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DelaySchedule {
    #[default]
    Zero,
    Constant {
        d: u64,
    },
    /// `d(n) = c0 - c1 · (n mod period)`.
    AffinePeriodic {
        c0: i64,
        c1: i64,
        period: u64,
    },
    /// `factor · base(n)`; infinite stays infinite.
    Scaled {
        base: Box<DelaySchedule>,
        factor: u64,
    },
    /// `∞` when `n mod period ≤ infinite_if_mod_leq`, else the finite `else` value.
    InfinitePattern {
        period: u64,
        #[serde(rename = "infinite-if-mod-leq")]
        infinite_if_mod_leq: u64,
        #[serde(rename = "else")]
        otherwise: u64,
    },
    /// `table[n-1]`, falling back to `default` past the end.
    Explicit {
        table: Vec<Delay>,
        #[serde(default = "zero_delay")]
        default: Delay,
    },
}

fn zero_delay() -> Delay {
    Delay::Finite(0)
}

impl DelaySchedule {
    /// Delay of the `n`-th visit (`n ≥ 1`).
    pub fn delay(&self, n: u64) -> Delay {
        match self {
            DelaySchedule::Zero => Delay::Finite(0),
            DelaySchedule::Constant { d } => Delay::Finite(*d),
            DelaySchedule::AffinePeriodic { c0, c1, period } => {
                let v = c0 - c1 * (n % period) as i64;
                Delay::Finite(v.max(0) as u64)
            }
            DelaySchedule::Scaled { base, factor } => match base.delay(n) {
                Delay::Finite(d) => Delay::Finite(d * factor),
                Delay::Infinite => Delay::Infinite,
            },
            DelaySchedule::InfinitePattern {
                period,
                infinite_if_mod_leq,
                otherwise,
            } => {
                if n % period <= *infinite_if_mod_leq {
                    Delay::Infinite
                } else {
                    Delay::Finite(*otherwise)
                }
            }
            DelaySchedule::Explicit { table, default } => {
                table.get((n as usize).wrapping_sub(1)).copied().unwrap_or(*default)
            }
        }
    }

    /// Reject schedules that would produce negative delays or divide by zero.
    pub fn check(&self) -> Result<()> {
        match self {
            DelaySchedule::AffinePeriodic { c0, c1, period } => {
                if *period == 0 {
                    return Err(Error::Config("affine-periodic period must be positive".into()));
                }
                let lo = (0..*period).map(|r| c0 - c1 * r as i64).min().unwrap_or(*c0);
                if lo < 0 {
                    return Err(Error::Config(format!("affine-periodic schedule reaches negative delay {lo}")));
                }
                Ok(())
            }
            DelaySchedule::Scaled { base, .. } => base.check(),
            DelaySchedule::InfinitePattern { period, .. } => {
                if *period == 0 {
                    return Err(Error::Config("infinite-pattern period must be positive".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Largest finite delay among orders `1..=n_max`, or 0 when none is finite.
    pub fn max_finite(&self, n_max: u64) -> u64 {
        match self {
            DelaySchedule::Zero => 0,
            DelaySchedule::Constant { d } => *d,
            DelaySchedule::AffinePeriodic { period, .. } => (1..=n_max.min(*period))
                .filter_map(|n| self.delay(n).finite())
                .max()
                .unwrap_or(0),
            DelaySchedule::Scaled { base, factor } => base.max_finite(n_max) * factor,
            DelaySchedule::InfinitePattern { period, .. } => (1..=n_max.min(*period))
                .filter_map(|n| self.delay(n).finite())
                .max()
                .unwrap_or(0),
            DelaySchedule::Explicit { .. } => (1..=n_max).filter_map(|n| self.delay(n).finite()).max().unwrap_or(0),
        }
    }

    /// Whether some order in `1..=n_max` has infinite delay.
    pub fn has_infinite(&self, n_max: u64) -> bool {
        match self {
            DelaySchedule::Zero | DelaySchedule::Constant { .. } | DelaySchedule::AffinePeriodic { .. } => false,
            DelaySchedule::Scaled { base, .. } => base.has_infinite(n_max),
            DelaySchedule::InfinitePattern { period, .. } => {
                (1..=n_max.min(*period)).any(|n| self.delay(n).is_infinite())
            }
            DelaySchedule::Explicit { .. } => (1..=n_max).any(|n| self.delay(n).is_infinite()),
        }
    }
}

/// Schedule assigned to matching (agent, step, state) triples; `None` fields
/// match anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayRule {
    #[serde(default)]
    pub agent: Option<usize>,
    #[serde(default)]
    pub step: Option<usize>,
    #[serde(default)]
    pub state: Option<usize>,
    pub schedule: DelaySchedule,
}

impl DelayRule {
    fn matches(&self, m: usize, h: usize, s: usize) -> bool {
        self.agent.map_or(true, |x| x == m) && self.step.map_or(true, |x| x == h) && self.state.map_or(true, |x| x == s)
    }
}

/// Delay assignment for a whole game. The first matching rule wins;
/// unmatched triples use `default` (zero delay unless configured).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DelayPlan {
    #[serde(default)]
    pub default: DelaySchedule,
    #[serde(default)]
    pub rules: Vec<DelayRule>,
}

impl DelayPlan {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn schedule(&self, m: usize, h: usize, s: usize) -> &DelaySchedule {
        self.rules
            .iter()
            .find(|r| r.matches(m, h, s))
            .map_or(&self.default, |r| &r.schedule)
    }

    pub fn delay(&self, m: usize, h: usize, s: usize, n: u64) -> Delay {
        self.schedule(m, h, s).delay(n)
    }

    pub fn check(&self) -> Result<()> {
        self.default.check()?;
        self.rules.iter().try_for_each(|r| r.schedule.check())
    }

    fn all_schedules(&self) -> impl Iterator<Item = &DelaySchedule> {
        std::iter::once(&self.default).chain(self.rules.iter().map(|r| &r.schedule))
    }

    /// Largest finite delay any triple can see among its first `n_max` visits.
    pub fn max_finite(&self, n_max: u64) -> u64 {
        self.all_schedules().map(|s| s.max_finite(n_max)).max().unwrap_or(0)
    }

    pub fn has_infinite(&self, n_max: u64) -> bool {
        self.all_schedules().any(|s| s.has_infinite(n_max))
    }

    /// Bound on the number of outstanding visits that holds for every
    /// interleaving of visits: `max_n |{i ≤ n : d_i ≥ n - i}|`, maximised over
    /// schedules and orders `n ≤ n_max`. Since `k_n - k_i ≥ n - i`, it
    /// dominates the realised count `|{i ≤ n : d_i + k_i ≥ k_n}|`.
    pub fn c_bound(&self, n_max: u64) -> u64 {
        self.all_schedules().map(|s| schedule_c_bound(s, n_max)).max().unwrap_or(0)
    }
}

/// `max_{n ≤ n_max} |{i ≤ n : d_i ≥ n - i}|` for one schedule.
pub fn schedule_c_bound(schedule: &DelaySchedule, n_max: u64) -> u64 {
    let len = n_max as usize;
    if len == 0 {
        return 0;
    }
    // visit i is counted for every n in [i, i + d_i]
    let mut diff = vec![0i64; len + 2];
    for i in 1..=len {
        let last = match schedule.delay(i as u64) {
            Delay::Finite(d) => (i as u64).saturating_add(d).min(n_max) as usize,
            Delay::Infinite => len,
        };
        diff[i] += 1;
        diff[last + 1] -= 1;
    }
    let mut best = 0i64;
    let mut run = 0i64;
    for v in diff.iter().take(len + 1).skip(1) {
        run += v;
        best = best.max(run);
    }
    best as u64
}

/// Realised outstanding count `max_n |{i ≤ n : d_i + k_i ≥ k_n}|` for one
/// (agent, step, state), given per-visit delays and visit episodes.
pub fn realized_c(delays: &[Delay], episodes: &[u64]) -> u64 {
    assert_eq!(delays.len(), episodes.len());
    let len = delays.len();
    if len == 0 {
        return 0;
    }
    let mut diff = vec![0i64; len + 1];
    for i in 0..len {
        // last n with k_n ≤ k_i + d_i
        let last = match delays[i].due(episodes[i]) {
            Some(due) => episodes.partition_point(|&k| k <= due) - 1,
            None => len - 1,
        };
        diff[i] += 1;
        diff[last + 1] -= 1;
    }
    let mut best = 0i64;
    let mut run = 0i64;
    for v in diff.iter().take(len) {
        run += v;
        best = best.max(run);
    }
    best as u64
}

/// Heterogeneous delays at the first step of the initial state: agent 0 has
/// `factor · (20 - 2(n mod 10))`, agents 1 and 2 have `factor · 5`.
pub fn sequence_plan(factor: u64) -> DelayPlan {
    let wrap = |s: DelaySchedule| {
        if factor == 1 {
            s
        } else {
            DelaySchedule::Scaled {
                base: Box::new(s),
                factor,
            }
        }
    };
    DelayPlan {
        default: DelaySchedule::Zero,
        rules: vec![
            DelayRule {
                agent: Some(0),
                step: Some(0),
                state: Some(0),
                schedule: wrap(DelaySchedule::AffinePeriodic {
                    c0: 20,
                    c1: 2,
                    period: 10,
                }),
            },
            DelayRule {
                agent: None,
                step: Some(0),
                state: Some(0),
                schedule: wrap(DelaySchedule::Constant { d: 5 }),
            },
        ],
    }
}

/// Agent 0 never receives the reward of visits with `n mod 10 ≤ 5` at the
/// first step of the initial state; other visits of agent 0 are immediate and
/// agents 1 and 2 have delay 5 there.
pub fn infinite_plan() -> DelayPlan {
    DelayPlan {
        default: DelaySchedule::Zero,
        rules: vec![
            DelayRule {
                agent: Some(0),
                step: Some(0),
                state: Some(0),
                schedule: DelaySchedule::InfinitePattern {
                    period: 10,
                    infinite_if_mod_leq: 5,
                    otherwise: 0,
                },
            },
            DelayRule {
                agent: None,
                step: Some(0),
                state: Some(0),
                schedule: DelaySchedule::Constant { d: 5 },
            },
        ],
    }
}
