//! Exact market arithmetic: integer time, rates, and money.
//!
//! All market state lives in integers so that billing additivity and
//! engine/oracle equivalence hold bit-for-bit. Times are microseconds,
//! rates are micro-currency-units per second, and money is the exact
//! product `rate * duration_us` (i.e. pico-currency-units).

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

pub const MICROS_PER_SEC: u64 = 1_000_000;

/// Simulation timestamp in integer microseconds since run start.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_secs_f64(secs: f64) -> SimTime {
        SimTime((secs * MICROS_PER_SEC as f64).round() as u64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_SEC as f64
    }

    pub fn saturating_sub(self, other: SimTime) -> DurationUs {
        DurationUs(self.0.saturating_sub(other.0))
    }
}

impl Add<DurationUs> for SimTime {
    type Output = SimTime;
    fn add(self, d: DurationUs) -> SimTime {
        SimTime(self.0 + d.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Duration in integer microseconds.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct DurationUs(pub u64);

impl DurationUs {
    pub const ZERO: DurationUs = DurationUs(0);

    pub fn from_secs_f64(secs: f64) -> DurationUs {
        DurationUs((secs * MICROS_PER_SEC as f64).round() as u64)
    }

    pub fn from_millis(ms: u64) -> DurationUs {
        DurationUs(ms * 1_000)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_SEC as f64
    }
}

impl Add for DurationUs {
    type Output = DurationUs;
    fn add(self, d: DurationUs) -> DurationUs {
        DurationUs(self.0 + d.0)
    }
}

/// A price rate in micro-currency-units per second. Market state never
/// touches floating point; one micro-unit/s is the quoting tick.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Rate(pub u64);

impl Rate {
    pub const ZERO: Rate = Rate(0);
    /// Minimum increment a bid must add to strictly beat a standing price.
    pub const TICK: Rate = Rate(1);

    pub fn from_units_f64(units_per_sec: f64) -> Rate {
        Rate((units_per_sec * MICROS_PER_SEC as f64).round() as u64)
    }

    pub fn as_units_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_SEC as f64
    }

    pub fn saturating_sub(self, other: Rate) -> Rate {
        Rate(self.0.saturating_sub(other.0))
    }

    pub fn scale_f64(self, factor: f64) -> Rate {
        Rate((self.0 as f64 * factor).round().max(0.0) as u64)
    }
}

impl Add for Rate {
    type Output = Rate;
    fn add(self, r: Rate) -> Rate {
        Rate(self.0 + r.0)
    }
}

impl Sub for Rate {
    type Output = Rate;
    fn sub(self, r: Rate) -> Rate {
        Rate(self.0 - r.0)
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}/s", self.as_units_f64())
    }
}

/// Exact money: `rate (micro-units/s) * duration (us)`, i.e. pico-currency
/// units. Stored as u128 so integration over long runs cannot overflow and
/// `bill(t0,t2) == bill(t0,t1) + bill(t1,t2)` holds exactly.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Money(pub u128);

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn from_rate_duration(rate: Rate, duration: DurationUs) -> Money {
        Money(rate.0 as u128 * duration.0 as u128)
    }

    /// Currency units, for reports only; ledger math stays integral.
    pub fn as_units_f64(self) -> f64 {
        self.0 as f64 / 1e12
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, m: Money) -> Money {
        Money(self.0 + m.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, m: Money) {
        self.0 += m.0;
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.as_units_f64())
    }
}

/// Retention limit or bid limit: a bounded rate, or unbounded (never follow
/// price increases / never implicitly relinquish).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Limit {
    Unbounded,
    At(Rate),
}

impl Limit {
    pub fn bound(self) -> Option<Rate> {
        match self {
            Limit::Unbounded => None,
            Limit::At(r) => Some(r),
        }
    }

    /// True when `rate` strictly exceeds the limit (unbounded is never exceeded).
    pub fn exceeded_by(self, rate: Rate) -> bool {
        match self {
            Limit::Unbounded => false,
            Limit::At(bound) => rate > bound,
        }
    }
}

impl fmt::Display for Limit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Limit::Unbounded => write!(f, "unbounded"),
            Limit::At(r) => write!(f, "{r}"),
        }
    }
}

/// Opaque tenant token. The simulator keeps a roster mapping these to
/// human-readable names; the engine only compares them.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct TenantId(pub u32);

/// Exactly one owner per leaf at all times.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OwnerId {
    Operator,
    Tenant(TenantId),
}

impl OwnerId {
    pub fn tenant(self) -> Option<TenantId> {
        match self {
            OwnerId::Operator => None,
            OwnerId::Tenant(t) => Some(t),
        }
    }

    pub fn is_operator(self) -> bool {
        matches!(self, OwnerId::Operator)
    }
}

/// Engine-assigned order identifier, strictly increasing in placement order.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct OrderId(pub u64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn money_is_exact_product() {
        let m = Money::from_rate_duration(Rate(1_500_000), DurationUs(2_000_000));
        assert_eq!(m, Money(3_000_000_000_000));
        assert!((m.as_units_f64() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn limit_exceeded_semantics_are_strict() {
        assert!(!Limit::At(Rate(10)).exceeded_by(Rate(10)));
        assert!(Limit::At(Rate(10)).exceeded_by(Rate(11)));
        assert!(!Limit::Unbounded.exceeded_by(Rate(u64::MAX)));
    }
}
