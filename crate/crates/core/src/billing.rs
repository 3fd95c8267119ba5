//! Piecewise-constant rate ledger and integral billing.
//!
//! Every (tenant, leaf) ownership interval is a run of contiguous
//! `RateSegment`s; a bill is the exact time integral of the charged rate
//! over the window, in integer arithmetic. Operator self-ownership is never
//! recorded, so it is never billed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MarketError, Result};
use crate::topology::LeafRef;
use crate::units::{Money, Rate, SimTime, TenantId};

/// One constant-rate run of a tenant's ownership of a leaf. `end == None`
/// while the segment is open (ownership continues).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateSegment {
    pub leaf: LeafRef,
    pub tenant: TenantId,
    pub start: SimTime,
    pub end: Option<SimTime>,
    pub rate: Rate,
}

impl RateSegment {
    /// Exact rate x overlap integral over [t0, t1).
    fn billed_in(&self, t0: SimTime, t1: SimTime) -> Money {
        let start = self.start.max(t0);
        let end = match self.end {
            Some(e) => e.min(t1),
            None => t1,
        };
        if end <= start {
            return Money::ZERO;
        }
        Money::from_rate_duration(self.rate, end.saturating_sub(start))
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct TenantLedger {
    closed: Vec<RateSegment>,
    open: BTreeMap<LeafRef, (SimTime, Rate)>,
}

/// Ledger of charged-rate history per tenant, written by the market engine's
/// event stream (single writer per tree).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RateLedger {
    tenants: BTreeMap<TenantId, TenantLedger>,
}

impl RateLedger {
    pub fn new() -> RateLedger {
        RateLedger::default()
    }

    /// Start billing `tenant` for `leaf` at `rate` from `at` (ownership
    /// transfer in).
    pub fn open_segment(
        &mut self,
        tenant: TenantId,
        leaf: LeafRef,
        at: SimTime,
        rate: Rate,
    ) -> Result<()> {
        let t = self.tenants.entry(tenant).or_default();
        if t.open.contains_key(&leaf) {
            return Err(MarketError::InvalidState(format!(
                "tenant {tenant:?} already has an open segment for {leaf:?}"
            )));
        }
        t.open.insert(leaf, (at, rate));
        Ok(())
    }

    /// Stop billing `tenant` for `leaf` at `at` (ownership transfer out).
    /// Zero-length runs are dropped: segments must satisfy start < end.
    pub fn close_segment(&mut self, tenant: TenantId, leaf: LeafRef, at: SimTime) -> Result<()> {
        let t = self
            .tenants
            .get_mut(&tenant)
            .ok_or_else(|| MarketError::InvalidState(format!("no ledger for {tenant:?}")))?;
        let (start, rate) = t
            .open
            .remove(&leaf)
            .ok_or_else(|| MarketError::InvalidState(format!("no open segment for {leaf:?}")))?;
        if at < start {
            return Err(MarketError::InvalidState(format!(
                "close at {at} before open at {start}"
            )));
        }
        if at > start {
            t.closed.push(RateSegment {
                leaf,
                tenant,
                start,
                end: Some(at),
                rate,
            });
        }
        Ok(())
    }

    /// Rate change while ownership continues: closes the open run and starts
    /// a new one at `new_rate`.
    pub fn record_rate_change(
        &mut self,
        leaf: LeafRef,
        tenant: TenantId,
        new_rate: Rate,
        at: SimTime,
    ) -> Result<()> {
        let t = self
            .tenants
            .get_mut(&tenant)
            .ok_or_else(|| MarketError::InvalidState(format!("no ledger for {tenant:?}")))?;
        let Some(&(start, rate)) = t.open.get(&leaf) else {
            return Err(MarketError::InvalidState(format!(
                "rate change for {leaf:?} but tenant {tenant:?} does not own it"
            )));
        };
        if at < start {
            return Err(MarketError::InvalidState(format!(
                "out-of-order rate change at {at}, segment open since {start}"
            )));
        }
        if rate == new_rate {
            return Ok(());
        }
        if at > start {
            t.closed.push(RateSegment {
                leaf,
                tenant,
                start,
                end: Some(at),
                rate,
            });
        }
        t.open.insert(leaf, (at, new_rate));
        Ok(())
    }

    /// Exact bill for `tenant` over the window [t0, t1). Open segments
    /// accrue up to t1. Zero for tenants with no ownership history.
    pub fn bill(&self, tenant: TenantId, t0: SimTime, t1: SimTime) -> Money {
        let Some(t) = self.tenants.get(&tenant) else {
            return Money::ZERO;
        };
        let mut total = Money::ZERO;
        for seg in &t.closed {
            total += seg.billed_in(t0, t1);
        }
        for (&leaf, &(start, rate)) in &t.open {
            total += RateSegment {
                leaf,
                tenant,
                start,
                end: None,
                rate,
            }
            .billed_in(t0, t1);
        }
        total
    }

    /// Total billed across all tenants over [t0, t1).
    pub fn bill_all(&self, t0: SimTime, t1: SimTime) -> Money {
        self.tenants
            .keys()
            .map(|&t| self.bill(t, t0, t1))
            .fold(Money::ZERO, |a, b| a + b)
    }

    pub fn tenants(&self) -> impl Iterator<Item = TenantId> + '_ {
        self.tenants.keys().copied()
    }

    /// All segments for a tenant in recording order; open segments last,
    /// with `end == None`.
    pub fn segments(&self, tenant: TenantId) -> Vec<RateSegment> {
        let Some(t) = self.tenants.get(&tenant) else {
            return Vec::new();
        };
        let mut out = t.closed.clone();
        for (&leaf, &(start, rate)) in &t.open {
            out.push(RateSegment {
                leaf,
                tenant,
                start,
                end: None,
                rate,
            });
        }
        out
    }

    /// Ownership currently open for (tenant, leaf)?
    pub fn owns_open(&self, tenant: TenantId, leaf: LeafRef) -> bool {
        self.tenants
            .get(&tenant)
            .is_some_and(|t| t.open.contains_key(&leaf))
    }

    /// CSV rows: tenant,leaf,start_us,end_us,rate_micro. `names` maps tenant
    /// tokens and `leaf_id` maps leaves to canonical ids.
    pub fn to_csv<FN, FL>(&self, name: FN, leaf_id: FL) -> String
    where
        FN: Fn(TenantId) -> String,
        FL: Fn(LeafRef) -> String,
    {
        let mut out = String::from("tenant,leaf,start_us,end_us,rate_micro\n");
        for (&tenant, _) in &self.tenants {
            for seg in self.segments(tenant) {
                let end = seg
                    .end
                    .map(|e| e.0.to_string())
                    .unwrap_or_else(|| "open".to_string());
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    name(tenant),
                    leaf_id(seg.leaf),
                    seg.start.0,
                    end,
                    seg.rate.0
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::TypeIx;

    fn leaf(n: u32) -> LeafRef {
        LeafRef {
            tree: TypeIx(0),
            leaf: n,
        }
    }

    const T: TenantId = TenantId(7);

    #[test]
    fn constant_rate_integral() {
        // rate 1.0 units/s for 10 s -> 10.0 units
        let mut ledger = RateLedger::new();
        ledger
            .open_segment(T, leaf(0), SimTime(0), Rate(1_000_000))
            .unwrap();
        ledger.close_segment(T, leaf(0), SimTime(10_000_000)).unwrap();
        let bill = ledger.bill(T, SimTime(0), SimTime(10_000_000));
        assert_eq!(bill, Money(1_000_000u128 * 10_000_000u128));
        assert!((bill.as_units_f64() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn piecewise_sum() {
        // 1.0 for 5 s then 2.0 for 5 s -> 15.0
        let mut ledger = RateLedger::new();
        ledger
            .open_segment(T, leaf(0), SimTime(0), Rate(1_000_000))
            .unwrap();
        ledger
            .record_rate_change(leaf(0), T, Rate(2_000_000), SimTime(5_000_000))
            .unwrap();
        ledger.close_segment(T, leaf(0), SimTime(10_000_000)).unwrap();
        let bill = ledger.bill(T, SimTime(0), SimTime(10_000_000));
        assert!((bill.as_units_f64() - 15.0).abs() < 1e-9);
    }

    #[test]
    fn staircase_matches_manual_sum() {
        // Three rates over three durations; expected sum computed directly.
        let rates = [Rate(500_000), Rate(1_500_000), Rate(250_000)];
        let durs = [3_000_000u64, 2_000_000, 7_000_000];
        let mut ledger = RateLedger::new();
        let mut t = 0u64;
        ledger.open_segment(T, leaf(1), SimTime(0), rates[0]).unwrap();
        for i in 1..3 {
            t += durs[i - 1];
            ledger
                .record_rate_change(leaf(1), T, rates[i], SimTime(t))
                .unwrap();
        }
        t += durs[2];
        ledger.close_segment(T, leaf(1), SimTime(t)).unwrap();
        let expect: u128 = rates
            .iter()
            .zip(durs.iter())
            .map(|(r, d)| r.0 as u128 * *d as u128)
            .sum();
        assert_eq!(ledger.bill(T, SimTime(0), SimTime(t)), Money(expect));
    }

    #[test]
    fn empty_ledger_bills_zero() {
        let ledger = RateLedger::new();
        assert_eq!(ledger.bill(T, SimTime(0), SimTime(1_000_000)), Money::ZERO);
    }

    #[test]
    fn window_inside_segment() {
        let mut ledger = RateLedger::new();
        ledger
            .open_segment(T, leaf(0), SimTime(0), Rate(3))
            .unwrap();
        ledger.close_segment(T, leaf(0), SimTime(100)).unwrap();
        assert_eq!(ledger.bill(T, SimTime(10), SimTime(60)), Money(3 * 50));
    }

    #[test]
    fn additivity_is_exact() {
        let mut ledger = RateLedger::new();
        ledger
            .open_segment(T, leaf(0), SimTime(0), Rate(7))
            .unwrap();
        ledger
            .record_rate_change(leaf(0), T, Rate(13), SimTime(41))
            .unwrap();
        ledger.close_segment(T, leaf(0), SimTime(97)).unwrap();
        let whole = ledger.bill(T, SimTime(0), SimTime(97));
        for mid in 0..=97 {
            let a = ledger.bill(T, SimTime(0), SimTime(mid));
            let b = ledger.bill(T, SimTime(mid), SimTime(97));
            assert_eq!(whole, a + b);
        }
    }

    #[test]
    fn out_of_order_is_invalid_state() {
        let mut ledger = RateLedger::new();
        ledger
            .open_segment(T, leaf(0), SimTime(50), Rate(1))
            .unwrap();
        assert!(matches!(
            ledger.record_rate_change(leaf(0), T, Rate(2), SimTime(10)),
            Err(MarketError::InvalidState(_))
        ));
        assert!(matches!(
            ledger.record_rate_change(leaf(1), T, Rate(2), SimTime(60)),
            Err(MarketError::InvalidState(_))
        ));
    }

    #[test]
    fn zero_length_runs_are_dropped() {
        let mut ledger = RateLedger::new();
        ledger
            .open_segment(T, leaf(0), SimTime(5), Rate(9))
            .unwrap();
        ledger.close_segment(T, leaf(0), SimTime(5)).unwrap();
        assert!(ledger.segments(T).is_empty());
    }
}
