//! Dual-engine driver: applies the same action stream to the hierarchical
//! engine and the flat reference engine, comparing state, errors, events,
//! and bills after every step.

use std::sync::Arc;

use laissez_core::matchbook::{
    BuyOrder, MarketEngine, MarketEvent, OrderState, TransferOutcome,
};
use laissez_core::topology::{LeafRef, Scope, TopologyForest};
use laissez_core::units::{Limit, Money, OrderId, OwnerId, Rate, SimTime, TenantId};
use laissez_core::{billing::RateLedger, MarketError, Result};

use crate::flat::FlatEngine;

/// The market surface both engines expose; everything the driver, invariant
/// checker, and comparator need.
pub trait MarketApi {
    fn forest(&self) -> &Arc<TopologyForest>;
    fn owner_of(&self, leaf: LeafRef) -> OwnerId;
    fn retention_of(&self, leaf: LeafRef) -> Limit;
    fn charged_rate(&self, leaf: LeafRef, now: SimTime) -> Rate;
    fn floor_of(&self, leaf: LeafRef, now: SimTime) -> Rate;
    fn order(&self, id: OrderId) -> Option<BuyOrder>;
    fn order_state(&self, id: OrderId) -> Option<OrderState>;
    fn active_orders(&self) -> Vec<BuyOrder>;
    fn min_acquisition_threshold(&self, bidder: TenantId, scope: Scope) -> Option<(Rate, LeafRef)>;
    fn ledger(&self) -> &RateLedger;

    fn place_buy(
        &mut self,
        tenant: TenantId,
        scope: Scope,
        limit: Limit,
        now: SimTime,
    ) -> Result<(OrderId, Option<TransferOutcome>)>;
    fn cancel_buy(&mut self, order: OrderId, now: SimTime) -> Result<()>;
    fn set_retention_limit(
        &mut self,
        tenant: TenantId,
        leaf: LeafRef,
        limit: Limit,
        now: SimTime,
    ) -> Result<()>;
    fn relinquish(&mut self, tenant: TenantId, leaf: LeafRef, now: SimTime)
        -> Result<TransferOutcome>;
    fn set_floor(&mut self, caller: OwnerId, scope: Scope, rate: Rate, now: SimTime) -> Result<()>;
    fn drain_events(&mut self, now: SimTime) -> Result<Vec<MarketEvent>>;
}

macro_rules! impl_market_api {
    ($ty:ty) => {
        impl MarketApi for $ty {
            fn forest(&self) -> &Arc<TopologyForest> {
                self.forest()
            }
            fn owner_of(&self, leaf: LeafRef) -> OwnerId {
                self.owner_of(leaf)
            }
            fn retention_of(&self, leaf: LeafRef) -> Limit {
                self.retention_of(leaf)
            }
            fn charged_rate(&self, leaf: LeafRef, now: SimTime) -> Rate {
                self.charged_rate(leaf, now)
            }
            fn floor_of(&self, leaf: LeafRef, now: SimTime) -> Rate {
                self.floor_of(leaf, now)
            }
            fn order(&self, id: OrderId) -> Option<BuyOrder> {
                self.order(id).cloned()
            }
            fn order_state(&self, id: OrderId) -> Option<OrderState> {
                self.order_state(id)
            }
            fn active_orders(&self) -> Vec<BuyOrder> {
                self.active_orders()
            }
            fn min_acquisition_threshold(
                &self,
                bidder: TenantId,
                scope: Scope,
            ) -> Option<(Rate, LeafRef)> {
                self.min_acquisition_threshold(bidder, scope)
            }
            fn ledger(&self) -> &RateLedger {
                self.ledger()
            }
            fn place_buy(
                &mut self,
                tenant: TenantId,
                scope: Scope,
                limit: Limit,
                now: SimTime,
            ) -> Result<(OrderId, Option<TransferOutcome>)> {
                self.place_buy(tenant, scope, limit, now)
            }
            fn cancel_buy(&mut self, order: OrderId, now: SimTime) -> Result<()> {
                self.cancel_buy(order, now)
            }
            fn set_retention_limit(
                &mut self,
                tenant: TenantId,
                leaf: LeafRef,
                limit: Limit,
                now: SimTime,
            ) -> Result<()> {
                self.set_retention_limit(tenant, leaf, limit, now)
            }
            fn relinquish(
                &mut self,
                tenant: TenantId,
                leaf: LeafRef,
                now: SimTime,
            ) -> Result<TransferOutcome> {
                self.relinquish(tenant, leaf, now)
            }
            fn set_floor(
                &mut self,
                caller: OwnerId,
                scope: Scope,
                rate: Rate,
                now: SimTime,
            ) -> Result<()> {
                self.set_floor(caller, scope, rate, now)
            }
            fn drain_events(&mut self, now: SimTime) -> Result<Vec<MarketEvent>> {
                self.drain_events(now)
            }
        }
    };
}

impl_market_api!(MarketEngine);
impl_market_api!(FlatEngine);

/// One step of the generated grammar. Selectors index into the enumerated
/// node/leaf/order lists modulo their length, so every combination is
/// well-formed (errors like relinquishing an operator-owned leaf are part
/// of the space and must match across engines).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Place {
        tenant: u8,
        scope: u8,
        /// Limit in 100k-micro-units; None places unbounded (at entry price).
        limit_100k: Option<u16>,
    },
    Cancel {
        pick: u8,
    },
    SetRetention {
        leaf: u8,
        limit_100k: Option<u16>,
    },
    Relinquish {
        leaf: u8,
    },
    SetFloor {
        scope: u8,
        rate_100k: u16,
    },
    /// Advance time and drain both engines, comparing event streams.
    Drain,
}

pub fn rate_100k(v: u16) -> Rate {
    Rate(v as u64 * 100_000)
}

fn err_kind(e: &MarketError) -> &'static str {
    match e {
        MarketError::NotFound(_) => "not-found",
        MarketError::Permission(_) => "permission",
        MarketError::InvalidState(_) => "invalid-state",
        MarketError::Config(_) => "config",
    }
}

fn outcome_sig<T: std::fmt::Debug>(r: &Result<T>) -> String {
    match r {
        Ok(v) => format!("ok:{v:?}"),
        Err(e) => format!("err:{}", err_kind(e)),
    }
}

/// Drives both engines in lockstep.
#[derive(Clone)]
pub struct DualDriver {
    pub hier: MarketEngine,
    pub flat: FlatEngine,
    scopes: Vec<Scope>,
    leaves: Vec<LeafRef>,
    pub now: SimTime,
    pub step: DurationStep,
    steps: u64,
}

/// Time between consecutive actions.
#[derive(Clone, Copy, Debug)]
pub struct DurationStep(pub u64);

impl DualDriver {
    pub fn new(hier: MarketEngine, flat: FlatEngine, step_us: u64) -> DualDriver {
        let forest = hier.forest().clone();
        let mut scopes = Vec::new();
        let mut leaves = Vec::new();
        for (tix, tree) in forest.trees().iter().enumerate() {
            for n in 0..tree.node_count() {
                scopes.push(Scope {
                    tree: laissez_core::topology::TypeIx(tix as u32),
                    node: laissez_core::topology::NodeIx(n as u32),
                });
            }
            for l in 0..tree.leaf_count() {
                leaves.push(LeafRef {
                    tree: laissez_core::topology::TypeIx(tix as u32),
                    leaf: l,
                });
            }
        }
        DualDriver {
            hier,
            flat,
            scopes,
            leaves,
            now: SimTime::ZERO,
            step: DurationStep(step_us),
            steps: 0,
        }
    }

    fn scope(&self, sel: u8) -> Scope {
        self.scopes[sel as usize % self.scopes.len()]
    }

    fn leaf(&self, sel: u8) -> LeafRef {
        self.leaves[sel as usize % self.leaves.len()]
    }

    /// Apply one action to both engines; error if anything diverges.
    pub fn apply(&mut self, action: Action) -> std::result::Result<(), String> {
        self.steps += 1;
        self.now = SimTime(self.now.0 + self.step.0);
        let now = self.now;
        match action {
            Action::Place { tenant, scope, limit_100k } => {
                let t = TenantId(tenant as u32 % 4);
                let s = self.scope(scope);
                let limit = match limit_100k {
                    Some(v) => Limit::At(rate_100k(v)),
                    None => Limit::Unbounded,
                };
                let a = self.hier.place_buy(t, s, limit, now);
                let b = self.flat.place_buy(t, s, limit, now);
                if outcome_sig(&a) != outcome_sig(&b) {
                    return Err(format!(
                        "place divergence at step {}: {:?} vs {:?}",
                        self.steps, a, b
                    ));
                }
            }
            Action::Cancel { pick } => {
                let mut active: Vec<OrderId> = self
                    .hier
                    .active_orders()
                    .iter()
                    .map(|o| o.order_id)
                    .collect();
                active.sort();
                if active.is_empty() {
                    return Ok(());
                }
                let id = active[pick as usize % active.len()];
                let a = self.hier.cancel_buy(id, now);
                let b = self.flat.cancel_buy(id, now);
                if outcome_sig(&a) != outcome_sig(&b) {
                    return Err(format!("cancel divergence at step {}", self.steps));
                }
            }
            Action::SetRetention { leaf, limit_100k } => {
                let l = self.leaf(leaf);
                let actor = match self.hier.owner_of(l) {
                    OwnerId::Tenant(t) => t,
                    OwnerId::Operator => TenantId(leaf as u32 % 4),
                };
                let limit = match limit_100k {
                    Some(v) => Limit::At(rate_100k(v)),
                    None => Limit::Unbounded,
                };
                let a = self.hier.set_retention_limit(actor, l, limit, now);
                let b = self.flat.set_retention_limit(actor, l, limit, now);
                if outcome_sig(&a) != outcome_sig(&b) {
                    return Err(format!("set_retention divergence at step {}", self.steps));
                }
            }
            Action::Relinquish { leaf } => {
                let l = self.leaf(leaf);
                let actor = match self.hier.owner_of(l) {
                    OwnerId::Tenant(t) => t,
                    OwnerId::Operator => TenantId(leaf as u32 % 4),
                };
                let a = self.hier.relinquish(actor, l, now);
                let b = self.flat.relinquish(actor, l, now);
                if outcome_sig(&a) != outcome_sig(&b) {
                    return Err(format!(
                        "relinquish divergence at step {}: {:?} vs {:?}",
                        self.steps, a, b
                    ));
                }
            }
            Action::SetFloor { scope, rate_100k: r } => {
                let s = self.scope(scope);
                let a = self.hier.set_floor(OwnerId::Operator, s, rate_100k(r), now);
                let b = self.flat.set_floor(OwnerId::Operator, s, rate_100k(r), now);
                if outcome_sig(&a) != outcome_sig(&b) {
                    return Err(format!("set_floor divergence at step {}", self.steps));
                }
            }
            Action::Drain => {
                let a = self.hier.drain_events(now);
                let b = self.flat.drain_events(now);
                match (a, b) {
                    (Ok(ea), Ok(eb)) => {
                        if ea != eb {
                            return Err(format!(
                                "event divergence at step {}:\n  hier: {ea:?}\n  flat: {eb:?}",
                                self.steps
                            ));
                        }
                    }
                    (a, b) => {
                        if outcome_sig(&a) != outcome_sig(&b) {
                            return Err(format!("drain divergence at step {}", self.steps));
                        }
                    }
                }
            }
        }
        self.compare_state()
    }

    /// Full state equivalence: owners, retention limits, charged rates,
    /// floors, order states, and per-tenant bills.
    pub fn compare_state(&self) -> std::result::Result<(), String> {
        let now = self.now;
        for &leaf in &self.leaves {
            let id = self.hier.forest().leaf_id(leaf);
            if self.hier.owner_of(leaf) != self.flat.owner_of(leaf) {
                return Err(format!(
                    "owner mismatch on {id}: {:?} vs {:?}",
                    self.hier.owner_of(leaf),
                    self.flat.owner_of(leaf)
                ));
            }
            if self.hier.retention_of(leaf) != self.flat.retention_of(leaf) {
                return Err(format!("retention mismatch on {id}"));
            }
            let (ra, rb) = (
                self.hier.charged_rate(leaf, now),
                self.flat.charged_rate(leaf, now),
            );
            if ra != rb {
                return Err(format!("rate mismatch on {id}: {ra} vs {rb}"));
            }
            let (fa, fb) = (self.hier.floor_of(leaf, now), self.flat.floor_of(leaf, now));
            if fa != fb {
                return Err(format!("floor mismatch on {id}: {fa} vs {fb}"));
            }
        }
        for id in 1..=4096u64 {
            let oid = OrderId(id);
            let (sa, sb) = (self.hier.order_state(oid), self.flat.order_state(oid));
            if sa != sb {
                return Err(format!("order state mismatch on {oid:?}: {sa:?} vs {sb:?}"));
            }
            if sa.is_none() {
                break;
            }
            if MarketApi::order(&self.hier, oid) != MarketApi::order(&self.flat, oid) {
                return Err(format!("order record mismatch on {oid:?}"));
            }
        }
        for t in 0..4u32 {
            let tenant = TenantId(t);
            let (ba, bb) = (
                self.hier.ledger().bill(tenant, SimTime::ZERO, now),
                self.flat.ledger().bill(tenant, SimTime::ZERO, now),
            );
            if ba != bb {
                return Err(format!("bill mismatch for {tenant:?}: {ba:?} vs {bb:?}"));
            }
        }
        Ok(())
    }

    /// Drain both engines, compare the streams, and return them.
    pub fn drain_compared(&mut self) -> std::result::Result<Vec<MarketEvent>, String> {
        self.now = SimTime(self.now.0 + self.step.0);
        let a = self.hier.drain_events(self.now).map_err(|e| e.to_string())?;
        let b = self.flat.drain_events(self.now).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("event divergence:\n  hier: {a:?}\n  flat: {b:?}"));
        }
        self.compare_state()?;
        Ok(a)
    }
}

/// Spec invariants checked against any engine through its public surface,
/// recomputing expectations by brute force from the active order list.
pub fn check_invariants<E: MarketApi>(engine: &E, now: SimTime) -> std::result::Result<(), String> {
    let forest = engine.forest().clone();
    let orders = engine.active_orders();
    for (tix, tree) in forest.trees().iter().enumerate() {
        for ord in 0..tree.leaf_count() {
            let leaf = LeafRef {
                tree: laissez_core::topology::TypeIx(tix as u32),
                leaf: ord,
            };
            let id = forest.leaf_id(leaf);
            let owner = engine.owner_of(leaf);
            let floor = engine.floor_of(leaf, now);
            // Second price: rate = max(floor, best covering non-owner bid).
            let mut expect = floor;
            for o in &orders {
                if o.scope.tree == leaf.tree
                    && forest.leaf_span(o.scope).contains(&leaf.leaf)
                    && OwnerId::Tenant(o.tenant) != owner
                {
                    expect = expect.max(o.effective_price);
                }
            }
            let got = engine.charged_rate(leaf, now);
            if got != expect {
                return Err(format!(
                    "charged rate on {id} is {got}, expected highest losing bid {expect}"
                ));
            }
            // Implicit-relinquish completeness: no stable state above limit.
            if owner.tenant().is_some() && engine.retention_of(leaf).exceeded_by(got) {
                return Err(format!(
                    "stable rate {got} above retention {} on {id}",
                    engine.retention_of(leaf)
                ));
            }
        }
    }
    Ok(())
}

/// Event-log structural checks: per-leaf ownership chains (single owner,
/// atomic transfers) and per-order at-most-one-commit.
pub fn check_event_log(
    forest: &TopologyForest,
    events: &[MarketEvent],
) -> std::result::Result<(), String> {
    use std::collections::BTreeMap;
    let mut owner_chain: BTreeMap<LeafRef, OwnerId> = BTreeMap::new();
    let mut commits: BTreeMap<OrderId, u32> = BTreeMap::new();
    let mut last_time = SimTime::ZERO;
    for ev in events {
        if ev.time() < last_time {
            return Err("events out of time order".into());
        }
        last_time = ev.time();
        if let MarketEvent::Transfer(t) = ev {
            let prev = owner_chain
                .get(&t.leaf)
                .copied()
                .unwrap_or(OwnerId::Operator);
            if prev != t.from {
                return Err(format!(
                    "broken ownership chain on {}: transfer from {:?} but owner was {:?}",
                    forest.leaf_id(t.leaf),
                    t.from,
                    prev
                ));
            }
            owner_chain.insert(t.leaf, t.to);
            if let Some(oid) = t.order {
                let c = commits.entry(oid).or_insert(0);
                *c += 1;
                if *c > 1 {
                    return Err(format!("order {oid:?} committed twice"));
                }
            }
        }
    }
    Ok(())
}

/// Independent billing re-integration: rebuild every tenant's bill purely
/// from the event log and compare nothing — callers diff against the ledger.
pub fn reintegrate_bills(
    events: &[MarketEvent],
    upto: SimTime,
) -> std::collections::BTreeMap<TenantId, Money> {
    use std::collections::BTreeMap;
    let mut open: BTreeMap<(TenantId, LeafRef), (SimTime, Rate)> = BTreeMap::new();
    let mut totals: BTreeMap<TenantId, Money> = BTreeMap::new();
    let accrue =
        |totals: &mut BTreeMap<TenantId, Money>, t: TenantId, from: SimTime, to: SimTime, r: Rate| {
            if to > from {
                *totals.entry(t).or_insert(Money::ZERO) +=
                    Money::from_rate_duration(r, to.saturating_sub(from));
            }
        };
    for ev in events {
        match ev {
            MarketEvent::Transfer(tr) => {
                if let OwnerId::Tenant(t) = tr.from {
                    if let Some((start, rate)) = open.remove(&(t, tr.leaf)) {
                        accrue(&mut totals, t, start, tr.time, rate);
                    }
                }
                if let OwnerId::Tenant(t) = tr.to {
                    open.insert((t, tr.leaf), (tr.time, tr.new_rate));
                }
            }
            MarketEvent::RateChange { time, leaf, tenant, rate } => {
                if let Some((start, old)) = open.remove(&(*tenant, *leaf)) {
                    accrue(&mut totals, *tenant, start, *time, old);
                }
                open.insert((*tenant, *leaf), (*time, *rate));
            }
        }
    }
    for ((t, _), (start, rate)) in open {
        accrue(&mut totals, t, start, upto, rate);
    }
    totals
}
