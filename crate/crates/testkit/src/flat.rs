//! Flat eager-expansion reference engine.
//!
//! The brute-force semantics oracle: every query rescans all orders and all
//! leaves, nothing is cached beyond the billed rate, and no hierarchical
//! shortcut is taken. One scoped order logically owns one bid per covered
//! leaf; coverage is recomputed from scratch on every use.
//!
//! Must stay independent of the hierarchical engine's implementation: it
//! shares only public types (orders, events, ledger bookkeeping).

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use laissez_core::billing::RateLedger;
use laissez_core::matchbook::{
    BuyOrder, FloorSpec, MarketConfig, MarketEvent, OrderState, TransferOutcome,
};
use laissez_core::topology::{LeafRef, Scope, TopologyForest, TypeIx};
use laissez_core::units::{DurationUs, Limit, OrderId, OwnerId, Rate, SimTime, TenantId};
use laissez_core::{MarketError, Result};

#[derive(Clone, Debug)]
struct FlatLeaf {
    owner: OwnerId,
    retention: Limit,
    floor_base: Rate,
    floor_target: Rate,
    floor_time: SimTime,
    rate: Rate,
}

impl FlatLeaf {
    fn eff_floor(&self, decay: Option<Rate>, at: SimTime) -> Rate {
        if self.floor_target >= self.floor_base {
            return self.floor_base;
        }
        match decay {
            None => self.floor_base,
            Some(beta) => {
                let dt = at.saturating_sub(self.floor_time);
                let drop = (beta.0 as u128 * dt.0 as u128 / 1_000_000).min(u64::MAX as u128);
                self.floor_target
                    .max(Rate(self.floor_base.0.saturating_sub(drop as u64)))
            }
        }
    }
}

#[derive(Clone, Debug)]
struct FlatOrder {
    order: BuyOrder,
    state: OrderState,
}

/// Priority of a bid: (rate, earlier placement, lower id) wins.
fn beats(a: &BuyOrder, b: &BuyOrder) -> bool {
    (a.effective_price, std::cmp::Reverse(a.placed_at), std::cmp::Reverse(a.order_id))
        > (b.effective_price, std::cmp::Reverse(b.placed_at), std::cmp::Reverse(b.order_id))
}

#[derive(Clone)]
pub struct FlatEngine {
    forest: Arc<TopologyForest>,
    leaves: Vec<Vec<FlatLeaf>>,
    orders: BTreeMap<OrderId, FlatOrder>,
    next_order: u64,
    now: SimTime,
    cfg: MarketConfig,
    rng: ChaCha8Rng,
    ledger: RateLedger,
    pending: Vec<(u64, MarketEvent)>,
    seq: u64,
}

impl FlatEngine {
    pub fn seed_supply(
        forest: Arc<TopologyForest>,
        floors: &FloorSpec,
        cfg: MarketConfig,
    ) -> Result<FlatEngine> {
        let mut leaves = Vec::new();
        for tree in forest.trees() {
            leaves.push(
                (0..tree.leaf_count())
                    .map(|_| FlatLeaf {
                        owner: OwnerId::Operator,
                        retention: Limit::Unbounded,
                        floor_base: floors.default,
                        floor_target: floors.default,
                        floor_time: SimTime::ZERO,
                        rate: floors.default,
                    })
                    .collect(),
            );
        }
        let mut engine = FlatEngine {
            forest,
            leaves,
            orders: BTreeMap::new(),
            next_order: 1,
            now: SimTime::ZERO,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            ledger: RateLedger::new(),
            pending: Vec::new(),
            seq: 0,
        };
        for (path, rate) in &floors.overrides {
            let scope = engine.forest.resolve(path)?;
            for ord in engine.forest.leaf_span(scope) {
                let leaf = &mut engine.leaves[scope.tree.0 as usize][ord as usize];
                leaf.floor_base = *rate;
                leaf.floor_target = *rate;
                leaf.rate = *rate;
            }
        }
        Ok(engine)
    }

    pub fn forest(&self) -> &Arc<TopologyForest> {
        &self.forest
    }

    pub fn ledger(&self) -> &RateLedger {
        &self.ledger
    }

    pub fn owner_of(&self, leaf: LeafRef) -> OwnerId {
        self.leaves[leaf.tree.0 as usize][leaf.leaf as usize].owner
    }

    pub fn retention_of(&self, leaf: LeafRef) -> Limit {
        self.leaves[leaf.tree.0 as usize][leaf.leaf as usize].retention
    }

    pub fn order(&self, id: OrderId) -> Option<&BuyOrder> {
        self.orders.get(&id).map(|r| &r.order)
    }

    pub fn order_state(&self, id: OrderId) -> Option<OrderState> {
        self.orders.get(&id).map(|r| r.state)
    }

    pub fn active_orders(&self) -> Vec<BuyOrder> {
        self.orders
            .values()
            .filter(|r| r.state == OrderState::Active)
            .map(|r| r.order.clone())
            .collect()
    }

    pub fn floor_of(&self, leaf: LeafRef, now: SimTime) -> Rate {
        self.leaves[leaf.tree.0 as usize][leaf.leaf as usize]
            .eff_floor(self.cfg.volatility.floor_decay_per_s, now)
    }

    fn decay(&self) -> Option<Rate> {
        self.cfg.volatility.floor_decay_per_s
    }

    fn covers(&self, scope: Scope, leaf: LeafRef) -> bool {
        scope.tree == leaf.tree && self.forest.leaf_span(scope).contains(&leaf.leaf)
    }

    /// All active orders whose scope covers the leaf, optionally excluding a
    /// tenant's own bids.
    fn covering(&self, leaf: LeafRef, excl: Option<TenantId>) -> Vec<&BuyOrder> {
        self.orders
            .values()
            .filter(|r| r.state == OrderState::Active)
            .map(|r| &r.order)
            .filter(|o| self.covers(o.scope, leaf))
            .filter(|o| excl != Some(o.tenant))
            .collect()
    }

    pub fn charged_rate(&self, leaf: LeafRef, now: SimTime) -> Rate {
        let state = &self.leaves[leaf.tree.0 as usize][leaf.leaf as usize];
        let mut rate = state.eff_floor(self.decay(), now);
        for o in self.covering(leaf, state.owner.tenant()) {
            rate = rate.max(o.effective_price);
        }
        rate
    }

    /// Acquisition threshold for `bidder` on one leaf, by the market rules:
    /// operator-owned cost max(floor, every covering bid) + tick;
    /// tenant-owned (not the bidder, bounded limit) cost limit + tick.
    fn acq_threshold(&self, bidder: TenantId, leaf: LeafRef, now: SimTime) -> Option<u64> {
        let state = &self.leaves[leaf.tree.0 as usize][leaf.leaf as usize];
        match state.owner {
            OwnerId::Operator => {
                let mut base = state.eff_floor(self.decay(), now).0;
                for o in self.covering(leaf, None) {
                    base = base.max(o.effective_price.0);
                }
                Some(base + 1)
            }
            OwnerId::Tenant(t) if t != bidder => state.retention.bound().map(|b| b.0 + 1),
            OwnerId::Tenant(_) => None,
        }
    }

    pub fn min_acquisition_threshold(
        &self,
        bidder: TenantId,
        scope: Scope,
    ) -> Option<(Rate, LeafRef)> {
        let mut best: Option<(u64, u32)> = None;
        for ord in self.forest.leaf_span(scope) {
            let leaf = LeafRef { tree: scope.tree, leaf: ord };
            if let Some(th) = self.acq_threshold(bidder, leaf, self.now) {
                if best.map_or(true, |(b, _)| th < b) {
                    best = Some((th, ord));
                }
            }
        }
        best.map(|(th, ord)| (Rate(th), LeafRef { tree: scope.tree, leaf: ord }))
    }

    fn min_covered_rate(&self, scope: Scope, now: SimTime) -> Rate {
        self.forest
            .leaf_span(scope)
            .map(|ord| self.charged_rate(LeafRef { tree: scope.tree, leaf: ord }, now))
            .min()
            .unwrap_or(Rate::ZERO)
    }

    fn check_scope(&self, scope: Scope) -> Result<()> {
        if scope.tree.0 as usize >= self.leaves.len()
            || scope.node.0 as usize >= self.forest.tree(scope.tree).node_count()
        {
            return Err(MarketError::NotFound(format!("scope {scope:?}")));
        }
        Ok(())
    }

    fn advance(&mut self, now: SimTime) -> Result<()> {
        if now < self.now {
            return Err(MarketError::InvalidState("time moved backwards".into()));
        }
        if now > self.now {
            self.now = now;
            let decay = self.decay();
            let mut any = false;
            for tree in &mut self.leaves {
                for leaf in tree.iter_mut() {
                    if leaf.floor_target < leaf.floor_base {
                        let eff = leaf.eff_floor(decay, now);
                        if eff != leaf.floor_base {
                            leaf.floor_base = eff;
                            leaf.floor_time = now;
                            any = true;
                        }
                    }
                }
            }
            if any {
                self.settle(now)?;
            }
        }
        Ok(())
    }

    pub fn place_buy(
        &mut self,
        tenant: TenantId,
        scope: Scope,
        limit: Limit,
        now: SimTime,
    ) -> Result<(OrderId, Option<TransferOutcome>)> {
        self.check_scope(scope)?;
        self.advance(now)?;

        let quote = self.min_acquisition_threshold(tenant, scope);
        let needs_min_rate = self.cfg.volatility.clip_factor_micro.is_some()
            || (limit == Limit::Unbounded && quote.is_none());
        let min_rate = needs_min_rate.then(|| self.min_covered_rate(scope, now));

        let entry_price = match quote {
            Some((q, _)) => q,
            None => min_rate.unwrap_or_else(|| limit.bound().unwrap_or(Rate::ZERO)),
        };
        let raw_eff = limit.bound().unwrap_or(entry_price);
        let effective_price = match min_rate.and_then(|r| self.cfg.volatility.clip_cap(r)) {
            Some(cap) => raw_eff.min(cap),
            None => raw_eff,
        };

        let order_id = OrderId(self.next_order);
        self.next_order += 1;
        let order = BuyOrder {
            order_id,
            tenant,
            scope,
            limit,
            entry_price,
            effective_price,
            placed_at: now,
        };
        self.orders.insert(
            order_id,
            FlatOrder {
                order,
                state: OrderState::Active,
            },
        );

        let commit = match quote {
            Some((threshold, leaf)) if effective_price >= threshold => Some(leaf),
            _ => None,
        };
        if let Some(leaf) = commit {
            let outcome =
                self.execute_transfer(leaf, Some(order_id), OwnerId::Tenant(tenant), now)?;
            self.settle(now)?;
            Ok((order_id, Some(outcome)))
        } else {
            self.settle(now)?;
            Ok((order_id, None))
        }
    }

    pub fn cancel_buy(&mut self, order_id: OrderId, now: SimTime) -> Result<()> {
        self.advance(now)?;
        let rec = self
            .orders
            .get_mut(&order_id)
            .ok_or_else(|| MarketError::InvalidState(format!("unknown order {order_id:?}")))?;
        if rec.state != OrderState::Active {
            return Err(MarketError::InvalidState(format!(
                "order {order_id:?} is not active"
            )));
        }
        rec.state = OrderState::Canceled { at: now };
        self.settle(now)
    }

    pub fn set_retention_limit(
        &mut self,
        tenant: TenantId,
        leaf: LeafRef,
        limit: Limit,
        now: SimTime,
    ) -> Result<()> {
        self.check_leaf(leaf)?;
        self.advance(now)?;
        let state = &mut self.leaves[leaf.tree.0 as usize][leaf.leaf as usize];
        if state.owner != OwnerId::Tenant(tenant) {
            return Err(MarketError::Permission("not the owner".into()));
        }
        state.retention = limit;
        self.settle(now)
    }

    pub fn relinquish(
        &mut self,
        tenant: TenantId,
        leaf: LeafRef,
        now: SimTime,
    ) -> Result<TransferOutcome> {
        self.check_leaf(leaf)?;
        self.advance(now)?;
        let state = &self.leaves[leaf.tree.0 as usize][leaf.leaf as usize];
        if state.owner != OwnerId::Tenant(tenant) {
            return Err(MarketError::Permission("not the owner".into()));
        }
        let outcome = self.transfer_to_best(leaf, now)?;
        self.settle(now)?;
        Ok(outcome)
    }

    pub fn set_floor(
        &mut self,
        caller: OwnerId,
        scope: Scope,
        rate: Rate,
        now: SimTime,
    ) -> Result<()> {
        if caller != OwnerId::Operator {
            return Err(MarketError::Permission(
                "only the operator sets floors".into(),
            ));
        }
        self.check_scope(scope)?;
        self.advance(now)?;
        let decay = self.decay();
        for ord in self.forest.leaf_span(scope) {
            let leaf = &mut self.leaves[scope.tree.0 as usize][ord as usize];
            let current = leaf.eff_floor(decay, now);
            if rate >= current || decay.is_none() {
                leaf.floor_base = rate;
                leaf.floor_target = rate;
            } else {
                leaf.floor_base = current;
                leaf.floor_target = rate;
            }
            leaf.floor_time = now;
        }
        self.settle(now)
    }

    pub fn drain_events(&mut self, now: SimTime) -> Result<Vec<MarketEvent>> {
        self.advance(now)?;
        self.settle(now)?;
        let mut events = std::mem::take(&mut self.pending);
        events.sort_by(|(sa, a), (sb, b)| {
            let ka = (a.time(), self.forest.leaf_id(a.leaf()).to_string(), a.order_key(), *sa);
            let kb = (b.time(), self.forest.leaf_id(b.leaf()).to_string(), b.order_key(), *sb);
            ka.cmp(&kb)
        });
        Ok(events.into_iter().map(|(_, e)| e).collect())
    }

    fn check_leaf(&self, leaf: LeafRef) -> Result<()> {
        if leaf.tree.0 as usize >= self.leaves.len()
            || leaf.leaf as usize >= self.leaves[leaf.tree.0 as usize].len()
        {
            return Err(MarketError::NotFound(format!("leaf {leaf:?}")));
        }
        Ok(())
    }

    fn draw_handoff(&mut self) -> DurationUs {
        let span = self.cfg.handoff.max.0.saturating_sub(self.cfg.handoff.min.0) + 1;
        let draw = self.rng.next_u64() % span;
        DurationUs(self.cfg.handoff.min.0 + draw)
    }

    fn push_event(&mut self, ev: MarketEvent) {
        self.pending.push((self.seq, ev));
        self.seq += 1;
    }

    /// Winner when a leaf is surrendered: best covering bid from another
    /// tenant, strictly above the floor; otherwise the operator.
    fn transfer_to_best(&mut self, leaf: LeafRef, now: SimTime) -> Result<TransferOutcome> {
        let state = &self.leaves[leaf.tree.0 as usize][leaf.leaf as usize];
        let floor = state.eff_floor(self.decay(), now);
        let excl = state.owner.tenant();
        let mut winner: Option<BuyOrder> = None;
        for o in self.covering(leaf, excl) {
            if winner.as_ref().map_or(true, |w| beats(o, w)) {
                winner = Some(o.clone());
            }
        }
        match winner.filter(|w| w.effective_price > floor) {
            Some(w) => {
                self.execute_transfer(leaf, Some(w.order_id), OwnerId::Tenant(w.tenant), now)
            }
            None => self.execute_transfer(leaf, None, OwnerId::Operator, now),
        }
    }

    fn execute_transfer(
        &mut self,
        leaf: LeafRef,
        winning_order: Option<OrderId>,
        to: OwnerId,
        now: SimTime,
    ) -> Result<TransferOutcome> {
        let from = self.leaves[leaf.tree.0 as usize][leaf.leaf as usize].owner;

        let mut canceled_coverage = 0;
        let mut new_retention = Limit::Unbounded;
        if let Some(oid) = winning_order {
            let rec = self.orders.get_mut(&oid).expect("winner exists");
            canceled_coverage = self.forest.leaf_span(rec.order.scope).len() as u64 - 1;
            new_retention = rec.order.limit;
            rec.state = OrderState::Committed { leaf, at: now };
        }

        if let OwnerId::Tenant(t) = from {
            self.ledger.close_segment(t, leaf, now)?;
        }
        {
            let state = &mut self.leaves[leaf.tree.0 as usize][leaf.leaf as usize];
            state.owner = to;
            state.retention = new_retention;
        }
        let new_rate = self.charged_rate(leaf, now);
        self.leaves[leaf.tree.0 as usize][leaf.leaf as usize].rate = new_rate;
        if let OwnerId::Tenant(t) = to {
            self.ledger.open_segment(t, leaf, now, new_rate)?;
        }

        let outcome = TransferOutcome {
            time: now,
            leaf,
            from,
            to,
            order: winning_order,
            handoff_delay: self.draw_handoff(),
            canceled_coverage,
            new_rate,
        };
        self.push_event(MarketEvent::Transfer(outcome.clone()));
        Ok(outcome)
    }

    /// Operator-side strict winner on one leaf: the top covering bid commits
    /// only when strictly above both the floor and every competing bid.
    fn op_commit(&self, leaf: LeafRef, now: SimTime) -> Option<OrderId> {
        let state = &self.leaves[leaf.tree.0 as usize][leaf.leaf as usize];
        if !state.owner.is_operator() {
            return None;
        }
        let floor = state.eff_floor(self.decay(), now);
        let mut bids = self.covering(leaf, None);
        bids.sort_by(|a, b| {
            if beats(a, b) {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Greater
            }
        });
        let top = bids.first()?;
        let second = bids.get(1).map(|o| o.effective_price).unwrap_or(Rate::ZERO);
        (top.effective_price > floor.max(second)).then(|| top.order_id)
    }

    /// Global fixpoint: refresh every tenant-owned leaf's billed rate, then
    /// fire the lowest-leaf trigger (implicit relinquishment or operator-side
    /// commit); repeat until stable.
    fn settle(&mut self, now: SimTime) -> Result<()> {
        loop {
            for tix in 0..self.leaves.len() {
                for ord in 0..self.leaves[tix].len() {
                    let leaf = LeafRef { tree: TypeIx(tix as u32), leaf: ord as u32 };
                    let owner = self.leaves[tix][ord].owner;
                    if let OwnerId::Tenant(t) = owner {
                        let rate = self.charged_rate(leaf, now);
                        if rate != self.leaves[tix][ord].rate {
                            self.ledger.record_rate_change(leaf, t, rate, now)?;
                            self.leaves[tix][ord].rate = rate;
                            self.push_event(MarketEvent::RateChange {
                                time: now,
                                leaf,
                                tenant: t,
                                rate,
                            });
                        }
                    }
                }
            }

            let mut fired = false;
            'scan: for tix in 0..self.leaves.len() {
                for ord in 0..self.leaves[tix].len() {
                    let leaf = LeafRef { tree: TypeIx(tix as u32), leaf: ord as u32 };
                    match self.leaves[tix][ord].owner {
                        OwnerId::Tenant(_) => {
                            let rate = self.leaves[tix][ord].rate;
                            if self.leaves[tix][ord].retention.exceeded_by(rate) {
                                self.transfer_to_best(leaf, now)?;
                                fired = true;
                                break 'scan;
                            }
                        }
                        OwnerId::Operator => {
                            if let Some(oid) = self.op_commit(leaf, now) {
                                let tenant = self.orders[&oid].order.tenant;
                                self.execute_transfer(
                                    leaf,
                                    Some(oid),
                                    OwnerId::Tenant(tenant),
                                    now,
                                )?;
                                fired = true;
                                break 'scan;
                            }
                        }
                    }
                }
            }
            if !fired {
                return Ok(());
            }
        }
    }
}
