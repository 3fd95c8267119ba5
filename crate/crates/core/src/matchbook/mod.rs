//! Hierarchical matching engine with contestable ownership.
//!
//! Scoped buy orders rest at their scope node and press, logically, on every
//! leaf underneath (a one-cancels-others set: at most one commit, siblings
//! vanish atomically). Each leaf's charged rate is the highest active losing
//! bid covering it — operator floor included, owner's own bids excluded —
//! so the current owner always pays second price. Owners relinquish
//! explicitly, or implicitly the instant the charged rate rises strictly
//! above their retention limit.
//!
//! Per-node aggregates (cheapest operator acquisition in subtree, cheapest
//! bounded retention limit with owner exclusion, tenant/hot leaf counts)
//! keep root-scoped placement, transfer, and cancel proportional to tree
//! depth rather than leaf count.

mod book;
mod types;

pub use types::{
    BuyOrder, FloorSpec, HandoffConfig, MarketConfig, MarketEvent, OrderState, PriceQuote,
    QuotedPrice, TransferOutcome, VolatilityConfig,
};

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::billing::RateLedger;
use crate::error::{MarketError, Result};
use crate::topology::{LeafRef, NodeIx, NodeRef, Scope, TopologyForest, TypeIx};
use crate::units::{DurationUs, Limit, OrderId, OwnerId, Rate, SimTime, TenantId};

use book::{BidKey, NodeAgg, NodeBook};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LeafState {
    owner: OwnerId,
    retention: Limit,
    floor_base: Rate,
    floor_target: Rate,
    floor_time: SimTime,
    /// Cached charged rate; authoritative for billing while tenant-owned.
    rate: Rate,
    /// Operator-owned leaf whose top covering bid exceeds its floor.
    hot: bool,
}

impl LeafState {
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
struct TreeMarket {
    books: Vec<NodeBook>,
    leaves: Vec<LeafState>,
    /// Leaf ordinals with an in-progress downward floor slew.
    decaying: BTreeSet<u32>,
}

#[derive(Clone, Debug)]
struct OrderRecord {
    order: BuyOrder,
    state: OrderState,
}

/// Serializable engine state for `--snapshot` support.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EngineSnapshot {
    pub cfg: MarketConfig,
    pub now: SimTime,
    next_order: u64,
    rng_draws: u64,
    leaves: Vec<(u32, u32, LeafState)>,
    orders: Vec<(BuyOrder, OrderState)>,
    ledger: RateLedger,
}

#[derive(Clone)]
pub struct MarketEngine {
    forest: Arc<TopologyForest>,
    trees: Vec<TreeMarket>,
    orders: BTreeMap<OrderId, OrderRecord>,
    tenant_orders: BTreeMap<TenantId, BTreeSet<OrderId>>,
    tenant_owned: BTreeMap<TenantId, BTreeSet<LeafRef>>,
    next_order: u64,
    now: SimTime,
    cfg: MarketConfig,
    rng: ChaCha8Rng,
    rng_draws: u64,
    ledger: RateLedger,
    pending: Vec<(u64, MarketEvent)>,
    seq: u64,
    /// Nodes whose subtrees need a rate/trigger refresh.
    touched: BTreeSet<(TypeIx, NodeIx)>,
}

impl MarketEngine {
    /// Seed the market: every leaf operator-owned at its floor, no bids.
    pub fn seed_supply(
        forest: Arc<TopologyForest>,
        floors: &FloorSpec,
        cfg: MarketConfig,
    ) -> Result<MarketEngine> {
        let mut trees = Vec::with_capacity(forest.trees().len());
        for tree in forest.trees() {
            let leaves = (0..tree.leaf_count())
                .map(|_| LeafState {
                    owner: OwnerId::Operator,
                    retention: Limit::Unbounded,
                    floor_base: floors.default,
                    floor_target: floors.default,
                    floor_time: SimTime::ZERO,
                    rate: floors.default,
                    hot: false,
                })
                .collect();
            trees.push(TreeMarket {
                books: vec![NodeBook::default(); tree.node_count()],
                leaves,
                decaying: BTreeSet::new(),
            });
        }
        let mut engine = MarketEngine {
            forest,
            trees,
            orders: BTreeMap::new(),
            tenant_orders: BTreeMap::new(),
            tenant_owned: BTreeMap::new(),
            next_order: 1,
            now: SimTime::ZERO,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            rng_draws: 0,
            ledger: RateLedger::new(),
            pending: Vec::new(),
            seq: 0,
            touched: BTreeSet::new(),
        };
        for (path, rate) in &floors.overrides {
            let scope = engine.forest.resolve(path)?;
            let span = engine.forest.leaf_span(scope);
            for ord in span {
                let leaf = &mut engine.trees[scope.tree.0 as usize].leaves[ord as usize];
                leaf.floor_base = *rate;
                leaf.floor_target = *rate;
                leaf.rate = *rate;
            }
        }
        engine.rebuild_aggregates();
        Ok(engine)
    }

    pub fn forest(&self) -> &Arc<TopologyForest> {
        &self.forest
    }

    pub fn config(&self) -> &MarketConfig {
        &self.cfg
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn ledger(&self) -> &RateLedger {
        &self.ledger
    }

    pub fn owner_of(&self, leaf: LeafRef) -> OwnerId {
        self.leaf(leaf).owner
    }

    pub fn retention_of(&self, leaf: LeafRef) -> Limit {
        self.leaf(leaf).retention
    }

    pub fn order(&self, id: OrderId) -> Option<&BuyOrder> {
        self.orders.get(&id).map(|r| &r.order)
    }

    pub fn order_state(&self, id: OrderId) -> Option<OrderState> {
        self.orders.get(&id).map(|r| r.state)
    }

    /// All currently resting orders (placement order).
    pub fn active_orders(&self) -> Vec<BuyOrder> {
        self.orders
            .values()
            .filter(|r| r.state == OrderState::Active)
            .map(|r| r.order.clone())
            .collect()
    }

    pub fn active_orders_of(&self, tenant: TenantId) -> Vec<OrderId> {
        self.tenant_orders
            .get(&tenant)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn owned_leaves(&self, tenant: TenantId) -> Vec<LeafRef> {
        self.tenant_owned
            .get(&tenant)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    /// Effective floor (after any in-progress downward slew) at `now`.
    pub fn floor_of(&self, leaf: LeafRef, now: SimTime) -> Rate {
        self.leaf(leaf)
            .eff_floor(self.cfg.volatility.floor_decay_per_s, now)
    }

    /// The highest active losing bid covering this leaf, floor included,
    /// owner's own orders excluded. Pure query.
    pub fn charged_rate(&self, leaf: LeafRef, now: SimTime) -> Rate {
        let state = self.leaf(leaf);
        let floor = state.eff_floor(self.cfg.volatility.floor_decay_per_s, now);
        let excl = state.owner.tenant();
        let mut rate = floor;
        let node = self.forest.leaf_node_ref(leaf);
        for anc in self.forest.ancestors_of(node) {
            if let Some((key, _)) = self.book(anc).top_excl(excl) {
                rate = rate.max(key.rate);
            }
        }
        rate
    }

    /// Cheapest acquisition threshold for `bidder` under `scope`: what a new
    /// bid must meet or exceed to commit immediately, plus the leaf it would
    /// commit on. `None` when no covered leaf is acquirable.
    pub fn min_acquisition_threshold(
        &self,
        bidder: TenantId,
        scope: Scope,
    ) -> Option<(Rate, LeafRef)> {
        self.cheapest_threshold(scope, bidder)
            .map(|(rate, ord)| (rate, LeafRef { tree: scope.tree, leaf: ord }))
    }

    /// Place a scoped buy order. Commits immediately on the cheapest
    /// acquirable covered leaf, or rests at the scope node and raises
    /// charged rates underneath.
    pub fn place_buy(
        &mut self,
        tenant: TenantId,
        scope: Scope,
        limit: Limit,
        now: SimTime,
    ) -> Result<(OrderId, Option<TransferOutcome>)> {
        self.check_scope(scope)?;
        self.advance(now)?;

        let quote = self.cheapest_threshold(scope, tenant);
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

        let commit = match quote {
            Some((threshold, ord)) if effective_price >= threshold => Some(ord),
            _ => None,
        };

        if let Some(ord) = commit {
            self.orders.insert(
                order_id,
                OrderRecord {
                    order: order.clone(),
                    state: OrderState::Active,
                },
            );
            let outcome = self.execute_transfer(
                scope.tree,
                ord,
                Some(order_id),
                OwnerId::Tenant(tenant),
                now,
            )?;
            self.settle(now)?;
            Ok((order_id, Some(outcome)))
        } else {
            self.book_mut(NodeRef { tree: scope.tree, node: scope.node })
                .insert(tenant, BidKey::new(effective_price, now, order_id));
            self.orders.insert(
                order_id,
                OrderRecord {
                    order,
                    state: OrderState::Active,
                },
            );
            self.tenant_orders.entry(tenant).or_default().insert(order_id);
            self.refresh_aggs_above(scope.tree, scope.node);
            self.touched.insert((scope.tree, scope.node));
            self.settle(now)?;
            Ok((order_id, None))
        }
    }

    /// Cancel a resting order; covered rates recompute downward immediately.
    pub fn cancel_buy(&mut self, order_id: OrderId, now: SimTime) -> Result<()> {
        self.advance(now)?;
        let rec = self
            .orders
            .get(&order_id)
            .ok_or_else(|| MarketError::InvalidState(format!("unknown order {order_id:?}")))?;
        if rec.state != OrderState::Active {
            return Err(MarketError::InvalidState(format!(
                "order {order_id:?} is not active"
            )));
        }
        let order = rec.order.clone();
        self.remove_resting(&order, OrderState::Canceled { at: now });
        self.touched.insert((order.scope.tree, order.scope.node));
        self.settle(now)
    }

    /// Set the owner's retention limit; fires implicit relinquishment
    /// immediately if the current charged rate already exceeds it.
    pub fn set_retention_limit(
        &mut self,
        tenant: TenantId,
        leaf: LeafRef,
        limit: Limit,
        now: SimTime,
    ) -> Result<()> {
        self.check_leaf(leaf)?;
        self.advance(now)?;
        let state = self.leaf(leaf);
        if state.owner != OwnerId::Tenant(tenant) {
            return Err(MarketError::Permission(format!(
                "{tenant:?} does not own {}",
                self.forest.leaf_id(leaf)
            )));
        }
        self.leaf_mut(leaf).retention = limit;
        let node = self.forest.leaf_node_ref(leaf);
        self.refresh_aggs_from(leaf.tree, node.node);
        self.touched.insert((leaf.tree, node.node));
        self.settle(now)
    }

    /// Explicit relinquishment: surrender to the highest-priority covering
    /// bid above the floor, or back to the operator.
    pub fn relinquish(
        &mut self,
        tenant: TenantId,
        leaf: LeafRef,
        now: SimTime,
    ) -> Result<TransferOutcome> {
        self.check_leaf(leaf)?;
        self.advance(now)?;
        if self.leaf(leaf).owner != OwnerId::Tenant(tenant) {
            return Err(MarketError::Permission(format!(
                "{tenant:?} does not own {}",
                self.forest.leaf_id(leaf)
            )));
        }
        let outcome = self.transfer_to_best(leaf.tree, leaf.leaf, now)?;
        self.settle(now)?;
        Ok(outcome)
    }

    /// Operator floor update over a scope. Upward changes apply immediately
    /// and may evict owners; downward changes slew at the configured decay.
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
        let decay = self.cfg.volatility.floor_decay_per_s;
        let span = self.forest.leaf_span(scope);
        for ord in span {
            let leaf = &mut self.trees[scope.tree.0 as usize].leaves[ord as usize];
            let current = leaf.eff_floor(decay, now);
            if rate >= current || decay.is_none() {
                leaf.floor_base = rate;
                leaf.floor_target = rate;
                leaf.floor_time = now;
                self.trees[scope.tree.0 as usize].decaying.remove(&ord);
            } else {
                leaf.floor_base = current;
                leaf.floor_target = rate;
                leaf.floor_time = now;
                self.trees[scope.tree.0 as usize].decaying.insert(ord);
            }
        }
        self.refresh_floor_span(scope.tree, scope, now);
        self.touched.insert((scope.tree, scope.node));
        self.settle(now)
    }

    /// Advance to `now` (materializing floor slew and any due handoffs) and
    /// return all accumulated events ordered by (time, leaf, order id).
    pub fn drain_events(&mut self, now: SimTime) -> Result<Vec<MarketEvent>> {
        self.advance(now)?;
        self.settle(now)?;
        let mut events = std::mem::take(&mut self.pending);
        events.sort_by(|(sa, a), (sb, b)| {
            let ka = (a.time(), self.forest.leaf_id(a.leaf()), a.order_key(), *sa);
            let kb = (b.time(), self.forest.leaf_id(b.leaf()), b.order_key(), *sb);
            ka.cmp(&kb)
        });
        Ok(events.into_iter().map(|(_, e)| e).collect())
    }

    /// Serializable snapshot of the full market state.
    pub fn snapshot(&self) -> EngineSnapshot {
        let mut leaves = Vec::new();
        for (tix, tree) in self.trees.iter().enumerate() {
            for (ord, leaf) in tree.leaves.iter().enumerate() {
                leaves.push((tix as u32, ord as u32, leaf.clone()));
            }
        }
        EngineSnapshot {
            cfg: self.cfg,
            now: self.now,
            next_order: self.next_order,
            rng_draws: self.rng_draws,
            leaves,
            orders: self
                .orders
                .values()
                .map(|r| (r.order.clone(), r.state))
                .collect(),
            ledger: self.ledger.clone(),
        }
    }

    /// Rebuild an engine from a snapshot over the same forest.
    pub fn restore(forest: Arc<TopologyForest>, snap: EngineSnapshot) -> Result<MarketEngine> {
        let mut engine =
            MarketEngine::seed_supply(forest, &FloorSpec::uniform(Rate::ZERO), snap.cfg)?;
        engine.now = snap.now;
        engine.next_order = snap.next_order;
        engine.ledger = snap.ledger;
        for (tix, ord, leaf) in snap.leaves {
            if let OwnerId::Tenant(t) = leaf.owner {
                engine.tenant_owned.entry(t).or_default().insert(LeafRef {
                    tree: TypeIx(tix),
                    leaf: ord,
                });
            }
            if leaf.floor_target < leaf.floor_base {
                engine.trees[tix as usize].decaying.insert(ord);
            }
            engine.trees[tix as usize].leaves[ord as usize] = leaf;
        }
        for (order, state) in snap.orders {
            if state == OrderState::Active {
                engine
                    .book_mut(NodeRef { tree: order.scope.tree, node: order.scope.node })
                    .insert(
                        order.tenant,
                        BidKey::new(order.effective_price, order.placed_at, order.order_id),
                    );
                engine
                    .tenant_orders
                    .entry(order.tenant)
                    .or_default()
                    .insert(order.order_id);
            }
            engine.orders.insert(order.order_id, OrderRecord { order, state });
        }
        for _ in 0..snap.rng_draws {
            engine.rng.next_u64();
        }
        engine.rng_draws = snap.rng_draws;
        engine.rebuild_aggregates();
        Ok(engine)
    }

    // ------------------------------------------------------------------
    // internals

    fn leaf(&self, leaf: LeafRef) -> &LeafState {
        &self.trees[leaf.tree.0 as usize].leaves[leaf.leaf as usize]
    }

    fn leaf_mut(&mut self, leaf: LeafRef) -> &mut LeafState {
        &mut self.trees[leaf.tree.0 as usize].leaves[leaf.leaf as usize]
    }

    fn book(&self, node: NodeRef) -> &NodeBook {
        &self.trees[node.tree.0 as usize].books[node.node.0 as usize]
    }

    fn book_mut(&mut self, node: NodeRef) -> &mut NodeBook {
        &mut self.trees[node.tree.0 as usize].books[node.node.0 as usize]
    }

    fn check_scope(&self, scope: Scope) -> Result<()> {
        let t = scope.tree.0 as usize;
        if t >= self.trees.len()
            || scope.node.0 as usize >= self.forest.tree(scope.tree).node_count()
        {
            return Err(MarketError::NotFound(format!("scope {scope:?}")));
        }
        Ok(())
    }

    fn check_leaf(&self, leaf: LeafRef) -> Result<()> {
        let t = leaf.tree.0 as usize;
        if t >= self.trees.len() || leaf.leaf >= self.forest.tree(leaf.tree).leaf_count() {
            return Err(MarketError::NotFound(format!("leaf {leaf:?}")));
        }
        Ok(())
    }

    fn decay(&self) -> Option<Rate> {
        self.cfg.volatility.floor_decay_per_s
    }

    /// Monotone-time guard plus floor-slew materialization at `now`.
    fn advance(&mut self, now: SimTime) -> Result<()> {
        if now < self.now {
            return Err(MarketError::InvalidState(format!(
                "time moved backwards: {} < {}",
                now, self.now
            )));
        }
        if now > self.now {
            self.now = now;
            let decay = self.decay();
            if decay.is_some() {
                for tix in 0..self.trees.len() {
                    let due: Vec<u32> = self.trees[tix].decaying.iter().copied().collect();
                    for ord in due {
                        let leaf = &mut self.trees[tix].leaves[ord as usize];
                        let eff = leaf.eff_floor(decay, now);
                        if eff != leaf.floor_base {
                            leaf.floor_base = eff;
                            leaf.floor_time = now;
                            if eff == leaf.floor_target {
                                self.trees[tix].decaying.remove(&ord);
                            }
                            let node = self.forest.tree(TypeIx(tix as u32)).leaf_node(ord);
                            self.update_hot(TypeIx(tix as u32), ord, now);
                            self.refresh_aggs_from(TypeIx(tix as u32), node);
                            self.touched.insert((TypeIx(tix as u32), node));
                        }
                    }
                }
                self.settle(now)?;
            }
        }
        Ok(())
    }

    /// Recompute a leaf's hot flag: operator-owned and some covering bid
    /// strictly above its floor.
    fn update_hot(&mut self, tree: TypeIx, ord: u32, now: SimTime) {
        let node = NodeRef { tree, node: self.forest.tree(tree).leaf_node(ord) };
        let leaf_ref = LeafRef { tree, leaf: ord };
        let state = self.leaf(leaf_ref);
        let hot = if state.owner.is_operator() {
            let floor = state.eff_floor(self.decay(), now);
            self.forest
                .ancestors_of(node)
                .iter()
                .any(|&a| self.book(a).top_raw().is_some_and(|k| k.rate > floor))
        } else {
            false
        };
        self.leaf_mut(leaf_ref).hot = hot;
    }

    /// After a floor change over `scope`: refresh hot flags for covered
    /// operator-owned leaves and aggregates for the whole span.
    fn refresh_floor_span(&mut self, tree: TypeIx, scope: Scope, now: SimTime) {
        let span = self.forest.leaf_span(scope);
        for ord in span.clone() {
            if self.trees[tree.0 as usize].leaves[ord as usize].owner.is_operator() {
                self.update_hot(tree, ord, now);
            }
        }
        for ord in span {
            let node = self.forest.tree(tree).leaf_node(ord);
            self.refresh_aggs_from(tree, node);
        }
    }

    fn rebuild_aggregates(&mut self) {
        let now = self.now;
        for tix in 0..self.trees.len() {
            let tree = TypeIx(tix as u32);
            for ord in 0..self.forest.tree(tree).leaf_count() {
                self.update_hot(tree, ord, now);
            }
            // Nodes are stored in DFS order, so children always have higher
            // indices; walk backwards for a bottom-up pass.
            for ix in (0..self.forest.tree(tree).node_count()).rev() {
                self.recompute_agg(tree, NodeIx(ix as u32));
            }
        }
    }

    fn recompute_agg(&mut self, tree: TypeIx, node_ix: NodeIx) {
        let topo = self.forest.tree(tree);
        let node = topo.node(node_ix);
        let mut agg = NodeAgg::default();
        if node.is_leaf() {
            let ord = node.leaf_span.start;
            let leaf = &self.trees[tree.0 as usize].leaves[ord as usize];
            match leaf.owner {
                OwnerId::Operator => {
                    agg.op_min = leaf.eff_floor(self.decay(), self.now).0;
                    agg.cnt_hot = leaf.hot as u32;
                }
                OwnerId::Tenant(t) => {
                    agg.cnt_tenant = 1;
                    if let Some(bound) = leaf.retention.bound() {
                        agg.fold_ten(bound.0, t);
                    }
                }
            }
        } else {
            // Cheapest acquisition folds each child's own book in; the
            // distinct-owner retention pair merges exactly because a child
            // whose best owner differs from the merged best contributes its
            // best as the alternative.
            let children = node.children.clone();
            let mut pairs: Vec<(u64, TenantId, u64)> = Vec::new();
            for c in children {
                let b = &self.trees[tree.0 as usize].books[c.0 as usize];
                let ca = b.agg;
                if ca.op_min != u64::MAX {
                    agg.op_min = agg.op_min.min(ca.op_min.max(b.top_raw_rate()));
                }
                agg.cnt_tenant += ca.cnt_tenant;
                agg.cnt_hot += ca.cnt_hot;
                if let Some((best, owner)) = ca.ten_best {
                    pairs.push((best, owner, ca.ten_alt));
                }
            }
            if let Some(&(best, owner, _)) = pairs.iter().min_by_key(|&&(b, _, _)| b) {
                agg.ten_best = Some((best, owner));
                agg.ten_alt = pairs
                    .iter()
                    .map(|&(b, o, alt)| if o == owner { alt } else { b })
                    .min()
                    .unwrap_or(u64::MAX);
            }
        }
        self.trees[tree.0 as usize].books[node_ix.0 as usize].agg = agg;
    }

    /// Recompute aggregates from `node` (inclusive) up to the root.
    fn refresh_aggs_from(&mut self, tree: TypeIx, node: NodeIx) {
        let mut cur = Some(node);
        while let Some(ix) = cur {
            self.recompute_agg(tree, ix);
            cur = self.forest.tree(tree).node(ix).parent;
        }
    }

    /// Recompute aggregates for ancestors strictly above `node` (a book
    /// change at `node` only affects parents' folds).
    fn refresh_aggs_above(&mut self, tree: TypeIx, node: NodeIx) {
        if let Some(parent) = self.forest.tree(tree).node(node).parent {
            self.refresh_aggs_from(tree, parent);
        }
    }

    /// Cheapest acquisition threshold under `scope` for `bidder`, with the
    /// committed leaf's ordinal. Operator-owned leaves cost
    /// max(floor, highest covering bid) + tick; tenant-owned cost their
    /// bounded retention limit + tick; ties resolve to the lowest leaf id.
    fn cheapest_threshold(&self, scope: Scope, bidder: TenantId) -> Option<(Rate, u32)> {
        let topo = self.forest.tree(scope.tree);
        let books = &self.trees[scope.tree.0 as usize].books;

        // Shared ancestor pressure: book tops from the scope node to root.
        let mut above = 0u64;
        for a in self.forest.ancestors_of(NodeRef { tree: scope.tree, node: scope.node }) {
            above = above.max(books[a.node.0 as usize].top_raw_rate());
        }

        // Operator route: descend by the folded minimum.
        let op = {
            let agg = &books[scope.node.0 as usize].agg;
            if agg.op_min == u64::MAX {
                None
            } else {
                let mut m = above;
                let mut cur = scope.node;
                loop {
                    let node = topo.node(cur);
                    if node.is_leaf() {
                        let leaf = &self.trees[scope.tree.0 as usize].leaves
                            [node.leaf_span.start as usize];
                        let floor = leaf.eff_floor(self.decay(), self.now).0;
                        break Some((floor.max(m) + 1, node.leaf_span.start));
                    }
                    let mut best: Option<(u64, NodeIx)> = None;
                    for &c in &node.children {
                        let b = &books[c.0 as usize];
                        if b.agg.op_min == u64::MAX {
                            continue;
                        }
                        let v = b.agg.op_min.max(b.top_raw_rate()).max(m);
                        if best.map_or(true, |(bv, _)| v < bv) {
                            best = Some((v, c));
                        }
                    }
                    let (_, c) = best?;
                    m = m.max(books[c.0 as usize].top_raw_rate());
                    cur = c;
                }
            }
        };

        // Tenant route: cheapest bounded retention limit not owned by bidder.
        let ten = {
            let agg = &books[scope.node.0 as usize].agg;
            let target = agg.ten_min_excl(bidder);
            if target == u64::MAX {
                None
            } else {
                let mut cur = scope.node;
                loop {
                    let node = topo.node(cur);
                    if node.is_leaf() {
                        break Some((target + 1, node.leaf_span.start));
                    }
                    let next = node.children.iter().copied().find(|&c| {
                        books[c.0 as usize].agg.ten_min_excl(bidder) == target
                    });
                    match next {
                        Some(c) => cur = c,
                        None => break None,
                    }
                }
            }
        };

        match (op, ten) {
            (None, None) => None,
            (Some(o), None) => Some((Rate(o.0), o.1)),
            (None, Some(t)) => Some((Rate(t.0), t.1)),
            (Some(o), Some(t)) => {
                if (o.0, o.1) <= (t.0, t.1) {
                    Some((Rate(o.0), o.1))
                } else {
                    Some((Rate(t.0), t.1))
                }
            }
        }
    }

    /// Min charged rate over covered leaves (for entry snapshots of
    /// unbounded resting orders and for volatility clipping).
    fn min_covered_rate(&self, scope: Scope, now: SimTime) -> Rate {
        let span = self.forest.leaf_span(scope);
        span.map(|ord| self.charged_rate(LeafRef { tree: scope.tree, leaf: ord }, now))
            .min()
            .unwrap_or(Rate::ZERO)
    }

    fn remove_resting(&mut self, order: &BuyOrder, new_state: OrderState) {
        let node = NodeRef { tree: order.scope.tree, node: order.scope.node };
        self.book_mut(node).remove(
            order.tenant,
            BidKey::new(order.effective_price, order.placed_at, order.order_id),
        );
        self.refresh_aggs_above(order.scope.tree, order.scope.node);
        if let Some(set) = self.tenant_orders.get_mut(&order.tenant) {
            set.remove(&order.order_id);
        }
        if let Some(rec) = self.orders.get_mut(&order.order_id) {
            rec.state = new_state;
        }
    }

    fn draw_handoff(&mut self) -> DurationUs {
        let span = self.cfg.handoff.max.0.saturating_sub(self.cfg.handoff.min.0) + 1;
        let draw = self.rng.next_u64() % span;
        self.rng_draws += 1;
        DurationUs(self.cfg.handoff.min.0 + draw)
    }

    /// Winner for a leaf being surrendered: highest covering bid not from
    /// `excl`, if strictly above the effective floor; else the operator.
    fn surrender_winner(
        &self,
        tree: TypeIx,
        ord: u32,
        excl: Option<TenantId>,
        now: SimTime,
    ) -> Option<(BidKey, TenantId)> {
        let leaf_ref = LeafRef { tree, leaf: ord };
        let floor = self.leaf(leaf_ref).eff_floor(self.decay(), now);
        let node = self.forest.leaf_node_ref(leaf_ref);
        let mut best: Option<(BidKey, TenantId)> = None;
        for a in self.forest.ancestors_of(node) {
            if let Some((key, t)) = self.book(a).top_excl(excl) {
                if best.map_or(true, |(bk, _)| key > bk) {
                    best = Some((key, t));
                }
            }
        }
        best.filter(|(k, _)| k.rate > floor)
    }

    /// Transfer a surrendered leaf to its winner (or operator) and emit the
    /// outcome.
    fn transfer_to_best(&mut self, tree: TypeIx, ord: u32, now: SimTime) -> Result<TransferOutcome> {
        let excl = self.leaf(LeafRef { tree, leaf: ord }).owner.tenant();
        match self.surrender_winner(tree, ord, excl, now) {
            Some((key, tenant)) => self.execute_transfer(
                tree,
                ord,
                Some(key.order_id()),
                OwnerId::Tenant(tenant),
                now,
            ),
            None => self.execute_transfer(tree, ord, None, OwnerId::Operator, now),
        }
    }

    /// The atomic ownership transfer: close the previous owner's billing,
    /// consume the winning order (canceling its sibling coverage), install
    /// the new owner, and recompute the leaf's charged rate.
    fn execute_transfer(
        &mut self,
        tree: TypeIx,
        ord: u32,
        winning_order: Option<OrderId>,
        to: OwnerId,
        now: SimTime,
    ) -> Result<TransferOutcome> {
        let leaf_ref = LeafRef { tree, leaf: ord };
        let from = self.leaf(leaf_ref).owner;

        let mut canceled_coverage = 0;
        let mut new_retention = Limit::Unbounded;
        if let Some(oid) = winning_order {
            let rec = self
                .orders
                .get(&oid)
                .ok_or_else(|| MarketError::InvalidState(format!("missing order {oid:?}")))?;
            let order = rec.order.clone();
            canceled_coverage = self.forest.leaf_span(order.scope).len() as u64 - 1;
            new_retention = order.limit;
            if rec.state == OrderState::Active {
                // Resting winner: consume it everywhere (OCO) before rates
                // are rederived.
                let was_resting = self
                    .tenant_orders
                    .get(&order.tenant)
                    .is_some_and(|s| s.contains(&oid));
                if was_resting {
                    self.remove_resting(&order, OrderState::Committed { leaf: leaf_ref, at: now });
                    self.touched.insert((order.scope.tree, order.scope.node));
                } else {
                    // Placement-time commit: never rested.
                    self.orders.get_mut(&oid).unwrap().state =
                        OrderState::Committed { leaf: leaf_ref, at: now };
                }
            }
        }

        if let OwnerId::Tenant(t) = from {
            self.ledger.close_segment(t, leaf_ref, now)?;
            if let Some(set) = self.tenant_owned.get_mut(&t) {
                set.remove(&leaf_ref);
            }
        }

        {
            let leaf = self.leaf_mut(leaf_ref);
            leaf.owner = to;
            leaf.retention = new_retention;
        }
        let node = self.forest.tree(tree).leaf_node(ord);
        self.update_hot(tree, ord, now);
        self.refresh_aggs_from(tree, node);

        let new_rate = self.charged_rate(leaf_ref, now);
        self.leaf_mut(leaf_ref).rate = new_rate;
        if let OwnerId::Tenant(t) = to {
            self.ledger.open_segment(t, leaf_ref, now, new_rate)?;
            self.tenant_owned.entry(t).or_default().insert(leaf_ref);
        }

        let outcome = TransferOutcome {
            time: now,
            leaf: leaf_ref,
            from,
            to,
            order: winning_order,
            handoff_delay: self.draw_handoff(),
            canceled_coverage,
            new_rate,
        };
        self.push_event(MarketEvent::Transfer(outcome.clone()));
        self.touched.insert((tree, node));
        Ok(outcome)
    }

    fn push_event(&mut self, ev: MarketEvent) {
        self.pending.push((self.seq, ev));
        self.seq += 1;
    }

    fn tenant_leaves_under(&self, tree: TypeIx, node: NodeIx, out: &mut Vec<u32>) {
        let b = &self.trees[tree.0 as usize].books[node.0 as usize];
        if b.agg.cnt_tenant == 0 {
            return;
        }
        let topo = self.forest.tree(tree);
        let n = topo.node(node);
        if n.is_leaf() {
            out.push(n.leaf_span.start);
            return;
        }
        for &c in &n.children {
            self.tenant_leaves_under(tree, c, out);
        }
    }

    fn hot_leaves_under(&self, tree: TypeIx, node: NodeIx, out: &mut Vec<u32>) {
        let b = &self.trees[tree.0 as usize].books[node.0 as usize];
        if b.agg.cnt_hot == 0 {
            return;
        }
        let topo = self.forest.tree(tree);
        let n = topo.node(node);
        if n.is_leaf() {
            out.push(n.leaf_span.start);
            return;
        }
        for &c in &n.children {
            self.hot_leaves_under(tree, c, out);
        }
    }

    /// Operator-side strict winner: the top covering bid commits when it
    /// strictly beats both the floor and every competing bid (price ties
    /// deadlock by design; explicit relinquishment breaks them by priority).
    fn op_commit_candidate(&self, tree: TypeIx, ord: u32, now: SimTime) -> Option<(BidKey, TenantId)> {
        let leaf_ref = LeafRef { tree, leaf: ord };
        let state = self.leaf(leaf_ref);
        if !state.owner.is_operator() {
            return None;
        }
        let floor = state.eff_floor(self.decay(), now);
        let node = self.forest.leaf_node_ref(leaf_ref);
        let mut tops: Vec<(BidKey, TenantId, Option<BidKey>)> = Vec::new();
        for a in self.forest.ancestors_of(node) {
            let (t1, t2) = self.book(a).top2_raw();
            if let Some(k1) = t1 {
                let tenant = self.book(a).top_excl(None).map(|(_, t)| t).unwrap();
                tops.push((k1, tenant, t2));
            }
        }
        let (best, tenant, own_second) = tops
            .iter()
            .max_by_key(|(k, _, _)| *k)
            .copied()?;
        let mut second = own_second.map(|k| k.rate).unwrap_or(Rate::ZERO);
        for (k, _, _) in &tops {
            if *k != best {
                second = second.max(k.rate);
            }
        }
        (best.rate > floor.max(second)).then_some((best, tenant))
    }

    /// Fixpoint pass: refresh charged rates under touched nodes, record
    /// billing changes, and fire implicit relinquishments / operator-side
    /// commits in deterministic (tree, leaf) order until stable.
    fn settle(&mut self, now: SimTime) -> Result<()> {
        let mut candidates: BTreeSet<(TypeIx, u32)> = BTreeSet::new();
        loop {
            let touched = std::mem::take(&mut self.touched);
            for (tree, node) in touched {
                let mut tenants = Vec::new();
                self.tenant_leaves_under(tree, node, &mut tenants);
                for ord in tenants {
                    let leaf_ref = LeafRef { tree, leaf: ord };
                    let state = self.leaf(leaf_ref);
                    let owner = state.owner;
                    let cached = state.rate;
                    let rate = self.charged_rate(leaf_ref, now);
                    if rate != cached {
                        let t = owner.tenant().expect("tenant-owned");
                        self.ledger.record_rate_change(leaf_ref, t, rate, now)?;
                        self.leaf_mut(leaf_ref).rate = rate;
                        self.push_event(MarketEvent::RateChange {
                            time: now,
                            leaf: leaf_ref,
                            tenant: t,
                            rate,
                        });
                    }
                    if self.leaf(leaf_ref).retention.exceeded_by(rate) {
                        candidates.insert((tree, ord));
                    }
                }
                let mut hots = Vec::new();
                self.hot_leaves_under(tree, node, &mut hots);
                for ord in hots {
                    self.update_hot(tree, ord, now);
                    if !self.leaf(LeafRef { tree, leaf: ord }).hot {
                        let n = self.forest.tree(tree).leaf_node(ord);
                        self.refresh_aggs_from(tree, n);
                    }
                    if self.op_commit_candidate(tree, ord, now).is_some() {
                        candidates.insert((tree, ord));
                    }
                }
            }

            // Fire the lowest still-valid candidate, then rescan.
            let mut fired = false;
            while let Some(&(tree, ord)) = candidates.iter().next() {
                candidates.remove(&(tree, ord));
                let leaf_ref = LeafRef { tree, leaf: ord };
                let state = self.leaf(leaf_ref);
                match state.owner {
                    OwnerId::Tenant(_) => {
                        let rate = self.leaf(leaf_ref).rate;
                        if self.leaf(leaf_ref).retention.exceeded_by(rate) {
                            self.transfer_to_best(tree, ord, now)?;
                            fired = true;
                            break;
                        }
                    }
                    OwnerId::Operator => {
                        if let Some((key, tenant)) = self.op_commit_candidate(tree, ord, now) {
                            self.execute_transfer(
                                tree,
                                ord,
                                Some(key.order_id()),
                                OwnerId::Tenant(tenant),
                                now,
                            )?;
                            fired = true;
                            break;
                        }
                    }
                }
            }
            if !fired && self.touched.is_empty() {
                return Ok(());
            }
        }
    }
}
