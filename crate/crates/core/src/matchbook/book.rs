//! Per-node resting-bid books and subtree aggregates.
//!
//! A scoped order rests at exactly its scope node; its pressure on every
//! descendant leaf is derived, never materialized. Each node keeps its
//! resting bids ordered by priority plus aggregates over its subtree so
//! that root-scoped operations stay proportional to depth, not leaf count.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};

use crate::units::{OrderId, Rate, SimTime, TenantId};

/// Bid priority: higher rate wins, then earlier placement, then lower id.
/// Derived `Ord` makes the max element the winner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct BidKey {
    pub rate: Rate,
    pub placed: Reverse<SimTime>,
    pub id: Reverse<OrderId>,
}

impl BidKey {
    pub fn new(rate: Rate, placed: SimTime, id: OrderId) -> BidKey {
        BidKey {
            rate,
            placed: Reverse(placed),
            id: Reverse(id),
        }
    }

    pub fn order_id(&self) -> OrderId {
        self.id.0
    }
}

/// Subtree rollups over the leaves below a node (exclusive of the node's own
/// resting book; parents fold a child's book in via `top_raw`).
#[derive(Clone, Copy, Debug)]
pub struct NodeAgg {
    /// Min over operator-owned leaves of max(floor, book tops strictly below
    /// this node). `u64::MAX` when the subtree has no operator-owned leaf.
    pub op_min: u64,
    /// Cheapest bounded retention limit over tenant-owned leaves, with its
    /// owner, plus the cheapest among other owners (for owner-exclusion).
    pub ten_best: Option<(u64, TenantId)>,
    pub ten_alt: u64,
    /// Tenant-owned leaves in the subtree (all, bounded or not).
    pub cnt_tenant: u32,
    /// Operator-owned leaves whose top covering bid exceeds their floor.
    pub cnt_hot: u32,
}

impl Default for NodeAgg {
    fn default() -> Self {
        NodeAgg {
            op_min: u64::MAX,
            ten_best: None,
            ten_alt: u64::MAX,
            cnt_tenant: 0,
            cnt_hot: 0,
        }
    }
}

impl NodeAgg {
    /// Min bounded retention limit among tenant-owned leaves not owned by
    /// `excl`.
    pub fn ten_min_excl(&self, excl: TenantId) -> u64 {
        match self.ten_best {
            Some((limit, owner)) if owner != excl => limit,
            Some(_) => self.ten_alt,
            None => u64::MAX,
        }
    }

    /// Fold another (limit, owner) candidate into the distinct-owner pair.
    pub fn fold_ten(&mut self, limit: u64, owner: TenantId) {
        match self.ten_best {
            None => self.ten_best = Some((limit, owner)),
            Some((best, best_owner)) => {
                if limit < best {
                    if best_owner != owner {
                        self.ten_alt = self.ten_alt.min(best);
                    }
                    self.ten_best = Some((limit, owner));
                } else if owner != best_owner {
                    self.ten_alt = self.ten_alt.min(limit);
                }
            }
        }
    }
}

/// Resting bids at one topology node.
#[derive(Clone, Debug, Default)]
pub struct NodeBook {
    per_tenant: BTreeMap<TenantId, BTreeSet<BidKey>>,
    /// One entry per tenant: that tenant's best resting bid here.
    tenant_best: BTreeSet<(BidKey, TenantId)>,
    pub agg: NodeAgg,
}

impl NodeBook {
    pub fn insert(&mut self, tenant: TenantId, key: BidKey) {
        let set = self.per_tenant.entry(tenant).or_default();
        if let Some(&best) = set.last() {
            if key > best {
                self.tenant_best.remove(&(best, tenant));
                self.tenant_best.insert((key, tenant));
            }
        } else {
            self.tenant_best.insert((key, tenant));
        }
        set.insert(key);
    }

    pub fn remove(&mut self, tenant: TenantId, key: BidKey) {
        let Some(set) = self.per_tenant.get_mut(&tenant) else {
            return;
        };
        let was_best = set.last() == Some(&key);
        set.remove(&key);
        if was_best {
            self.tenant_best.remove(&(key, tenant));
            if let Some(&next) = set.last() {
                self.tenant_best.insert((next, tenant));
            }
        }
        if set.is_empty() {
            self.per_tenant.remove(&tenant);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tenant_best.is_empty()
    }

    /// Best resting bid at this node regardless of tenant.
    pub fn top_raw(&self) -> Option<BidKey> {
        self.tenant_best.last().map(|&(k, _)| k)
    }

    pub fn top_raw_rate(&self) -> u64 {
        self.top_raw().map(|k| k.rate.0).unwrap_or(0)
    }

    /// Best resting bid not belonging to `excl` (owner exclusion for charged
    /// rates and relinquishment winners).
    pub fn top_excl(&self, excl: Option<TenantId>) -> Option<(BidKey, TenantId)> {
        let mut it = self.tenant_best.iter().rev();
        match excl {
            None => it.next().copied(),
            Some(x) => it.find(|&&(_, t)| t != x).copied(),
        }
    }

    /// Top two bids by raw priority, tenants unrestricted (for operator-side
    /// strict-winner checks). The second may tie the first in rate.
    pub fn top2_raw(&self) -> (Option<BidKey>, Option<BidKey>) {
        let mut it = self.tenant_best.iter().rev();
        let Some(&(best, best_tenant)) = it.next() else {
            return (None, None);
        };
        let next_tenant_best = it.next().map(|&(k, _)| k);
        let own_second = self
            .per_tenant
            .get(&best_tenant)
            .and_then(|s| s.iter().rev().nth(1).copied());
        let second = match (next_tenant_best, own_second) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        (Some(best), second)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(rate: u64, placed: u64, id: u64) -> BidKey {
        BidKey::new(Rate(rate), SimTime(placed), OrderId(id))
    }

    #[test]
    fn priority_order_is_rate_then_time_then_id() {
        assert!(key(10, 5, 1) > key(9, 1, 2));
        assert!(key(10, 1, 3) > key(10, 5, 1), "earlier placement wins ties");
        assert!(key(10, 5, 1) > key(10, 5, 2), "lower id wins exact ties");
    }

    #[test]
    fn top_excl_skips_excluded_tenant() {
        let mut book = NodeBook::default();
        book.insert(TenantId(1), key(10, 0, 1));
        book.insert(TenantId(2), key(8, 0, 2));
        assert_eq!(book.top_excl(None).unwrap().0, key(10, 0, 1));
        assert_eq!(book.top_excl(Some(TenantId(1))).unwrap().0, key(8, 0, 2));
        assert!(book
            .top_excl(Some(TenantId(1)))
            .is_some_and(|(_, t)| t == TenantId(2)));
    }

    #[test]
    fn top2_sees_same_tenant_second() {
        let mut book = NodeBook::default();
        book.insert(TenantId(1), key(10, 0, 1));
        book.insert(TenantId(1), key(9, 0, 2));
        book.insert(TenantId(2), key(7, 0, 3));
        let (a, b) = book.top2_raw();
        assert_eq!(a.unwrap().rate, Rate(10));
        assert_eq!(b.unwrap().rate, Rate(9));
        book.remove(TenantId(1), key(9, 0, 2));
        let (_, b) = book.top2_raw();
        assert_eq!(b.unwrap().rate, Rate(7));
    }

    #[test]
    fn tenant_best_tracks_removals() {
        let mut book = NodeBook::default();
        book.insert(TenantId(1), key(10, 0, 1));
        book.insert(TenantId(1), key(12, 1, 2));
        assert_eq!(book.top_raw().unwrap().rate, Rate(12));
        book.remove(TenantId(1), key(12, 1, 2));
        assert_eq!(book.top_raw().unwrap().rate, Rate(10));
        book.remove(TenantId(1), key(10, 0, 1));
        assert!(book.is_empty());
    }

    #[test]
    fn ten_fold_keeps_distinct_owners() {
        let mut agg = NodeAgg::default();
        agg.fold_ten(10, TenantId(1));
        agg.fold_ten(12, TenantId(1));
        agg.fold_ten(15, TenantId(2));
        assert_eq!(agg.ten_best, Some((10, TenantId(1))));
        assert_eq!(agg.ten_alt, 15);
        assert_eq!(agg.ten_min_excl(TenantId(1)), 15);
        assert_eq!(agg.ten_min_excl(TenantId(2)), 10);
        assert_eq!(agg.ten_min_excl(TenantId(3)), 10);
    }
}
