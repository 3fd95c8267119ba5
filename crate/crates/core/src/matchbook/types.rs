//! Shared market vocabulary: orders, transfer outcomes, events, config.

use serde::{Deserialize, Serialize};

use crate::topology::{LeafRef, Scope};
use crate::units::{DurationUs, Limit, OrderId, OwnerId, Rate, SimTime, TenantId};

/// A scoped buy order. One resource per order; the one-cancels-others set it
/// expands to is implicit in the scope (every leaf under the scope node).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuyOrder {
    pub order_id: OrderId,
    pub tenant: TenantId,
    pub scope: Scope,
    pub limit: Limit,
    /// Scope price snapshot taken at placement; a no-limit bid keeps this
    /// effective price and does not follow later increases.
    pub entry_price: Rate,
    /// Post-clip price this order contributes to covered leaves and bids at
    /// acquisition. Equals `limit` (or `entry_price` when unbounded) unless
    /// volatility clipping reduced it.
    pub effective_price: Rate,
    pub placed_at: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderState {
    /// Resting; its coverage is pressing on every leaf under the scope.
    Active,
    /// Committed on a leaf; all sibling coverage was removed atomically.
    Committed { leaf: LeafRef, at: SimTime },
    Canceled { at: SimTime },
}

/// Atomic ownership transfer of one leaf.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferOutcome {
    pub time: SimTime,
    pub leaf: LeafRef,
    pub from: OwnerId,
    pub to: OwnerId,
    /// Winning order, when the new owner acquired through one.
    pub order: Option<OrderId>,
    /// Simulated physical handoff; delays usability, not billing.
    pub handoff_delay: DurationUs,
    /// Sibling coverage removed from the winner's OCO set (covered leaves
    /// minus the committed one).
    pub canceled_coverage: u64,
    /// Charged rate billed to the new owner from `time` on.
    pub new_rate: Rate,
}

/// Market events delivered to billing, visibility, and policies, ordered by
/// (effect time, leaf id, order id).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarketEvent {
    Transfer(TransferOutcome),
    RateChange {
        time: SimTime,
        leaf: LeafRef,
        tenant: TenantId,
        rate: Rate,
    },
}

impl MarketEvent {
    pub fn time(&self) -> SimTime {
        match self {
            MarketEvent::Transfer(t) => t.time,
            MarketEvent::RateChange { time, .. } => *time,
        }
    }

    pub fn leaf(&self) -> LeafRef {
        match self {
            MarketEvent::Transfer(t) => t.leaf,
            MarketEvent::RateChange { leaf, .. } => *leaf,
        }
    }

    pub fn order_key(&self) -> u64 {
        match self {
            MarketEvent::Transfer(t) => t.order.map(|o| o.0).unwrap_or(0),
            MarketEvent::RateChange { .. } => 0,
        }
    }
}

/// Upward/downward price-motion bounds. Disabled fields change nothing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolatilityConfig {
    /// Incoming effective prices are capped at
    /// `cheapest covered charged rate * (1 + clip/1e6)`.
    pub clip_factor_micro: Option<u64>,
    /// Max downward floor speed, micro-units/s per second of simulated time.
    pub floor_decay_per_s: Option<Rate>,
}

impl VolatilityConfig {
    pub fn clip_cap(&self, reference: Rate) -> Option<Rate> {
        self.clip_factor_micro
            .map(|alpha| Rate(reference.0 + reference.0 * alpha / 1_000_000))
    }
}

/// Physical handoff delay range, drawn uniformly per transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandoffConfig {
    pub min: DurationUs,
    pub max: DurationUs,
}

impl Default for HandoffConfig {
    fn default() -> Self {
        // 10-100 ms
        HandoffConfig {
            min: DurationUs::from_millis(10),
            max: DurationUs::from_millis(100),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub volatility: VolatilityConfig,
    pub handoff: HandoffConfig,
    pub seed: u64,
}

/// Floor assignment at seeding: a default rate plus subtree overrides by
/// canonical node id (applied in order, later entries win).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FloorSpec {
    pub default: Rate,
    pub overrides: Vec<(String, Rate)>,
}

impl FloorSpec {
    pub fn uniform(rate: Rate) -> FloorSpec {
        FloorSpec {
            default: rate,
            overrides: Vec::new(),
        }
    }
}

/// Scope price quote: what a new bid must meet to acquire the cheapest
/// currently acquirable covered leaf, or not acquirable at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuotedPrice {
    At(Rate),
    NotAcquirable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceQuote {
    pub scope: Scope,
    pub price: QuotedPrice,
    pub as_of: SimTime,
}
