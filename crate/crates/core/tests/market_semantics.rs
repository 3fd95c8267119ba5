//! Market-rule examples: placement, second-price rates, retention limits,
//! relinquishment, floors, and event delivery, on small hand-built forests.

use std::sync::Arc;

use laissez_core::matchbook::{
    FloorSpec, MarketConfig, MarketEngine, MarketEvent, OrderState, VolatilityConfig,
};
use laissez_core::topology::{build_forest, LeafRef, TopologyForest, TypeIx, TypeSchema};
use laissez_core::units::{Limit, OwnerId, Rate, SimTime, TenantId};
use laissez_core::MarketError;

const T0: TenantId = TenantId(0);
const T1: TenantId = TenantId(1);
const T2: TenantId = TenantId(2);

fn units(x: f64) -> Rate {
    Rate::from_units_f64(x)
}

fn secs(x: f64) -> SimTime {
    SimTime::from_secs_f64(x)
}

fn forest(fanouts: &[u32]) -> Arc<TopologyForest> {
    Arc::new(build_forest(&[TypeSchema::from_fanouts("H100", fanouts)]).unwrap())
}

fn engine(fanouts: &[u32], floor: f64) -> MarketEngine {
    MarketEngine::seed_supply(
        forest(fanouts),
        &FloorSpec::uniform(units(floor)),
        MarketConfig::default(),
    )
    .unwrap()
}

fn leaf(n: u32) -> LeafRef {
    LeafRef {
        tree: TypeIx(0),
        leaf: n,
    }
}

#[test]
fn seeding_gives_operator_everything_at_floor() {
    let eng = engine(&[2, 2], 1.0);
    for ord in 0..4 {
        assert_eq!(eng.owner_of(leaf(ord)), OwnerId::Operator);
        assert_eq!(eng.charged_rate(leaf(ord), SimTime::ZERO), units(1.0));
    }
}

#[test]
fn seeding_honors_per_node_overrides() {
    let f = forest(&[2, 2]);
    let rack1 = f.tree(TypeIx(0)).root().children[1];
    let rack1_path = f
        .node(laissez_core::topology::NodeRef { tree: TypeIx(0), node: rack1 })
        .path
        .clone();
    let eng = MarketEngine::seed_supply(
        f,
        &FloorSpec {
            default: units(1.0),
            overrides: vec![(rack1_path, units(2.0))],
        },
        MarketConfig::default(),
    )
    .unwrap();
    assert_eq!(eng.charged_rate(leaf(0), SimTime::ZERO), units(1.0));
    assert_eq!(eng.charged_rate(leaf(1), SimTime::ZERO), units(1.0));
    assert_eq!(eng.charged_rate(leaf(2), SimTime::ZERO), units(2.0));
    assert_eq!(eng.charged_rate(leaf(3), SimTime::ZERO), units(2.0));
}

#[test]
fn operator_is_never_billed() {
    let mut eng = engine(&[2, 2], 1.0);
    let events = eng.drain_events(secs(100.0)).unwrap();
    assert!(events.is_empty());
    assert_eq!(
        eng.ledger().bill_all(SimTime::ZERO, secs(100.0)).0,
        0,
        "operator self-ownership accrues nothing"
    );
}

#[test]
fn buy_from_operator_pays_the_floor() {
    // Second price vs the floor: limit 1.5 commits immediately, rate 1.0.
    let mut eng = engine(&[1], 1.0);
    let root = eng.forest().root_of("H100").unwrap();
    let (oid, outcome) = eng.place_buy(T0, root, Limit::At(units(1.5)), secs(1.0)).unwrap();
    let outcome = outcome.expect("immediate commit");
    assert_eq!(outcome.to, OwnerId::Tenant(T0));
    assert_eq!(outcome.new_rate, units(1.0));
    assert_eq!(
        eng.order_state(oid),
        Some(OrderState::Committed { leaf: leaf(0), at: secs(1.0) })
    );
    assert_eq!(eng.charged_rate(leaf(0), secs(1.0)), units(1.0));
}

#[test]
fn competing_bid_raises_rate_but_not_past_retention() {
    // Worked example: A owns at retention 1.8, floor 1.0. B bids 1.5:
    // no transfer, A's rate rises to 1.5.
    let mut eng = engine(&[1], 1.0);
    let root = eng.forest().root_of("H100").unwrap();
    eng.place_buy(T0, root, Limit::At(units(2.5)), secs(0.0)).unwrap();
    eng.set_retention_limit(T0, leaf(0), Limit::At(units(1.8)), secs(0.5)).unwrap();
    let (oid, outcome) = eng.place_buy(T1, root, Limit::At(units(1.5)), secs(1.0)).unwrap();
    assert!(outcome.is_none(), "1.5 does not cross 1.8");
    assert_eq!(eng.owner_of(leaf(0)), OwnerId::Tenant(T0));
    assert_eq!(eng.charged_rate(leaf(0), secs(1.0)), units(1.5));
    assert_eq!(eng.order_state(oid), Some(OrderState::Active));
}

#[test]
fn crossing_bid_evicts_the_owner() {
    // B bids 2.0 over A's 1.8 limit: implicit relinquishment, B owns, and
    // B's rate is the next losing bid (the floor here).
    let mut eng = engine(&[1], 1.0);
    let root = eng.forest().root_of("H100").unwrap();
    eng.place_buy(T0, root, Limit::At(units(2.5)), secs(0.0)).unwrap();
    eng.set_retention_limit(T0, leaf(0), Limit::At(units(1.8)), secs(0.5)).unwrap();
    let (_, outcome) = eng.place_buy(T1, root, Limit::At(units(2.0)), secs(1.0)).unwrap();
    let outcome = outcome.expect("2.0 crosses 1.8");
    assert_eq!(outcome.from, OwnerId::Tenant(T0));
    assert_eq!(outcome.to, OwnerId::Tenant(T1));
    assert_eq!(outcome.new_rate, units(1.0));
    assert_eq!(eng.owner_of(leaf(0)), OwnerId::Tenant(T1));
}

#[test]
fn cancel_recomputes_rates_downward() {
    let mut eng = engine(&[1], 1.0);
    let root = eng.forest().root_of("H100").unwrap();
    eng.place_buy(T0, root, Limit::At(units(2.5)), secs(0.0)).unwrap();
    let (o15, _) = eng.place_buy(T1, root, Limit::At(units(1.5)), secs(1.0)).unwrap();
    let (o13, _) = eng.place_buy(T2, root, Limit::At(units(1.3)), secs(2.0)).unwrap();
    assert_eq!(eng.charged_rate(leaf(0), secs(2.0)), units(1.5));
    eng.cancel_buy(o15, secs(3.0)).unwrap();
    assert_eq!(eng.charged_rate(leaf(0), secs(3.0)), units(1.3), "max of remainder");
    eng.cancel_buy(o13, secs(4.0)).unwrap();
    assert_eq!(eng.charged_rate(leaf(0), secs(4.0)), units(1.0), "back to floor");
    assert!(matches!(
        eng.cancel_buy(o13, secs(5.0)),
        Err(MarketError::InvalidState(_))
    ));
}

#[test]
fn retention_boundary_is_strict() {
    // rate 1.5: limit 2.0 keeps, limit 1.5 keeps (strictly-above semantics),
    // limit 1.4 transfers immediately.
    let mut eng = engine(&[1], 1.0);
    let root = eng.forest().root_of("H100").unwrap();
    eng.place_buy(T0, root, Limit::At(units(2.5)), secs(0.0)).unwrap();
    eng.place_buy(T1, root, Limit::At(units(1.5)), secs(1.0)).unwrap();
    eng.set_retention_limit(T0, leaf(0), Limit::At(units(2.0)), secs(2.0)).unwrap();
    assert_eq!(eng.owner_of(leaf(0)), OwnerId::Tenant(T0));
    eng.set_retention_limit(T0, leaf(0), Limit::At(units(1.5)), secs(3.0)).unwrap();
    assert_eq!(eng.owner_of(leaf(0)), OwnerId::Tenant(T0), "equal rate does not evict");
    eng.set_retention_limit(T0, leaf(0), Limit::At(units(1.4)), secs(4.0)).unwrap();
    assert_eq!(eng.owner_of(leaf(0)), OwnerId::Tenant(T1), "crossing fires immediately");
    assert!(matches!(
        eng.set_retention_limit(T0, leaf(0), Limit::At(units(9.9)), secs(5.0)),
        Err(MarketError::Permission(_))
    ));
}

#[test]
fn relinquish_prefers_earliest_equal_bid() {
    let mut eng = engine(&[1], 1.0);
    let root = eng.forest().root_of("H100").unwrap();
    eng.place_buy(T0, root, Limit::At(units(2.5)), secs(0.0)).unwrap();
    let (late, _) = eng.place_buy(T1, root, Limit::At(units(1.5)), secs(3.0)).unwrap();
    let (early, _) = eng.place_buy(T2, root, Limit::At(units(1.5)), secs(1.0)).unwrap();
    // Placement order differs from priority: queue priority is placement
    // time, so the t=1 order wins even though it arrived second here.
    let _ = late;
    let outcome = eng.relinquish(T0, leaf(0), secs(5.0)).unwrap();
    assert_eq!(outcome.to, OwnerId::Tenant(T2));
    assert_eq!(outcome.order, Some(early));
}

#[test]
fn relinquish_with_no_bids_reverts_to_operator() {
    let mut eng = engine(&[2, 2], 1.0);
    let root = eng.forest().root_of("H100").unwrap();
    let (_, outcome) = eng.place_buy(T0, root, Limit::At(units(1.5)), secs(0.0)).unwrap();
    let got = outcome.unwrap().leaf;
    let outcome = eng.relinquish(T0, got, secs(1.0)).unwrap();
    assert_eq!(outcome.to, OwnerId::Operator);
    assert_eq!(outcome.new_rate, units(1.0));
    assert_eq!(eng.owner_of(got), OwnerId::Operator);
}

#[test]
fn scoped_winner_cancels_siblings_tree_wide() {
    // Rack-scoped 1.6 vs root-scoped 1.7 over the same leaf: the root bid
    // wins and its pressure vanishes from every other leaf.
    let mut eng = engine(&[2, 2], 1.0);
    let f = eng.forest().clone();
    let root = f.root_of("H100").unwrap();
    let rack0 = laissez_core::topology::NodeRef {
        tree: TypeIx(0),
        node: f.tree(TypeIx(0)).root().children[0],
    };
    // A owns leaf 0 (under rack0) with a high limit.
    let (_, oc) = eng.place_buy(T0, rack0, Limit::At(units(3.0)), secs(0.0)).unwrap();
    assert_eq!(oc.unwrap().leaf, leaf(0));
    let (rack_bid, _) = eng.place_buy(T1, rack0, Limit::At(units(1.6)), secs(1.0)).unwrap();
    let (root_bid, _) = eng.place_buy(T2, root, Limit::At(units(1.7)), secs(2.0)).unwrap();
    // Both rest (operator leaves cost max(floor, covering)+tick, and A's
    // limit is 3.0)... except operator-owned leaves are acquirable above
    // floor: the rack bid 1.6 must have committed on leaf 1 instead.
    // Rebuild the scenario so every other leaf is tenant-held first.
    let _ = (rack_bid, root_bid);

    let mut eng = engine(&[2, 2], 1.0);
    for ord in 0..4 {
        let (_, oc) = eng
            .place_buy(T0, f.leaf_node_ref(leaf(ord)), Limit::At(units(3.0)), secs(0.0))
            .unwrap();
        assert!(oc.is_some());
    }
    let (rack_bid, _) = eng.place_buy(T1, rack0, Limit::At(units(1.6)), secs(1.0)).unwrap();
    let (root_bid, _) = eng.place_buy(T2, root, Limit::At(units(1.7)), secs(2.0)).unwrap();
    assert_eq!(eng.order_state(rack_bid), Some(OrderState::Active));
    assert_eq!(eng.order_state(root_bid), Some(OrderState::Active));
    assert_eq!(eng.charged_rate(leaf(0), secs(2.0)), units(1.7));
    assert_eq!(eng.charged_rate(leaf(3), secs(2.0)), units(1.7), "root bid presses all");

    let outcome = eng.relinquish(T0, leaf(0), secs(3.0)).unwrap();
    assert_eq!(outcome.order, Some(root_bid), "1.7 beats 1.6");
    assert_eq!(outcome.canceled_coverage, 3);
    assert_eq!(
        eng.charged_rate(leaf(3), secs(3.0)),
        units(1.0),
        "sibling coverage disappeared tree-wide"
    );
    assert_eq!(eng.charged_rate(leaf(1), secs(3.0)), units(1.6), "rack bid still rests");
}

#[test]
fn floor_raise_evicts_and_slewed_decay_lowers() {
    let vol = VolatilityConfig {
        clip_factor_micro: None,
        floor_decay_per_s: Some(units(0.5)),
    };
    let cfg = MarketConfig {
        volatility: vol,
        ..MarketConfig::default()
    };
    let mut eng = MarketEngine::seed_supply(forest(&[2, 2]), &FloorSpec::uniform(units(1.0)), cfg)
        .unwrap();
    let f = eng.forest().clone();
    let root = f.root_of("H100").unwrap();
    let rack0 = laissez_core::topology::NodeRef {
        tree: TypeIx(0),
        node: f.tree(TypeIx(0)).root().children[0],
    };
    // Owners on leaves 0 and 2 with limits 1.8.
    for ord in [0u32, 2] {
        eng.place_buy(T0, f.leaf_node_ref(leaf(ord)), Limit::At(units(1.8)), secs(0.0))
            .unwrap();
    }
    // Raising rack0's floor to 2.0 crosses leaf 0's limit only.
    eng.set_floor(OwnerId::Operator, rack0, units(2.0), secs(1.0)).unwrap();
    assert_eq!(eng.owner_of(leaf(0)), OwnerId::Operator, "owner implicitly relinquished");
    assert_eq!(eng.owner_of(leaf(2)), OwnerId::Tenant(T0), "other rack untouched");
    assert_eq!(eng.charged_rate(leaf(0), secs(1.0)), units(2.0));

    // Lowering 2.0 -> 1.0 at beta = 0.5/s takes 2 s.
    eng.set_floor(OwnerId::Operator, rack0, units(1.0), secs(10.0)).unwrap();
    assert_eq!(eng.charged_rate(leaf(0), secs(10.0)), units(2.0));
    assert_eq!(eng.charged_rate(leaf(0), secs(11.0)), units(1.5));
    assert_eq!(eng.charged_rate(leaf(0), secs(12.0)), units(1.0));
    assert_eq!(eng.charged_rate(leaf(0), secs(13.0)), units(1.0));

    // Floor raise below all retention limits: no transfer, rates rise.
    let mut eng2 = engine(&[2, 2], 1.0);
    for ord in 0..4 {
        eng2.place_buy(T0, f.leaf_node_ref(leaf(ord)), Limit::At(units(1.8)), secs(0.0))
            .unwrap();
    }
    eng2.set_floor(OwnerId::Operator, root, units(1.5), secs(1.0)).unwrap();
    for ord in 0..4 {
        assert_eq!(eng2.owner_of(leaf(ord)), OwnerId::Tenant(T0));
        assert_eq!(eng2.charged_rate(leaf(ord), secs(1.0)), units(1.5));
    }
    assert!(matches!(
        eng2.set_floor(OwnerId::Tenant(T1), root, units(9.0), secs(2.0)),
        Err(MarketError::Permission(_))
    ));
}

#[test]
fn charged_rate_excludes_owner_and_floor_dominates() {
    let mut eng = engine(&[1], 1.0);
    let root = eng.forest().root_of("H100").unwrap();
    eng.place_buy(T0, root, Limit::At(units(2.5)), secs(0.0)).unwrap();
    // A bid below the floor leaves the rate at the floor.
    eng.place_buy(T1, root, Limit::At(units(0.8)), secs(1.0)).unwrap();
    assert_eq!(eng.charged_rate(leaf(0), secs(1.0)), units(1.0));
    // Owner's own resting order elsewhere in the tree is excluded; B and C
    // losing bids drive the max.
    eng.place_buy(T1, root, Limit::At(units(1.2)), secs(2.0)).unwrap();
    eng.place_buy(T2, root, Limit::At(units(1.4)), secs(3.0)).unwrap();
    eng.place_buy(T0, root, Limit::At(units(2.4)), secs(4.0)).unwrap();
    assert_eq!(
        eng.charged_rate(leaf(0), secs(4.0)),
        units(1.4),
        "own 2.4 bid excluded, max of others"
    );
}

#[test]
fn drain_events_orders_and_replays_deterministically() {
    let build = || {
        let mut eng = engine(&[2, 2], 1.0);
        let f = eng.forest().clone();
        let root = f.root_of("H100").unwrap();
        eng.place_buy(T0, root, Limit::At(units(1.5)), secs(1.0)).unwrap();
        eng.place_buy(T1, root, Limit::At(units(1.4)), secs(2.0)).unwrap();
        eng.set_retention_limit(T0, leaf(0), Limit::At(units(1.2)), secs(3.0)).unwrap();
        eng.relinquish(T1, leaf(0), secs(4.0)).unwrap();
        eng.drain_events(secs(5.0)).unwrap()
    };
    let a = build();
    let b = build();
    assert_eq!(a, b, "replay is bit-identical");
    assert!(!a.is_empty());
    let mut last = (SimTime::ZERO, String::new(), 0u64);
    for ev in &a {
        let key = (
            ev.time(),
            match ev {
                MarketEvent::Transfer(t) => format!("{:?}", t.leaf),
                MarketEvent::RateChange { leaf, .. } => format!("{leaf:?}"),
            },
            ev.order_key(),
        );
        assert!(key >= last, "events ordered by (time, leaf, order)");
        last = key;
    }
}

#[test]
fn empty_drain_and_single_commit_event_counts() {
    let mut eng = engine(&[1], 1.0);
    assert!(eng.drain_events(secs(1.0)).unwrap().is_empty());
    let root = eng.forest().root_of("H100").unwrap();
    eng.place_buy(T0, root, Limit::At(units(1.5)), secs(2.0)).unwrap();
    let events = eng.drain_events(secs(3.0)).unwrap();
    let transfers = events
        .iter()
        .filter(|e| matches!(e, MarketEvent::Transfer(_)))
        .count();
    assert_eq!(transfers, 1);
}

#[test]
fn clip_bounds_single_order_impact() {
    // clip 50%: an incoming 5.0 bid over a 1.0-rate leaf presses at most 1.5.
    let cfg = MarketConfig {
        volatility: VolatilityConfig {
            clip_factor_micro: Some(500_000),
            floor_decay_per_s: None,
        },
        ..MarketConfig::default()
    };
    let mut eng =
        MarketEngine::seed_supply(forest(&[1]), &FloorSpec::uniform(units(1.0)), cfg).unwrap();
    let root = eng.forest().root_of("H100").unwrap();
    eng.place_buy(T0, root, Limit::At(units(9.9)), secs(0.0)).unwrap();
    eng.set_retention_limit(T0, leaf(0), Limit::At(units(9.9)), secs(0.0)).unwrap();
    let before = eng.charged_rate(leaf(0), secs(1.0));
    let (oid, outcome) = eng.place_buy(T1, root, Limit::At(units(5.0)), secs(1.0)).unwrap();
    assert!(outcome.is_none(), "clipped below the retention limit");
    let after = eng.charged_rate(leaf(0), secs(1.0));
    assert_eq!(before, units(1.0));
    assert_eq!(after, units(1.5), "previous rate x (1 + 0.5)");
    assert_eq!(eng.order(oid).unwrap().effective_price, units(1.5));
}
