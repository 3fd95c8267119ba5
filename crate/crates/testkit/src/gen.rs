//! Forest factories, action-sequence grammars, and sequence generators for
//! the oracle-equivalence suites.

use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use laissez_core::matchbook::{FloorSpec, MarketConfig, MarketEngine, VolatilityConfig};
use laissez_core::topology::{build_forest, TopologyForest, TypeSchema};
use laissez_core::units::Rate;

use crate::drive::{Action, DualDriver};
use crate::flat::FlatEngine;

/// Small forests used by the equivalence suites (≤ 16 leaves).
pub fn test_forest(shape: usize) -> Arc<TopologyForest> {
    let schemas = match shape % 6 {
        0 => vec![TypeSchema::from_fanouts("H100", &[1])],
        1 => vec![TypeSchema::from_fanouts("H100", &[2, 2])],
        2 => vec![TypeSchema::from_fanouts("H100", &[2, 2, 2])],
        3 => vec![TypeSchema::from_fanouts("H100", &[4, 4])],
        4 => vec![TypeSchema::from_fanouts("H100", &[2, 3])],
        _ => vec![
            TypeSchema::from_fanouts("A100", &[2, 2]),
            TypeSchema::from_fanouts("H100", &[3]),
        ],
    };
    Arc::new(build_forest(&schemas).unwrap())
}

/// Both engines seeded identically over the same forest.
pub fn dual_driver(
    shape: usize,
    cfg: MarketConfig,
    floor: Rate,
    step_us: u64,
) -> DualDriver {
    let forest = test_forest(shape);
    let floors = FloorSpec::uniform(floor);
    let hier = MarketEngine::seed_supply(forest.clone(), &floors, cfg).unwrap();
    let flat = FlatEngine::seed_supply(forest, &floors, cfg).unwrap();
    DualDriver::new(hier, flat, step_us)
}

/// Volatility variants the generators cycle through.
pub fn volatility_variant(i: usize) -> VolatilityConfig {
    match i % 4 {
        0 => VolatilityConfig::default(),
        1 => VolatilityConfig {
            clip_factor_micro: Some(500_000), // +50%
            floor_decay_per_s: None,
        },
        2 => VolatilityConfig {
            clip_factor_micro: None,
            floor_decay_per_s: Some(Rate(500_000)), // 0.5 units/s^2
        },
        _ => VolatilityConfig {
            clip_factor_micro: Some(250_000),
            floor_decay_per_s: Some(Rate(200_000)),
        },
    }
}

/// The fixed alphabet for exhaustive enumeration: a compact mix of scoped
/// placements, cancels, limit moves, relinquishments, floor moves, and
/// drains. Rates are in 100k-micro-units (10 = 1.0 units/s).
pub fn exhaustive_alphabet() -> Vec<Action> {
    vec![
        Action::Place { tenant: 0, scope: 0, limit_100k: Some(15) },
        Action::Place { tenant: 1, scope: 0, limit_100k: Some(20) },
        Action::Place { tenant: 1, scope: 2, limit_100k: Some(18) },
        Action::Place { tenant: 2, scope: 5, limit_100k: None },
        Action::Cancel { pick: 0 },
        Action::SetRetention { leaf: 1, limit_100k: Some(14) },
        Action::Relinquish { leaf: 0 },
        Action::SetFloor { scope: 1, rate_100k: 17 },
    ]
}

/// Exhaustively run every action sequence of length ≤ `max_len` over the
/// alphabet, cloning the lockstep drivers at each prefix. Returns the number
/// of sequences checked.
pub fn run_exhaustive(
    base: &DualDriver,
    alphabet: &[Action],
    max_len: usize,
) -> Result<u64, String> {
    fn rec(
        driver: &DualDriver,
        alphabet: &[Action],
        remaining: usize,
        count: &mut u64,
    ) -> Result<(), String> {
        if remaining == 0 {
            return Ok(());
        }
        for &a in alphabet {
            let mut next = driver.clone();
            next.apply(a)
                .map_err(|e| format!("{e}\n  after action {a:?}"))?;
            *count += 1;
            rec(&next, alphabet, remaining - 1, count)?;
        }
        Ok(())
    }
    let mut count = 0;
    rec(base, alphabet, max_len, &mut count)?;
    Ok(count)
}

/// One random action; the parameter space sweeps scope/leaf/tenant selectors
/// and a small rate lattice.
pub fn random_action(rng: &mut ChaCha8Rng) -> Action {
    let limit = |rng: &mut ChaCha8Rng| {
        if rng.next_u32() % 10 == 0 {
            None
        } else {
            Some(8 + (rng.next_u32() % 18) as u16)
        }
    };
    match rng.next_u32() % 12 {
        0..=4 => Action::Place {
            tenant: (rng.next_u32() % 4) as u8,
            scope: (rng.next_u32() % 64) as u8,
            limit_100k: limit(rng),
        },
        5 | 6 => Action::Cancel { pick: (rng.next_u32() % 8) as u8 },
        7 => Action::SetRetention {
            leaf: (rng.next_u32() % 32) as u8,
            limit_100k: limit(rng),
        },
        8 | 9 => Action::Relinquish { leaf: (rng.next_u32() % 32) as u8 },
        10 => Action::SetFloor {
            scope: (rng.next_u32() % 64) as u8,
            rate_100k: 5 + (rng.next_u32() % 20) as u16,
        },
        _ => Action::Drain,
    }
}

/// Run `sequences` random sequences of length `len` with rotating forest
/// shapes and volatility variants. Returns total actions applied.
pub fn run_randomized(sequences: u64, len: usize, seed: u64) -> Result<u64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut applied = 0;
    for i in 0..sequences {
        let cfg = MarketConfig {
            volatility: volatility_variant((i % 4) as usize),
            seed: seed ^ i,
            ..MarketConfig::default()
        };
        // Mixed action pacing exercises both same-instant and spaced events.
        let step = [0u64, 100_000, 1_000_000][(i % 3) as usize].max(1);
        let mut driver = dual_driver((i % 6) as usize, cfg, Rate(1_000_000), step);
        for _ in 0..len {
            let action = random_action(&mut rng);
            driver
                .apply(action)
                .map_err(|e| format!("seq {i} (seed {seed}): {e}\n  action {action:?}"))?;
            applied += 1;
        }
        driver
            .apply(Action::Drain)
            .map_err(|e| format!("seq {i} final drain: {e}"))?;
        crate::drive::check_invariants(&driver.hier, driver.now)
            .map_err(|e| format!("seq {i} invariant: {e}"))?;
    }
    Ok(applied)
}
