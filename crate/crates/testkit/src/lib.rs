//! Test support for the market workspace: the flat eager-expansion
//! reference engine, a lockstep dual-engine driver, spec-invariant checkers,
//! billing re-integration, and sequence generators.
//!
//! Everything here is dev-dependency material; nothing ships in the product
//! crates.

pub mod drive;
pub mod flat;
pub mod gen;

pub use drive::{
    check_event_log, check_invariants, reintegrate_bills, Action, DualDriver, MarketApi,
};
pub use flat::FlatEngine;
pub use gen::{
    dual_driver, exhaustive_alphabet, random_action, run_exhaustive, run_randomized, test_forest,
    volatility_variant,
};
