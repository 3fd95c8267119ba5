//! Continuous-negotiation resource market.
//!
//! A topology-aware hierarchical matching market over a forest of
//! type-specific trees: scoped one-cancels-others buy orders, contestable
//! single-owner resources, second-price charged rates with operator floor
//! bids, integral billing, scoped price visibility, tenant/operator policy
//! modules, and a deterministic discrete-event simulator with FCFS and
//! FCFS-P baselines plus a scalability benchmark harness.

pub mod billing;
pub mod error;
pub mod matchbook;
pub mod topology;
pub mod units;

pub use error::{MarketError, Result};
