//! Pricing, hedging and optimization in markets with superlinear trading
//! frictions, on finite scenario trees and Monte Carlo path ensembles.
//!
//! Strategies are trading rates `phi`; holding changes are absolutely
//! continuous and every trade pays the friction `G_t(phi_t)` on top of the
//! quoted price. The crate provides the primal side (wealth dynamics,
//! superhedging and utility maximization) together with dual martingale
//! certificates that bound and certify it.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod arbitrage;
pub mod error;
pub mod friction;
pub mod market;
mod optim;
pub mod superhedge;
pub mod utility;
pub mod wealth;

pub use error::{Error, Result};
pub use friction::{DualEval, FrictionKind, FrictionSpec, Tolerance};
pub use market::{BranchingRule, GbmParams, PathEnsemble, ScenarioTree, TimeGrid};
