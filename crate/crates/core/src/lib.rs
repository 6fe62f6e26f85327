//! Utility maximization and superhedging with proportional transaction
//! costs on finite event trees, with the associated dual problems, shadow
//! prices and numerical checks.

pub mod convex;
pub mod cps;
pub mod duality;
pub mod market;
pub mod portfolio;
pub mod shadow;
pub mod suite;
pub mod utility;

pub use market::{build_model, EndowmentSet, Instance, MarketModel, ModelError, ScenarioTree};
pub use utility::{Utility, UtilityError};
