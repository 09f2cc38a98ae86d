//! Budgeted, energy-aware photo search across a fleet of emulated phones.

pub mod config;
pub mod coordinator;
pub mod cost;
pub mod device;
pub mod energy;
pub mod fleet;
pub mod estimator;
pub mod photo;
pub mod planner;
pub mod predicates;
pub mod query;
