//! Running cost and selectivity estimates for predicates in a pipeline.
//!
//! Selectivity is conditioned on the pipeline prefix: a predicate only sees
//! photos that every earlier predicate accepted, so its accept ratio is the
//! conditional selectivity given that prefix. When the prefix changes the
//! counts are discarded and the epoch advances.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predicates::PredicateVerdict;

/// EMA weight of the newest cost observation.
pub const COST_EMA_WEIGHT: f64 = 0.2;

/// Samples needed at the current position before a rank is trusted.
pub const MIN_SAMPLES: u64 = 10;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("conditional selectivity is undefined for an empty conditioning set")]
    EmptyCondition,
    #[error("no samples at the current pipeline position")]
    InsufficientSamples,
}

/// `|a1 ∩ a2| / |a2|`: the fraction of `a2` that `a1` also holds.
pub fn conditional_selectivity<T: Ord>(a1: &BTreeSet<T>, a2: &BTreeSet<T>) -> Result<f64, EstimatorError> {
    if a2.is_empty() {
        return Err(EstimatorError::EmptyCondition);
    }
    Ok(a1.intersection(a2).count() as f64 / a2.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PredicateStats {
    samples: u64,
    accepts: u64,
    cost_ema: Option<f64>,
    position_epoch: u64,
}

impl PredicateStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stats with exact counts, e.g. to feed known selectivities to the planner.
    pub fn from_counts(samples: u64, accepts: u64, cost: f64) -> Self {
        assert!(accepts <= samples, "accepts {accepts} exceed samples {samples}");
        assert!(cost >= 0.0, "negative cost {cost}");
        PredicateStats { samples, accepts, cost_ema: Some(cost), position_epoch: 0 }
    }

    /// Stats whose selectivity estimate is `selectivity` to within 2^-53.
    pub fn exact(cost: f64, selectivity: f64) -> Self {
        let samples = 1u64 << 53;
        let accepts = (selectivity * samples as f64).round() as u64;
        Self::from_counts(samples, accepts, cost)
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn accepts(&self) -> u64 {
        self.accepts
    }

    pub fn position_epoch(&self) -> u64 {
        self.position_epoch
    }

    /// Smoothed cost in simulated ms; `None` before the first observation.
    pub fn cost_ema(&self) -> Option<f64> {
        self.cost_ema
    }

    pub fn record(&mut self, verdict: &PredicateVerdict) {
        self.record_observation(verdict.accepted, verdict.cpu_ms);
    }

    pub fn record_observation(&mut self, accepted: bool, cpu_ms: f64) {
        self.samples += 1;
        if accepted {
            self.accepts += 1;
        }
        let cpu_ms = cpu_ms.max(0.0);
        self.cost_ema = Some(match self.cost_ema {
            None => cpu_ms,
            Some(c) => (1.0 - COST_EMA_WEIGHT) * c + COST_EMA_WEIGHT * cpu_ms,
        });
    }

    /// Records only the accept outcome. Used for verdicts computed elsewhere
    /// whose cpu time says nothing about the local cost.
    pub fn record_outcome(&mut self, accepted: bool) {
        self.samples += 1;
        if accepted {
            self.accepts += 1;
        }
    }

    pub fn selectivity_estimate(&self) -> Result<f64, EstimatorError> {
        if self.samples == 0 {
            return Err(EstimatorError::InsufficientSamples);
        }
        Ok(self.accepts as f64 / self.samples as f64)
    }

    pub fn has_enough_samples(&self) -> bool {
        self.samples >= MIN_SAMPLES
    }

    /// Discards the counts because the conditioning prefix changed. The cost
    /// estimate does not depend on position and is kept.
    pub fn reset_position(&mut self) {
        self.samples = 0;
        self.accepts = 0;
        self.position_epoch += 1;
    }

    /// Rank from the current estimates, if there are enough samples.
    pub fn rank(&self) -> Option<Rank> {
        if !self.has_enough_samples() {
            return None;
        }
        let s = self.selectivity_estimate().ok()?;
        Some(conditional_rank(self.cost_ema.unwrap_or(0.0), s))
    }
}

/// Ordering key `cost / (1 - selectivity)`. A predicate that accepts
/// everything never filters and ranks after every finite rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Rank {
    Finite(f64),
    Infinite,
}

impl Rank {
    pub fn value(self) -> f64 {
        match self {
            Rank::Finite(v) => v,
            Rank::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rank::Finite(v) => write!(f, "{v}"),
            Rank::Infinite => f.write_str("inf"),
        }
    }
}

pub fn conditional_rank(cost: f64, selectivity: f64) -> Rank {
    if selectivity >= 1.0 {
        Rank::Infinite
    } else {
        Rank::Finite(cost / (1.0 - selectivity))
    }
}
