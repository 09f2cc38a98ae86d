//! Experiment runners. Each returns plain data; the CLI turns it into a
//! report and an exit status.

pub mod incremental;
pub mod latency;
pub mod partition;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use sieve_core::coordinator::{LookupError, SubmitError};
use sieve_core::device::DeviceError;
use sieve_core::predicates::PredicateError;

use crate::corpus::CorpusError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Submit(#[from] SubmitError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Lookup(#[from] LookupError),
    #[error(transparent)]
    Predicate(#[from] PredicateError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("{0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub n: usize,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
}

impl Quartiles {
    /// Linear-interpolated quartiles; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Quartiles { n: v.len(), p25: q(0.25), median: q(0.5), p75: q(0.75) })
    }
}
