//! Linear device energy model, network profiles, and per-device energy
//! accounting in simulated time.
//!
//! Units: powers in mW, times in ms, energies in mJ (mW · ms / 1000).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("energy fit needs at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("energy fit is rank deficient: {0}")]
    Degenerate(&'static str),
    #[error("invalid network profile: {0}")]
    Profile(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkProfile {
    pub name: String,
    pub rtt_ms: f64,
    pub bandwidth_bytes_per_s: f64,
    pub tx_power_mw: f64,
}

impl NetworkProfile {
    pub fn new(name: impl Into<String>, rtt_ms: f64, bandwidth_bytes_per_s: f64, tx_power_mw: f64) -> Result<Self, EnergyError> {
        let p = NetworkProfile { name: name.into(), rtt_ms, bandwidth_bytes_per_s, tx_power_mw };
        p.check()?;
        Ok(p)
    }

    pub fn wifi() -> Self {
        NetworkProfile { name: "wifi".into(), rtt_ms: 66.0, bandwidth_bytes_per_s: 2.0e6, tx_power_mw: 266.0 }
    }

    pub fn g3() -> Self {
        NetworkProfile { name: "3g".into(), rtt_ms: 95.0, bandwidth_bytes_per_s: 3.0e5, tx_power_mw: 571.0 }
    }

    pub fn check(&self) -> Result<(), EnergyError> {
        if !(self.rtt_ms >= 0.0) {
            return Err(EnergyError::Profile(format!("{}: rtt_ms must be >= 0, got {}", self.name, self.rtt_ms)));
        }
        if !(self.bandwidth_bytes_per_s > 0.0) {
            return Err(EnergyError::Profile(format!("{}: bandwidth must be > 0, got {}", self.name, self.bandwidth_bytes_per_s)));
        }
        if !(self.tx_power_mw >= 0.0) {
            return Err(EnergyError::Profile(format!("{}: tx_power_mw must be >= 0, got {}", self.name, self.tx_power_mw)));
        }
        Ok(())
    }

    /// Same link with `extra_ms` added to the round trip.
    pub fn with_extra_rtt(&self, extra_ms: f64) -> Self {
        NetworkProfile { rtt_ms: self.rtt_ms + extra_ms, ..self.clone() }
    }

    /// One round trip plus serialization of `bytes`.
    pub fn tx_time_ms(&self, bytes: u64) -> f64 {
        self.rtt_ms + 1000.0 * bytes as f64 / self.bandwidth_bytes_per_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    /// Draw while computing predicates.
    pub alpha_mw: f64,
    /// Draw while transmitting.
    pub beta_mw: f64,
    /// Baseline draw over all elapsed time.
    pub idle_mw: f64,
}

impl EnergyModel {
    /// Compute draw that makes a 30 ms predicate cost 3 J per photo, so a
    /// face query over 100 photos comes to about 300 J.
    pub const DEFAULT_ALPHA_MW: f64 = 100_000.0;

    pub fn for_profile(profile: &NetworkProfile) -> Self {
        EnergyModel { alpha_mw: Self::DEFAULT_ALPHA_MW, beta_mw: profile.tx_power_mw, idle_mw: 0.0 }
    }

    pub fn compute_mj(&self, ms: f64) -> f64 {
        self.alpha_mw * ms / 1000.0
    }

    pub fn transmit_mj(&self, ms: f64) -> f64 {
        self.beta_mw * ms / 1000.0
    }

    pub fn idle_mj(&self, ms: f64) -> f64 {
        self.idle_mw * ms / 1000.0
    }

    /// Energy of one sample under this model, idle included.
    pub fn predict_mj(&self, compute_ms: f64, tx_ms: f64) -> f64 {
        self.compute_mj(compute_ms) + self.transmit_mj(tx_ms) + self.idle_mj(compute_ms + tx_ms)
    }

    /// Converts energy into the compute time that would draw the same.
    pub fn compute_ms_equivalent(&self, mj: f64) -> f64 {
        if self.alpha_mw > 0.0 {
            mj / (self.alpha_mw / 1000.0)
        } else {
            f64::INFINITY
        }
    }
}

/// `beta · tx_time / 1000` in mJ for sending one photo.
pub fn offload_energy_mj(profile: &NetworkProfile, model: &EnergyModel, photo_bytes: u64) -> f64 {
    model.transmit_mj(profile.tx_time_ms(photo_bytes))
}

/// Offload energy expressed as compute-ms: the cost of the `pw` filter.
pub fn offload_cost_ms(profile: &NetworkProfile, model: &EnergyModel, photo_bytes: u64) -> f64 {
    model.compute_ms_equivalent(offload_energy_mj(profile, model, photo_bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergySample {
    pub compute_ms: f64,
    pub tx_ms: f64,
    pub measured_mj: f64,
}

/// Least-squares fit of `measured = alpha·compute/1000 + beta·tx/1000`.
///
/// Elapsed time is `compute + tx`, so an idle term is a linear combination
/// of the other two columns and cannot be separated from them; it is folded
/// into alpha and beta and reported as zero.
pub fn fit_energy_model(samples: &[EnergySample]) -> Result<EnergyModel, EnergyError> {
    if samples.len() < 3 {
        return Err(EnergyError::TooFewSamples(samples.len()));
    }
    let (mut scc, mut stt, mut sct, mut scy, mut sty) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in samples {
        let (c, t) = (s.compute_ms / 1000.0, s.tx_ms / 1000.0);
        scc += c * c;
        stt += t * t;
        sct += c * t;
        scy += c * s.measured_mj;
        sty += t * s.measured_mj;
    }
    if scc == 0.0 {
        return Err(EnergyError::Degenerate("no sample has compute time"));
    }
    if stt == 0.0 {
        return Err(EnergyError::Degenerate("no sample has transmit time"));
    }
    let det = scc * stt - sct * sct;
    if det <= 1e-12 * scc * stt {
        return Err(EnergyError::Degenerate("compute and transmit times are proportional"));
    }
    Ok(EnergyModel {
        alpha_mw: (scy * stt - sty * sct) / det,
        beta_mw: (sty * scc - scy * sct) / det,
        idle_mw: 0.0,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub compute_mj: f64,
    pub transmit_mj: f64,
    pub idle_mj: f64,
}

impl EnergyLedger {
    pub fn total_mj(&self) -> f64 {
        self.compute_mj + self.transmit_mj + self.idle_mj
    }

    pub fn add_compute(&mut self, model: &EnergyModel, ms: f64) -> f64 {
        let mj = model.compute_mj(ms);
        self.compute_mj += mj;
        mj
    }

    pub fn add_transmit(&mut self, model: &EnergyModel, ms: f64) -> f64 {
        let mj = model.transmit_mj(ms);
        self.transmit_mj += mj;
        mj
    }

    pub fn add_idle(&mut self, model: &EnergyModel, ms: f64) -> f64 {
        let mj = model.idle_mj(ms);
        self.idle_mj += mj;
        mj
    }

    pub fn merge(&mut self, other: &EnergyLedger) {
        self.compute_mj += other.compute_mj;
        self.transmit_mj += other.transmit_mj;
        self.idle_mj += other.idle_mj;
    }
}
