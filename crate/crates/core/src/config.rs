//! Plain-text `key=value` configuration.
//!
//! ```text
//! # network profiles
//! wifi.rtt_ms=66
//! wifi.tx_power_mw=266
//! wifi.bandwidth_bytes_per_s=2000000
//! g3.rtt_ms=95
//! energy.alpha_mw=100000
//! cost.per_result=10
//! server.flat_fraction=0.04
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostModel;
use crate::energy::{EnergyError, EnergyModel, NetworkProfile};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {value:?}")]
    Value { line: usize, key: String, value: String },
    #[error(transparent)]
    Profile(#[from] EnergyError),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub wifi: NetworkProfile,
    pub g3: NetworkProfile,
    pub alpha_mw: f64,
    pub idle_mw: f64,
    pub cost: CostModel,
    /// Share of the budget set aside for flat per-device charges; sets how
    /// many devices a submission reaches.
    pub flat_fraction: f64,
    pub training_photos: usize,
    pub probe_photos: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            wifi: NetworkProfile::wifi(),
            g3: NetworkProfile::g3(),
            alpha_mw: EnergyModel::DEFAULT_ALPHA_MW,
            idle_mw: 0.0,
            cost: CostModel::default(),
            flat_fraction: DEFAULT_FLAT_FRACTION,
            training_photos: 5,
            probe_photos: 2,
        }
    }
}

/// With 1/1/10 units a device needs a share of at least 12 to return one
/// result, so the fraction must leave shares of that size.
pub const DEFAULT_FLAT_FRACTION: f64 = 0.04;

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: line_no, message: format!("expected key=value, got {line:?}") })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || ConfigError::Value { line: line_no, key: key.to_string(), value: value.to_string() };
            let real = || value.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(bad);
            let count = || value.parse::<u64>().map_err(|_| bad());
            match key {
                "wifi.rtt_ms" => cfg.wifi.rtt_ms = real()?,
                "wifi.tx_power_mw" => cfg.wifi.tx_power_mw = real()?,
                "wifi.bandwidth_bytes_per_s" => cfg.wifi.bandwidth_bytes_per_s = real()?,
                "g3.rtt_ms" => cfg.g3.rtt_ms = real()?,
                "g3.tx_power_mw" => cfg.g3.tx_power_mw = real()?,
                "g3.bandwidth_bytes_per_s" => cfg.g3.bandwidth_bytes_per_s = real()?,
                "energy.alpha_mw" => cfg.alpha_mw = real()?,
                "energy.idle_mw" => cfg.idle_mw = real()?,
                "cost.flat_per_device" => cfg.cost.flat_per_device = count()?,
                "cost.per_photo" => cfg.cost.per_photo = count()?,
                "cost.per_result" => cfg.cost.per_result = count()?,
                "server.flat_fraction" => cfg.flat_fraction = real()?,
                "device.training_photos" => cfg.training_photos = count()? as usize,
                "device.probe_photos" => cfg.probe_photos = count()? as usize,
                _ => return Err(ConfigError::UnknownKey { line: line_no, key: key.to_string() }),
            }
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        self.wifi.check()?;
        self.g3.check()?;
        if self.alpha_mw <= 0.0 || self.idle_mw < 0.0 {
            return Err(ConfigError::Invalid("energy.alpha_mw must be > 0 and energy.idle_mw >= 0".into()));
        }
        if !(self.flat_fraction > 0.0 && self.flat_fraction <= 1.0) {
            return Err(ConfigError::Invalid(format!("server.flat_fraction must be in (0, 1], got {}", self.flat_fraction)));
        }
        if self.cost.flat_per_device == 0 {
            return Err(ConfigError::Invalid("cost.flat_per_device must be at least 1".into()));
        }
        Ok(())
    }

    pub fn profile(&self, name: &str) -> Option<&NetworkProfile> {
        match name {
            "wifi" => Some(&self.wifi),
            "3g" | "g3" => Some(&self.g3),
            _ => None,
        }
    }

    /// Energy model of an emulated handset on `profile`.
    pub fn energy_model(&self, profile: &NetworkProfile) -> EnergyModel {
        EnergyModel { alpha_mw: self.alpha_mw, beta_mw: profile.tx_power_mw, idle_mw: self.idle_mw }
    }

    /// The same settings in the file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (prefix, p) in [("wifi", &self.wifi), ("g3", &self.g3)] {
            let _ = writeln!(out, "{prefix}.rtt_ms={}", p.rtt_ms);
            let _ = writeln!(out, "{prefix}.tx_power_mw={}", p.tx_power_mw);
            let _ = writeln!(out, "{prefix}.bandwidth_bytes_per_s={}", p.bandwidth_bytes_per_s);
        }
        let _ = writeln!(out, "energy.alpha_mw={}", self.alpha_mw);
        let _ = writeln!(out, "energy.idle_mw={}", self.idle_mw);
        let _ = writeln!(out, "cost.flat_per_device={}", self.cost.flat_per_device);
        let _ = writeln!(out, "cost.per_photo={}", self.cost.per_photo);
        let _ = writeln!(out, "cost.per_result={}", self.cost.per_result);
        let _ = writeln!(out, "server.flat_fraction={}", self.flat_fraction);
        let _ = writeln!(out, "device.training_photos={}", self.training_photos);
        let _ = writeln!(out, "device.probe_photos={}", self.probe_photos);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_measured_links() {
        let c = Config::default();
        assert_eq!((c.wifi.rtt_ms, c.wifi.tx_power_mw), (66.0, 266.0));
        assert_eq!((c.g3.rtt_ms, c.g3.tx_power_mw), (95.0, 571.0));
        assert_eq!(c.cost, CostModel { flat_per_device: 1, per_photo: 1, per_result: 10 });
    }

    #[test]
    fn parses_overrides_and_round_trips() {
        let c = Config::parse("# comment\nwifi.rtt_ms=70\n\ng3.tx_power_mw = 600\nserver.flat_fraction=0.1\n").unwrap();
        assert_eq!(c.wifi.rtt_ms, 70.0);
        assert_eq!(c.g3.tx_power_mw, 600.0);
        assert_eq!(c.flat_fraction, 0.1);
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Config::parse("wifi.speed=3"), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(Config::parse("x"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(Config::parse("\ncost.per_photo=-1"), Err(ConfigError::Value { line: 2, .. })));
        assert!(Config::parse("wifi.bandwidth_bytes_per_s=0").is_err());
        assert!(Config::parse("server.flat_fraction=0").is_err());
    }
}
