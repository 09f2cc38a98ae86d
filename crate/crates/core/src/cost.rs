//! Search cost units: a flat charge per device per submission, a charge per
//! photo searched on a device, and a charge per result.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub flat_per_device: u64,
    pub per_photo: u64,
    pub per_result: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { flat_per_device: 1, per_photo: 1, per_result: 10 }
    }
}

impl CostModel {
    /// Smallest budget that can buy one result on one device.
    pub fn minimum_budget(&self) -> u64 {
        self.flat_per_device + self.per_photo + self.per_result
    }

    pub fn charge(&self, devices: u64, photos: u64, results: u64) -> u64 {
        devices * self.flat_per_device + photos * self.per_photo + results * self.per_result
    }
}

/// Charges accrued by one device task or summed over a session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Charges {
    pub devices: u64,
    pub photos: u64,
    pub results: u64,
    pub total: u64,
}

impl Charges {
    pub fn add(&mut self, other: &Charges) {
        self.devices += other.devices;
        self.photos += other.photos;
        self.results += other.results;
        self.total += other.total;
    }
}
