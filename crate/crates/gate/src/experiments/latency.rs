//! Time to the first streamed result and gaps between results, for fleets
//! of different sizes.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use sieve_core::config::Config;
use sieve_core::coordinator::{Coordinator, SubmitOptions};
use sieve_core::device::DeviceState;
use sieve_core::fleet::Fleet;
use sieve_core::predicates::PredicateRegistry;
use sieve_core::query::QuerySpec;

use super::incremental::submission_seed;
use super::{ExperimentError, Quartiles};
use crate::corpus::clutter_photos;

pub fn fleet_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("d{i:02}")).collect()
}

/// Device `id` always holds the same photos, whatever the fleet size.
pub fn latency_fleet(n: usize, photos: usize, bytes: u64, corpus_seed: u64, config: &Config) -> Fleet {
    let states = fleet_ids(n)
        .into_iter()
        .map(|id| {
            let photos = clutter_photos(&id, photos, bytes, corpus_seed);
            DeviceState::new(id, photos, config.wifi.clone(), config.energy_model(&config.wifi))
        })
        .collect();
    Fleet::new(states)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTrial {
    pub query: String,
    pub devices: usize,
    pub seed: u64,
    pub results: usize,
    pub photos_searched: u64,
    /// From submission to the first record, in simulated milliseconds, or
    /// wall milliseconds when paced.
    pub first_result_ms: Option<f64>,
    pub intervals_ms: Vec<f64>,
    pub wall_clock: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub query: String,
    pub devices: usize,
    pub trials: usize,
    pub first_result_ms: Option<Quartiles>,
    pub interval_ms: Option<Quartiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
    pub trials: Vec<LatencyTrial>,
}

impl LatencyReport {
    pub fn row(&self, query: &str, devices: usize) -> Option<&LatencyRow> {
        self.rows.iter().find(|r| r.query == query && r.devices == devices)
    }
}

#[derive(Debug, Clone)]
pub struct LatencySetup {
    pub photos_per_device: usize,
    pub photo_bytes: u64,
    pub corpus_seed: u64,
    pub budget: u64,
    /// Wall milliseconds per simulated millisecond; `None` reports
    /// simulated time.
    pub pacing: Option<f64>,
}

impl Default for LatencySetup {
    fn default() -> Self {
        LatencySetup { photos_per_device: 60, photo_bytes: 500_000, corpus_seed: 1, budget: 600, pacing: None }
    }
}

pub fn run_trial(name: &str, query: &QuerySpec, devices: usize, setup: &LatencySetup, config: &Config, seed: u64) -> Result<LatencyTrial, ExperimentError> {
    let coordinator = Coordinator::new(PredicateRegistry::builtin(), config.clone());
    let mut fleet = latency_fleet(devices, setup.photos_per_device, setup.photo_bytes, setup.corpus_seed, config);
    fleet.pacing = setup.pacing;
    fleet.register_all(&coordinator);
    let view = coordinator.submit(&query.to_xml(), SubmitOptions::new(setup.budget, seed))?;

    let times: Vec<f64> = match setup.pacing {
        None => {
            fleet.run_session(&coordinator, &view.session)?;
            let page = coordinator.results(&view.session, 0, usize::MAX, None)?;
            page.records.iter().map(|r| r.virtual_time_ms).collect()
        }
        Some(_) => {
            let started = Instant::now();
            std::thread::scope(|s| -> Result<Vec<f64>, ExperimentError> {
                let session = view.session.clone();
                let coordinator = &coordinator;
                let worker = s.spawn(move || fleet.run_session(coordinator, &session).map(|_| ()));
                let mut times = Vec::new();
                let mut cursor = 0;
                loop {
                    let page = coordinator.results(&view.session, cursor, usize::MAX, Some(Duration::from_millis(200)))?;
                    let now = started.elapsed().as_secs_f64() * 1000.0;
                    times.extend(page.records.iter().map(|_| now));
                    cursor = page.next_cursor;
                    if page.completion.is_some() {
                        break;
                    }
                }
                worker.join().map_err(|_| ExperimentError::Setup("fleet thread panicked".into()))??;
                Ok(times)
            })?
        }
    };
    let done = coordinator.wait_complete(&view.session, Duration::ZERO)?;
    Ok(LatencyTrial {
        query: name.to_string(),
        devices,
        seed,
        results: times.len(),
        photos_searched: done.map_or(0, |d| d.photos_searched),
        first_result_ms: times.first().copied(),
        intervals_ms: times.windows(2).map(|w| w[1] - w[0]).collect(),
        wall_clock: setup.pacing.is_some(),
    })
}

pub fn run_latency_experiment(
    queries: &[(&str, QuerySpec)],
    fleet_sizes: &[usize],
    trials: usize,
    setup: &LatencySetup,
    config: &Config,
    seed: u64,
) -> Result<LatencyReport, ExperimentError> {
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for (name, q) in queries {
        for &n in fleet_sizes {
            let mut runs = Vec::with_capacity(trials);
            for t in 0..trials {
                runs.push(run_trial(name, q, n, setup, config, submission_seed(seed, t))?);
            }
            let firsts: Vec<f64> = runs.iter().filter_map(|r| r.first_result_ms).collect();
            let gaps: Vec<f64> = runs.iter().flat_map(|r| r.intervals_ms.iter().copied()).collect();
            rows.push(LatencyRow { query: name.to_string(), devices: n, trials, first_result_ms: Quartiles::of(&firsts), interval_ms: Quartiles::of(&gaps) });
            all.extend(runs);
        }
    }
    Ok(LatencyReport { rows, trials: all })
}
