//! Single-device energy runs: the same photos under each execution strategy
//! and network profile, plus the delay-injection run.

use serde::{Deserialize, Serialize};

use sieve_core::config::Config;
use sieve_core::coordinator::Coordinator;
use sieve_core::device::{DeviceResult, DeviceState, SearchRun, Strategy, TaskSpec, TraceEntry};
use sieve_core::energy::NetworkProfile;
use sieve_core::photo::Photo;
use sieve_core::predicates::PredicateRegistry;
use sieve_core::query::QuerySpec;

use super::ExperimentError;
use crate::corpus::clutter_photos;

pub const PHONE_ID: &str = "phone";

/// Photos for the single-device runs: clutter with a fixed nominal size.
pub fn phone_photos(count: usize, bytes: u64, seed: u64) -> Vec<Photo> {
    clutter_photos(PHONE_ID, count, bytes, seed)
}

pub fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Partitioned => "partitioned",
        Strategy::Local => "local",
        Strategy::FullOffload => "full_offload",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionCell {
    pub query: String,
    pub profile: String,
    pub strategy: String,
    pub photos: usize,
    pub results: usize,
    pub energy_mj: f64,
    pub compute_mj: f64,
    pub transmit_mj: f64,
    pub time_s: f64,
    /// Energy of the photos after `window_from`.
    pub window_energy_mj: f64,
    pub window_time_s: f64,
    pub final_offload_index: usize,
    pub offloaded_photos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceCheck {
    pub query: String,
    pub profile: String,
    pub partitioned_mj: f64,
    pub local_mj: f64,
    pub full_offload_mj: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub cells: Vec<PartitionCell>,
    pub checks: Vec<DominanceCheck>,
}

/// Runs one strategy over `photos` on a fresh device and returns the
/// per-photo trace. The coordinator plays the server side.
pub fn run_trace(
    query: &QuerySpec,
    photos: &[Photo],
    profile: &NetworkProfile,
    strategy: Strategy,
    config: &Config,
    seed: u64,
    mut before_photo: impl FnMut(usize, &mut DeviceState),
) -> Result<(Vec<TraceEntry>, Vec<DeviceResult>, DeviceState), ExperimentError> {
    let registry = PredicateRegistry::builtin();
    let server = Coordinator::new(registry.clone(), config.clone());
    let mut state = DeviceState::new(PHONE_ID, photos.to_vec(), profile.clone(), config.energy_model(profile));
    let cost = config.cost;
    let n = photos.len();
    let mut spec = TaskSpec::new("energy", query.clone(), cost.flat_per_device + n as u64 * (cost.per_photo + cost.per_result));
    spec.cost = cost;
    spec.strategy = strategy;
    spec.seed = seed;
    spec.max_photos = Some(n);
    spec.training_photos = config.training_photos;
    spec.probe_photos = config.probe_photos;
    let mut run = SearchRun::start(spec, &mut state, &registry)?;
    let mut results = Vec::new();
    while !run.is_done() {
        before_photo(run.trace().len() + 1, &mut state);
        run.step(&mut state, &server, &mut results)?;
    }
    Ok((run.trace().to_vec(), results, state))
}

pub fn run_cell(
    name: &str,
    query: &QuerySpec,
    photos: &[Photo],
    profile: &NetworkProfile,
    strategy: Strategy,
    config: &Config,
    seed: u64,
    window_from: usize,
) -> Result<PartitionCell, ExperimentError> {
    let (trace, results, state) = run_trace(query, photos, profile, strategy, config, seed, |_, _| {})?;
    let last = trace.last().ok_or_else(|| ExperimentError::Setup("no photo was evaluated".into()))?;
    let before = if window_from == 0 { None } else { trace.get(window_from - 1) };
    let (e0, t0) = before.map_or((0.0, 0.0), |e| (e.energy_mj, e.clock_ms));
    Ok(PartitionCell {
        query: name.to_string(),
        profile: profile.name.clone(),
        strategy: strategy_name(strategy).to_string(),
        photos: trace.len(),
        results: results.len(),
        energy_mj: last.energy_mj,
        compute_mj: state.ledger.compute_mj,
        transmit_mj: state.ledger.transmit_mj,
        time_s: last.clock_ms / 1000.0,
        window_energy_mj: last.energy_mj - e0,
        window_time_s: (last.clock_ms - t0) / 1000.0,
        final_offload_index: last.offload_index,
        offloaded_photos: trace.iter().filter(|e| e.offloaded).count(),
    })
}

/// Every (query, profile, strategy) cell over the same photos, and whether
/// the partitioned run used no more energy than either fixed strategy after
/// `window_from` photos.
pub fn run_partition_experiment(
    queries: &[(&str, QuerySpec)],
    profiles: &[NetworkProfile],
    photos: &[Photo],
    config: &Config,
    seed: u64,
    window_from: usize,
) -> Result<PartitionReport, ExperimentError> {
    let mut cells = Vec::new();
    let mut checks = Vec::new();
    for (name, q) in queries {
        for profile in profiles {
            let by = |s| run_cell(name, q, photos, profile, s, config, seed, window_from);
            let p = by(Strategy::Partitioned)?;
            let l = by(Strategy::Local)?;
            let f = by(Strategy::FullOffload)?;
            checks.push(DominanceCheck {
                query: name.to_string(),
                profile: profile.name.clone(),
                partitioned_mj: p.window_energy_mj,
                local_mj: l.window_energy_mj,
                full_offload_mj: f.window_energy_mj,
                holds: p.window_energy_mj <= l.window_energy_mj + 1e-9 && p.window_energy_mj <= f.window_energy_mj + 1e-9,
            });
            cells.extend([p, l, f]);
        }
    }
    Ok(PartitionReport { cells, checks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicRow {
    pub seq: usize,
    pub photo_id: String,
    pub extra_rtt_ms: f64,
    pub offload_index: usize,
    pub wireless_cost: f64,
    pub order: Vec<usize>,
    pub offloaded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicSummary {
    pub inject_at: usize,
    pub remove_at: Option<usize>,
    pub extra_rtt_ms: f64,
    /// Offload index of the photo just before the injection.
    pub index_before: usize,
    /// First photo at or after the injection whose index is larger.
    pub shifted_at: Option<usize>,
    /// First photo at or after the removal back at `index_before`.
    pub restored_at: Option<usize>,
    pub shift_within: usize,
    pub shift_ok: bool,
    pub restore_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicReport {
    pub rows: Vec<DynamicRow>,
    pub summary: DynamicSummary,
}

/// Runs a partitioned search, adding `extra_rtt_ms` of delay before photo
/// `inject_at` (1-based) and removing it before `remove_at`.
pub fn run_dynamic(
    query: &QuerySpec,
    photos: &[Photo],
    profile: &NetworkProfile,
    config: &Config,
    seed: u64,
    inject_at: usize,
    extra_rtt_ms: f64,
    remove_at: Option<usize>,
) -> Result<DynamicReport, ExperimentError> {
    if inject_at < 2 || remove_at.is_some_and(|r| r <= inject_at) {
        return Err(ExperimentError::Setup("need 2 <= inject_at < remove_at".into()));
    }
    let mut extra = 0.0;
    let mut extras = Vec::new();
    let (trace, _, _) = run_trace(query, photos, profile, Strategy::Partitioned, config, seed, |seq, state| {
        if seq == inject_at {
            extra = extra_rtt_ms;
            state.inject_delay(extra);
        }
        if Some(seq) == remove_at {
            extra = 0.0;
            state.inject_delay(0.0);
        }
        extras.push(extra);
    })?;
    let rows: Vec<DynamicRow> = trace
        .iter()
        .zip(&extras)
        .map(|(e, &x)| DynamicRow {
            seq: e.seq,
            photo_id: e.photo_id.clone(),
            extra_rtt_ms: x,
            offload_index: e.offload_index,
            wireless_cost: e.wireless_cost,
            order: e.order.clone(),
            offloaded: e.offloaded,
        })
        .collect();
    let at = |seq: usize| rows.get(seq - 1);
    let index_before = at(inject_at - 1).map(|r| r.offload_index).ok_or_else(|| ExperimentError::Setup("run ended before the injection".into()))?;
    let shifted_at = rows.iter().filter(|r| r.seq >= inject_at && remove_at.is_none_or(|x| r.seq < x)).find(|r| r.offload_index > index_before).map(|r| r.seq);
    let restored_at = remove_at.and_then(|x| rows.iter().filter(|r| r.seq >= x).find(|r| r.offload_index == index_before).map(|r| r.seq));
    let within = 10;
    let summary = DynamicSummary {
        inject_at,
        remove_at,
        extra_rtt_ms,
        index_before,
        shifted_at,
        restored_at,
        shift_within: within,
        shift_ok: shifted_at.is_some_and(|s| s < inject_at + within),
        restore_ok: match remove_at {
            Some(x) => restored_at.is_some_and(|s| s < x + within),
            None => true,
        },
    };
    Ok(DynamicReport { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::{all_accept, query1};

    #[test]
    fn local_all_accept_never_transmits() {
        let photos = phone_photos(20, 500_000, 1);
        let c = run_cell("all_accept", &all_accept(), &photos, &NetworkProfile::wifi(), Strategy::Local, &Config::default(), 1, 0).unwrap();
        assert_eq!(c.transmit_mj, 0.0);
        assert_eq!(c.results, 20);
    }

    #[test]
    fn full_offload_energy_is_linear_in_photo_bytes() {
        let cfg = Config::default();
        let energy = |bytes| {
            let photos = phone_photos(20, bytes, 1);
            run_cell("q1", &query1(), &photos, &cfg.wifi, Strategy::FullOffload, &cfg, 1, 0).unwrap().transmit_mj
        };
        let (a, b, c) = (energy(100_000), energy(200_000), energy(300_000));
        assert!(((c - b) - (b - a)).abs() < 1e-6 * c, "{a} {b} {c}");
        assert!(b > a);
    }

    #[test]
    fn zero_delay_leaves_the_trace_unchanged() {
        let cfg = Config::default();
        let photos = phone_photos(60, 500_000, 2);
        let control = run_trace(&query1(), &photos, &cfg.wifi, Strategy::Partitioned, &cfg, 2, |_, _| {}).unwrap().0;
        let injected = run_dynamic(&query1(), &photos, &cfg.wifi, &cfg, 2, 30, 0.0, None).unwrap();
        assert_eq!(injected.rows.len(), control.len());
        for (r, c) in injected.rows.iter().zip(&control) {
            assert_eq!((r.offload_index, &r.order, r.offloaded), (c.offload_index, &c.order, c.offloaded));
        }
        assert_eq!(injected.summary.shifted_at, None);
    }

    #[test]
    fn rejects_bad_injection_points() {
        let cfg = Config::default();
        let photos = phone_photos(10, 500_000, 2);
        assert!(run_dynamic(&query1(), &photos, &cfg.wifi, &cfg, 2, 1, 1000.0, None).is_err());
        assert!(run_dynamic(&query1(), &photos, &cfg.wifi, &cfg, 2, 5, 1000.0, Some(5)).is_err());
    }
}
