//! Emulated phone: a photo corpus, per-query searched-photo stores, a
//! network link, and the search loop that runs one task in simulated time.
//!
//! A task starts with a training phase that evaluates every predicate on
//! the first few photos and sends a couple of probe photos to the server, so
//! both cost dimensions have measurements. After that each photo runs the
//! local prefix of the current partition and, if it survives, is offloaded
//! for the remaining predicates. The partition is revisited every few photos
//! and whenever the network changes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{Charges, CostModel};
use crate::energy::{fit_energy_model, EnergyLedger, EnergyModel, EnergySample, NetworkProfile};
use crate::photo::Photo;
use crate::planner::{Partition, PlannerState};
use crate::predicates::{hash64, splitmix64, BoundPredicate, PredicateError, PredicateRegistry, PredicateVerdict};
use crate::query::{QueryId, QuerySpec};

/// Server cpu is this many times faster than a phone's.
pub const SERVER_SPEEDUP: f64 = 10.0;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("budget share {share} is below the flat device charge {flat}")]
    ShareBelowFlat { share: u64, flat: u64 },
    #[error(transparent)]
    Predicate(#[from] PredicateError),
    #[error("state store: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("offload failed: {0}")]
pub struct OffloadError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Ordered, partitioned execution with run-time replanning.
    Partitioned,
    /// Every predicate on the phone; nothing is transmitted.
    Local,
    /// Every photo is sent to the server with the whole pipeline.
    FullOffload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    Evaluation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateRef {
    pub index: usize,
    pub name: String,
}

pub struct OffloadRequest<'a> {
    pub query: &'a QuerySpec,
    pub device_id: &'a str,
    pub photo: &'a Photo,
    /// Remaining predicates in evaluation order. Empty for a probe.
    pub predicates: Vec<PredicateRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteVerdict {
    pub index: usize,
    pub name: String,
    pub accepted: bool,
    pub score: f64,
    /// Phone-equivalent cpu time; the server takes a tenth of it.
    pub cpu_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadReply {
    pub accepted: bool,
    /// Verdicts in evaluation order, stopping at the first reject.
    pub evaluated: Vec<RemoteVerdict>,
}

/// Server side of offloading.
pub trait PartitionAgent {
    fn evaluate(&self, request: &OffloadRequest<'_>) -> Result<OffloadReply, OffloadError>;
}

/// An agent that is never reachable.
pub struct Unreachable;

impl PartitionAgent for Unreachable {
    fn evaluate(&self, _: &OffloadRequest<'_>) -> Result<OffloadReply, OffloadError> {
        Err(OffloadError("no server".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateScore {
    pub index: usize,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceResult {
    pub session: String,
    pub device_id: String,
    pub photo_id: String,
    pub score: f64,
    pub predicate_scores: Vec<PredicateScore>,
    /// Simulated time the result reaches the server.
    pub virtual_time_ms: f64,
}

pub trait ResultSink {
    /// `upload` carries the photo when it travels with the result.
    fn emit(&mut self, result: DeviceResult, upload: Option<&Photo>);
}

impl ResultSink for Vec<DeviceResult> {
    fn emit(&mut self, result: DeviceResult, _: Option<&Photo>) {
        self.push(result);
    }
}

/// Per-query sets of photo ids already searched (or known to be searched
/// from the server cache). With a directory, each set lives in
/// `<dir>/<query_id>.searched` as sorted lines and is rewritten on change.
#[derive(Debug, Clone, Default)]
pub struct StateStore {
    dir: Option<PathBuf>,
    sets: BTreeMap<QueryId, BTreeSet<String>>,
}

impl StateStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn persistent(dir: impl Into<PathBuf>) -> Result<Self, std::io::Error> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(StateStore { dir: Some(dir), sets: BTreeMap::new() })
    }

    fn path(dir: &Path, query: QueryId) -> PathBuf {
        dir.join(format!("{query}.searched"))
    }

    fn load(&mut self, query: QueryId) -> Result<&mut BTreeSet<String>, std::io::Error> {
        if !self.sets.contains_key(&query) {
            let mut set = BTreeSet::new();
            if let Some(dir) = &self.dir {
                let path = Self::path(dir, query);
                if path.exists() {
                    set.extend(fs::read_to_string(path)?.lines().filter(|l| !l.is_empty()).map(str::to_string));
                }
            }
            self.sets.insert(query, set);
        }
        Ok(self.sets.get_mut(&query).expect("just inserted"))
    }

    pub fn searched(&mut self, query: QueryId) -> Result<&BTreeSet<String>, std::io::Error> {
        self.load(query).map(|s| &*s)
    }

    /// Adds ids; returns how many were new.
    pub fn insert_all<I: IntoIterator<Item = String>>(&mut self, query: QueryId, ids: I) -> Result<usize, std::io::Error> {
        let set = self.load(query)?;
        let before = set.len();
        set.extend(ids);
        let added = set.len() - before;
        if added > 0 {
            self.flush(query)?;
        }
        Ok(added)
    }

    pub fn insert(&mut self, query: QueryId, id: &str) -> Result<bool, std::io::Error> {
        Ok(self.insert_all(query, [id.to_string()])? == 1)
    }

    fn flush(&self, query: QueryId) -> Result<(), std::io::Error> {
        let (Some(dir), Some(set)) = (&self.dir, self.sets.get(&query)) else {
            return Ok(());
        };
        let path = Self::path(dir, query);
        let tmp = path.with_extension("searched.tmp");
        let mut f = fs::File::create(&tmp)?;
        for id in set {
            writeln!(f, "{id}")?;
        }
        drop(f);
        fs::rename(tmp, path)
    }
}

pub struct DeviceState {
    pub device_id: String,
    corpus: BTreeMap<String, Photo>,
    mean_bytes: u64,
    mean_megapixels: f64,
    pub store: StateStore,
    profile: NetworkProfile,
    extra_rtt_ms: f64,
    network_epoch: u64,
    /// What the handset actually draws; stands in for a power meter.
    hardware: EnergyModel,
    /// Model the planner uses: nominal until a training phase fits one.
    believed: EnergyModel,
    pub ledger: EnergyLedger,
}

impl DeviceState {
    pub fn new(device_id: impl Into<String>, photos: Vec<Photo>, profile: NetworkProfile, hardware: EnergyModel) -> Self {
        let corpus: BTreeMap<String, Photo> = photos.into_iter().map(|p| (p.id.clone(), p)).collect();
        let n = corpus.len().max(1) as f64;
        let mean_bytes = (corpus.values().map(|p| p.transfer_bytes() as f64).sum::<f64>() / n).round() as u64;
        let mean_megapixels = corpus.values().map(Photo::megapixels).sum::<f64>() / n;
        DeviceState {
            device_id: device_id.into(),
            corpus,
            mean_bytes: mean_bytes.max(1),
            mean_megapixels,
            store: StateStore::in_memory(),
            profile,
            extra_rtt_ms: 0.0,
            network_epoch: 0,
            hardware,
            believed: hardware,
            ledger: EnergyLedger::default(),
        }
    }

    pub fn with_store(mut self, store: StateStore) -> Self {
        self.store = store;
        self
    }

    pub fn corpus_len(&self) -> usize {
        self.corpus.len()
    }

    pub fn photo(&self, id: &str) -> Option<&Photo> {
        self.corpus.get(id)
    }

    pub fn photo_ids(&self) -> impl Iterator<Item = &str> {
        self.corpus.keys().map(String::as_str)
    }

    pub fn mean_photo_bytes(&self) -> u64 {
        self.mean_bytes
    }

    /// Link currently in effect, injected delay included.
    pub fn network(&self) -> NetworkProfile {
        self.profile.with_extra_rtt(self.extra_rtt_ms)
    }

    pub fn network_epoch(&self) -> u64 {
        self.network_epoch
    }

    /// Switches links. The planner of a running task picks this up before
    /// its next photo. The transmit draw follows the new radio.
    pub fn set_network_profile(&mut self, profile: NetworkProfile) {
        self.hardware.beta_mw = profile.tx_power_mw;
        self.believed.beta_mw = profile.tx_power_mw;
        self.profile = profile;
        self.network_epoch += 1;
    }

    pub fn inject_delay(&mut self, extra_rtt_ms: f64) {
        self.extra_rtt_ms = extra_rtt_ms.max(0.0);
        self.network_epoch += 1;
    }

    pub fn hardware_model(&self) -> EnergyModel {
        self.hardware
    }

    pub fn believed_model(&self) -> EnergyModel {
        self.believed
    }

    /// `pw` cost for the current link and model, in compute-ms.
    pub fn wireless_cost(&self) -> f64 {
        let model = self.believed;
        model.compute_ms_equivalent(model.transmit_mj(self.network().tx_time_ms(self.mean_bytes)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub session: String,
    pub query: QuerySpec,
    pub budget_share: u64,
    pub cost: CostModel,
    pub strategy: Strategy,
    pub seed: u64,
    /// Stop after this many photos even with budget left.
    pub max_photos: Option<usize>,
    /// Simulated time the task reaches the device.
    pub start_ms: f64,
    pub training_photos: usize,
    pub probe_photos: usize,
    /// Ids the server already searched from its cache for this query.
    pub skip: Vec<String>,
}

impl TaskSpec {
    pub fn new(session: impl Into<String>, query: QuerySpec, budget_share: u64) -> Self {
        TaskSpec {
            session: session.into(),
            query,
            budget_share,
            cost: CostModel::default(),
            strategy: Strategy::Partitioned,
            seed: 0,
            max_photos: None,
            start_ms: 0.0,
            training_photos: 5,
            probe_photos: 2,
            skip: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// 1-based position of the photo within the task.
    pub seq: usize,
    pub photo_id: String,
    pub phase: Phase,
    pub order: Vec<usize>,
    pub offload_index: usize,
    pub wireless_cost: f64,
    pub offloaded: bool,
    pub accepted: bool,
    /// Simulated time when the photo's work finished.
    pub clock_ms: f64,
    /// Task energy so far.
    pub energy_mj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateCount {
    pub index: usize,
    pub name: String,
    pub evaluated: u64,
    pub accepted: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub session: String,
    pub device_id: String,
    pub photos_searched: u64,
    pub results: u64,
    pub charges: Charges,
    pub energy: EnergyLedger,
    pub predicate_counts: Vec<PredicateCount>,
    /// Ids in evaluation order.
    pub evaluated: Vec<String>,
    pub started_ms: f64,
    pub finished_ms: f64,
    /// Photos on the device not yet searched for this query.
    #[serde(default)]
    pub unsearched: u64,
}

pub enum Step {
    Continue,
    Done(TaskSummary),
}

/// One task on one device, advanced a photo at a time.
pub struct SearchRun {
    spec: TaskSpec,
    device_id: String,
    bound: Vec<BoundPredicate>,
    conjunctive: bool,
    planner: PlannerState,
    partition: Partition,
    rng: ChaCha8Rng,
    clock_ms: f64,
    remaining: u64,
    charges: Charges,
    photos_done: usize,
    probes_done: usize,
    training_samples: Vec<EnergySample>,
    seen_epoch: u64,
    offload_down: bool,
    energy: EnergyLedger,
    counts: Vec<(u64, u64)>,
    evaluated: Vec<String>,
    trace: Vec<TraceEntry>,
    done: Option<TaskSummary>,
}

impl SearchRun {
    /// Binds the query, charges the flat fee and marks cache-searched ids.
    pub fn start(spec: TaskSpec, state: &mut DeviceState, registry: &PredicateRegistry) -> Result<Self, DeviceError> {
        if spec.budget_share < spec.cost.flat_per_device {
            return Err(DeviceError::ShareBelowFlat { share: spec.budget_share, flat: spec.cost.flat_per_device });
        }
        let bound = registry.bind_all(&spec.query)?;
        let conjunctive = spec.query.conjunctive_pipeline().is_some();
        state.store.insert_all(spec.query.id, spec.skip.iter().cloned())?;
        let names = bound.iter().map(|b| b.name.clone()).collect();
        let nominal = bound.iter().map(|b| b.nominal_cost_ms(state.mean_megapixels)).collect();
        let mut planner = PlannerState::new(names, nominal, state.wireless_cost());
        let n = bound.len();
        let partition = match spec.strategy {
            Strategy::FullOffload if conjunctive => Partition { order: (0..n).collect(), offload_index: 0 },
            _ => Partition::local((0..n).collect()),
        };
        if spec.strategy == Strategy::Local || !conjunctive {
            planner.set_wireless_cost(f64::INFINITY);
        }
        let seed = splitmix64(spec.seed ^ hash64(&state.device_id, spec.query.id.0));
        let flat = spec.cost.flat_per_device;
        Ok(SearchRun {
            device_id: state.device_id.clone(),
            bound,
            conjunctive,
            planner,
            partition,
            rng: ChaCha8Rng::seed_from_u64(seed),
            clock_ms: spec.start_ms,
            remaining: spec.budget_share - flat,
            charges: Charges { devices: 1, total: flat, ..Default::default() },
            photos_done: 0,
            probes_done: 0,
            training_samples: Vec::new(),
            seen_epoch: state.network_epoch(),
            offload_down: false,
            energy: EnergyLedger::default(),
            counts: vec![(0, 0); n],
            evaluated: Vec::new(),
            trace: Vec::new(),
            done: None,
            spec,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn clock_ms(&self) -> f64 {
        self.clock_ms
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    /// The summary once the task has finished.
    pub fn summary(&self) -> Option<&TaskSummary> {
        self.done.as_ref()
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn planner(&self) -> &PlannerState {
        &self.planner
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.done.is_some()
    }

    pub fn charges(&self) -> Charges {
        self.charges
    }

    fn training(&self) -> bool {
        self.conjunctive && self.spec.strategy != Strategy::FullOffload && self.photos_done < self.spec.training_photos
    }

    /// Picks an unsearched photo uniformly at random and records it as
    /// searched before evaluation starts.
    pub fn select_next_photo(&mut self, state: &mut DeviceState) -> Result<Option<String>, DeviceError> {
        let searched = state.store.searched(self.spec.query.id)?;
        let eligible: Vec<&String> = state.corpus.keys().filter(|id| !searched.contains(*id)).collect();
        if eligible.is_empty() {
            return Ok(None);
        }
        let id = eligible[self.rng.random_range(0..eligible.len())].clone();
        state.store.insert(self.spec.query.id, &id)?;
        Ok(Some(id))
    }

    fn finish(&mut self, state: &mut DeviceState) -> Result<TaskSummary, DeviceError> {
        let searched = state.store.searched(self.spec.query.id)?;
        let unsearched = state.corpus.keys().filter(|id| !searched.contains(*id)).count() as u64;
        let summary = TaskSummary {
            session: self.spec.session.clone(),
            device_id: self.device_id.clone(),
            photos_searched: self.charges.photos,
            results: self.charges.results,
            charges: self.charges,
            energy: self.energy,
            predicate_counts: self
                .counts
                .iter()
                .enumerate()
                .map(|(i, &(evaluated, accepted))| PredicateCount { index: i, name: self.bound[i].name.clone(), evaluated, accepted })
                .collect(),
            evaluated: self.evaluated.clone(),
            started_ms: self.spec.start_ms,
            finished_ms: self.clock_ms,
            unsearched,
        };
        self.done = Some(summary.clone());
        Ok(summary)
    }

    fn wireless_cost(&self, state: &DeviceState) -> f64 {
        if self.offload_down || self.spec.strategy == Strategy::Local || !self.conjunctive {
            f64::INFINITY
        } else {
            state.wireless_cost()
        }
    }

    fn compute(&mut self, state: &mut DeviceState, ms: f64) {
        self.clock_ms += ms;
        let mj = self.energy.add_compute(&state.hardware, ms);
        state.ledger.compute_mj += mj;
    }

    fn transmit(&mut self, state: &mut DeviceState, ms: f64) {
        self.clock_ms += ms;
        let mj = self.energy.add_transmit(&state.hardware, ms);
        state.ledger.transmit_mj += mj;
    }

    fn evaluate_local(&mut self, state: &mut DeviceState, p: usize, photo: &Photo) -> PredicateVerdict {
        let v = self.bound[p].evaluate(photo);
        self.compute(state, v.cpu_ms);
        self.planner.stats[p].record(&v);
        self.counts[p].0 += 1;
        self.counts[p].1 += u64::from(v.accepted);
        v
    }

    /// Advances by one photo.
    pub fn step(&mut self, state: &mut DeviceState, agent: &dyn PartitionAgent, sink: &mut dyn ResultSink) -> Result<Step, DeviceError> {
        if let Some(summary) = &self.done {
            return Ok(Step::Done(summary.clone()));
        }
        let cost = self.spec.cost;
        if self.remaining < cost.per_photo + cost.per_result || self.spec.max_photos.is_some_and(|m| self.photos_done >= m) {
            return Ok(Step::Done(self.finish(state)?));
        }
        if state.network_epoch() != self.seen_epoch {
            self.seen_epoch = state.network_epoch();
            self.offload_down = false;
            let wc = self.wireless_cost(state);
            if self.training() || self.spec.strategy != Strategy::Partitioned {
                self.planner.set_wireless_cost(wc);
            } else {
                self.partition = self.planner.replan_on_network_change(wc, &self.partition).expect("wireless cost is non-negative");
            }
        }
        let Some(photo_id) = self.select_next_photo(state)? else {
            return Ok(Step::Done(self.finish(state)?));
        };
        let photo = state.corpus[&photo_id].clone();
        let clock_before = self.clock_ms;
        self.remaining -= cost.per_photo;
        self.charges.photos += 1;
        self.charges.total += cost.per_photo;
        self.evaluated.push(photo_id.clone());

        let training = self.training();
        self.photos_done += 1;
        let mut scores = Vec::new();
        let mut offloaded = false;
        let mut on_server = false;
        let mut tree_score = None;
        let accepted = if !self.conjunctive {
            let (accepted, score) = self.evaluate_tree(state, &photo, &mut scores);
            tree_score = Some(score);
            accepted
        } else if training {
            self.training_photo(state, agent, &photo, &mut scores, &mut on_server)
        } else {
            self.pipeline_photo(state, agent, &photo, &mut scores, &mut offloaded)
        };
        on_server |= offloaded;

        if accepted {
            let mut upload = None;
            if !on_server && self.spec.strategy == Strategy::Partitioned && self.conjunctive && !self.offload_down {
                // pw sits at the end of the pipeline: survivors are sent
                let ms = state.network().tx_time_ms(photo.transfer_bytes());
                self.transmit(state, ms);
                upload = Some(&photo);
                on_server = true;
            }
            let arrival = if on_server { self.clock_ms } else { self.clock_ms + state.network().rtt_ms / 2.0 };
            self.remaining -= cost.per_result;
            self.charges.results += 1;
            self.charges.total += cost.per_result;
            let min_score = scores.iter().map(|s: &PredicateScore| s.score).fold(f64::INFINITY, f64::min);
            let score = tree_score.unwrap_or(if min_score.is_finite() { min_score } else { 1.0 });
            let result = DeviceResult {
                session: self.spec.session.clone(),
                device_id: self.device_id.clone(),
                photo_id: photo_id.clone(),
                score,
                predicate_scores: scores,
                virtual_time_ms: arrival,
            };
            sink.emit(result, upload);
        }

        let elapsed = self.clock_ms - clock_before;
        state.ledger.idle_mj += self.energy.add_idle(&state.hardware, elapsed);

        if training && self.photos_done == self.spec.training_photos {
            self.end_training(state);
        } else if !training && self.conjunctive && self.spec.strategy != Strategy::FullOffload {
            self.planner.note_photo();
            self.partition = self.planner.replan(&self.partition);
        }

        self.trace.push(TraceEntry {
            seq: self.photos_done,
            photo_id,
            phase: if training { Phase::Training } else { Phase::Evaluation },
            order: self.partition.order.clone(),
            offload_index: self.partition.offload_index,
            wireless_cost: self.planner.wireless_cost(),
            offloaded,
            accepted,
            clock_ms: self.clock_ms,
            energy_mj: self.energy.total_mj(),
        });
        Ok(Step::Continue)
    }

    pub fn run_to_end(&mut self, state: &mut DeviceState, agent: &dyn PartitionAgent, sink: &mut dyn ResultSink) -> Result<TaskSummary, DeviceError> {
        loop {
            if let Step::Done(summary) = self.step(state, agent, sink)? {
                return Ok(summary);
            }
        }
    }

    /// Short-circuit walk of a non-conjunctive tree, all on the phone.
    fn evaluate_tree(&mut self, state: &mut DeviceState, photo: &Photo, scores: &mut Vec<PredicateScore>) -> (bool, f64) {
        let query = self.spec.query.clone();
        let verdict = query.root.evaluate(&mut |idx, _| {
            let v = self.evaluate_local(state, idx, photo);
            scores.push(PredicateScore { index: idx, name: self.bound[idx].name.clone(), score: v.score });
            (v.accepted, v.score)
        });
        (verdict.accepted, verdict.score)
    }

    fn training_photo(
        &mut self,
        state: &mut DeviceState,
        agent: &dyn PartitionAgent,
        photo: &Photo,
        scores: &mut Vec<PredicateScore>,
        on_server: &mut bool,
    ) -> bool {
        let mut accepted = true;
        let mut compute_ms = 0.0;
        for p in 0..self.bound.len() {
            let v = self.evaluate_local(state, p, photo);
            compute_ms += v.cpu_ms;
            scores.push(PredicateScore { index: p, name: self.bound[p].name.clone(), score: v.score });
            accepted &= v.accepted;
        }
        let hw = state.hardware;
        self.training_samples.push(EnergySample { compute_ms, tx_ms: 0.0, measured_mj: hw.predict_mj(compute_ms, 0.0) });
        if self.spec.strategy == Strategy::Partitioned && self.probes_done < self.spec.probe_photos && !self.offload_down {
            self.probes_done += 1;
            let request = OffloadRequest { query: &self.spec.query, device_id: &self.device_id, photo, predicates: Vec::new() };
            match agent.evaluate(&request) {
                Ok(_) => {
                    let ms = state.network().tx_time_ms(photo.transfer_bytes());
                    self.transmit(state, ms);
                    self.training_samples.push(EnergySample { compute_ms: 0.0, tx_ms: ms, measured_mj: hw.predict_mj(0.0, ms) });
                    *on_server = true;
                }
                Err(_) => self.offload_down = true,
            }
        }
        if !accepted {
            scores.clear();
        }
        accepted
    }

    fn end_training(&mut self, state: &mut DeviceState) {
        if let Ok(model) = fit_energy_model(&self.training_samples) {
            if model.alpha_mw > 0.0 && model.beta_mw >= 0.0 {
                state.believed = EnergyModel { idle_mw: state.believed.idle_mw, ..model };
            }
        }
        let wc = self.wireless_cost(state);
        self.planner.set_wireless_cost(wc);
        self.partition = self.planner.place_pw(&self.partition.order);
    }

    fn pipeline_photo(
        &mut self,
        state: &mut DeviceState,
        agent: &dyn PartitionAgent,
        photo: &Photo,
        scores: &mut Vec<PredicateScore>,
        offloaded: &mut bool,
    ) -> bool {
        let order = self.partition.order.clone();
        let k = self.partition.offload_index;
        for &p in &order[..k] {
            let v = self.evaluate_local(state, p, photo);
            scores.push(PredicateScore { index: p, name: self.bound[p].name.clone(), score: v.score });
            if !v.accepted {
                return false;
            }
        }
        if k == order.len() {
            return true;
        }
        let request = OffloadRequest {
            query: &self.spec.query,
            device_id: &self.device_id,
            photo,
            predicates: order[k..].iter().map(|&p| PredicateRef { index: p, name: self.bound[p].name.clone() }).collect(),
        };
        match agent.evaluate(&request) {
            Ok(reply) => {
                *offloaded = true;
                let ms = state.network().tx_time_ms(photo.transfer_bytes());
                self.transmit(state, ms);
                let server_ms: f64 = reply.evaluated.iter().map(|v| v.cpu_ms).sum::<f64>() / SERVER_SPEEDUP;
                self.clock_ms += server_ms;
                for v in &reply.evaluated {
                    if let Some(stats) = self.planner.stats.get_mut(v.index) {
                        stats.record_outcome(v.accepted);
                        self.counts[v.index].0 += 1;
                        self.counts[v.index].1 += u64::from(v.accepted);
                    }
                    scores.push(PredicateScore { index: v.index, name: v.name.clone(), score: v.score });
                }
                reply.accepted
            }
            Err(_) => {
                // finish this photo on the phone and stop offloading until
                // the link changes
                self.offload_down = true;
                self.partition = self
                    .planner
                    .replan_on_network_change(f64::INFINITY, &self.partition)
                    .expect("infinite cost is non-negative");
                for &p in &order[k..] {
                    let v = self.evaluate_local(state, p, photo);
                    scores.push(PredicateScore { index: p, name: self.bound[p].name.clone(), score: v.score });
                    if !v.accepted {
                        return false;
                    }
                }
                true
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::cell::RefCell;

    use super::*;
    use crate::predicates::names;
    use crate::query::PredicateSpec;

    fn photos(n: usize) -> Vec<Photo> {
        (0..n).map(|i| Photo::uniform(format!("p{i:03}"), 4, 3, [0, 0, 255])).collect()
    }

    fn device(n: usize) -> DeviceState {
        let wifi = NetworkProfile::wifi();
        DeviceState::new("d0", photos(n), wifi.clone(), EnergyModel::for_profile(&wifi))
    }

    fn synthetic(sel: f64, cost_ms: f64, salt: f64) -> PredicateSpec {
        PredicateSpec::new(names::SYNTHETIC).with_params([sel, cost_ms, salt])
    }

    fn run(spec: TaskSpec, state: &mut DeviceState, agent: &dyn PartitionAgent) -> (TaskSummary, Vec<DeviceResult>) {
        let registry = PredicateRegistry::builtin();
        let mut sink = Vec::new();
        let summary = SearchRun::start(spec, state, &registry).unwrap().run_to_end(state, agent, &mut sink).unwrap();
        (summary, sink)
    }

    #[test]
    fn all_accept_share_buys_two_photos() {
        let q = QuerySpec::conjunction(1, vec![PredicateSpec::new(names::ALL_ACCEPT)]);
        let mut state = device(10);
        let (s, results) = run(TaskSpec::new("s", q, 23), &mut state, &Unreachable);
        assert_eq!((s.photos_searched, s.results, s.charges.total), (2, 2, 23));
        assert_eq!(results.len(), 2);
    }

    #[test]
    fn reservation_stops_before_overrun() {
        let q = QuerySpec::conjunction(1, vec![synthetic(0.0, 1.0, 0.0)]);
        let mut state = device(100);
        let (s, _) = run(TaskSpec::new("s", q, 52), &mut state, &Unreachable);
        assert_eq!((s.photos_searched, s.results, s.charges.total), (41, 0, 42));
    }

    #[test]
    fn summary_counts_photos_left_to_search() {
        let q = QuerySpec::conjunction(1, vec![PredicateSpec::new(names::ALL_ACCEPT)]);
        let mut state = device(5);
        let (s, _) = run(TaskSpec::new("s", q.clone(), 23), &mut state, &Unreachable);
        assert_eq!(s.unsearched, 3);
        let (s, _) = run(TaskSpec::new("t", q, 1000), &mut state, &Unreachable);
        assert_eq!((s.photos_searched, s.unsearched), (3, 0));
    }

    #[test]
    fn empty_corpus_pays_only_the_flat_fee() {
        let q = QuerySpec::conjunction(1, vec![PredicateSpec::new(names::ALL_ACCEPT)]);
        let mut state = device(0);
        let (s, _) = run(TaskSpec::new("s", q, 100), &mut state, &Unreachable);
        assert_eq!(s.charges, Charges { devices: 1, photos: 0, results: 0, total: 1 });
    }

    #[test]
    fn share_below_flat_is_rejected() {
        let q = QuerySpec::conjunction(1, vec![PredicateSpec::new(names::ALL_ACCEPT)]);
        let mut state = device(3);
        let err = SearchRun::start(TaskSpec::new("s", q, 0), &mut state, &PredicateRegistry::builtin()).err().unwrap();
        assert!(matches!(err, DeviceError::ShareBelowFlat { share: 0, flat: 1 }));
        assert!(state.store.searched(QueryId(1)).unwrap().is_empty());
    }

    fn three_predicates() -> QuerySpec {
        QuerySpec::conjunction(7, vec![synthetic(0.5, 30.0, 1.0), synthetic(0.6, 1.2, 2.0), synthetic(0.5, 0.2, 3.0)])
    }

    #[test]
    fn training_evaluates_every_predicate() {
        let registry = PredicateRegistry::builtin();
        let mut state = device(50);
        let mut spec = TaskSpec::new("s", three_predicates(), 10_000);
        spec.max_photos = Some(5);
        let mut run = SearchRun::start(spec, &mut state, &registry).unwrap();
        let s = run.run_to_end(&mut state, &Unreachable, &mut Vec::new()).unwrap();
        assert!(s.predicate_counts.iter().all(|c| c.evaluated == 5));
        assert!(run.planner().stats.iter().all(|st| st.samples() == 5 && !st.has_enough_samples()));
        assert_eq!(run.partition().order, vec![0, 1, 2]);
        assert!(run.trace().iter().all(|t| t.phase == Phase::Training));
    }

    #[test]
    fn training_truncates_to_small_corpus() {
        let mut state = device(3);
        let (s, _) = run(TaskSpec::new("s", three_predicates(), 10_000), &mut state, &Unreachable);
        assert_eq!(s.photos_searched, 3);
        assert!(s.predicate_counts.iter().all(|c| c.evaluated == 3));
    }

    #[test]
    fn selection_is_forced_then_exhausted() {
        let registry = PredicateRegistry::builtin();
        let mut state = device(0);
        state.corpus = ["a", "b", "c"].iter().map(|id| (id.to_string(), Photo::uniform(*id, 1, 1, [0, 0, 0]))).collect();
        let q = QuerySpec::conjunction(1, vec![PredicateSpec::new(names::ALL_ACCEPT)]);
        state.store.insert_all(QueryId(1), ["a".to_string(), "b".to_string()]).unwrap();
        let mut run = SearchRun::start(TaskSpec::new("s", q, 100), &mut state, &registry).unwrap();
        assert_eq!(run.select_next_photo(&mut state).unwrap().as_deref(), Some("c"));
        assert_eq!(run.select_next_photo(&mut state).unwrap(), None);
    }

    #[test]
    fn resubmission_never_repeats_a_photo() {
        let q = QuerySpec::conjunction(3, vec![synthetic(0.0, 1.0, 0.0)]);
        let mut state = device(100);
        let mut spec = TaskSpec::new("s1", q.clone(), 10_000);
        spec.max_photos = Some(50);
        let (first, _) = run(spec, &mut state, &Unreachable);
        let mut spec = TaskSpec::new("s2", q, 10_000);
        spec.seed = 9;
        let (second, _) = run(spec, &mut state, &Unreachable);
        assert_eq!((first.evaluated.len(), second.evaluated.len()), (50, 50));
        let all: BTreeSet<&String> = first.evaluated.iter().chain(&second.evaluated).collect();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn skip_list_is_never_searched() {
        let q = QuerySpec::conjunction(3, vec![PredicateSpec::new(names::ALL_ACCEPT)]);
        let mut state = device(10);
        let mut spec = TaskSpec::new("s", q, 10_000);
        spec.skip = vec!["p000".into(), "p001".into(), "p002".into()];
        let (s, _) = run(spec, &mut state, &Unreachable);
        assert_eq!(s.photos_searched, 7);
        assert!(!s.evaluated.iter().any(|id| ["p000", "p001", "p002"].contains(&id.as_str())));
    }

    /// Accepts everything and remembers what it was sent.
    #[derive(Default)]
    struct Recorder {
        requests: RefCell<Vec<(String, Vec<usize>)>>,
    }

    impl PartitionAgent for Recorder {
        fn evaluate(&self, request: &OffloadRequest<'_>) -> Result<OffloadReply, OffloadError> {
            let registry = PredicateRegistry::builtin();
            let bound = registry.bind_all(request.query).unwrap();
            self.requests.borrow_mut().push((request.photo.id.clone(), request.predicates.iter().map(|p| p.index).collect()));
            let mut evaluated = Vec::new();
            for r in &request.predicates {
                let v = bound[r.index].evaluate(request.photo);
                evaluated.push(RemoteVerdict { index: r.index, name: r.name.clone(), accepted: v.accepted, score: v.score, cpu_ms: v.cpu_ms });
                if !v.accepted {
                    return Ok(OffloadReply { accepted: false, evaluated });
                }
            }
            Ok(OffloadReply { accepted: true, evaluated })
        }
    }

    #[test]
    fn full_offload_sends_every_photo_with_the_whole_pipeline() {
        let agent = Recorder::default();
        let mut state = device(20);
        let mut spec = TaskSpec::new("s", three_predicates(), 10_000);
        spec.strategy = Strategy::FullOffload;
        let (s, _) = run(spec, &mut state, &agent);
        assert_eq!(s.photos_searched, 20);
        assert_eq!(agent.requests.borrow().len(), 20);
        assert!(agent.requests.borrow().iter().all(|(_, p)| p == &vec![0, 1, 2]));
        assert_eq!(s.energy.compute_mj, 0.0);
        assert!(s.energy.transmit_mj > 0.0);
    }

    #[test]
    fn local_strategy_never_transmits() {
        let agent = Recorder::default();
        let mut state = device(20);
        let mut spec = TaskSpec::new("s", three_predicates(), 10_000);
        spec.strategy = Strategy::Local;
        let (s, _) = run(spec, &mut state, &agent);
        assert!(agent.requests.borrow().is_empty());
        assert_eq!(s.energy.transmit_mj, 0.0);
    }

    #[test]
    fn offloaded_photos_passed_every_local_predicate() {
        let registry = PredicateRegistry::builtin();
        let q = three_predicates();
        let bound = registry.bind_all(&q).unwrap();
        let agent = Recorder::default();
        let mut state = device(200);
        let (_, results) = run(TaskSpec::new("s", q, 100_000), &mut state, &agent);
        let requests = agent.requests.borrow();
        assert!(requests.iter().any(|(_, p)| !p.is_empty()), "some photos should be offloaded");
        for (id, remote) in requests.iter() {
            let photo = state.photo(id).unwrap();
            for p in (0..3).filter(|p| !remote.contains(p)) {
                if !remote.is_empty() {
                    assert!(bound[p].evaluate(photo).accepted, "{id} reached the server past a rejecting local predicate");
                }
            }
        }
        for r in &results {
            let photo = state.photo(&r.photo_id).unwrap();
            assert!(bound.iter().all(|b| b.evaluate(photo).accepted));
        }
    }

    #[test]
    fn unreachable_server_falls_back_to_local_evaluation() {
        let mut state = device(30);
        let mut spec = TaskSpec::new("s", QuerySpec::conjunction(1, vec![PredicateSpec::new(names::ALL_ACCEPT)]), 10_000);
        spec.strategy = Strategy::FullOffload;
        let (s, results) = run(spec, &mut state, &Unreachable);
        assert_eq!(s.results, 30);
        assert_eq!(results.len(), 30);
        assert_eq!(s.energy.transmit_mj, 0.0);
    }

    #[test]
    fn energy_ledger_matches_the_model() {
        let mut state = device(10);
        let mut spec = TaskSpec::new("s", QuerySpec::conjunction(1, vec![synthetic(1.0, 30.0, 0.0)]), 10_000);
        spec.strategy = Strategy::Local;
        let (s, _) = run(spec, &mut state, &Unreachable);
        let model = state.hardware_model();
        assert!((s.energy.compute_mj - model.compute_mj(300.0)).abs() < 1e-9);
        assert_eq!(state.ledger, s.energy);
        assert!((s.finished_ms - s.started_ms - 300.0).abs() < 1e-9);
    }

    #[test]
    fn results_stream_in_evaluation_order() {
        let agent = Recorder::default();
        let mut state = device(100);
        let q = QuerySpec::conjunction(1, vec![synthetic(0.5, 5.0, 4.0)]);
        let (s, results) = run(TaskSpec::new("s", q, 100_000), &mut state, &agent);
        let positions: Vec<usize> = results.iter().map(|r| s.evaluated.iter().position(|e| *e == r.photo_id).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(results.windows(2).all(|w| w[0].virtual_time_ms <= w[1].virtual_time_ms));
    }

    #[test]
    fn state_store_survives_reload() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = StateStore::persistent(dir.path()).unwrap();
        store.insert_all(QueryId(42), ["b".to_string(), "a".to_string()]).unwrap();
        assert!(!store.insert(QueryId(42), "a").unwrap());
        let text = fs::read_to_string(dir.path().join("42.searched")).unwrap();
        assert_eq!(text, "a\nb\n");
        let mut reloaded = StateStore::persistent(dir.path()).unwrap();
        assert_eq!(reloaded.searched(QueryId(42)).unwrap().len(), 2);
        assert!(reloaded.searched(QueryId(43)).unwrap().is_empty());
    }
}
