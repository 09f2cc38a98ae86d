//! Search coordinator: turns a (query, budget) submission into device tasks,
//! searches its photo cache first, collects streamed results, keeps the
//! charge ledger, evaluates offloaded photos, and remembers relevance marks
//! so later submissions of the same query favor devices that paid off.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::cost::{Charges, CostModel};
use crate::device::{
    DeviceResult, OffloadError, OffloadReply, OffloadRequest, PartitionAgent, PredicateRef, PredicateScore, RemoteVerdict,
    Strategy, TaskSpec, TaskSummary,
};
use crate::photo::Photo;
use crate::predicates::{PredicateError, PredicateRegistry};
use crate::query::{QueryError, QueryId, QuerySpec};

#[derive(Debug, Error)]
pub enum SubmitError {
    #[error("budget {budget} is below the minimum of {required} units")]
    BudgetBelowMinimum { budget: u64, required: u64 },
    #[error("no devices are registered")]
    NoDevices,
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Predicate(#[from] PredicateError),
}

#[derive(Debug, Error, PartialEq)]
pub enum LookupError {
    #[error("unknown session {0:?}")]
    Session(String),
    #[error("no result for photo {photo_id:?} of device {device_id:?} in session {session:?}")]
    Record { session: String, device_id: String, photo_id: String },
    #[error("device {device_id:?} has no task in session {session:?}")]
    Task { session: String, device_id: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    UnknownPredicate(PredicateError),
    #[error("bad offload request: {0}")]
    BadRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub devices: usize,
    pub share: u64,
}

/// `N = clamp(floor(f·budget / flat), 1, registered)` devices, each with an
/// equal share `floor(budget / N)`.
pub fn allocate_budget(budget: u64, registered: usize, cost: &CostModel, flat_fraction: f64) -> Result<Allocation, SubmitError> {
    let required = cost.minimum_budget();
    if budget < required {
        return Err(SubmitError::BudgetBelowMinimum { budget, required });
    }
    if registered == 0 {
        return Err(SubmitError::NoDevices);
    }
    // the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    let wanted = (flat_fraction * budget as f64 / cost.flat_per_device as f64 + 1e-9).floor() as usize;
    let devices = wanted.clamp(1, registered);
    Ok(Allocation { devices, share: budget / devices as u64 })
}

/// Devices with relevant-marked results first (most marks first, ties by
/// id), then a seeded random fill from the rest.
pub fn select_devices(
    n: usize,
    registered: &[String],
    relevant_counts: &BTreeMap<String, u64>,
    exhausted: &BTreeSet<String>,
    seed: u64,
) -> Vec<String> {
    let mut marked: Vec<(&String, u64)> = registered
        .iter()
        .filter(|d| !exhausted.contains(*d))
        .filter_map(|d| relevant_counts.get(d).filter(|&&c| c > 0).map(|&c| (d, c)))
        .collect();
    marked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut chosen: Vec<String> = marked.iter().take(n).map(|(d, _)| (*d).clone()).collect();
    let mut rest: Vec<&String> = registered.iter().filter(|d| !chosen.contains(d)).collect();
    rest.sort();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // devices with nothing left to search go last
    rest.sort_by_key(|d| exhausted.contains(*d));
    chosen.extend(rest.into_iter().take(n.saturating_sub(chosen.len())).cloned());
    chosen
}

/// Work pushed to a device's inbox.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub session: String,
    pub device_id: String,
    pub query_xml: String,
    pub budget_share: u64,
    pub cost: CostModel,
    pub seed: u64,
    pub strategy: Strategy,
    pub max_photos: Option<usize>,
    pub training_photos: usize,
    pub probe_photos: usize,
    /// Photo ids the server already searched from its cache.
    pub skip: Vec<String>,
}

impl Assignment {
    /// Device-side task for this assignment, arriving at `start_ms`.
    pub fn task_spec(&self, start_ms: f64) -> Result<TaskSpec, QueryError> {
        Ok(TaskSpec {
            session: self.session.clone(),
            query: crate::query::parse_query(&self.query_xml)?,
            budget_share: self.budget_share,
            cost: self.cost,
            strategy: self.strategy,
            seed: self.seed,
            max_photos: self.max_photos,
            start_ms,
            training_photos: self.training_photos,
            probe_photos: self.probe_photos,
            skip: self.skip.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    Relevant,
    Irrelevant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub session: String,
    pub device_id: String,
    pub photo_id: String,
    pub score: f64,
    pub predicate_scores: Vec<PredicateScore>,
    pub arrival_index: u64,
    pub virtual_time_ms: f64,
    pub from_cache: bool,
    pub relevance: Option<Relevance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityFeedback {
    pub index: usize,
    pub name: String,
    pub evaluated: u64,
    pub accepted: u64,
    pub selectivity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub session: String,
    pub query_id: QueryId,
    pub budget: u64,
    pub photos_searched: u64,
    pub devices_searched: u64,
    pub cache_photos_searched: u64,
    pub results: u64,
    pub charges: Charges,
    pub selectivity: Vec<SelectivityFeedback>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Done,
    /// Nothing left of the share after cache results to pay the flat fee.
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTask {
    pub device_id: String,
    pub share: u64,
    pub cache_photos: u64,
    pub cache_results: u64,
    /// Cached photos of this device searched for the session.
    pub cache_photo_ids: Vec<String>,
    pub task_budget: u64,
    pub status: TaskStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session: String,
    pub query_id: QueryId,
    pub budget: u64,
    pub seed: u64,
    pub allocation: Allocation,
    pub devices: Vec<DeviceTask>,
    pub status: SessionStatus,
    pub results: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub records: Vec<ResultRecord>,
    pub next_cursor: u64,
    pub status: SessionStatus,
    pub completion: Option<Completion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmitOptions {
    pub budget: u64,
    pub seed: u64,
    pub strategy: Strategy,
    pub max_photos: Option<usize>,
}

impl SubmitOptions {
    pub fn new(budget: u64, seed: u64) -> Self {
        SubmitOptions { budget, seed, strategy: Strategy::Partitioned, max_photos: None }
    }
}

struct Session {
    query: QuerySpec,
    query_xml: String,
    budget: u64,
    seed: u64,
    allocation: Allocation,
    tasks: Vec<DeviceTask>,
    results: Vec<ResultRecord>,
    summaries: Vec<TaskSummary>,
    cache_counts: Vec<(u64, u64)>,
    status: SessionStatus,
    completion: Option<Completion>,
}

type PhotoKey = (String, String);

#[derive(Default)]
struct Inner {
    devices: BTreeSet<String>,
    sessions: BTreeMap<String, Session>,
    next_session: u64,
    cache: BTreeMap<PhotoKey, Photo>,
    searched: BTreeMap<QueryId, BTreeSet<PhotoKey>>,
    marks: BTreeMap<QueryId, BTreeMap<PhotoKey, Relevance>>,
    /// Devices whose last task reported no unsearched photos left.
    exhausted: BTreeMap<QueryId, BTreeSet<String>>,
    inboxes: BTreeMap<String, VecDeque<Assignment>>,
}

pub struct Coordinator {
    registry: PredicateRegistry,
    config: Config,
    inner: Mutex<Inner>,
    changed: Condvar,
}

impl Coordinator {
    pub fn new(registry: PredicateRegistry, config: Config) -> Self {
        Coordinator { registry, config, inner: Mutex::new(Inner::default()), changed: Condvar::new() }
    }

    pub fn registry(&self) -> &PredicateRegistry {
        &self.registry
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn register_device(&self, device_id: &str) {
        self.inner.lock().devices.insert(device_id.to_string());
    }

    pub fn registered_devices(&self) -> Vec<String> {
        self.inner.lock().devices.iter().cloned().collect()
    }

    pub fn cache_len(&self) -> usize {
        self.inner.lock().cache.len()
    }

    pub fn cached_photo(&self, device_id: &str, photo_id: &str) -> Option<Photo> {
        self.inner.lock().cache.get(&(device_id.to_string(), photo_id.to_string())).cloned()
    }

    /// Stores a photo unless one is already cached under the same key.
    pub fn cache_photo(&self, device_id: &str, photo: &Photo) {
        self.inner.lock().cache.entry((device_id.to_string(), photo.id.clone())).or_insert_with(|| photo.clone());
    }

    /// Relevant marks per device for a query, over all its sessions.
    pub fn relevant_counts(&self, query: QueryId) -> BTreeMap<String, u64> {
        let inner = self.inner.lock();
        relevant_counts(&inner, query)
    }

    pub fn submit(&self, query_xml: &str, options: SubmitOptions) -> Result<SessionView, SubmitError> {
        let query = QuerySpec::parse_validated(query_xml, &self.registry)?;
        let bound = self.registry.bind_all(&query)?;
        let cost = self.config.cost;
        let mut inner = self.inner.lock();
        let registered: Vec<String> = inner.devices.iter().cloned().collect();
        let allocation = allocate_budget(options.budget, registered.len(), &cost, self.config.flat_fraction)?;
        let counts = relevant_counts(&inner, query.id);
        let exhausted = inner.exhausted.get(&query.id).cloned().unwrap_or_default();
        let chosen = select_devices(allocation.devices, &registered, &counts, &exhausted, options.seed);
        inner.next_session += 1;
        let session_id = format!("s{}", inner.next_session);

        let mut session = Session {
            query: query.clone(),
            query_xml: query_xml.to_string(),
            budget: options.budget,
            seed: options.seed,
            allocation,
            tasks: Vec::new(),
            results: Vec::new(),
            summaries: Vec::new(),
            cache_counts: vec![(0, 0); bound.len()],
            status: SessionStatus::Running,
            completion: None,
        };

        for device_id in chosen {
            // cache first: photos of this device the server holds and the
            // query has not seen, charged per result only
            let already = inner.searched.entry(query.id).or_default().clone();
            let candidates: Vec<PhotoKey> = inner
                .cache
                .range((device_id.clone(), String::new())..)
                .take_while(|((d, _), _)| *d == device_id)
                .map(|(k, _)| k.clone())
                .filter(|k| !already.contains(k))
                .collect();
            let mut spent = 0u64;
            let mut cache_photos = 0u64;
            let mut cache_results = 0u64;
            let mut skip = Vec::new();
            for key in candidates {
                if allocation.share < cost.flat_per_device + spent + cost.per_result {
                    break;
                }
                let photo = inner.cache[&key].clone();
                let mut scores = Vec::new();
                let verdict = query.root.evaluate(&mut |idx, _| {
                    let v = bound[idx].evaluate(&photo);
                    session.cache_counts[idx].0 += 1;
                    session.cache_counts[idx].1 += u64::from(v.accepted);
                    scores.push(PredicateScore { index: idx, name: bound[idx].name.clone(), score: v.score });
                    (v.accepted, v.score)
                });
                cache_photos += 1;
                skip.push(key.1.clone());
                inner.searched.entry(query.id).or_default().insert(key.clone());
                if verdict.accepted {
                    spent += cost.per_result;
                    cache_results += 1;
                    let arrival_index = session.results.len() as u64;
                    session.results.push(ResultRecord {
                        session: session_id.clone(),
                        device_id: device_id.clone(),
                        photo_id: key.1.clone(),
                        score: verdict.score,
                        predicate_scores: scores,
                        arrival_index,
                        virtual_time_ms: 0.0,
                        from_cache: true,
                        relevance: None,
                    });
                }
            }
            let task_budget = allocation.share - spent;
            let status = if task_budget >= cost.flat_per_device { TaskStatus::Pending } else { TaskStatus::Skipped };
            if status == TaskStatus::Pending {
                inner.inboxes.entry(device_id.clone()).or_default().push_back(Assignment {
                    session: session_id.clone(),
                    device_id: device_id.clone(),
                    query_xml: query_xml.to_string(),
                    budget_share: task_budget,
                    cost,
                    seed: options.seed,
                    strategy: options.strategy,
                    max_photos: options.max_photos,
                    training_photos: self.config.training_photos,
                    probe_photos: self.config.probe_photos,
                    skip: skip.clone(),
                });
            }
            session.tasks.push(DeviceTask {
                device_id,
                share: allocation.share,
                cache_photos,
                cache_results,
                cache_photo_ids: skip,
                task_budget,
                status,
            });
        }
        maybe_complete(&session_id, &mut session, &cost, &bound.iter().map(|b| b.name.clone()).collect::<Vec<_>>());
        let view = view_of(&session_id, &session);
        inner.sessions.insert(session_id, session);
        drop(inner);
        self.changed.notify_all();
        Ok(view)
    }

    pub fn session(&self, session: &str) -> Result<SessionView, LookupError> {
        let inner = self.inner.lock();
        let s = inner.sessions.get(session).ok_or_else(|| LookupError::Session(session.to_string()))?;
        Ok(view_of(session, s))
    }

    pub fn session_query_xml(&self, session: &str) -> Result<String, LookupError> {
        let inner = self.inner.lock();
        let s = inner.sessions.get(session).ok_or_else(|| LookupError::Session(session.to_string()))?;
        Ok(s.query_xml.clone())
    }

    /// Removes and returns the next assignment for a device, registering it.
    pub fn take_assignment(&self, device_id: &str) -> Option<Assignment> {
        let mut inner = self.inner.lock();
        inner.devices.insert(device_id.to_string());
        inner.inboxes.get_mut(device_id).and_then(VecDeque::pop_front)
    }

    /// Long-poll variant of [`Self::take_assignment`].
    pub fn wait_assignment(&self, device_id: &str, timeout: Duration) -> Option<Assignment> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.inner.lock();
        inner.devices.insert(device_id.to_string());
        loop {
            if let Some(a) = inner.inboxes.get_mut(device_id).and_then(VecDeque::pop_front) {
                return Some(a);
            }
            if self.changed.wait_until(&mut inner, deadline).timed_out() {
                return inner.inboxes.get_mut(device_id).and_then(VecDeque::pop_front);
            }
        }
    }

    /// Takes every queued assignment for the given devices and session.
    pub fn take_session_assignments(&self, session: &str, devices: &BTreeSet<String>) -> Vec<Assignment> {
        let mut inner = self.inner.lock();
        let mut out = Vec::new();
        for d in devices {
            if let Some(q) = inner.inboxes.get_mut(d) {
                let (mine, rest): (VecDeque<_>, VecDeque<_>) = q.drain(..).partition(|a| a.session == session);
                *q = rest;
                out.extend(mine);
            }
        }
        out
    }

    pub fn report_result(&self, result: DeviceResult, upload: Option<&Photo>) -> Result<u64, LookupError> {
        let mut inner = self.inner.lock();
        if let Some(photo) = upload {
            inner.cache.entry((result.device_id.clone(), photo.id.clone())).or_insert_with(|| photo.clone());
        }
        let session = inner.sessions.get_mut(&result.session).ok_or_else(|| LookupError::Session(result.session.clone()))?;
        if !session.tasks.iter().any(|t| t.device_id == result.device_id) {
            return Err(LookupError::Task { session: result.session.clone(), device_id: result.device_id.clone() });
        }
        let arrival_index = session.results.len() as u64;
        session.results.push(ResultRecord {
            session: result.session,
            device_id: result.device_id,
            photo_id: result.photo_id,
            score: result.score,
            predicate_scores: result.predicate_scores,
            arrival_index,
            virtual_time_ms: result.virtual_time_ms,
            from_cache: false,
            relevance: None,
        });
        drop(inner);
        self.changed.notify_all();
        Ok(arrival_index)
    }

    pub fn report_summary(&self, summary: TaskSummary) -> Result<(), LookupError> {
        self.finish_task(&summary.session.clone(), &summary.device_id.clone(), Some(summary))
    }

    /// A device could not run its task; it is charged nothing.
    pub fn report_failure(&self, session: &str, device_id: &str) -> Result<(), LookupError> {
        self.finish_task(session, device_id, None)
    }

    fn finish_task(&self, session_id: &str, device_id: &str, summary: Option<TaskSummary>) -> Result<(), LookupError> {
        let mut inner = self.inner.lock();
        let inner = &mut *inner;
        let session = inner.sessions.get_mut(session_id).ok_or_else(|| LookupError::Session(session_id.to_string()))?;
        let task = session
            .tasks
            .iter_mut()
            .find(|t| t.device_id == device_id && t.status == TaskStatus::Pending)
            .ok_or_else(|| LookupError::Task { session: session_id.to_string(), device_id: device_id.to_string() })?;
        match summary {
            Some(summary) => {
                task.status = TaskStatus::Done;
                let searched = inner.searched.entry(session.query.id).or_default();
                searched.extend(summary.evaluated.iter().map(|p| (device_id.to_string(), p.clone())));
                let exhausted = inner.exhausted.entry(session.query.id).or_default();
                if summary.unsearched == 0 {
                    exhausted.insert(device_id.to_string());
                } else {
                    exhausted.remove(device_id);
                }
                session.summaries.push(summary);
            }
            None => task.status = TaskStatus::Failed,
        }
        let names: Vec<String> = self.registry.bind_all(&session.query).map(|b| b.into_iter().map(|p| p.name).collect()).unwrap_or_default();
        maybe_complete(session_id, session, &self.config.cost, &names);
        self.changed.notify_all();
        Ok(())
    }

    /// Records from `cursor` on. With `wait`, blocks until a record past the
    /// cursor exists, the session completes, or the wait expires.
    pub fn results(&self, session: &str, cursor: u64, limit: usize, wait: Option<Duration>) -> Result<Page, LookupError> {
        let deadline = wait.map(|w| Instant::now() + w);
        let mut inner = self.inner.lock();
        loop {
            let s = inner.sessions.get(session).ok_or_else(|| LookupError::Session(session.to_string()))?;
            let available = s.results.len() as u64 > cursor;
            if available || s.status == SessionStatus::Complete || deadline.is_none_or(|d| Instant::now() >= d) {
                let start = (cursor as usize).min(s.results.len());
                let end = start.saturating_add(limit).min(s.results.len());
                let records = s.results[start..end].to_vec();
                let next_cursor = end as u64;
                let done = s.status == SessionStatus::Complete && end == s.results.len();
                return Ok(Page {
                    records,
                    next_cursor,
                    status: s.status,
                    completion: if done { s.completion.clone() } else { None },
                });
            }
            let _ = self.changed.wait_until(&mut inner, deadline.expect("checked above"));
        }
    }

    /// Blocks until the session completes or the wait expires.
    pub fn wait_complete(&self, session: &str, wait: Duration) -> Result<Option<Completion>, LookupError> {
        let deadline = Instant::now() + wait;
        let mut inner = self.inner.lock();
        loop {
            let s = inner.sessions.get(session).ok_or_else(|| LookupError::Session(session.to_string()))?;
            if s.status == SessionStatus::Complete {
                return Ok(s.completion.clone());
            }
            if self.changed.wait_until(&mut inner, deadline).timed_out() {
                return Ok(None);
            }
        }
    }

    /// Marks (or with `None` clears) the relevance of one result. Marks are
    /// kept per query and steer device selection on resubmission.
    pub fn mark_feedback(&self, session: &str, device_id: &str, photo_id: &str, relevance: Option<Relevance>) -> Result<(), LookupError> {
        let mut inner = self.inner.lock();
        let s = inner.sessions.get_mut(session).ok_or_else(|| LookupError::Session(session.to_string()))?;
        let record = s
            .results
            .iter_mut()
            .find(|r| r.device_id == device_id && r.photo_id == photo_id)
            .ok_or_else(|| LookupError::Record {
                session: session.to_string(),
                device_id: device_id.to_string(),
                photo_id: photo_id.to_string(),
            })?;
        record.relevance = relevance;
        let query = s.query.id;
        let key = (device_id.to_string(), photo_id.to_string());
        let marks = inner.marks.entry(query).or_default();
        match relevance {
            Some(r) => {
                marks.insert(key, r);
            }
            None => {
                marks.remove(&key);
            }
        }
        Ok(())
    }

    /// Photos of a query already searched anywhere, as (device, photo).
    pub fn searched(&self, query: QueryId) -> BTreeSet<(String, String)> {
        self.inner.lock().searched.get(&query).cloned().unwrap_or_default()
    }

    /// Runs the listed predicates in order on an offloaded photo, stopping
    /// at the first reject, and caches the photo whatever the verdict.
    pub fn evaluate_offload(&self, query: &QuerySpec, device_id: &str, photo: &Photo, predicates: &[PredicateRef]) -> Result<OffloadReply, AgentError> {
        let leaves = query.leaves();
        let mut bound = Vec::with_capacity(predicates.len());
        for r in predicates {
            let leaf = leaves
                .get(r.index)
                .ok_or_else(|| AgentError::BadRequest(format!("predicate index {} out of range", r.index)))?;
            if leaf.name != r.name {
                return Err(AgentError::BadRequest(format!("predicate {} is {:?}, not {:?}", r.index, leaf.name, r.name)));
            }
            bound.push((r.index, self.registry.bind(leaf).map_err(AgentError::UnknownPredicate)?));
        }
        self.cache_photo(device_id, photo);
        let mut evaluated = Vec::new();
        let mut accepted = true;
        for (index, p) in &bound {
            let v = p.evaluate(photo);
            evaluated.push(RemoteVerdict { index: *index, name: p.name.clone(), accepted: v.accepted, score: v.score, cpu_ms: v.cpu_ms });
            if !v.accepted {
                accepted = false;
                break;
            }
        }
        Ok(OffloadReply { accepted, evaluated })
    }
}

impl PartitionAgent for Coordinator {
    fn evaluate(&self, request: &OffloadRequest<'_>) -> Result<OffloadReply, OffloadError> {
        self.evaluate_offload(request.query, request.device_id, request.photo, &request.predicates)
            .map_err(|e| OffloadError(e.to_string()))
    }
}

fn relevant_counts(inner: &Inner, query: QueryId) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    if let Some(marks) = inner.marks.get(&query) {
        for ((device, _), r) in marks {
            if *r == Relevance::Relevant {
                *counts.entry(device.clone()).or_insert(0) += 1;
            }
        }
    }
    counts
}

fn view_of(id: &str, s: &Session) -> SessionView {
    SessionView {
        session: id.to_string(),
        query_id: s.query.id,
        budget: s.budget,
        seed: s.seed,
        allocation: s.allocation,
        devices: s.tasks.clone(),
        status: s.status,
        results: s.results.len() as u64,
    }
}

fn maybe_complete(id: &str, s: &mut Session, cost: &CostModel, names: &[String]) {
    if s.status == SessionStatus::Complete || s.tasks.iter().any(|t| t.status == TaskStatus::Pending) {
        return;
    }
    let mut charges = Charges::default();
    for summary in &s.summaries {
        charges.add(&summary.charges);
    }
    let cache_results: u64 = s.tasks.iter().map(|t| t.cache_results).sum();
    charges.results += cache_results;
    charges.total += cache_results * cost.per_result;
    let mut counts = s.cache_counts.clone();
    for summary in &s.summaries {
        for c in &summary.predicate_counts {
            if let Some(slot) = counts.get_mut(c.index) {
                slot.0 += c.evaluated;
                slot.1 += c.accepted;
            }
        }
    }
    let selectivity = counts
        .iter()
        .enumerate()
        .map(|(i, &(evaluated, accepted))| SelectivityFeedback {
            index: i,
            name: names.get(i).cloned().unwrap_or_default(),
            evaluated,
            accepted,
            selectivity: (evaluated > 0).then(|| accepted as f64 / evaluated as f64),
        })
        .collect();
    s.completion = Some(Completion {
        session: id.to_string(),
        query_id: s.query.id,
        budget: s.budget,
        photos_searched: charges.photos,
        devices_searched: charges.devices,
        cache_photos_searched: s.tasks.iter().map(|t| t.cache_photos).sum(),
        results: s.results.len() as u64,
        charges,
        selectivity,
    });
    s.status = SessionStatus::Complete;
}
