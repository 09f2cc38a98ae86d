//! In-process fleet: runs the device tasks of a coordinator as a
//! discrete-event simulation. The run with the smallest simulated clock
//! always steps next, and device messages reach the coordinator in
//! simulated-time order, so streamed results interleave the way they would
//! with real phones working in parallel.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;
use std::time::{Duration, Instant};

use crate::coordinator::{Assignment, Coordinator};
use crate::device::{DeviceError, DeviceResult, DeviceState, ResultSink, SearchRun, Step, StateStore, TaskSummary, TraceEntry};
use crate::energy::{EnergyModel, NetworkProfile};
use crate::photo::{load_device_dir, Photo, PhotoError};
use crate::predicates::{splitmix64, unit_hash};

/// Delay between a submission and its task reaching a phone, drawn
/// uniformly from `[min_ms, max_ms]` per (session seed, device).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushDelay {
    pub min_ms: f64,
    pub max_ms: f64,
}

impl Default for PushDelay {
    fn default() -> Self {
        PushDelay { min_ms: 500.0, max_ms: 2500.0 }
    }
}

impl PushDelay {
    pub fn none() -> Self {
        PushDelay { min_ms: 0.0, max_ms: 0.0 }
    }

    pub fn sample(&self, seed: u64, device_id: &str) -> f64 {
        let u = unit_hash(device_id, splitmix64(seed ^ 0x9054));
        self.min_ms + u * (self.max_ms - self.min_ms)
    }
}

/// What the fleet reports after each device step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEvent {
    pub session: String,
    pub device_id: String,
    pub clock_ms: f64,
    /// Photos evaluated so far by every run in this batch.
    pub photos_evaluated: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRun {
    pub session: String,
    pub device_id: String,
    pub summary: Option<TaskSummary>,
    pub trace: Vec<TraceEntry>,
    pub error: Option<String>,
}

enum Message {
    Result(DeviceResult, Option<Photo>),
    Summary(TaskSummary),
    Failure { session: String, device_id: String },
}

struct Timed {
    time_ms: f64,
    seq: u64,
    message: Message,
}

impl PartialEq for Timed {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Timed {}
impl PartialOrd for Timed {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Timed {
    // reversed: BinaryHeap pops the earliest message first
    fn cmp(&self, other: &Self) -> Ordering {
        other.time_ms.total_cmp(&self.time_ms).then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Default)]
struct Outbox {
    buffered: Vec<(DeviceResult, Option<Photo>)>,
}

impl ResultSink for Outbox {
    fn emit(&mut self, result: DeviceResult, upload: Option<&Photo>) {
        self.buffered.push((result, upload.cloned()));
    }
}

pub struct Fleet {
    devices: BTreeMap<String, DeviceState>,
    pub push_delay: PushDelay,
    /// Wall-clock milliseconds per simulated millisecond; `None` runs as
    /// fast as possible.
    pub pacing: Option<f64>,
}

impl Fleet {
    pub fn new(devices: Vec<DeviceState>) -> Self {
        Fleet {
            devices: devices.into_iter().map(|d| (d.device_id.clone(), d)).collect(),
            push_delay: PushDelay::default(),
            pacing: None,
        }
    }

    /// Loads `corpus/<device_id>/` directories, with state stores under
    /// `state/<device_id>/` when a state directory is given.
    pub fn from_dirs(corpus: &Path, state: Option<&Path>, profile: &NetworkProfile, hardware: EnergyModel) -> Result<Self, PhotoError> {
        let mut devices = Vec::new();
        let mut dirs: Vec<_> = std::fs::read_dir(corpus)?.collect::<Result<Vec<_>, _>>()?;
        dirs.sort_by_key(|e| e.file_name());
        for entry in dirs {
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let id = entry.file_name().to_string_lossy().into_owned();
            let mut device = DeviceState::new(id.clone(), load_device_dir(&entry.path())?, profile.clone(), hardware);
            if let Some(state) = state {
                device = device.with_store(StateStore::persistent(state.join(&id))?);
            }
            devices.push(device);
        }
        Ok(Fleet::new(devices))
    }

    pub fn device_ids(&self) -> BTreeSet<String> {
        self.devices.keys().cloned().collect()
    }

    pub fn device(&self, id: &str) -> Option<&DeviceState> {
        self.devices.get(id)
    }

    pub fn device_mut(&mut self, id: &str) -> Option<&mut DeviceState> {
        self.devices.get_mut(id)
    }

    pub fn register_all(&self, coordinator: &Coordinator) {
        for id in self.devices.keys() {
            coordinator.register_device(id);
        }
    }

    /// Runs every queued task of `session` on this fleet's devices.
    pub fn run_session(&mut self, coordinator: &Coordinator, session: &str) -> Result<Vec<TaskRun>, DeviceError> {
        self.run_session_observed(coordinator, session, &mut |_| {})
    }

    pub fn run_session_observed(
        &mut self,
        coordinator: &Coordinator,
        session: &str,
        observer: &mut dyn FnMut(&StepEvent),
    ) -> Result<Vec<TaskRun>, DeviceError> {
        let assignments = coordinator.take_session_assignments(session, &self.device_ids());
        self.run_assignments(coordinator, assignments, observer)
    }

    /// Runs a batch of assignments to completion. Assignments for devices
    /// outside the fleet are reported as failed.
    pub fn run_assignments(
        &mut self,
        coordinator: &Coordinator,
        assignments: Vec<Assignment>,
        observer: &mut dyn FnMut(&StepEvent),
    ) -> Result<Vec<TaskRun>, DeviceError> {
        let wall_start = Instant::now();
        let mut heap = BinaryHeap::new();
        let mut seq = 0u64;
        let mut push = |heap: &mut BinaryHeap<Timed>, time_ms: f64, message: Message| {
            seq += 1;
            heap.push(Timed { time_ms, seq, message });
        };
        let mut runs: Vec<(SearchRun, Outbox)> = Vec::new();
        let mut finished = Vec::new();
        for a in assignments {
            let start = self.push_delay.sample(a.seed, &a.device_id);
            let failure = |e: String| TaskRun { session: a.session.clone(), device_id: a.device_id.clone(), summary: None, trace: Vec::new(), error: Some(e) };
            let Some(state) = self.devices.get_mut(&a.device_id) else {
                push(&mut heap, start, Message::Failure { session: a.session.clone(), device_id: a.device_id.clone() });
                finished.push(failure("device not in fleet".into()));
                continue;
            };
            let started = a.task_spec(start).map_err(|e| e.to_string()).and_then(|spec| {
                SearchRun::start(spec, state, coordinator.registry()).map_err(|e| e.to_string())
            });
            match started {
                Ok(run) => runs.push((run, Outbox::default())),
                Err(e) => {
                    push(&mut heap, start, Message::Failure { session: a.session.clone(), device_id: a.device_id.clone() });
                    finished.push(failure(e));
                }
            }
        }

        let mut photos_evaluated = 0u64;
        loop {
            let next = runs
                .iter()
                .enumerate()
                .filter(|(_, (r, _))| !r.is_done())
                .min_by(|(_, (a, _)), (_, (b, _))| a.clock_ms().total_cmp(&b.clock_ms()).then_with(|| a.device_id().cmp(b.device_id())))
                .map(|(i, _)| i);
            let horizon = next.map_or(f64::INFINITY, |i| runs[i].0.clock_ms());
            while heap.peek().is_some_and(|m| m.time_ms <= horizon) {
                let m = heap.pop().expect("peeked");
                self.pace(wall_start, m.time_ms);
                deliver(coordinator, m.message);
            }
            let Some(i) = next else { break };
            let (run, outbox) = &mut runs[i];
            let state = self.devices.get_mut(run.device_id()).expect("run devices are in the fleet");
            let before = run.charges().photos;
            let step = run.step(state, coordinator, outbox)?;
            photos_evaluated += run.charges().photos - before;
            let mut last = run.clock_ms();
            for (result, photo) in outbox.buffered.drain(..) {
                last = last.max(result.virtual_time_ms);
                push(&mut heap, result.virtual_time_ms, Message::Result(result, photo));
            }
            if let Step::Done(summary) = step {
                push(&mut heap, last.max(summary.finished_ms), Message::Summary(summary));
            }
            observer(&StepEvent {
                session: run.spec().session.clone(),
                device_id: run.device_id().to_string(),
                clock_ms: run.clock_ms(),
                photos_evaluated,
            });
        }
        finished.extend(runs.into_iter().map(|(run, _)| TaskRun {
            session: run.spec().session.clone(),
            device_id: run.device_id().to_string(),
            summary: run.summary().cloned(),
            trace: run.trace().to_vec(),
            error: None,
        }));
        Ok(finished)
    }

    fn pace(&self, wall_start: Instant, time_ms: f64) {
        if let Some(factor) = self.pacing {
            let due = wall_start + Duration::from_secs_f64((time_ms * factor / 1000.0).max(0.0));
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
    }

    /// Serves coordinator work until `stop` returns true, polling the
    /// inboxes of this fleet's devices.
    pub fn serve(&mut self, coordinator: &Coordinator, poll: Duration, stop: &dyn Fn() -> bool) -> Result<(), DeviceError> {
        let ids = self.device_ids();
        while !stop() {
            let mut batch = Vec::new();
            for id in &ids {
                while let Some(a) = coordinator.take_assignment(id) {
                    batch.push(a);
                }
            }
            if batch.is_empty() {
                std::thread::sleep(poll);
                continue;
            }
            self.run_assignments(coordinator, batch, &mut |_| {})?;
        }
        Ok(())
    }
}

fn deliver(coordinator: &Coordinator, message: Message) {
    // a session can only be unknown if the coordinator was replaced under
    // us; nothing useful can be done with the message then
    let _ = match message {
        Message::Result(result, photo) => coordinator.report_result(result, photo.as_ref()).map(|_| ()),
        Message::Summary(summary) => coordinator.report_summary(summary),
        Message::Failure { session, device_id } => coordinator.report_failure(&session, &device_id),
    };
}
