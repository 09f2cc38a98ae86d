//! A phone that talks to the server over HTTP: it long-polls its inbox,
//! runs each task against its local corpus, offloads through the
//! partition endpoint and streams results back as they are found.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use sieve_core::device::{
    DeviceResult, DeviceState, OffloadError, OffloadReply, OffloadRequest, PartitionAgent, ResultSink, SearchRun,
};
use sieve_core::photo::Photo;
use sieve_core::predicates::PredicateRegistry;

use crate::client::{Client, ClientError};
use crate::wire::{OffloadSpec, Report, WirePhoto};

pub struct RemoteAgent<'a> {
    pub client: &'a Client,
}

impl PartitionAgent for RemoteAgent<'_> {
    fn evaluate(&self, request: &OffloadRequest<'_>) -> Result<OffloadReply, OffloadError> {
        let spec = OffloadSpec {
            query_xml: request.query.to_xml(),
            device_id: request.device_id.to_string(),
            photo_id: request.photo.id.clone(),
            meta: request.photo.meta.to_text(),
            predicates: request.predicates.clone(),
        };
        self.client.evaluate(&spec, request.photo.encode_ppm()).map_err(|e| OffloadError(e.to_string()))
    }
}

/// Posts every result the moment it is emitted.
pub struct ReportingSink<'a> {
    pub client: &'a Client,
    pub device_id: String,
    pub errors: Vec<ClientError>,
}

impl ResultSink for ReportingSink<'_> {
    fn emit(&mut self, result: DeviceResult, upload: Option<&Photo>) {
        let report = Report::Result { result, photo: upload.map(WirePhoto::from_photo) };
        if let Err(e) = self.client.report(&self.device_id, &report) {
            self.errors.push(e);
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeviceLoop {
    pub poll_wait: Duration,
    /// Stop after this many tasks.
    pub max_tasks: Option<usize>,
}

impl Default for DeviceLoop {
    fn default() -> Self {
        DeviceLoop { poll_wait: Duration::from_secs(20), max_tasks: None }
    }
}

impl DeviceLoop {
    /// Serves tasks until `stop` is set or `max_tasks` have run. Returns
    /// the number of tasks run.
    pub fn run(&self, client: &Client, state: &mut DeviceState, registry: &PredicateRegistry, stop: &AtomicBool) -> Result<usize, ClientError> {
        let mut done = 0;
        while !stop.load(Ordering::Relaxed) && self.max_tasks.is_none_or(|m| done < m) {
            let Some(assignment) = client.inbox(&state.device_id, self.poll_wait)? else {
                continue;
            };
            let device_id = state.device_id.clone();
            let started = assignment
                .task_spec(0.0)
                .map_err(|e| e.to_string())
                .and_then(|spec| SearchRun::start(spec, state, registry).map_err(|e| e.to_string()));
            let mut run = match started {
                Ok(run) => run,
                Err(reason) => {
                    client.report(&device_id, &Report::Failure { session: assignment.session.clone(), reason })?;
                    done += 1;
                    continue;
                }
            };
            let agent = RemoteAgent { client };
            let mut sink = ReportingSink { client, device_id: device_id.clone(), errors: Vec::new() };
            match run.run_to_end(state, &agent, &mut sink) {
                Ok(summary) => client.report(&device_id, &Report::Summary { summary })?,
                Err(e) => client.report(&device_id, &Report::Failure { session: assignment.session.clone(), reason: e.to_string() })?,
            }
            if let Some(e) = sink.errors.into_iter().next() {
                return Err(e);
            }
            done += 1;
        }
        Ok(done)
    }
}
