//! Blocking HTTP client for the API. Do not call from inside an async
//! runtime.

use std::time::Duration;

use reqwest::blocking::multipart::{Form, Part};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use thiserror::Error;

use sieve_core::coordinator::{Assignment, Completion, ResultRecord, SessionStatus, SessionView};
use sieve_core::device::OffloadReply;

use crate::wire::{parse_stream, ErrorBody, FeedbackRequest, OffloadSpec, PredicateInfo, Report, StreamLine, SubmitRequest};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Http(#[from] reqwest::Error),
    #[error("server answered {status}: {}", body.error)]
    Api { status: u16, body: ErrorBody },
    #[error("bad response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Http(e) => e.status().map(|s| s.as_u16()),
            ClientError::Decode(_) => None,
        }
    }
}

/// One page of the result stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsPage {
    pub records: Vec<ResultRecord>,
    pub completion: Option<Completion>,
    pub next_cursor: u64,
    pub status: SessionStatus,
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::blocking::Client,
}

impl Client {
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()?;
        Ok(Client { base: base_url.trim_end_matches('/').to_string(), http })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn check(response: reqwest::blocking::Response) -> Result<reqwest::blocking::Response, ClientError> {
        let status = response.status();
        if status.is_success() {
            return Ok(response);
        }
        let text = response.text()?;
        let body = serde_json::from_str(&text).unwrap_or_else(|_| ErrorBody::new("unknown", text));
        Err(ClientError::Api { status: status.as_u16(), body })
    }

    fn json<T: DeserializeOwned>(response: reqwest::blocking::Response) -> Result<T, ClientError> {
        let text = Self::check(response)?.text()?;
        serde_json::from_str(&text).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn predicates(&self) -> Result<Vec<PredicateInfo>, ClientError> {
        Self::json(self.http.get(self.url("/predicates")).send()?)
    }

    pub fn devices(&self) -> Result<Vec<String>, ClientError> {
        Self::json(self.http.get(self.url("/devices")).send()?)
    }

    pub fn submit(&self, request: &SubmitRequest) -> Result<SessionView, ClientError> {
        Self::json(self.http.post(self.url("/queries")).json(request).send()?)
    }

    pub fn session(&self, session: &str) -> Result<SessionView, ClientError> {
        Self::json(self.http.get(self.url(&format!("/queries/{session}"))).send()?)
    }

    pub fn results(&self, session: &str, cursor: u64, wait: Duration) -> Result<ResultsPage, ClientError> {
        let response = self
            .http
            .get(self.url(&format!("/queries/{session}/results")))
            .query(&[("cursor", cursor), ("wait_ms", wait.as_millis() as u64)])
            .send()?;
        let text = Self::check(response)?.text()?;
        let mut page = ResultsPage { records: Vec::new(), completion: None, next_cursor: cursor, status: SessionStatus::Running };
        for line in parse_stream(&text).map_err(|e| ClientError::Decode(e.to_string()))? {
            match line {
                StreamLine::Result(r) => page.records.push(r),
                StreamLine::Completion(c) => page.completion = Some(c),
                StreamLine::Cursor { next_cursor, status } => {
                    page.next_cursor = next_cursor;
                    page.status = status;
                }
            }
        }
        Ok(page)
    }

    /// Follows the stream until the completion record, returning every
    /// record in arrival order.
    pub fn collect_results(&self, session: &str, wait: Duration, deadline: Duration) -> Result<(Vec<ResultRecord>, Completion), ClientError> {
        let until = std::time::Instant::now() + deadline;
        let mut records = Vec::new();
        let mut cursor = 0;
        loop {
            let page = self.results(session, cursor, wait)?;
            cursor = page.next_cursor;
            records.extend(page.records);
            if let Some(done) = page.completion {
                return Ok((records, done));
            }
            if std::time::Instant::now() > until {
                return Err(ClientError::Decode(format!("session {session} did not complete in {deadline:?}")));
            }
        }
    }

    pub fn feedback(&self, session: &str, request: &FeedbackRequest) -> Result<(), ClientError> {
        Self::check(self.http.post(self.url(&format!("/queries/{session}/feedback"))).json(request).send()?)?;
        Ok(())
    }

    /// Long-polls a device inbox; `None` when nothing arrived in time.
    pub fn inbox(&self, device_id: &str, wait: Duration) -> Result<Option<Assignment>, ClientError> {
        let response = self
            .http
            .get(self.url(&format!("/devices/{device_id}/inbox")))
            .query(&[("wait_ms", wait.as_millis() as u64)])
            .send()?;
        if response.status() == StatusCode::NO_CONTENT {
            return Ok(None);
        }
        Self::json(response).map(Some)
    }

    pub fn report(&self, device_id: &str, report: &Report) -> Result<(), ClientError> {
        Self::check(self.http.post(self.url(&format!("/devices/{device_id}/report"))).json(report).send()?)?;
        Ok(())
    }

    pub fn evaluate(&self, spec: &OffloadSpec, ppm: Vec<u8>) -> Result<OffloadReply, ClientError> {
        let spec_json = serde_json::to_vec(spec).map_err(|e| ClientError::Decode(e.to_string()))?;
        let form = Form::new()
            .part("spec", Part::bytes(spec_json).mime_str("application/json")?)
            .part("photo", Part::bytes(ppm).file_name(format!("{}.ppm", spec.photo_id)).mime_str("image/x-portable-pixmap")?);
        Self::json(self.http.post(self.url("/partition/evaluate")).multipart(form).send()?)
    }
}
