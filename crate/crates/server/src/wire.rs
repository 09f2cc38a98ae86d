//! JSON bodies of the HTTP API.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use sieve_core::coordinator::{Completion, ResultRecord, SessionStatus};
use sieve_core::device::{DeviceResult, PredicateRef, Strategy, TaskSummary};
use sieve_core::photo::{Photo, PhotoError, PhotoMeta};
use sieve_core::predicates::PredicateRegistry;
use sieve_core::query::Finding;

/// `POST /queries`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub query_xml: String,
    pub budget: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_photos: Option<usize>,
}

impl SubmitRequest {
    pub fn new(query_xml: impl Into<String>, budget: u64, seed: u64) -> Self {
        SubmitRequest { query_xml: query_xml.into(), budget, seed, strategy: None, max_photos: None }
    }
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    /// Machine-readable error class, e.g. `budget_below_minimum`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_minimum: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub findings: Vec<Finding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<u32>,
}

impl ErrorBody {
    pub fn new(kind: &str, error: impl ToString) -> Self {
        ErrorBody { error: error.to_string(), kind: kind.to_string(), required_minimum: None, findings: Vec::new(), line: None, column: None }
    }
}

/// One line of `GET /queries/{session}/results`. A page is zero or more
/// `result` lines, a `completion` line once the session is complete and
/// the page reaches the end of the stream, and a closing `cursor` line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamLine {
    Result(ResultRecord),
    Completion(Completion),
    Cursor { next_cursor: u64, status: SessionStatus },
}

/// `POST /queries/{session}/feedback`. `relevant: null` clears a mark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub device_id: String,
    pub photo_id: String,
    pub relevant: Option<bool>,
}

/// A photo in a JSON body: PPM bytes in base64 plus the metadata sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePhoto {
    pub id: String,
    pub meta: String,
    pub ppm_base64: String,
}

impl WirePhoto {
    pub fn from_photo(photo: &Photo) -> Self {
        WirePhoto { id: photo.id.clone(), meta: photo.meta.to_text(), ppm_base64: STANDARD.encode(photo.encode_ppm()) }
    }

    pub fn to_photo(&self) -> Result<Photo, PhotoError> {
        let bytes = STANDARD.decode(&self.ppm_base64).map_err(|e| PhotoError::Ppm(format!("bad base64: {e}")))?;
        Photo::decode_ppm(self.id.clone(), &bytes, PhotoMeta::parse(&self.meta)?)
    }
}

/// `POST /devices/{id}/report`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    /// A streamed result, with the photo when it is uploaded alongside.
    Result { result: DeviceResult, photo: Option<WirePhoto> },
    Summary { summary: TaskSummary },
    /// The device could not run its task.
    Failure { session: String, reason: String },
}

/// The `spec` part of `POST /partition/evaluate`; the `photo` part holds
/// the PPM bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadSpec {
    pub query_xml: String,
    pub device_id: String,
    pub photo_id: String,
    #[serde(default)]
    pub meta: String,
    pub predicates: Vec<PredicateRef>,
}

/// `GET /predicates`: what a query composer can offer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateInfo {
    pub name: String,
    pub min_params: usize,
    pub max_params: usize,
    pub score_min: f64,
    pub score_max: f64,
    pub default_threshold: f64,
    pub nominal_ms_per_mp: f64,
}

pub fn predicate_catalog(registry: &PredicateRegistry) -> Vec<PredicateInfo> {
    registry
        .names()
        .filter_map(|n| registry.get(n))
        .map(|d| PredicateInfo {
            name: d.name.clone(),
            min_params: d.min_params,
            max_params: d.max_params,
            score_min: d.score_range.0,
            score_max: d.score_range.1,
            default_threshold: d.default_threshold,
            nominal_ms_per_mp: d.nominal_ms_per_mp,
        })
        .collect()
}

/// Parses an NDJSON page.
pub fn parse_stream(body: &str) -> Result<Vec<StreamLine>, serde_json::Error> {
    body.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn photo_round_trips_through_json() {
        let mut p = Photo::uniform("a", 3, 2, [1, 2, 3]);
        p.meta.bytes = Some(512_000);
        let w = WirePhoto::from_photo(&p);
        let back: WirePhoto = serde_json::from_str(&serde_json::to_string(&w).unwrap()).unwrap();
        assert_eq!(back.to_photo().unwrap(), p);
    }

    #[test]
    fn stream_lines_are_tagged() {
        let line = StreamLine::Cursor { next_cursor: 4, status: SessionStatus::Running };
        let text = serde_json::to_string(&line).unwrap();
        assert_eq!(text, r#"{"kind":"cursor","next_cursor":4,"status":"running"}"#);
        assert_eq!(parse_stream(&format!("{text}\n\n")).unwrap(), vec![line]);
    }

    #[test]
    fn submit_defaults() {
        let r: SubmitRequest = serde_json::from_str(r#"{"query_xml":"<query/>","budget":50}"#).unwrap();
        assert_eq!(r, SubmitRequest::new("<query/>", 50, 0));
    }
}
