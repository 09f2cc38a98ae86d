//! Queries: AND/OR trees of predicate specifications and their XML form.
//!
//! The wire format is the query XML used by the search front end:
//!
//! ```text
//! <?xml version="1.0" encoding="ISO-8859-1"?>
//! <query id="848753739">
//!   <and number_of_predicates="1">
//!     <predicate name="Face (front)" type="C">
//!       <arguments predicate_object="libface-predicate.so" .../>
//!       <parameters num="6" p0="1.2" p1="24" p2="24" p3="1" p4="1" p5="4"/>
//!       <dependencies num="0"/>
//!       <threshold value="1"/>
//!     </predicate>
//!   </and>
//! </query>
//! ```
//!
//! `<arguments>` names a code object to load. Predicates are resolved by name
//! against a [`PredicateRegistry`] instead, so its attributes are kept only so
//! that serialization reproduces them.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predicates::PredicateRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryId(pub u64);

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("malformed XML at {line}:{column}: {message}")]
    Xml { line: u32, column: u32, message: String },
    #[error("invalid query structure at {line}:{column}: {message}")]
    Structure { line: u32, column: u32, message: String },
    #[error("<{element}> at line {line} declares number_of_predicates={declared} but has {actual} children")]
    ChildCount { element: String, line: u32, declared: usize, actual: usize },
    #[error("query failed validation: {}", findings.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Validation { findings: Vec<Finding> },
}

/// A predicate parameter. Numeric text parses as a number, anything else
/// stays a string.
#[derive(Debug, Clone, PartialEq)]
pub enum Param {
    Number(f64),
    Text(String),
}

impl Param {
    fn from_text(text: &str) -> Self {
        match text.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Param::Number(v),
            _ => Param::Text(text.to_string()),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Param::Number(v) => Some(*v),
            Param::Text(_) => None,
        }
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Param::Number(v) => write!(f, "{v}"),
            Param::Text(s) => f.write_str(s),
        }
    }
}

/// Leaf of a query tree.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredicateSpec {
    pub name: String,
    /// The `type` attribute (`C` or `Java` in the original format).
    pub kind: Option<String>,
    pub parameters: Vec<Param>,
    /// Accept cutoff on the predicate's raw score. When absent the registry
    /// default applies.
    pub threshold: Option<f64>,
    /// Names of predicates this one is declared correlated with.
    pub dependencies: Vec<String>,
    /// Attributes of `<arguments>`, kept verbatim.
    pub arguments: Vec<(String, String)>,
    /// Attributes of `<predicate>` other than `name` and `type`.
    pub extra_attributes: Vec<(String, String)>,
}

impl PredicateSpec {
    pub fn new(name: impl Into<String>) -> Self {
        PredicateSpec { name: name.into(), ..Default::default() }
    }

    pub fn with_params<I, P>(mut self, params: I) -> Self
    where
        I: IntoIterator<Item = P>,
        P: Into<Param>,
    {
        self.parameters = params.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = Some(threshold);
        self
    }
}

impl From<f64> for Param {
    fn from(v: f64) -> Self {
        Param::Number(v)
    }
}

impl From<&str> for Param {
    fn from(s: &str) -> Self {
        Param::from_text(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connective {
    And,
    Or,
}

impl Connective {
    fn tag(self) -> &'static str {
        match self {
            Connective::And => "and",
            Connective::Or => "or",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Node { op: Connective, children: Vec<Expr>, extra_attributes: Vec<(String, String)> },
    Leaf(PredicateSpec),
}

impl Expr {
    pub fn and(children: Vec<Expr>) -> Self {
        Expr::Node { op: Connective::And, children, extra_attributes: Vec::new() }
    }

    pub fn or(children: Vec<Expr>) -> Self {
        Expr::Node { op: Connective::Or, children, extra_attributes: Vec::new() }
    }

    /// Leaves in document order.
    pub fn leaves(&self) -> Vec<&PredicateSpec> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a PredicateSpec>) {
        match self {
            Expr::Leaf(p) => out.push(p),
            Expr::Node { children, .. } => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }
}

/// Outcome of evaluating a whole query tree on one photo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeVerdict {
    pub accepted: bool,
    /// AND takes the minimum of the evaluated children's scores, OR the maximum.
    pub score: f64,
}

impl Expr {
    /// Left-to-right short-circuit evaluation. `leaf` is called with each
    /// evaluated leaf's document-order index and returns `(accepted, score)`.
    pub fn evaluate(&self, leaf: &mut dyn FnMut(usize, &PredicateSpec) -> (bool, f64)) -> TreeVerdict {
        let mut next = 0usize;
        self.evaluate_from(&mut next, leaf)
    }

    fn evaluate_from(
        &self,
        next: &mut usize,
        leaf: &mut dyn FnMut(usize, &PredicateSpec) -> (bool, f64),
    ) -> TreeVerdict {
        match self {
            Expr::Leaf(p) => {
                let idx = *next;
                *next += 1;
                let (accepted, score) = leaf(idx, p);
                TreeVerdict { accepted, score }
            }
            Expr::Node { op, children, .. } => {
                let mut score: Option<f64> = None;
                let mut decided = None;
                for child in children {
                    if decided.is_some() {
                        *next += child.leaf_count();
                        continue;
                    }
                    let v = child.evaluate_from(next, leaf);
                    score = Some(match (op, score) {
                        (_, None) => v.score,
                        (Connective::And, Some(s)) => s.min(v.score),
                        (Connective::Or, Some(s)) => s.max(v.score),
                    });
                    match op {
                        Connective::And if !v.accepted => decided = Some(false),
                        Connective::Or if v.accepted => decided = Some(true),
                        _ => {}
                    }
                }
                let accepted = decided.unwrap_or(*op == Connective::And);
                TreeVerdict { accepted, score: score.unwrap_or(0.0) }
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            Expr::Leaf(_) => 1,
            Expr::Node { children, .. } => children.iter().map(Expr::leaf_count).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub id: QueryId,
    pub root: Expr,
    pub extra_attributes: Vec<(String, String)>,
}

impl QuerySpec {
    pub fn new(id: QueryId, root: Expr) -> Self {
        QuerySpec { id, root, extra_attributes: Vec::new() }
    }

    pub fn conjunction(id: u64, predicates: Vec<PredicateSpec>) -> Self {
        QuerySpec::new(QueryId(id), Expr::and(predicates.into_iter().map(Expr::Leaf).collect()))
    }

    pub fn leaves(&self) -> Vec<&PredicateSpec> {
        self.root.leaves()
    }

    /// The leaf list of a flat conjunction in document order, or `None` when
    /// the query is not a single AND (or a lone predicate). Only conjunctions
    /// are ordered and partitioned; everything else is evaluated as a tree.
    pub fn conjunctive_pipeline(&self) -> Option<Vec<&PredicateSpec>> {
        match &self.root {
            Expr::Leaf(p) => Some(vec![p]),
            Expr::Node { op: Connective::And, children, .. } => children
                .iter()
                .map(|c| match c {
                    Expr::Leaf(p) => Some(p),
                    Expr::Node { .. } => None,
                })
                .collect(),
            Expr::Node { op: Connective::Or, .. } => None,
        }
    }

    pub fn validate(&self, registry: &PredicateRegistry) -> Vec<Finding> {
        let mut findings = Vec::new();
        let mut path = Vec::new();
        validate_expr(&self.root, registry, &mut path, &mut findings);
        findings
    }

    /// Parses and then validates against `registry`, failing on any finding.
    pub fn parse_validated(xml: &str, registry: &PredicateRegistry) -> Result<Self, QueryError> {
        let spec = parse_query(xml)?;
        let findings = spec.validate(registry);
        if findings.is_empty() {
            Ok(spec)
        } else {
            Err(QueryError::Validation { findings })
        }
    }

    pub fn to_xml(&self) -> String {
        let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        let _ = write!(out, "<query id=\"{}\"", self.id);
        write_attrs(&mut out, &self.extra_attributes);
        out.push_str(">\n");
        write_expr(&mut out, &self.root, 1);
        out.push_str("</query>\n");
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FindingReason {
    UnknownPredicate,
    ThresholdOutOfRange { threshold: f64, min: f64, max: f64 },
}

/// One problem with one leaf. `path` lists child indices from the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub path: Vec<usize>,
    pub predicate: String,
    pub reason: FindingReason,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path: Vec<String> = self.path.iter().map(ToString::to_string).collect();
        match &self.reason {
            FindingReason::UnknownPredicate => {
                write!(f, "unknown predicate {:?} at /{}", self.predicate, path.join("/"))
            }
            FindingReason::ThresholdOutOfRange { threshold, min, max } => write!(
                f,
                "threshold out of range for {:?} at /{}: {threshold} not in [{min}, {max}]",
                self.predicate,
                path.join("/")
            ),
        }
    }
}

fn validate_expr(expr: &Expr, registry: &PredicateRegistry, path: &mut Vec<usize>, out: &mut Vec<Finding>) {
    match expr {
        Expr::Node { children, .. } => {
            for (i, child) in children.iter().enumerate() {
                path.push(i);
                validate_expr(child, registry, path, out);
                path.pop();
            }
        }
        Expr::Leaf(p) => match registry.get(&p.name) {
            None => out.push(Finding {
                path: path.clone(),
                predicate: p.name.clone(),
                reason: FindingReason::UnknownPredicate,
            }),
            Some(def) => {
                if let Some(t) = p.threshold {
                    let (min, max) = def.score_range;
                    if !(min..=max).contains(&t) {
                        out.push(Finding {
                            path: path.clone(),
                            predicate: p.name.clone(),
                            reason: FindingReason::ThresholdOutOfRange { threshold: t, min, max },
                        });
                    }
                }
            }
        },
    }
}

/// Decodes raw query bytes, honouring an ISO-8859-1 declaration.
pub fn decode_query_bytes(bytes: &[u8]) -> String {
    let head = String::from_utf8_lossy(&bytes[..bytes.len().min(100)]).to_ascii_lowercase();
    if head.contains("iso-8859-1") || head.contains("latin1") {
        bytes.iter().map(|&b| b as char).collect()
    } else {
        String::from_utf8_lossy(bytes).into_owned()
    }
}

pub fn parse_query(xml: &str) -> Result<QuerySpec, QueryError> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| {
        let pos = e.pos();
        QueryError::Xml { line: pos.row, column: pos.col, message: e.to_string() }
    })?;
    let root = doc.root_element();
    let structure = |node: roxmltree::Node, message: String| {
        let pos = doc.text_pos_at(node.range().start);
        QueryError::Structure { line: pos.row, column: pos.col, message }
    };
    if root.tag_name().name() != "query" {
        return Err(structure(root, format!("root element must be <query>, found <{}>", root.tag_name().name())));
    }
    let id_text = root.attribute("id").ok_or_else(|| structure(root, "<query> needs an id".into()))?;
    let id = id_text
        .trim()
        .parse::<u64>()
        .map_err(|_| structure(root, format!("query id {id_text:?} is not a non-negative integer")))?;
    let children: Vec<_> = root.children().filter(|n| n.is_element()).collect();
    let [body] = children.as_slice() else {
        return Err(structure(root, format!("<query> must have exactly one child, found {}", children.len())));
    };
    let root_expr = parse_expr(&doc, *body)?;
    Ok(QuerySpec {
        id: QueryId(id),
        root: root_expr,
        extra_attributes: other_attributes(root, &["id"]),
    })
}

fn other_attributes(node: roxmltree::Node, known: &[&str]) -> Vec<(String, String)> {
    node.attributes()
        .filter(|a| !known.contains(&a.name()))
        .map(|a| (a.name().to_string(), a.value().to_string()))
        .collect()
}

fn parse_expr(doc: &roxmltree::Document, node: roxmltree::Node) -> Result<Expr, QueryError> {
    let pos = doc.text_pos_at(node.range().start);
    let structure = |message: String| QueryError::Structure { line: pos.row, column: pos.col, message };
    match node.tag_name().name() {
        tag @ ("and" | "or") => {
            let op = if tag == "and" { Connective::And } else { Connective::Or };
            let children = node
                .children()
                .filter(|n| n.is_element())
                .map(|n| parse_expr(doc, n))
                .collect::<Result<Vec<_>, _>>()?;
            if children.is_empty() {
                return Err(structure(format!("<{tag}> needs at least one child")));
            }
            if let Some(declared) = node.attribute("number_of_predicates") {
                let declared: usize = declared
                    .trim()
                    .parse()
                    .map_err(|_| structure(format!("number_of_predicates {declared:?} is not a count")))?;
                if declared != children.len() {
                    return Err(QueryError::ChildCount {
                        element: tag.to_string(),
                        line: pos.row,
                        declared,
                        actual: children.len(),
                    });
                }
            }
            Ok(Expr::Node { op, children, extra_attributes: other_attributes(node, &["number_of_predicates"]) })
        }
        "predicate" => parse_predicate(doc, node).map(Expr::Leaf),
        other => Err(structure(format!("unexpected element <{other}>"))),
    }
}

fn parse_predicate(doc: &roxmltree::Document, node: roxmltree::Node) -> Result<PredicateSpec, QueryError> {
    let structure = |n: roxmltree::Node, message: String| {
        let pos = doc.text_pos_at(n.range().start);
        QueryError::Structure { line: pos.row, column: pos.col, message }
    };
    let name = node
        .attribute("name")
        .ok_or_else(|| structure(node, "<predicate> needs a name".into()))?
        .to_string();
    let mut spec = PredicateSpec {
        name,
        kind: node.attribute("type").map(str::to_string),
        extra_attributes: other_attributes(node, &["name", "type"]),
        ..Default::default()
    };
    for child in node.children().filter(|n| n.is_element()) {
        match child.tag_name().name() {
            "arguments" => spec.arguments = other_attributes(child, &[]),
            "parameters" => spec.parameters = indexed_attributes(child, 'p', &structure)?.iter().map(|s| Param::from_text(s)).collect(),
            "dependencies" => spec.dependencies = indexed_attributes(child, 'd', &structure)?,
            "threshold" => {
                let value = child
                    .attribute("value")
                    .ok_or_else(|| structure(child, "<threshold> needs a value".into()))?;
                let t: f64 = value
                    .trim()
                    .parse()
                    .map_err(|_| structure(child, format!("threshold {value:?} is not a number")))?;
                spec.threshold = Some(t);
            }
            other => return Err(structure(child, format!("unexpected element <{other}> in <predicate>"))),
        }
    }
    Ok(spec)
}

/// Reads `num="k" x0=".." x1=".." ...` attribute lists.
fn indexed_attributes(
    node: roxmltree::Node,
    prefix: char,
    structure: &dyn Fn(roxmltree::Node, String) -> QueryError,
) -> Result<Vec<String>, QueryError> {
    let tag = node.tag_name().name();
    let num = match node.attribute("num") {
        Some(n) => n.trim().parse::<usize>().map_err(|_| structure(node, format!("<{tag}> num {n:?} is not a count")))?,
        None => node.attributes().filter(|a| a.name().starts_with(prefix)).count(),
    };
    (0..num)
        .map(|i| {
            node.attribute(format!("{prefix}{i}").as_str())
                .map(str::to_string)
                .ok_or_else(|| structure(node, format!("<{tag}> num={num} but {prefix}{i} is missing")))
        })
        .collect()
}

fn write_attrs(out: &mut String, attrs: &[(String, String)]) {
    for (k, v) in attrs {
        let _ = write!(out, " {k}=\"{}\"", escape(v));
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
    out
}

fn write_expr(out: &mut String, expr: &Expr, depth: usize) {
    let pad = "  ".repeat(depth);
    match expr {
        Expr::Node { op, children, extra_attributes } => {
            let _ = write!(out, "{pad}<{} number_of_predicates=\"{}\"", op.tag(), children.len());
            write_attrs(out, extra_attributes);
            out.push_str(">\n");
            for child in children {
                write_expr(out, child, depth + 1);
            }
            let _ = writeln!(out, "{pad}</{}>", op.tag());
        }
        Expr::Leaf(p) => {
            let inner = "  ".repeat(depth + 1);
            let _ = write!(out, "{pad}<predicate name=\"{}\"", escape(&p.name));
            if let Some(kind) = &p.kind {
                let _ = write!(out, " type=\"{}\"", escape(kind));
            }
            write_attrs(out, &p.extra_attributes);
            out.push_str(">\n");
            if !p.arguments.is_empty() {
                let _ = write!(out, "{inner}<arguments");
                write_attrs(out, &p.arguments);
                out.push_str("/>\n");
            }
            let _ = write!(out, "{inner}<parameters num=\"{}\"", p.parameters.len());
            for (i, param) in p.parameters.iter().enumerate() {
                let _ = write!(out, " p{i}=\"{}\"", escape(&param.to_string()));
            }
            out.push_str("/>\n");
            let _ = write!(out, "{inner}<dependencies num=\"{}\"", p.dependencies.len());
            for (i, dep) in p.dependencies.iter().enumerate() {
                let _ = write!(out, " d{i}=\"{}\"", escape(dep));
            }
            out.push_str("/>\n");
            if let Some(t) = p.threshold {
                let _ = writeln!(out, "{inner}<threshold value=\"{t}\"/>");
            }
            let _ = writeln!(out, "{pad}</predicate>");
        }
    }
}
