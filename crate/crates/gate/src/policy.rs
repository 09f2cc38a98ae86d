//! Scripted stand-ins for the person at the search front end.

use serde::{Deserialize, Serialize};

use sieve_core::coordinator::{Relevance, ResultRecord};
use sieve_core::cost::CostModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PolicyKind {
    /// Marks every result with its planted relevance.
    Oracle,
    MarkNone,
    /// Marks results scoring at least `min_score` relevant, leaves the rest.
    Threshold { min_score: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserPolicy {
    pub kind: PolicyKind,
    /// Budgets of successive submissions; the last one repeats.
    pub budgets: Vec<u64>,
    /// Stop once this many distinct relevant photos were found.
    pub target: usize,
    pub max_submissions: usize,
}

impl UserPolicy {
    pub fn new(kind: PolicyKind, budgets: Vec<u64>, target: usize) -> Self {
        UserPolicy { kind, budgets, target, max_submissions: 100 }
    }

    pub fn check(&self, cost: &CostModel) -> Result<(), String> {
        if self.budgets.is_empty() {
            return Err("budget schedule is empty".into());
        }
        let min = cost.minimum_budget();
        if let Some(b) = self.budgets.iter().find(|&&b| b < min) {
            return Err(format!("budget {b} is below the minimum of {min} units"));
        }
        if self.max_submissions == 0 {
            return Err("max_submissions must be at least 1".into());
        }
        Ok(())
    }

    /// Budget of the `k`-th submission, counting from 0.
    pub fn budget(&self, k: usize) -> u64 {
        self.budgets[k.min(self.budgets.len() - 1)]
    }

    pub fn mark(&self, record: &ResultRecord, relevant: bool) -> Option<Relevance> {
        match self.kind {
            PolicyKind::Oracle => Some(if relevant { Relevance::Relevant } else { Relevance::Irrelevant }),
            PolicyKind::MarkNone => None,
            PolicyKind::Threshold { min_score } => (record.score >= min_score).then_some(Relevance::Relevant),
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            PolicyKind::Oracle => "oracle".into(),
            PolicyKind::MarkNone => "mark_none".into(),
            PolicyKind::Threshold { min_score } => format!("threshold_{min_score}"),
        }
    }
}
