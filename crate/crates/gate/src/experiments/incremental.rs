//! Repeated budgeted submissions of one search intent, driven by a policy,
//! against a planted corpus.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use sieve_core::config::Config;
use sieve_core::coordinator::{Coordinator, SubmitOptions};
use sieve_core::cost::CostModel;
use sieve_core::fleet::Fleet;
use sieve_core::predicates::{splitmix64, PredicateRegistry};
use sieve_core::query::QuerySpec;

use super::ExperimentError;
use crate::corpus::PlantedCorpus;
use crate::policy::UserPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionRow {
    pub submission: usize,
    pub session: String,
    pub seed: u64,
    pub budget: u64,
    pub devices: usize,
    pub hot_devices: usize,
    pub photos_searched: u64,
    pub cache_photos_searched: u64,
    pub results: u64,
    pub relevant_results: u64,
    pub new_relevant: usize,
    pub charge: u64,
    pub cumulative_relevant: usize,
    pub cumulative_charge: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub charge: u64,
    pub relevant: usize,
    pub cost_per_relevant: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    /// The stop rule was not met: too few relevant photos, the corpus ran
    /// dry, or the submission cap was hit.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalSummary {
    pub policy: String,
    pub target: usize,
    pub submissions: usize,
    pub total_charge: u64,
    pub relevant_found: usize,
    pub cost_per_relevant: Option<f64>,
    /// Relevant results over all results in submissions after the first.
    pub resubmission_success: Option<f64>,
    pub status: RunStatus,
    pub single_pass: Baseline,
    pub single_pass_all: Baseline,
    pub lower_bound: Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalReport {
    pub rows: Vec<SubmissionRow>,
    pub summary: IncrementalSummary,
}

/// Seed of the `k`-th submission of a run seeded with `seed`.
pub fn submission_seed(seed: u64, k: usize) -> u64 {
    splitmix64(seed ^ splitmix64(k as u64 + 1))
}

/// Searches every photo of every device once without a budget, with a query
/// that returns only relevant photos, and pays for the `target` results the
/// task asks for.
pub fn single_pass(corpus: &PlantedCorpus, target: usize, cost: &CostModel) -> Baseline {
    let results = target.min(corpus.relevant_count());
    let charge = cost.charge(corpus.devices.len() as u64, corpus.photo_count() as u64, results as u64);
    Baseline { charge, relevant: results, cost_per_relevant: charge as f64 / results.max(1) as f64 }
}

/// Like [`single_pass`], but every relevant photo in the corpus comes back
/// and is paid for.
pub fn single_pass_all(corpus: &PlantedCorpus, cost: &CostModel) -> Baseline {
    let relevant = corpus.relevant_count();
    let charge = cost.charge(corpus.devices.len() as u64, corpus.photo_count() as u64, relevant as u64);
    Baseline { charge, relevant, cost_per_relevant: charge as f64 / relevant.max(1) as f64 }
}

/// One device holding all `target` relevant photos, searching only those.
pub fn lower_bound(target: usize, cost: &CostModel) -> Baseline {
    let charge = cost.charge(1, target as u64, target as u64);
    Baseline { charge, relevant: target, cost_per_relevant: charge as f64 / target.max(1) as f64 }
}

pub fn run_incremental(
    corpus: &PlantedCorpus,
    policy: &UserPolicy,
    config: &Config,
    query: &QuerySpec,
    seed: u64,
) -> Result<IncrementalReport, ExperimentError> {
    policy.check(&config.cost).map_err(ExperimentError::Policy)?;
    let registry = PredicateRegistry::builtin();
    let coordinator = Coordinator::new(registry.clone(), config.clone());
    let mut fleet = Fleet::new(corpus.device_states(&config.wifi, config.energy_model(&config.wifi)));
    fleet.register_all(&coordinator);
    let xml = query.to_xml();

    let mut rows = Vec::new();
    let mut found: BTreeSet<(String, String)> = BTreeSet::new();
    let mut total = 0u64;
    let (mut later_results, mut later_relevant) = (0u64, 0u64);
    for k in 0..policy.max_submissions {
        if found.len() >= policy.target {
            break;
        }
        let budget = policy.budget(k);
        let sub_seed = submission_seed(seed, k);
        let view = coordinator.submit(&xml, SubmitOptions::new(budget, sub_seed))?;
        fleet.run_session(&coordinator, &view.session)?;
        let done = coordinator
            .wait_complete(&view.session, std::time::Duration::ZERO)?
            .ok_or_else(|| ExperimentError::Setup(format!("session {} did not complete", view.session)))?;
        let records = coordinator.results(&view.session, 0, usize::MAX, None)?.records;
        let mut relevant_results = 0;
        let mut new_relevant = 0;
        for r in &records {
            let relevant = corpus.is_relevant(&r.device_id, &r.photo_id);
            if relevant {
                relevant_results += 1;
                if found.insert((r.device_id.clone(), r.photo_id.clone())) {
                    new_relevant += 1;
                }
            }
            if let Some(mark) = policy.mark(r, relevant) {
                coordinator.mark_feedback(&view.session, &r.device_id, &r.photo_id, Some(mark))?;
            }
        }
        if k > 0 {
            later_results += records.len() as u64;
            later_relevant += relevant_results;
        }
        total += done.charges.total;
        rows.push(SubmissionRow {
            submission: k,
            session: view.session.clone(),
            seed: sub_seed,
            budget,
            devices: view.allocation.devices,
            hot_devices: view.devices.iter().filter(|t| corpus.hot.contains(&t.device_id)).count(),
            photos_searched: done.photos_searched,
            cache_photos_searched: done.cache_photos_searched,
            results: done.results,
            relevant_results,
            new_relevant,
            charge: done.charges.total,
            cumulative_relevant: found.len(),
            cumulative_charge: total,
        });
        if done.photos_searched + done.cache_photos_searched == 0 {
            break;
        }
    }

    let status = if found.len() >= policy.target { RunStatus::Complete } else { RunStatus::Partial };
    let summary = IncrementalSummary {
        policy: policy.label(),
        target: policy.target,
        submissions: rows.len(),
        total_charge: total,
        relevant_found: found.len(),
        cost_per_relevant: (!found.is_empty()).then(|| total as f64 / found.len() as f64),
        resubmission_success: (rows.len() > 1).then(|| if later_results == 0 { 0.0 } else { later_relevant as f64 / later_results as f64 }),
        status,
        single_pass: single_pass(corpus, policy.target, &config.cost),
        single_pass_all: single_pass_all(corpus, &config.cost),
        lower_bound: lower_bound(policy.target, &config.cost),
    };
    Ok(IncrementalReport { rows, summary })
}

/// One trial: the oracle policy and the mark-none policy run the same
/// schedule with the same seeds, so their first submissions coincide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub oracle: IncrementalSummary,
    pub mark_none: IncrementalSummary,
    pub beats_single_pass: bool,
    pub beats_single_pass_all: bool,
    pub feedback_helps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialsSummary {
    pub trials: usize,
    pub single_pass: Baseline,
    pub single_pass_all: Baseline,
    pub lower_bound: Baseline,
    pub mean_oracle_cost_per_relevant: Option<f64>,
    pub beats_single_pass: usize,
    /// Reported only; `holds` does not depend on it.
    pub beats_single_pass_all: usize,
    pub feedback_helps: usize,
    /// Trials out of `trials` each count must reach.
    pub required: usize,
    pub holds: bool,
}

/// Oracle and mark-none runs over `trials` seeds derived from `seed`.
pub fn run_trials(
    corpus: &PlantedCorpus,
    budgets: &[u64],
    target: usize,
    config: &Config,
    query: &QuerySpec,
    trials: usize,
    seed: u64,
) -> Result<(Vec<TrialRow>, TrialsSummary), ExperimentError> {
    use crate::policy::PolicyKind;
    let oracle = UserPolicy::new(PolicyKind::Oracle, budgets.to_vec(), target);
    let none = UserPolicy::new(PolicyKind::MarkNone, budgets.to_vec(), target);
    let mut rows = Vec::with_capacity(trials);
    for t in 0..trials {
        let s = submission_seed(seed, 1000 + t);
        let a = run_incremental(corpus, &oracle, config, query, s)?.summary;
        let b = run_incremental(corpus, &none, config, query, s)?.summary;
        let beats = a.cost_per_relevant.is_some_and(|c| c < a.single_pass.cost_per_relevant);
        let beats_all = a.cost_per_relevant.is_some_and(|c| c < a.single_pass_all.cost_per_relevant);
        let helps = a.resubmission_success.unwrap_or(0.0) > b.resubmission_success.unwrap_or(0.0);
        rows.push(TrialRow { trial: t, seed: s, oracle: a, mark_none: b, beats_single_pass: beats, beats_single_pass_all: beats_all, feedback_helps: helps });
    }
    let required = (trials * 19).div_ceil(20);
    let beats = rows.iter().filter(|r| r.beats_single_pass).count();
    let helps = rows.iter().filter(|r| r.feedback_helps).count();
    let costs: Vec<f64> = rows.iter().filter_map(|r| r.oracle.cost_per_relevant).collect();
    let summary = TrialsSummary {
        trials,
        single_pass: single_pass(corpus, target, &config.cost),
        single_pass_all: single_pass_all(corpus, &config.cost),
        lower_bound: lower_bound(target, &config.cost),
        mean_oracle_cost_per_relevant: (!costs.is_empty()).then(|| costs.iter().sum::<f64>() / costs.len() as f64),
        beats_single_pass: beats,
        beats_single_pass_all: rows.iter().filter(|r| r.beats_single_pass_all).count(),
        feedback_helps: helps,
        required,
        holds: beats >= required && helps >= required,
    };
    Ok((rows, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusSpec;
    use crate::policy::PolicyKind;
    use crate::workloads::cloudy_sky;

    fn corpus() -> PlantedCorpus {
        PlantedCorpus::generate(&CorpusSpec { devices: 30, photos_per_device: 20, relevant_fraction: 0.05, ..CorpusSpec::default() }).unwrap()
    }

    #[test]
    fn lower_bound_arithmetic() {
        let lb = lower_bound(20, &CostModel::default());
        assert_eq!(lb.charge, 221);
        assert!((lb.cost_per_relevant - 11.05).abs() < 1e-12);
    }

    #[test]
    fn single_pass_counts_every_photo() {
        let c = corpus();
        let all = single_pass_all(&c, &CostModel::default());
        assert_eq!(all.relevant, c.relevant_count());
        // 30 devices, 600 photos, and only the relevant photos come back
        assert_eq!(all.charge, 30 + 600 + 10 * c.relevant_count() as u64);
        let sp = single_pass(&c, 5, &CostModel::default());
        assert_eq!((sp.charge, sp.relevant), (30 + 600 + 50, 5));
        assert!((sp.cost_per_relevant - 136.0).abs() < 1e-12);
    }

    #[test]
    fn runs_are_reproducible_and_stay_within_budget() {
        let c = corpus();
        let policy = UserPolicy::new(PolicyKind::Oracle, vec![60, 100], 10);
        let a = run_incremental(&c, &policy, &Config::default(), &cloudy_sky(), 3).unwrap();
        let b = run_incremental(&c, &policy, &Config::default(), &cloudy_sky(), 3).unwrap();
        assert_eq!(a, b);
        for row in &a.rows {
            assert!(row.charge <= row.budget);
        }
        assert_eq!(a.summary.total_charge, a.rows.iter().map(|r| r.charge).sum::<u64>());
        assert_eq!(a.rows[0].budget, 60);
        assert!(a.rows.iter().skip(1).all(|r| r.budget == 100));
    }

    #[test]
    fn unreachable_target_reports_partial() {
        let c = PlantedCorpus::generate(&CorpusSpec { devices: 4, photos_per_device: 10, relevant_fraction: 0.05, ..CorpusSpec::default() }).unwrap();
        let policy = UserPolicy::new(PolicyKind::Oracle, vec![200], 50);
        let r = run_incremental(&c, &policy, &Config::default(), &cloudy_sky(), 1).unwrap();
        assert_eq!(r.summary.status, RunStatus::Partial);
        assert_eq!(r.summary.relevant_found, c.relevant_count());
    }

    #[test]
    fn first_submission_does_not_depend_on_the_policy() {
        let c = corpus();
        let oracle = run_incremental(&c, &UserPolicy::new(PolicyKind::Oracle, vec![60], 100), &Config::default(), &cloudy_sky(), 8).unwrap();
        let none = run_incremental(&c, &UserPolicy::new(PolicyKind::MarkNone, vec![60], 100), &Config::default(), &cloudy_sky(), 8).unwrap();
        let strip = |r: &SubmissionRow| SubmissionRow { cumulative_charge: 0, ..r.clone() };
        assert_eq!(strip(&oracle.rows[0]), strip(&none.rows[0]));
    }
}
