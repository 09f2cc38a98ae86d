//! Pipeline ordering by conditional rank and the device/server split point.
//!
//! Offloading is modeled as one more filter, `pw`, with selectivity zero and
//! cost equal to the energy of sending a photo (in compute-ms equivalents).
//! Sorting `pw` into the rank order gives the partition: predicates ahead of
//! it run on the device, the rest run on the server.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::PredicateStats;

/// Photos between periodic replans.
pub const REPLAN_EVERY: u32 = 5;

/// Largest pipeline [`brute_force_optimal`] accepts.
pub const BRUTE_FORCE_MAX: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum PlannerError {
    #[error("wireless cost must be non-negative, got {0}")]
    NegativeCost(f64),
    #[error("exhaustive search supports at most {BRUTE_FORCE_MAX} predicates, got {0}")]
    TooLarge(usize),
}

/// Evaluation order (indices into the pipeline's document order) and the
/// position of the first predicate evaluated remotely.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub order: Vec<usize>,
    pub offload_index: usize,
}

impl Partition {
    pub fn local(order: Vec<usize>) -> Self {
        let n = order.len();
        Partition { order, offload_index: n }
    }

    pub fn local_part(&self) -> &[usize] {
        &self.order[..self.offload_index]
    }

    pub fn remote_part(&self) -> &[usize] {
        &self.order[self.offload_index..]
    }
}

/// `Σ cost_i · Π_{j<i} selectivity_j`: expected local cost per photo.
pub fn expected_pipeline_cost(costs: &[f64], selectivities: &[f64]) -> f64 {
    let mut pass = 1.0;
    let mut total = 0.0;
    for (c, s) in costs.iter().zip(selectivities) {
        total += c * pass;
        pass *= s;
    }
    total
}

/// Probability that a photo passes every predicate in a set, for predicates
/// that may be correlated. Sets are bitmasks over pipeline indices.
pub trait PassOracle {
    fn len(&self) -> usize;
    fn pass_probability(&self, mask: u32) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct IndependentSelectivities(pub Vec<f64>);

impl PassOracle for IndependentSelectivities {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn pass_probability(&self, mask: u32) -> f64 {
        self.0.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, s)| s).product()
    }
}

/// Empirical pass probabilities from explicit accept sets over a finite
/// universe. `accepts[p][x]` says whether predicate `p` accepts item `x`.
pub struct AcceptSets {
    table: Vec<f64>,
    n: usize,
}

impl AcceptSets {
    pub fn new(accepts: &[Vec<bool>]) -> Self {
        let n = accepts.len();
        assert!(n <= BRUTE_FORCE_MAX, "too many predicates for a subset table");
        let universe = accepts.first().map_or(0, Vec::len);
        assert!(accepts.iter().all(|a| a.len() == universe), "accept sets over different universes");
        let mut counts = vec![0u64; 1 << n];
        for x in 0..universe {
            let member: u32 = (0..n).filter(|&p| accepts[p][x]).fold(0, |m, p| m | (1 << p));
            // every subset of `member` passes item x
            let mut sub = member;
            loop {
                counts[sub as usize] += 1;
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & member;
            }
        }
        let table = counts.iter().map(|&c| if universe == 0 { 1.0 } else { c as f64 / universe as f64 }).collect();
        AcceptSets { table, n }
    }
}

impl PassOracle for AcceptSets {
    fn len(&self) -> usize {
        self.n
    }

    fn pass_probability(&self, mask: u32) -> f64 {
        self.table[mask as usize]
    }
}

/// Modeled per-photo device cost of running `order[..k]` locally and
/// transmitting every photo that survives that prefix.
pub fn modeled_device_cost(order: &[usize], k: usize, costs: &[f64], oracle: &dyn PassOracle, wireless_cost: f64) -> f64 {
    let mut mask = 0u32;
    let mut total = 0.0;
    for &p in &order[..k] {
        total += costs[p] * oracle.pass_probability(mask);
        mask |= 1 << p;
    }
    let pass = oracle.pass_probability(mask);
    if pass > 0.0 {
        total += pass * wireless_cost;
    }
    total
}

/// Expected local cost of a full order with no offloading.
pub fn order_cost(order: &[usize], costs: &[f64], oracle: &dyn PassOracle) -> f64 {
    let mut mask = 0u32;
    let mut total = 0.0;
    for &p in order {
        total += costs[p] * oracle.pass_probability(mask);
        mask |= 1 << p;
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub order: Vec<usize>,
    pub offload_index: usize,
    pub cost: f64,
}

/// Exhaustive search over every order and split point. An infinite
/// `wireless_cost` searches local-only plans.
pub fn brute_force_optimal(costs: &[f64], oracle: &dyn PassOracle, wireless_cost: f64) -> Result<Optimum, PlannerError> {
    let n = costs.len();
    if n > BRUTE_FORCE_MAX {
        return Err(PlannerError::TooLarge(n));
    }
    if wireless_cost < 0.0 {
        return Err(PlannerError::NegativeCost(wireless_cost));
    }
    let pass: Vec<f64> = (0..1u32 << n).map(|m| oracle.pass_probability(m)).collect();
    let mut best = Optimum { order: Vec::new(), offload_index: 0, cost: f64::INFINITY };
    let mut prefix = Vec::with_capacity(n);
    search(costs, &pass, wireless_cost, 0, 0.0, &mut prefix, &mut best);
    // the split is where the prefix ends; the rest run remotely in any order
    let mut order = best.order.clone();
    order.extend((0..n).filter(|p| !best.order.contains(p)));
    Ok(Optimum { order, ..best })
}

fn search(costs: &[f64], pass: &[f64], wc: f64, mask: u32, local: f64, prefix: &mut Vec<usize>, best: &mut Optimum) {
    let n = costs.len();
    let p = pass[mask as usize];
    let candidate = if prefix.len() == n && wc.is_infinite() {
        Some(local)
    } else if wc.is_finite() {
        Some(if p > 0.0 { local + p * wc } else { local })
    } else {
        None
    };
    if let Some(c) = candidate {
        if c < best.cost {
            *best = Optimum { order: prefix.clone(), offload_index: prefix.len(), cost: c };
        }
    }
    for next in 0..n {
        if mask & (1 << next) != 0 {
            continue;
        }
        prefix.push(next);
        search(costs, pass, wc, mask | (1 << next), local + costs[next] * p, prefix, best);
        prefix.pop();
    }
}

/// Builds the order one position at a time, each time taking the predicate
/// with the lowest rank conditioned on the predicates already placed.
pub fn greedy_conditional_order(costs: &[f64], oracle: &dyn PassOracle) -> Vec<usize> {
    let n = costs.len();
    let mut order = Vec::with_capacity(n);
    let mut mask = 0u32;
    while order.len() < n {
        let base = oracle.pass_probability(mask);
        let rank = |p: usize| {
            let s = if base > 0.0 { oracle.pass_probability(mask | (1 << p)) / base } else { 0.0 };
            if s >= 1.0 { f64::INFINITY } else { costs[p] / (1.0 - s) }
        };
        let next = (0..n)
            .filter(|p| mask & (1 << p) == 0)
            .min_by(|&a, &b| rank(a).total_cmp(&rank(b)).then_with(|| costs[a].total_cmp(&costs[b])).then(a.cmp(&b)))
            .expect("unplaced predicate remains");
        order.push(next);
        mask |= 1 << next;
    }
    order
}

/// Per-(device, query) planning state.
#[derive(Debug, Clone)]
pub struct PlannerState {
    names: Vec<String>,
    nominal_costs: Vec<f64>,
    pub stats: Vec<PredicateStats>,
    wireless_cost: f64,
    photos_since_replan: u32,
}

impl PlannerState {
    /// `names` and `nominal_costs` are per pipeline index, in document order.
    pub fn new(names: Vec<String>, nominal_costs: Vec<f64>, wireless_cost: f64) -> Self {
        assert_eq!(names.len(), nominal_costs.len());
        let stats = vec![PredicateStats::new(); names.len()];
        PlannerState { names, nominal_costs, stats, wireless_cost: wireless_cost.max(0.0), photos_since_replan: 0 }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn wireless_cost(&self) -> f64 {
        self.wireless_cost
    }

    pub fn photos_since_replan(&self) -> u32 {
        self.photos_since_replan
    }

    /// Counts one photo entering the pipeline.
    pub fn note_photo(&mut self) {
        self.photos_since_replan += 1;
    }

    pub fn document_order(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    fn cost_estimate(&self, idx: usize) -> f64 {
        self.stats[idx].cost_ema().unwrap_or(self.nominal_costs[idx])
    }

    /// Conditional rank of a predicate with enough samples at its position.
    pub fn rank(&self, idx: usize) -> Option<f64> {
        let s = &self.stats[idx];
        if !s.has_enough_samples() {
            return None;
        }
        let sel = s.selectivity_estimate().ok()?;
        Some(if sel >= 1.0 { f64::INFINITY } else { self.cost_estimate(idx) / (1.0 - sel) })
    }

    /// Key compared against the wireless cost. Without enough samples the
    /// cost estimate stands in: it is a lower bound on the rank, so the
    /// stand-in errs towards keeping work local.
    fn placement_key(&self, idx: usize) -> f64 {
        self.rank(idx).unwrap_or_else(|| self.cost_estimate(idx))
    }

    /// Sorts predicates with enough samples by ascending rank, ties by name
    /// then document index; the rest follow in their current relative
    /// order. Stats of every predicate whose set of predecessors changed are
    /// reset.
    pub fn order_by_rank(&mut self, current: &[usize]) -> Vec<usize> {
        let (mut sampled, unsampled): (Vec<usize>, Vec<usize>) = current.iter().partition(|&&i| self.rank(i).is_some());
        sampled.sort_by(|&a, &b| {
            let (ra, rb) = (self.rank(a).unwrap(), self.rank(b).unwrap());
            ra.partial_cmp(&rb)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.names[a].cmp(&self.names[b]))
                .then(a.cmp(&b))
        });
        sampled.extend(unsampled);
        let new_order = sampled;
        if new_order != current {
            let predecessors = |order: &[usize]| {
                let mut sets = vec![Vec::new(); self.len()];
                for (i, &p) in order.iter().enumerate() {
                    let mut prefix = order[..i].to_vec();
                    prefix.sort_unstable();
                    sets[p] = prefix;
                }
                sets
            };
            let (before, after) = (predecessors(current), predecessors(&new_order));
            for p in 0..self.len() {
                if before[p] != after[p] {
                    self.stats[p].reset_position();
                }
            }
        }
        new_order
    }

    /// Inserts `pw` into `order`: the offload index is the first position
    /// whose key exceeds the wireless cost. Equal keys stay local.
    pub fn place_pw(&self, order: &[usize]) -> Partition {
        let wc = self.wireless_cost;
        let offload_index = order.iter().position(|&p| self.placement_key(p) > wc).unwrap_or(order.len());
        Partition { order: order.to_vec(), offload_index }
    }

    /// Periodic replan: acts once [`REPLAN_EVERY`] photos have entered the
    /// pipeline since the last one.
    pub fn replan(&mut self, current: &Partition) -> Partition {
        if self.photos_since_replan < REPLAN_EVERY {
            return current.clone();
        }
        self.photos_since_replan = 0;
        let order = self.order_by_rank(&current.order);
        self.place_pw(&order)
    }

    /// Moves only `pw`: the order is kept and the split recomputed.
    pub fn replan_on_network_change(&mut self, new_wireless_cost: f64, current: &Partition) -> Result<Partition, PlannerError> {
        if new_wireless_cost < 0.0 || new_wireless_cost.is_nan() {
            return Err(PlannerError::NegativeCost(new_wireless_cost));
        }
        self.wireless_cost = new_wireless_cost;
        Ok(self.place_pw(&current.order))
    }

    /// Sets the wireless cost without replanning.
    pub fn set_wireless_cost(&mut self, cost: f64) {
        self.wireless_cost = cost.max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: usize = 0;
    const B: usize = 1;
    const C: usize = 2;

    /// A:(10, 0.5), B:(1, 0.9), C:(5, 0.1), independent.
    fn abc(wireless_cost: f64) -> PlannerState {
        let mut st = PlannerState::new(vec!["A".into(), "B".into(), "C".into()], vec![10.0, 1.0, 5.0], wireless_cost);
        st.stats = vec![PredicateStats::exact(10.0, 0.5), PredicateStats::exact(1.0, 0.9), PredicateStats::exact(5.0, 0.1)];
        st
    }

    fn abc_costs() -> (Vec<f64>, IndependentSelectivities) {
        (vec![10.0, 1.0, 5.0], IndependentSelectivities(vec![0.5, 0.9, 0.1]))
    }

    #[test]
    fn pipeline_cost_examples() {
        assert_eq!(expected_pipeline_cost(&[5.0], &[0.3]), 5.0);
        let cba = expected_pipeline_cost(&[5.0, 1.0, 10.0], &[0.1, 0.9, 0.5]);
        assert!((cba - 6.0).abs() < 1e-12);
        assert_eq!(expected_pipeline_cost(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), 6.0);
    }

    #[test]
    fn rank_order_example_is_optimal() {
        let mut st = abc(f64::INFINITY);
        let order = st.order_by_rank(&[A, B, C]);
        assert_eq!(order, [C, B, A]);
        let (costs, oracle) = abc_costs();
        // brute force over all 6 permutations
        let mut best = f64::INFINITY;
        for perm in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            best = best.min(order_cost(&perm, &costs, &oracle));
        }
        assert!((order_cost(&order, &costs, &oracle) - best).abs() < 1e-12);
        assert!((best - 6.0).abs() < 1e-12);
    }

    #[test]
    fn unsampled_keep_order() {
        let mut st = PlannerState::new(vec!["x".into(), "y".into(), "z".into()], vec![3.0, 2.0, 1.0], 1.0);
        assert_eq!(st.order_by_rank(&[2, 0, 1]), [2, 0, 1]);
        // one sampled predicate moves ahead of the unsampled ones
        st.stats[1] = PredicateStats::exact(2.0, 0.5);
        assert_eq!(st.order_by_rank(&[2, 0, 1]), [1, 2, 0]);
    }

    #[test]
    fn equal_ranks_sort_by_name() {
        let mut st = PlannerState::new(vec!["zeta".into(), "alpha".into()], vec![1.0, 1.0], 1.0);
        st.stats = vec![PredicateStats::exact(2.0, 0.5), PredicateStats::exact(1.0, 0.75)];
        assert_eq!(st.order_by_rank(&[0, 1]), [1, 0]);
    }

    #[test]
    fn reorder_resets_changed_prefixes_only() {
        // D keeps its predecessors {A, B, C} across the swap
        let mut st = PlannerState::new(vec!["A".into(), "B".into(), "C".into(), "D".into()], vec![1.0; 4], 1.0);
        st.stats = vec![
            PredicateStats::exact(10.0, 0.5),
            PredicateStats::exact(1.0, 0.9),
            PredicateStats::exact(5.0, 0.1),
            PredicateStats::exact(100.0, 0.5),
        ];
        let order = st.order_by_rank(&[A, B, C, 3]);
        assert_eq!(order, [C, B, A, 3]);
        // B sits at index 1 before and after, but its predecessor changed
        for p in [A, B, C] {
            assert_eq!(st.stats[p].position_epoch(), 1, "predicate {p}");
            assert_eq!(st.stats[p].samples(), 0);
        }
        assert_eq!(st.stats[3].position_epoch(), 0);
    }

    #[test]
    fn place_pw_examples() {
        let st = abc(8.0);
        let p = st.place_pw(&[C, B, A]);
        assert_eq!(p.offload_index, 1);
        let (costs, oracle) = abc_costs();
        let cost = modeled_device_cost(&p.order, 1, &costs, &oracle, 8.0);
        assert!((cost - 5.8).abs() < 1e-12);
        for k in 0..=3 {
            assert!(cost <= modeled_device_cost(&p.order, k, &costs, &oracle, 8.0) + 1e-12);
        }
        assert!((modeled_device_cost(&p.order, 0, &costs, &oracle, 8.0) - 8.0).abs() < 1e-12);

        assert_eq!(abc(0.5).place_pw(&[C, B, A]).offload_index, 0);
        assert_eq!(abc(100.0).place_pw(&[C, B, A]).offload_index, 3);
    }

    #[test]
    fn pw_ties_stay_local() {
        let mut st = abc(10.0);
        st.set_wireless_cost(st.rank(B).unwrap());
        assert_eq!(st.place_pw(&[C, B, A]).offload_index, 2);
    }

    #[test]
    fn unsampled_predicates_place_by_cost() {
        let st = PlannerState::new(vec!["a".into(), "b".into()], vec![0.5, 30.0], 2.0);
        assert_eq!(st.place_pw(&[0, 1]).offload_index, 1);
        assert_eq!(st.place_pw(&[1, 0]).offload_index, 0);
    }

    #[test]
    fn replan_cadence() {
        let mut st = abc(8.0);
        let doc = Partition::local(vec![A, B, C]);
        for _ in 0..4 {
            st.note_photo();
        }
        assert_eq!(st.replan(&doc), doc);
        st.note_photo();
        let p = st.replan(&doc);
        assert_eq!(p.order, [C, B, A]);
        assert_eq!(st.photos_since_replan(), 0);

        let mut st = abc(8.0);
        let settled = st.place_pw(&[C, B, A]);
        for _ in 0..5 {
            st.note_photo();
        }
        assert_eq!(st.replan(&settled), settled);
    }

    #[test]
    fn replan_moves_cheaper_predicate_local() {
        // texture-like predicate measured at rank just above, then just below pw
        let mut st = PlannerState::new(vec!["rgb".into(), "texture".into()], vec![0.2, 1.2], 2.0);
        st.stats = vec![PredicateStats::exact(0.2, 0.5), PredicateStats::exact(1.2, 0.5)];
        let current = st.place_pw(&[0, 1]);
        assert_eq!(current.offload_index, 1);
        st.stats[1] = PredicateStats::exact(0.9, 0.5);
        for _ in 0..5 {
            st.note_photo();
        }
        let next = st.replan(&current);
        assert_eq!(next.order, [0, 1]);
        assert_eq!(next.offload_index, 2);
    }

    #[test]
    fn network_change_examples() {
        let mut st = abc(8.0);
        let p = st.place_pw(&[C, B, A]);
        assert_eq!(st.replan_on_network_change(30.0, &p).unwrap().offload_index, 3);
        assert_eq!(st.replan_on_network_change(8.0, &p).unwrap(), p);
        assert_eq!(st.replan_on_network_change(0.0, &p).unwrap().offload_index, 0);
        assert_eq!(st.replan_on_network_change(-1.0, &p), Err(PlannerError::NegativeCost(-1.0)));
    }

    #[test]
    fn brute_force_examples() {
        let (costs, oracle) = abc_costs();
        let opt = brute_force_optimal(&costs, &oracle, 8.0).unwrap();
        assert_eq!(opt.order[0], C);
        assert_eq!(opt.offload_index, 1);
        assert!((opt.cost - 5.8).abs() < 1e-12);

        let one = brute_force_optimal(&[2.0], &IndependentSelectivities(vec![0.0]), 5.0).unwrap();
        assert_eq!(one.offload_index, 1);

        let empty = brute_force_optimal(&[], &IndependentSelectivities(vec![]), 5.0).unwrap();
        assert_eq!(empty.cost, 5.0);
        let empty_local = brute_force_optimal(&[], &IndependentSelectivities(vec![]), f64::INFINITY).unwrap();
        assert_eq!(empty_local.cost, 0.0);

        let big = vec![1.0; 11];
        assert_eq!(
            brute_force_optimal(&big, &IndependentSelectivities(vec![0.5; 11]), 1.0),
            Err(PlannerError::TooLarge(11))
        );
    }

    #[test]
    fn accept_set_oracle_counts_intersections() {
        let a = vec![true, true, false, true];
        let b = vec![true, false, false, true];
        let oracle = AcceptSets::new(&[a, b]);
        assert_eq!(oracle.pass_probability(0), 1.0);
        assert_eq!(oracle.pass_probability(0b01), 0.75);
        assert_eq!(oracle.pass_probability(0b10), 0.5);
        assert_eq!(oracle.pass_probability(0b11), 0.5);
    }

    #[test]
    fn greedy_uses_conditional_selectivity() {
        // p1 and p2 accept the same items; once p1 is placed p2 filters nothing
        let items = 10;
        let p0: Vec<bool> = (0..items).map(|x| x < 5).collect();
        let p1: Vec<bool> = (0..items).map(|x| x < 3).collect();
        let oracle = AcceptSets::new(&[p0, p1.clone(), p1]);
        let order = greedy_conditional_order(&[1.0, 1.0, 1.0], &oracle);
        assert_eq!(order[0], 1);
        assert_eq!(order[1], 0);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
        (1usize..=6).prop_flat_map(|n| {
            (
                prop::collection::vec(1.0f64..100.0, n),
                prop::collection::vec(0.05f64..0.95, n),
                0.1f64..200.0,
            )
        })
    }

    fn exact_state(costs: &[f64], sels: &[f64], wc: f64) -> PlannerState {
        let names = (0..costs.len()).map(|i| format!("p{i}")).collect();
        let mut st = PlannerState::new(names, costs.to_vec(), wc);
        st.stats = costs.iter().zip(sels).map(|(&c, &s)| PredicateStats::exact(c, s)).collect();
        st
    }

    proptest! {
        #[test]
        fn order_is_a_permutation_and_index_in_range((costs, sels, wc) in instance()) {
            let mut st = exact_state(&costs, &sels, wc);
            let order = st.order_by_rank(&st.document_order());
            let mut sorted = order.clone();
            sorted.sort();
            prop_assert_eq!(sorted, st.document_order());
            let p = st.place_pw(&order);
            prop_assert!(p.offload_index <= costs.len());
        }

        #[test]
        fn more_expensive_network_never_offloads_more((costs, sels, wc) in instance(), bump in 0.0f64..100.0) {
            let mut st = exact_state(&costs, &sels, wc);
            let order = st.order_by_rank(&st.document_order());
            let lo = st.place_pw(&order);
            let hi = st.replan_on_network_change(wc + bump, &lo).unwrap();
            prop_assert!(hi.offload_index >= lo.offload_index);
            prop_assert_eq!(hi.order, lo.order);
        }

        #[test]
        fn rank_order_matches_brute_force((costs, sels, _wc) in instance()) {
            let mut st = exact_state(&costs, &sels, f64::INFINITY);
            let order = st.order_by_rank(&st.document_order());
            let oracle = IndependentSelectivities(sels.clone());
            let opt = brute_force_optimal(&costs, &oracle, f64::INFINITY).unwrap();
            let ours = order_cost(&order, &costs, &oracle);
            prop_assert!((ours - opt.cost).abs() <= 1e-9 * opt.cost.max(1.0));
        }
    }
}
