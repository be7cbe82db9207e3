//! Per-iteration edge partition for training.
//!
//! Every iteration masks a Bernoulli(p) subset of the positive edges
//! (`invisible`), keeps the rest for message passing (`visible`), and draws
//! an equally sized set of non-edges (`negative`). The degree-preserving
//! sampler additionally matches the invisible set's per-patient and
//! per-event counts, so each patient and each event sees as many negative
//! as positive targets. The uniform sampler only matches the total and
//! exists for the bias comparison.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Pair;
use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::rng::{derive_seed, rng_from_seed};

pub const DEFAULT_MAX_REPAIR_SWEEPS: usize = 10;

/// One training iteration's partition of the edge set.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeBatch {
    pub visible: Vec<Pair>,
    pub invisible: Vec<Pair>,
    pub negative: Vec<Pair>,
    /// Event marginals could not be met exactly.
    pub relaxed: bool,
    /// `Σ_j | negatives of j − invisible of j |`.
    pub event_marginal_l1_gap: usize,
}

impl EdgeBatch {
    /// Checks the partition and marginal invariants against the full graph.
    pub fn check(&self, g_full: &BipartiteGraph, degree_preserving: bool) -> std::result::Result<(), String> {
        let mut all: Vec<Pair> = self.visible.iter().chain(&self.invisible).copied().collect();
        all.sort_unstable();
        let full: Vec<Pair> = g_full.edges().collect();
        if all != full {
            return Err("visible and invisible do not partition E".into());
        }
        if self.negative.len() != self.invisible.len() {
            return Err(format!(
                "|negative| = {} but |invisible| = {}",
                self.negative.len(),
                self.invisible.len()
            ));
        }
        let mut seen = HashSet::new();
        for &(i, j) in &self.negative {
            if g_full.contains(i, j) {
                return Err(format!("negative ({i}, {j}) is a positive edge"));
            }
            if !seen.insert((i, j)) {
                return Err(format!("negative ({i}, {j}) duplicated"));
            }
        }
        if degree_preserving {
            let (m, n) = (g_full.num_patients(), g_full.num_events());
            let (rp_inv, re_inv) = marginals(&self.invisible, m, n);
            let (rp_neg, re_neg) = marginals(&self.negative, m, n);
            if rp_inv != rp_neg {
                return Err("patient marginals differ".into());
            }
            let gap = l1_gap(&re_inv, &re_neg);
            if gap != self.event_marginal_l1_gap {
                return Err(format!("reported gap {} != actual {gap}", self.event_marginal_l1_gap));
            }
            if self.relaxed != (gap > 0) {
                return Err("relaxed flag inconsistent with gap".into());
            }
        }
        Ok(())
    }
}

/// Per-patient and per-event counts of an edge list.
pub fn marginals(edges: &[Pair], num_patients: usize, num_events: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rows = vec![0; num_patients];
    let mut cols = vec![0; num_events];
    for &(i, j) in edges {
        rows[i] += 1;
        cols[j] += 1;
    }
    (rows, cols)
}

fn l1_gap(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).map(|(&x, &y)| x.abs_diff(y)).sum()
}

/// Negative-set construction used during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeSampler {
    /// Uniform over non-edges, matching only the total count.
    Uniform,
    /// Matches per-patient and per-event counts of the invisible set.
    DegreePreserving,
}

impl std::fmt::Display for NegativeSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NegativeSampler::Uniform => f.write_str("uniform"),
            NegativeSampler::DegreePreserving => f.write_str("degree-preserving"),
        }
    }
}

/// Assigns every edge to `invisible` independently with probability `p`.
/// Returns `(invisible, visible)`, both in patient-major order.
pub fn sample_invisible(g: &BipartiteGraph, p: f64, seed: u64) -> Result<(Vec<Pair>, Vec<Pair>)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("mask probability must lie in (0, 1), got {p}")));
    }
    let mut rng = rng_from_seed(seed);
    let (mut invisible, mut visible) = (Vec::new(), Vec::with_capacity(g.edge_count()));
    for e in g.edges() {
        if rng.random_bool(p) {
            invisible.push(e);
        } else {
            visible.push(e);
        }
    }
    Ok((invisible, visible))
}

/// Result of the degree-preserving sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSample {
    pub negative: Vec<Pair>,
    pub relaxed: bool,
    pub event_marginal_l1_gap: usize,
}

struct NegativeState<'a> {
    g_full: &'a BipartiteGraph,
    chosen: Vec<Vec<usize>>,
    remaining_event_demand: Vec<usize>,
}

impl NegativeState<'_> {
    fn valid(&self, i: usize, j: usize) -> bool {
        !self.g_full.contains(i, j) && !self.chosen[i].contains(&j)
    }

    /// Tries to place one more negative for patient `i` directly, or by
    /// swapping with an already placed negative `(i2, j2)` so that `i` takes
    /// `j2` and `i2` moves to an event `j_alt` that still has demand.
    fn repair_one(&mut self, i: usize, rng: &mut impl Rng) -> bool {
        let mut open: Vec<usize> = (0..self.remaining_event_demand.len())
            .filter(|&j| self.remaining_event_demand[j] > 0)
            .collect();
        if let Some(&j) = open.iter().find(|&&j| self.valid(i, j)) {
            self.chosen[i].push(j);
            self.remaining_event_demand[j] -= 1;
            return true;
        }
        open.shuffle(rng);
        let placed: Vec<Pair> = self
            .chosen
            .iter()
            .enumerate()
            .flat_map(|(p, evs)| evs.iter().map(move |&e| (p, e)))
            .collect();
        if placed.is_empty() {
            return false;
        }
        let start = rng.random_range(0..placed.len());
        for &j_alt in &open {
            for k in 0..placed.len() {
                let (i2, j2) = placed[(start + k) % placed.len()];
                if i2 == i || !self.valid(i, j2) || !self.valid(i2, j_alt) {
                    continue;
                }
                let slot = self.chosen[i2].iter().position(|&e| e == j2).expect("placed edge");
                self.chosen[i2][slot] = j_alt;
                self.chosen[i].push(j2);
                self.remaining_event_demand[j_alt] -= 1;
                return true;
            }
        }
        false
    }
}

/// Draws `|invisible|` non-edges whose per-patient counts equal those of
/// `invisible` exactly and whose per-event counts match whenever the greedy
/// pass plus swap repair can achieve it.
///
/// Patients are visited in random order; each draws its demand one event at
/// a time with probability proportional to the event's remaining demand,
/// skipping events it is already linked to. Patients left short are repaired
/// with single swaps for up to `max_repair_sweeps` sweeps, and any stubs
/// still open are filled with uniform valid non-edges (`relaxed = true`).
pub fn sample_negative_degree_preserving(
    g_full: &BipartiteGraph,
    invisible: &[Pair],
    seed: u64,
    max_repair_sweeps: usize,
) -> Result<NegativeSample> {
    let (m, n) = (g_full.num_patients(), g_full.num_events());
    if let Some(&(i, j)) = invisible.iter().find(|&&(i, j)| !g_full.contains(i, j)) {
        return Err(Error::EdgeNotFound { patient: i, event: j });
    }
    let (patient_demand, event_demand) = marginals(invisible, m, n);
    for (i, &r) in patient_demand.iter().enumerate() {
        let available = n - g_full.patient_degree(i);
        if r > available {
            return Err(Error::InfeasibleNegatives { patient: i, demand: r, available });
        }
    }

    let mut rng = rng_from_seed(seed);
    let mut state = NegativeState {
        g_full,
        chosen: vec![Vec::new(); m],
        remaining_event_demand: event_demand.clone(),
    };

    let mut order: Vec<usize> = (0..m).filter(|&i| patient_demand[i] > 0).collect();
    order.shuffle(&mut rng);
    let mut blocked = vec![false; n];
    let mut short = Vec::new();
    for &i in &order {
        for &j in g_full.patient_neighbors(i) {
            blocked[j] = true;
        }
        for _ in 0..patient_demand[i] {
            let total: usize = state
                .remaining_event_demand
                .iter()
                .zip(&blocked)
                .filter(|(_, &b)| !b)
                .map(|(&c, _)| c)
                .sum();
            if total == 0 {
                break;
            }
            let mut ticket = rng.random_range(0..total);
            let mut pick = usize::MAX;
            for j in 0..n {
                let c = state.remaining_event_demand[j];
                if blocked[j] || c == 0 {
                    continue;
                }
                if ticket < c {
                    pick = j;
                    break;
                }
                ticket -= c;
            }
            state.chosen[i].push(pick);
            state.remaining_event_demand[pick] -= 1;
            blocked[pick] = true;
        }
        for &j in g_full.patient_neighbors(i) {
            blocked[j] = false;
        }
        for &j in &state.chosen[i] {
            blocked[j] = false;
        }
        if state.chosen[i].len() < patient_demand[i] {
            short.push(i);
        }
    }

    for _ in 0..max_repair_sweeps {
        if short.is_empty() {
            break;
        }
        let mut progress = false;
        for &i in &short {
            while state.chosen[i].len() < patient_demand[i] && state.repair_one(i, &mut rng) {
                progress = true;
            }
        }
        short.retain(|&i| state.chosen[i].len() < patient_demand[i]);
        if !progress {
            break;
        }
    }

    // Relaxation keeps patient counts exact at the expense of event counts.
    for &i in &short {
        let mut candidates: Vec<usize> = (0..n).filter(|&j| state.valid(i, j)).collect();
        candidates.shuffle(&mut rng);
        let missing = patient_demand[i] - state.chosen[i].len();
        state.chosen[i].extend_from_slice(&candidates[..missing]);
    }

    let mut negative: Vec<Pair> = state
        .chosen
        .iter()
        .enumerate()
        .flat_map(|(i, evs)| evs.iter().map(move |&j| (i, j)))
        .collect();
    negative.sort_unstable();
    let (_, event_counts) = marginals(&negative, m, n);
    let gap = l1_gap(&event_counts, &event_demand);
    Ok(NegativeSample {
        negative,
        relaxed: gap > 0,
        event_marginal_l1_gap: gap,
    })
}

/// `k` distinct non-edges drawn uniformly at random.
pub fn sample_negative_uniform(g_full: &BipartiteGraph, k: usize, seed: u64) -> Result<Vec<Pair>> {
    let (m, n) = (g_full.num_patients(), g_full.num_events());
    let complement = m * n - g_full.edge_count();
    if k > complement {
        return Err(Error::InvalidArgument(format!(
            "requested {k} negatives but only {complement} non-edges exist"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut out: Vec<Pair> = if 2 * k <= complement {
        let mut seen = HashSet::with_capacity(k);
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let (i, j) = (rng.random_range(0..m), rng.random_range(0..n));
            if !g_full.contains(i, j) && seen.insert((i, j)) {
                out.push((i, j));
            }
        }
        out
    } else {
        let mut all: Vec<Pair> = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| !g_full.contains(i, j))
            .collect();
        let (head, _) = all.partial_shuffle(&mut rng, k);
        head.to_vec()
    };
    out.sort_unstable();
    Ok(out)
}

/// Full partition for one iteration. Masking and negative sampling use the
/// `"mask"` and `"negatives"` substreams of `seed` at `iteration`.
pub fn sample_batch(
    g: &BipartiteGraph,
    p: f64,
    sampler: NegativeSampler,
    max_repair_sweeps: usize,
    seed: u64,
    iteration: u64,
) -> Result<EdgeBatch> {
    let mask_seed = derive_seed(seed, "mask", iteration);
    let neg_seed = derive_seed(seed, "negatives", iteration);
    let (invisible, visible) = sample_invisible(g, p, mask_seed)?;
    let (negative, relaxed, gap) = match sampler {
        NegativeSampler::DegreePreserving => {
            let s = sample_negative_degree_preserving(g, &invisible, neg_seed, max_repair_sweeps)?;
            (s.negative, s.relaxed, s.event_marginal_l1_gap)
        }
        NegativeSampler::Uniform => {
            let neg = sample_negative_uniform(g, invisible.len(), neg_seed)?;
            let (_, inv_cols) = marginals(&invisible, g.num_patients(), g.num_events());
            let (_, neg_cols) = marginals(&neg, g.num_patients(), g.num_events());
            let gap = l1_gap(&inv_cols, &neg_cols);
            (neg, gap > 0, gap)
        }
    };
    Ok(EdgeBatch {
        visible,
        invisible,
        negative,
        relaxed,
        event_marginal_l1_gap: gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_graph(m: usize, n: usize, density: f64, seed: u64) -> BipartiteGraph {
        let mut rng = rng_from_seed(seed);
        let edges: Vec<Pair> = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|_| rng.random_bool(density))
            .collect();
        BipartiteGraph::build(&edges, m, n).unwrap()
    }

    #[test]
    fn vanishing_mask_probability() {
        let g = random_graph(200, 100, 0.5, 1);
        assert!(g.edge_count() > 9000);
        let (inv, vis) = sample_invisible(&g, 1e-12, 7).unwrap();
        assert!(inv.is_empty());
        assert_eq!(vis.len(), g.edge_count());
    }

    #[test]
    fn invisible_count_concentrates() {
        let g = random_graph(1000, 200, 0.5, 2);
        let e = g.edge_count() as f64;
        let sd = (e * 0.2 * 0.8).sqrt();
        for seed in 0..5 {
            let (inv, vis) = sample_invisible(&g, 0.2, seed).unwrap();
            assert_eq!(inv.len() + vis.len(), g.edge_count());
            assert!((inv.len() as f64 - 0.2 * e).abs() <= 4.0 * sd);
        }
        assert_eq!(sample_invisible(&g, 0.2, 3).unwrap(), sample_invisible(&g, 0.2, 3).unwrap());
    }

    #[test]
    fn bad_mask_probability() {
        let g = random_graph(5, 5, 0.5, 2);
        assert!(sample_invisible(&g, 0.0, 0).is_err());
        assert!(sample_invisible(&g, 1.0, 0).is_err());
    }

    /// Every subset of the non-edges of size |invisible|, filtered to those
    /// meeting both marginals.
    fn feasible_by_enumeration(g: &BipartiteGraph, invisible: &[Pair]) -> Vec<Vec<Pair>> {
        let (m, n) = (g.num_patients(), g.num_events());
        let non_edges: Vec<Pair> = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| !g.contains(i, j))
            .collect();
        let target = marginals(invisible, m, n);
        let mut out = Vec::new();
        for mask in 0u32..(1 << non_edges.len()) {
            let subset: Vec<Pair> = (0..non_edges.len())
                .filter(|b| mask >> b & 1 == 1)
                .map(|b| non_edges[b])
                .collect();
            if subset.len() == invisible.len() && marginals(&subset, m, n) == target {
                out.push(subset);
            }
        }
        out
    }

    #[test]
    fn two_by_two_complement_of_diagonal() {
        let g = BipartiteGraph::build(&[(0, 1), (1, 0)], 2, 2).unwrap();
        let invisible = [(0, 1), (1, 0)];
        let feasible = feasible_by_enumeration(&g, &invisible);
        assert_eq!(feasible, vec![vec![(0, 0), (1, 1)]]);
        for seed in 0..20 {
            let s = sample_negative_degree_preserving(&g, &invisible, seed, 10).unwrap();
            assert_eq!(s.negative, feasible[0]);
            assert!(!s.relaxed);
        }
    }

    #[test]
    fn empty_invisible_gives_empty_negatives() {
        let g = random_graph(20, 10, 0.3, 4);
        let s = sample_negative_degree_preserving(&g, &[], 1, 10).unwrap();
        assert!(s.negative.is_empty());
        assert!(!s.relaxed);
    }

    #[test]
    fn infeasible_patient_is_named() {
        // patient 0 is linked to every event, so it has no non-edges
        let g = BipartiteGraph::build(&[(0, 0), (0, 1), (1, 0)], 2, 2).unwrap();
        match sample_negative_degree_preserving(&g, &[(0, 0)], 0, 10) {
            Err(Error::InfeasibleNegatives { patient: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn small_instances_match_enumeration_when_feasible() {
        let mut rng = rng_from_seed(99);
        let mut checked = 0;
        for trial in 0..200 {
            let g = random_graph(4, 4, 0.45, 1000 + trial);
            let (inv, _) = sample_invisible(&g, 0.5, trial).unwrap();
            if inv.is_empty() || g.edge_count() > 10 {
                continue;
            }
            let feasible = feasible_by_enumeration(&g, &inv);
            let Ok(s) = sample_negative_degree_preserving(&g, &inv, rng.random(), 10) else {
                continue;
            };
            if !s.relaxed {
                assert!(feasible.contains(&s.negative));
            }
            let (rows_inv, _) = marginals(&inv, 4, 4);
            let (rows_neg, _) = marginals(&s.negative, 4, 4);
            assert_eq!(rows_inv, rows_neg);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn conditional_determinism() {
        let g = random_graph(100, 40, 0.1, 5);
        let (inv, _) = sample_invisible(&g, 0.2, 5).unwrap();
        let a = sample_negative_degree_preserving(&g, &inv, 17, 10).unwrap();
        let b = sample_negative_degree_preserving(&g, &inv, 17, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_invariants_hold() {
        let g = random_graph(300, 80, 0.08, 6);
        for it in 0..5 {
            let b = sample_batch(&g, 0.2, NegativeSampler::DegreePreserving, 10, 3, it).unwrap();
            b.check(&g, true).unwrap();
            let u = sample_batch(&g, 0.2, NegativeSampler::Uniform, 10, 3, it).unwrap();
            u.check(&g, false).unwrap();
            assert_eq!(u.invisible, b.invisible);
        }
    }

    #[test]
    fn uniform_edge_cases() {
        let g = random_graph(10, 8, 0.3, 7);
        assert!(sample_negative_uniform(&g, 0, 1).unwrap().is_empty());
        let complement = 80 - g.edge_count();
        let all = sample_negative_uniform(&g, complement, 1).unwrap();
        let expected: Vec<Pair> = (0..10)
            .flat_map(|i| (0..8).map(move |j| (i, j)))
            .filter(|&(i, j)| !g.contains(i, j))
            .collect();
        assert_eq!(all, expected);
        assert!(sample_negative_uniform(&g, complement + 1, 1).is_err());
    }

    #[test]
    fn uniform_event_counts_follow_non_edge_counts() {
        // chi-square against counts proportional to (m - event degree)
        let (m, n) = (60, 12);
        let mut rng = rng_from_seed(8);
        let edges: Vec<Pair> = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(_, j)| rng.random_bool(0.05 + 0.06 * j as f64))
            .collect();
        let g = BipartiteGraph::build(&edges, m, n).unwrap();
        let complement = (m * n - g.edge_count()) as f64;
        let mut counts = vec![0usize; n];
        let (k, runs) = (40, 400);
        for seed in 0..runs {
            for (_, j) in sample_negative_uniform(&g, k, seed).unwrap() {
                counts[j] += 1;
            }
        }
        let total = (k * runs as usize) as f64;
        let chi2: f64 = (0..n)
            .map(|j| {
                let expected = total * (m - g.event_degree(j)) as f64 / complement;
                (counts[j] as f64 - expected).powi(2) / expected
            })
            .sum();
        // 11 degrees of freedom, 99.9th percentile is 31.26
        assert!(chi2 < 31.26, "chi2 = {chi2}");
    }

    #[test]
    fn uniform_vs_degree_preserving_event_expectation() {
        let (m, n) = (200, 12);
        let mut rng = rng_from_seed(9);
        let edges: Vec<Pair> = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(_, j)| rng.random_bool(0.02 + 0.03 * j as f64))
            .collect();
        let g = BipartiteGraph::build(&edges, m, n).unwrap();
        let runs = 200;
        let (mut inv_counts, mut dp_counts, mut uni_counts) = (vec![0usize; n], vec![0usize; n], vec![0usize; n]);
        let mut relaxed = 0;
        for it in 0..runs {
            let dp = sample_batch(&g, 0.2, NegativeSampler::DegreePreserving, 10, 1, it).unwrap();
            let un = sample_batch(&g, 0.2, NegativeSampler::Uniform, 10, 1, it).unwrap();
            let (_, c) = marginals(&un.negative, m, n);
            for j in 0..n {
                uni_counts[j] += c[j];
            }
            if dp.relaxed {
                relaxed += 1;
                continue;
            }
            let (_, a) = marginals(&dp.invisible, m, n);
            let (_, b) = marginals(&dp.negative, m, n);
            for j in 0..n {
                inv_counts[j] += a[j];
                dp_counts[j] += b[j];
            }
        }
        assert!(relaxed < runs / 10, "{relaxed} relaxed batches");
        assert_eq!(dp_counts, inv_counts);
        // uniform: the most common event gets fewer negatives than the rarest
        assert!(uni_counts[n - 1] < uni_counts[0]);
        assert!(inv_counts[n - 1] > inv_counts[0]);
    }
}
