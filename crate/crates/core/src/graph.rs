//! Bipartite patient/event adjacency in compressed sparse row form, stored in
//! both orientations so neighborhoods on either side are contiguous slices.

use crate::dataset::Pair;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteGraph {
    num_patients: usize,
    num_events: usize,
    patient_offsets: Vec<usize>,
    patient_events: Vec<usize>,
    event_offsets: Vec<usize>,
    event_patients: Vec<usize>,
}

/// Row-compresses `(row, col)` pairs; `pairs` must be sorted and unique.
fn compress(rows: usize, sorted: impl Iterator<Item = Pair>) -> (Vec<usize>, Vec<usize>) {
    let mut offsets = vec![0usize; rows + 1];
    let mut cols = Vec::new();
    for (r, c) in sorted {
        offsets[r + 1] += 1;
        cols.push(c);
    }
    for r in 0..rows {
        offsets[r + 1] += offsets[r];
    }
    (offsets, cols)
}

impl BipartiteGraph {
    pub fn build(positives: &[Pair], num_patients: usize, num_events: usize) -> Result<Self> {
        if let Some(&(i, j)) = positives
            .iter()
            .find(|&&(i, j)| i >= num_patients || j >= num_events)
        {
            return Err(Error::OutOfRange(format!(
                "edge ({i}, {j}) outside {num_patients}x{num_events}"
            )));
        }
        let mut by_patient = positives.to_vec();
        by_patient.sort_unstable();
        by_patient.dedup();
        Ok(Self::from_sorted_unique(by_patient, num_patients, num_events))
    }

    fn from_sorted_unique(by_patient: Vec<Pair>, num_patients: usize, num_events: usize) -> Self {
        let mut by_event: Vec<Pair> = by_patient.iter().map(|&(i, j)| (j, i)).collect();
        by_event.sort_unstable();
        let (patient_offsets, patient_events) = compress(num_patients, by_patient.into_iter());
        let (event_offsets, event_patients) = compress(num_events, by_event.into_iter());
        Self {
            num_patients,
            num_events,
            patient_offsets,
            patient_events,
            event_offsets,
            event_patients,
        }
    }

    pub fn num_patients(&self) -> usize {
        self.num_patients
    }

    pub fn num_events(&self) -> usize {
        self.num_events
    }

    pub fn edge_count(&self) -> usize {
        self.patient_events.len()
    }

    /// Sorted events of patient `i`.
    pub fn patient_neighbors(&self, i: usize) -> &[usize] {
        &self.patient_events[self.patient_offsets[i]..self.patient_offsets[i + 1]]
    }

    /// Sorted patients having event `j`.
    pub fn event_neighbors(&self, j: usize) -> &[usize] {
        &self.event_patients[self.event_offsets[j]..self.event_offsets[j + 1]]
    }

    pub fn patient_degree(&self, i: usize) -> usize {
        self.patient_offsets[i + 1] - self.patient_offsets[i]
    }

    pub fn event_degree(&self, j: usize) -> usize {
        self.event_offsets[j + 1] - self.event_offsets[j]
    }

    pub fn patient_degrees(&self) -> Vec<usize> {
        (0..self.num_patients).map(|i| self.patient_degree(i)).collect()
    }

    pub fn event_degrees(&self) -> Vec<usize> {
        (0..self.num_events).map(|j| self.event_degree(j)).collect()
    }

    pub fn contains(&self, patient: usize, event: usize) -> bool {
        patient < self.num_patients && self.patient_neighbors(patient).binary_search(&event).is_ok()
    }

    /// Edges in patient-major order.
    pub fn edges(&self) -> impl Iterator<Item = Pair> + '_ {
        (0..self.num_patients)
            .flat_map(move |i| self.patient_neighbors(i).iter().map(move |&j| (i, j)))
    }

    /// The same graph with the two partitions swapped.
    pub fn transposed(&self) -> BipartiteGraph {
        BipartiteGraph {
            num_patients: self.num_events,
            num_events: self.num_patients,
            patient_offsets: self.event_offsets.clone(),
            patient_events: self.event_patients.clone(),
            event_offsets: self.patient_offsets.clone(),
            event_patients: self.patient_events.clone(),
        }
    }

    /// A new graph without `edges`; each must be present.
    pub fn remove_edges(&self, edges: &[Pair]) -> Result<BipartiteGraph> {
        let mut removed = edges.to_vec();
        removed.sort_unstable();
        removed.dedup();
        if let Some(&(i, j)) = removed.iter().find(|&&(i, j)| !self.contains(i, j)) {
            return Err(Error::EdgeNotFound { patient: i, event: j });
        }
        let mut cursor = removed.iter().peekable();
        let kept: Vec<Pair> = self
            .edges()
            .filter(|e| {
                if cursor.peek() == Some(&e) {
                    cursor.next();
                    false
                } else {
                    true
                }
            })
            .collect();
        Ok(Self::from_sorted_unique(kept, self.num_patients, self.num_events))
    }
}
