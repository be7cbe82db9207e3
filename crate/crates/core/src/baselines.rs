//! Reference imputers: k-nearest-neighbor voting over binary patient
//! vectors, and a per-event train-prevalence predictor.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Pair};
use crate::error::{Error, Result};
use crate::evaluation::RowScorer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// Number of differing entries.
    Hamming,
    /// `1 − |a ∩ b| / |a ∪ b|`; two empty vectors are at distance 0.
    Jaccard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnConfig {
    pub k_neighbors: usize,
    #[serde(default = "default_distance")]
    pub distance: Distance,
}

fn default_distance() -> Distance {
    Distance::Hamming
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k_neighbors: 10, distance: Distance::Hamming }
    }
}

/// Row-major bit matrix, one `u64` word block per patient.
#[derive(Debug, Clone)]
pub struct BitRows {
    words: usize,
    bits: Vec<u64>,
    counts: Vec<u32>,
}

impl BitRows {
    pub fn from_dataset(d: &Dataset) -> Self {
        let words = d.num_events.div_ceil(64).max(1);
        let mut bits = vec![0u64; words * d.num_patients];
        for &(i, j) in d.positives() {
            bits[i * words + j / 64] |= 1 << (j % 64);
        }
        let counts = bits.chunks(words).map(|r| r.iter().map(|w| w.count_ones()).sum()).collect();
        Self { words, bits, counts }
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    fn intersection(a: &[u64], b: &[u64]) -> u32 {
        a.iter().zip(b).map(|(x, y)| (x & y).count_ones()).sum()
    }
}

/// Distance between two packed rows; lower is closer.
fn distance(kind: Distance, a: &[u64], a_count: u32, b: &[u64], b_count: u32) -> f64 {
    let inter = BitRows::intersection(a, b);
    match kind {
        Distance::Hamming => f64::from(a_count + b_count - 2 * inter),
        Distance::Jaccard => {
            let union = a_count + b_count - inter;
            if union == 0 {
                0.0
            } else {
                1.0 - f64::from(inter) / f64::from(union)
            }
        }
    }
}

/// Exhaustive k-NN imputer over the train patients.
pub struct KnnImputer {
    train: BitRows,
    train_positives: Vec<Vec<usize>>,
    num_events: usize,
    config: KnnConfig,
    query: BitRows,
}

impl KnnImputer {
    /// Prepares queries for the patients of `test_visible`.
    pub fn new(train: &Dataset, test_visible: &Dataset, config: KnnConfig) -> Result<Self> {
        if train.num_patients == 0 {
            return Err(Error::InvalidArgument("k-NN needs a non-empty train set".into()));
        }
        if config.k_neighbors == 0 || config.k_neighbors > train.num_patients {
            return Err(Error::InvalidArgument(format!(
                "k_neighbors must lie in [1, {}], got {}",
                train.num_patients, config.k_neighbors
            )));
        }
        if train.num_events != test_visible.num_events {
            return Err(Error::ShapeMismatch("train and test event spaces differ".into()));
        }
        let mut train_positives = vec![Vec::new(); train.num_patients];
        for &(i, j) in train.positives() {
            train_positives[i].push(j);
        }
        Ok(Self {
            train: BitRows::from_dataset(train),
            train_positives,
            num_events: train.num_events,
            config,
            query: BitRows::from_dataset(test_visible),
        })
    }

    /// The `k` nearest train patients of query `i`, ties to lower index.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let q = self.query.row(i);
        let qc = self.query.counts[i];
        let mut dist: Vec<(f64, usize)> = (0..self.train.len())
            .map(|t| {
                (
                    distance(self.config.distance, q, qc, self.train.row(t), self.train.counts[t]),
                    t,
                )
            })
            .collect();
        let k = self.config.k_neighbors;
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, cmp);
            dist.truncate(k);
        }
        dist.sort_by(cmp);
        dist.into_iter().map(|(_, t)| t).collect()
    }

    /// Full `test × events` score grid.
    pub fn score_grid(&self) -> Array2<f64> {
        let rows: Vec<Vec<f64>> = (0..self.query.len())
            .into_par_iter()
            .map(|i| {
                let mut out = vec![0.0; self.num_events];
                self.score_row(i, &mut out);
                out
            })
            .collect();
        let mut grid = Array2::zeros((rows.len(), self.num_events));
        for (i, r) in rows.into_iter().enumerate() {
            grid.row_mut(i).assign(&ndarray::ArrayView1::from(&r[..]));
        }
        grid
    }
}

impl RowScorer for KnnImputer {
    fn num_events(&self) -> usize {
        self.num_events
    }

    fn score_row(&self, patient: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        let neighbors = self.neighbors(patient);
        let k = neighbors.len() as f64;
        let mut counts = vec![0u32; self.num_events];
        for t in neighbors {
            for &j in &self.train_positives[t] {
                counts[j] += 1;
            }
        }
        for (o, c) in out.iter_mut().zip(counts) {
            *o = f64::from(c) / k;
        }
    }
}

/// Fraction of the `k` nearest train patients having each queried event.
pub fn knn_impute(train: &Dataset, test_visible: &Dataset, config: KnnConfig, pairs: &[Pair]) -> Result<Vec<f64>> {
    let knn = KnnImputer::new(train, test_visible, config)?;
    let mut cache: std::collections::HashMap<usize, Vec<f64>> = std::collections::HashMap::new();
    pairs
        .iter()
        .map(|&(i, j)| {
            if i >= test_visible.num_patients || j >= knn.num_events {
                return Err(Error::OutOfRange(format!("pair ({i}, {j})")));
            }
            let row = cache.entry(i).or_insert_with(|| {
                let mut out = vec![0.0; knn.num_events];
                knn.score_row(i, &mut out);
                out
            });
            Ok(row[j])
        })
        .collect()
}

/// Predicts every patient's event probability as the train prevalence.
pub struct FrequencyImputer {
    pub frequencies: Vec<f64>,
}

impl FrequencyImputer {
    pub fn new(train: &Dataset) -> Self {
        Self { frequencies: train.event_frequencies() }
    }
}

impl RowScorer for FrequencyImputer {
    fn num_events(&self) -> usize {
        self.frequencies.len()
    }

    fn score_row(&self, _patient: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.frequencies);
    }
}

pub fn frequency_baseline(train: &Dataset, pairs: &[Pair]) -> Result<Vec<f64>> {
    let f = train.event_frequencies();
    pairs
        .iter()
        .map(|&(_, j)| f.get(j).copied().ok_or_else(|| Error::OutOfRange(format!("event {j}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{evaluate, CutoffPolicy};

    fn ds(m: usize, n: usize, positives: Vec<Pair>) -> Dataset {
        Dataset::new(m, n, positives, Array2::zeros((m, 2))).unwrap()
    }

    #[test]
    fn identical_neighbor_with_k1() {
        let train = ds(3, 4, vec![(0, 0), (1, 1), (1, 3), (2, 2)]);
        let test = ds(1, 4, vec![(0, 1), (0, 3)]);
        let all: Vec<Pair> = (0..4).map(|j| (0, j)).collect();
        let s = knn_impute(&train, &test, KnnConfig { k_neighbors: 1, distance: Distance::Hamming }, &all).unwrap();
        assert_eq!(s, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn all_neighbors_gives_train_frequency() {
        let train = ds(4, 3, vec![(0, 0), (1, 0), (2, 1), (3, 0)]);
        let test = ds(2, 3, vec![(0, 2)]);
        let pairs = vec![(0, 0), (0, 1), (1, 2)];
        for distance in [Distance::Hamming, Distance::Jaccard] {
            let s = knn_impute(&train, &test, KnnConfig { k_neighbors: 4, distance }, &pairs).unwrap();
            assert_eq!(s, vec![0.75, 0.25, 0.0]);
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        // train 0 and 2 are identical; k=1 must pick 0
        let train = ds(3, 2, vec![(0, 0), (1, 1), (2, 0)]);
        let test = ds(1, 2, vec![(0, 0)]);
        let knn = KnnImputer::new(&train, &test, KnnConfig { k_neighbors: 1, distance: Distance::Hamming }).unwrap();
        assert_eq!(knn.neighbors(0), vec![0]);
    }

    #[test]
    fn invalid_k() {
        let train = ds(2, 2, vec![]);
        let test = ds(1, 2, vec![]);
        assert!(KnnImputer::new(&train, &test, KnnConfig { k_neighbors: 3, distance: Distance::Hamming }).is_err());
        let empty = ds(0, 2, vec![]);
        assert!(KnnImputer::new(&empty, &test, KnnConfig::default()).is_err());
    }

    #[test]
    fn frequency_baseline_cases() {
        let train = ds(2, 3, vec![(0, 0), (1, 0), (1, 1)]);
        assert_eq!(frequency_baseline(&train, &[(5, 0), (0, 1), (0, 2)]).unwrap(), vec![1.0, 0.5, 0.0]);
    }

    #[test]
    fn frequency_baseline_under_train_frequency_cutoff() {
        let train = ds(4, 2, vec![(0, 0), (1, 0), (2, 1)]);
        let test = ds(3, 2, vec![]);
        let imputer = FrequencyImputer::new(&train);
        let r = evaluate(&imputer, &test, &[(0, 0), (1, 1)], CutoffPolicy::TrainFrequency, &imputer.frequencies).unwrap();
        for e in &r.per_event {
            assert_eq!(e.sensitivity, Some(0.0));
            assert_eq!(e.specificity, Some(1.0));
        }
    }

    #[test]
    fn scores_on_k_grid() {
        let train = ds(6, 5, vec![(0, 0), (1, 0), (1, 2), (2, 4), (3, 3), (4, 1), (5, 0), (5, 1)]);
        let test = ds(2, 5, vec![(0, 0), (1, 1)]);
        let knn = KnnImputer::new(&train, &test, KnnConfig { k_neighbors: 3, distance: Distance::Jaccard }).unwrap();
        for s in knn.score_grid().iter() {
            assert!(((s * 3.0).round() - s * 3.0).abs() < 1e-12);
        }
    }
}
