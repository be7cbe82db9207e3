//! Per-event sensitivity, specificity, and balanced accuracy under the two
//! cutoff policies, frequency-binned bias profiles, and embedding export.
//!
//! Positives are the held-out entries of test patients. Negatives are every
//! test (patient, event) pair with no recorded positive at all, i.e. the
//! unmeasured entries; visible positives are never scored.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Pair};
use crate::error::{Error, Result};
use crate::model::{GraphImputer, ScorerProjections};

/// Anything that can score one test patient against every event.
pub trait RowScorer: Sync {
    fn num_events(&self) -> usize;
    fn score_row(&self, patient: usize, out: &mut [f64]);
}

/// A precomputed `patients × events` score grid.
impl RowScorer for Array2<f64> {
    fn num_events(&self) -> usize {
        self.ncols()
    }

    fn score_row(&self, patient: usize, out: &mut [f64]) {
        for (o, &s) in out.iter_mut().zip(self.row(patient)) {
            *o = s;
        }
    }
}

/// Scores test patients from message-passed latents; `offset` is the index
/// of the first test patient within those latents.
pub struct GraphScorer<'a> {
    pub model: &'a GraphImputer,
    pub projections: ScorerProjections,
    pub offset: usize,
}

impl<'a> GraphScorer<'a> {
    pub fn new(model: &'a GraphImputer, patient_latents: &Array2<f64>, event_latents: &Array2<f64>, offset: usize) -> Self {
        Self {
            model,
            projections: ScorerProjections::new(&model.params, patient_latents, event_latents),
            offset,
        }
    }
}

impl RowScorer for GraphScorer<'_> {
    fn num_events(&self) -> usize {
        self.projections.event_proj.nrows()
    }

    fn score_row(&self, patient: usize, out: &mut [f64]) {
        self.projections
            .score_row(&self.model.params, patient + self.offset, out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CutoffPolicy {
    /// Impute positive when the score exceeds a fixed value.
    Fixed(f64),
    /// Impute positive when the score exceeds the event's train prevalence.
    TrainFrequency,
}

impl CutoffPolicy {
    pub fn threshold(&self, train_frequency: f64) -> f64 {
        match *self {
            CutoffPolicy::Fixed(t) => t,
            CutoffPolicy::TrainFrequency => train_frequency,
        }
    }

    /// Short label used in file names and tables.
    pub fn label(&self) -> String {
        match self {
            CutoffPolicy::Fixed(t) => format!("{t}"),
            CutoffPolicy::TrainFrequency => "avg".to_string(),
        }
    }
}

impl FromStr for CutoffPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train-frequency" | "train_frequency" | "avg" => Ok(CutoffPolicy::TrainFrequency),
            other => match other.parse::<f64>() {
                Ok(t) if t > 0.0 && t < 1.0 => Ok(CutoffPolicy::Fixed(t)),
                _ => Err(Error::UnknownPolicy(other.to_string())),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

impl Confusion {
    fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
        self.fp += other.fp;
    }

    pub fn sensitivity(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    pub fn specificity(&self) -> Option<f64> {
        let n = self.tn + self.fp;
        (n > 0).then(|| self.tn as f64 / n as f64)
    }

    pub fn balanced_accuracy(&self) -> Option<f64> {
        Some(0.5 * (self.sensitivity()? + self.specificity()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventMetrics {
    pub event: usize,
    pub train_frequency: f64,
    pub confusion: Confusion,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

/// Mean and population standard deviation over events where defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let values: Vec<f64> = values.into_iter().collect();
        let count = values.len();
        if count == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, count };
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
        Self { mean, std: var.sqrt(), count }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
    pub balanced_accuracy: MeanStd,
    /// Events left out of the sensitivity summary for lack of held-out positives.
    pub excluded_without_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyBin {
    pub lower: f64,
    pub upper: f64,
    pub events: usize,
    pub mean_recall: Option<f64>,
    pub mean_specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub policy: CutoffPolicy,
    pub per_event: Vec<EventMetrics>,
    pub summary: Summary,
    pub frequency_bins: Vec<FrequencyBin>,
}

pub const NUM_FREQUENCY_BINS: usize = 10;

fn summarize(per_event: &[EventMetrics]) -> Summary {
    Summary {
        sensitivity: MeanStd::of(per_event.iter().filter_map(|e| e.sensitivity)),
        specificity: MeanStd::of(per_event.iter().filter_map(|e| e.specificity)),
        balanced_accuracy: MeanStd::of(per_event.iter().filter_map(|e| e.balanced_accuracy)),
        excluded_without_positives: per_event.iter().filter(|e| e.sensitivity.is_none()).count(),
    }
}

/// Log-spaced edges over the positive train frequencies. Events with zero
/// frequency fall into the first bin.
pub fn frequency_bin_edges(frequencies: &[f64]) -> Vec<f64> {
    let positive: Vec<f64> = frequencies.iter().copied().filter(|&f| f > 0.0).collect();
    let Some(lo) = positive.iter().copied().reduce(f64::min) else {
        return vec![0.0, 0.0];
    };
    let hi = positive.iter().copied().fold(lo, f64::max);
    if hi <= lo {
        return vec![lo, hi];
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..=NUM_FREQUENCY_BINS)
        .map(|b| {
            if b == 0 {
                lo
            } else if b == NUM_FREQUENCY_BINS {
                hi
            } else {
                (llo + (lhi - llo) * b as f64 / NUM_FREQUENCY_BINS as f64).exp()
            }
        })
        .collect()
}

pub fn bin_index(edges: &[f64], f: f64) -> usize {
    let bins = edges.len() - 1;
    (1..bins).take_while(|&b| f >= edges[b]).count()
}

fn mean_opt(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn frequency_bins(per_event: &[EventMetrics]) -> Vec<FrequencyBin> {
    let freqs: Vec<f64> = per_event.iter().map(|e| e.train_frequency).collect();
    let edges = frequency_bin_edges(&freqs);
    (0..edges.len() - 1)
        .map(|b| {
            let members: Vec<&EventMetrics> = per_event
                .iter()
                .filter(|e| bin_index(&edges, e.train_frequency) == b)
                .collect();
            FrequencyBin {
                lower: edges[b],
                upper: edges[b + 1],
                events: members.len(),
                mean_recall: mean_opt(members.iter().filter_map(|e| e.sensitivity)),
                mean_specificity: mean_opt(members.iter().filter_map(|e| e.specificity)),
            }
        })
        .collect()
}

impl MetricsReport {
    pub fn from_confusions(policy: CutoffPolicy, confusions: Vec<Confusion>, train_frequencies: &[f64]) -> Self {
        let per_event: Vec<EventMetrics> = confusions
            .into_iter()
            .enumerate()
            .map(|(j, c)| EventMetrics {
                event: j,
                train_frequency: train_frequencies[j],
                confusion: c,
                sensitivity: c.sensitivity(),
                specificity: c.specificity(),
                balanced_accuracy: c.balanced_accuracy(),
            })
            .collect();
        let summary = summarize(&per_event);
        let frequency_bins = frequency_bins(&per_event);
        Self { policy, per_event, summary, frequency_bins }
    }

    pub const PER_EVENT_HEADER: &'static str =
        "event,label,train_frequency,tp,fn,tn,fp,sensitivity,specificity,balanced_accuracy";

    pub fn per_event_csv(&self, labels: Option<&[String]>) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::new();
        let _ = writeln!(s, "{}", Self::PER_EVENT_HEADER);
        for e in &self.per_event {
            let label = labels.map(|l| l[e.event].clone()).unwrap_or_else(|| e.event.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                e.event,
                label,
                e.train_frequency,
                e.confusion.tp,
                e.confusion.fn_,
                e.confusion.tn,
                e.confusion.fp,
                opt(e.sensitivity),
                opt(e.specificity),
                opt(e.balanced_accuracy)
            );
        }
        s
    }

    pub const SUMMARY_HEADER: &'static str = "method,cutoff,sensitivity_mean,sensitivity_std,specificity_mean,specificity_std,balanced_accuracy_mean,balanced_accuracy_std,events_with_sensitivity,events_with_specificity,excluded_without_positives";

    pub fn summary_csv_row(&self, method: &str) -> String {
        let s = &self.summary;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            method,
            self.policy.label(),
            s.sensitivity.mean,
            s.sensitivity.std,
            s.specificity.mean,
            s.specificity.std,
            s.balanced_accuracy.mean,
            s.balanced_accuracy.std,
            s.sensitivity.count,
            s.specificity.count,
            s.excluded_without_positives
        )
    }

    pub const BINS_HEADER: &'static str = "bin,lower,upper,events,mean_recall,mean_specificity";

    pub fn bins_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::new();
        let _ = writeln!(s, "{}", Self::BINS_HEADER);
        for (b, bin) in self.frequency_bins.iter().enumerate() {
            let _ = writeln!(
                s,
                "{b},{},{},{},{},{}",
                bin.lower,
                bin.upper,
                bin.events,
                opt(bin.mean_recall),
                opt(bin.mean_specificity)
            );
        }
        s
    }
}

/// Confusion counts of every event under `policy`.
///
/// `heldout` is in `test_visible` patient indexing; `train_frequencies` has
/// one entry per event.
pub fn evaluate(
    scorer: &dyn RowScorer,
    test_visible: &Dataset,
    heldout: &[Pair],
    policy: CutoffPolicy,
    train_frequencies: &[f64],
) -> Result<MetricsReport> {
    evaluate_policies(scorer, test_visible, heldout, &[policy], train_frequencies)
        .map(|mut v| v.remove(0))
}

/// Like [`evaluate`] for several policies, scoring the grid once.
pub fn evaluate_policies(
    scorer: &dyn RowScorer,
    test_visible: &Dataset,
    heldout: &[Pair],
    policies: &[CutoffPolicy],
    train_frequencies: &[f64],
) -> Result<Vec<MetricsReport>> {
    let n = test_visible.num_events;
    if scorer.num_events() != n || train_frequencies.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "scorer has {} events, test data {n}, frequencies {}",
            scorer.num_events(),
            train_frequencies.len()
        )));
    }
    if let Some(&(i, j)) = heldout
        .iter()
        .find(|&&(i, j)| i >= test_visible.num_patients || j >= n)
    {
        return Err(Error::OutOfRange(format!("held-out pair ({i}, {j})")));
    }
    let thresholds: Vec<Vec<f64>> = policies
        .iter()
        .map(|p| train_frequencies.iter().map(|&f| p.threshold(f)).collect())
        .collect();

    // 0 = unmeasured, 1 = held-out positive, 2 = visible positive
    let mut heldout_by_patient: Vec<Vec<usize>> = vec![Vec::new(); test_visible.num_patients];
    for &(i, j) in heldout {
        heldout_by_patient[i].push(j);
    }
    let mut visible_by_patient: Vec<Vec<usize>> = vec![Vec::new(); test_visible.num_patients];
    for &(i, j) in test_visible.positives() {
        visible_by_patient[i].push(j);
    }

    let per_patient = |i: usize, counts: &mut Vec<Vec<Confusion>>, scores: &mut Vec<f64>, kind: &mut Vec<u8>| {
        scorer.score_row(i, scores);
        kind.iter_mut().for_each(|k| *k = 0);
        for &j in &heldout_by_patient[i] {
            kind[j] = 1;
        }
        for &j in &visible_by_patient[i] {
            kind[j] = 2;
        }
        for (p, th) in thresholds.iter().enumerate() {
            let row = &mut counts[p];
            for j in 0..n {
                let predicted = scores[j] > th[j];
                let c = &mut row[j];
                match (kind[j], predicted) {
                    (1, true) => c.tp += 1,
                    (1, false) => c.fn_ += 1,
                    (0, true) => c.fp += 1,
                    (0, false) => c.tn += 1,
                    _ => {}
                }
            }
        }
    };

    let fresh = || vec![vec![Confusion::default(); n]; policies.len()];
    let chunk = 64;
    let partials: Vec<Vec<Vec<Confusion>>> = (0..test_visible.num_patients)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|patients| {
            let mut counts = fresh();
            let mut scores = vec![0.0; n];
            let mut kind = vec![0u8; n];
            for &i in patients {
                per_patient(i, &mut counts, &mut scores, &mut kind);
            }
            counts
        })
        .collect();
    let mut totals = fresh();
    for part in &partials {
        for (t, p) in totals.iter_mut().zip(part) {
            for (a, b) in t.iter_mut().zip(p) {
                a.add(b);
            }
        }
    }
    Ok(policies
        .iter()
        .zip(totals)
        .map(|(&policy, confusions)| MetricsReport::from_confusions(policy, confusions, train_frequencies))
        .collect())
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// variable is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut start = 0;
        while start < idx.len() {
            let mut end = start + 1;
            while end < idx.len() && v[idx[end]] == v[idx[start]] {
                end += 1;
            }
            let avg = (start + end - 1) as f64 / 2.0 + 1.0;
            for &k in &idx[start..end] {
                r[k] = avg;
            }
            start = end;
        }
        r
    }
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

/// Spearman correlation between train frequency and per-event recall.
pub fn frequency_recall_correlation(report: &MetricsReport) -> Option<f64> {
    let (f, r): (Vec<f64>, Vec<f64>) = report
        .per_event
        .iter()
        .filter_map(|e| e.sensitivity.map(|s| (e.train_frequency, s)))
        .unzip();
    spearman(&f, &r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasBin {
    pub lower: f64,
    pub upper: f64,
    pub events: usize,
    pub recall_uniform: Option<f64>,
    pub recall_balanced: Option<f64>,
    pub specificity_uniform: Option<f64>,
    pub specificity_balanced: Option<f64>,
}

impl BiasBin {
    pub fn recall_delta(&self) -> Option<f64> {
        Some(self.recall_uniform? - self.recall_balanced?)
    }

    pub fn specificity_delta(&self) -> Option<f64> {
        Some(self.specificity_uniform? - self.specificity_balanced?)
    }
}

/// Frequency-binned comparison of a uniformly sampled model (first report)
/// against a degree-preserving one (second report).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasProfile {
    pub bins: Vec<BiasBin>,
    pub spearman_uniform: Option<f64>,
    pub spearman_balanced: Option<f64>,
}

impl BiasProfile {
    pub const CSV_HEADER: &'static str = "bin,lower,upper,events,recall_uniform,recall_balanced,recall_delta,specificity_uniform,specificity_balanced,specificity_delta";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::new();
        let _ = writeln!(s, "{}", Self::CSV_HEADER);
        for (b, bin) in self.bins.iter().enumerate() {
            let _ = writeln!(
                s,
                "{b},{},{},{},{},{},{},{},{},{}",
                bin.lower,
                bin.upper,
                bin.events,
                opt(bin.recall_uniform),
                opt(bin.recall_balanced),
                opt(bin.recall_delta()),
                opt(bin.specificity_uniform),
                opt(bin.specificity_balanced),
                opt(bin.specificity_delta())
            );
        }
        s
    }

    pub fn spearman_gap(&self) -> Option<f64> {
        Some(self.spearman_uniform? - self.spearman_balanced?)
    }
}

pub fn bias_profile(uniform: &MetricsReport, balanced: &MetricsReport) -> Result<BiasProfile> {
    let same_events = uniform.per_event.len() == balanced.per_event.len()
        && uniform
            .per_event
            .iter()
            .zip(&balanced.per_event)
            .all(|(a, b)| a.event == b.event && a.train_frequency == b.train_frequency);
    if !same_events {
        return Err(Error::ShapeMismatch("reports cover different event sets".into()));
    }
    let bins = uniform
        .frequency_bins
        .iter()
        .zip(&balanced.frequency_bins)
        .map(|(a, b)| BiasBin {
            lower: a.lower,
            upper: a.upper,
            events: a.events,
            recall_uniform: a.mean_recall,
            recall_balanced: b.mean_recall,
            specificity_uniform: a.mean_specificity,
            specificity_balanced: b.mean_specificity,
        })
        .collect();
    Ok(BiasProfile {
        bins,
        spearman_uniform: frequency_recall_correlation(uniform),
        spearman_balanced: frequency_recall_correlation(balanced),
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// For each row, the `k` most cosine-similar other rows (ties to lower index).
pub fn cosine_neighbors(latents: &Array2<f64>, k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = latents.nrows();
    let rows: Vec<Vec<f64>> = latents.rows().into_iter().map(|r| r.to_vec()).collect();
    (0..n)
        .into_par_iter()
        .map(|a| {
            let mut sims: Vec<(usize, f64)> = (0..n)
                .filter(|&b| b != a)
                .map(|b| (b, cosine(&rows[a], &rows[b])))
                .collect();
            sims.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            sims.truncate(k);
            sims
        })
        .collect()
}

/// Writes `embeddings.csv` (event id, category, coordinates) and
/// `neighbors.csv` (top-`k` cosine neighbors) into `dir`.
pub fn export_event_embeddings(
    event_latents: &Array2<f64>,
    labels: &[String],
    categories: &[String],
    dir: &Path,
    k: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("embeddings.csv"))?);
    let dims: Vec<String> = (0..event_latents.ncols()).map(|c| format!("z{c}")).collect();
    writeln!(f, "event_id,category,{}", dims.join(","))?;
    for (j, row) in event_latents.rows().into_iter().enumerate() {
        let coords: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        writeln!(f, "{},{},{}", labels[j], categories[j], coords.join(","))?;
    }
    f.flush()?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("neighbors.csv"))?);
    writeln!(f, "event_id,rank,neighbor_id,cosine")?;
    for (j, nbrs) in cosine_neighbors(event_latents, k).iter().enumerate() {
        for (r, &(b, sim)) in nbrs.iter().enumerate() {
            writeln!(f, "{},{},{},{}", labels[j], r + 1, labels[b], sim)?;
        }
    }
    f.flush()?;
    Ok(())
}
