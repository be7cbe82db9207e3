//! Sparse unary patient × event data: ingestion, synthetic generation,
//! rare-event filtering, and the train/test split with per-patient masking.
//!
//! A [`Dataset`] only records positive entries. A zero means "not observed",
//! which is not the same as "did not happen", so nothing here ever treats
//! absent entries as confirmed negatives.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, substream};

/// A positive entry `(patient, event)`.
pub type Pair = (usize, usize);

/// Binary patient × event matrix stored as its positive entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_patients: usize,
    pub num_events: usize,
    positives: Vec<Pair>,
    /// One row per patient: age in years, sex in {0, 1}.
    pub demographics: Array2<f64>,
    pub patient_ids: Option<Vec<String>>,
    pub event_labels: Option<Vec<String>>,
    pub event_categories: Option<Vec<String>>,
}

impl Dataset {
    /// Builds a dataset, sorting and de-duplicating `positives`.
    pub fn new(
        num_patients: usize,
        num_events: usize,
        mut positives: Vec<Pair>,
        demographics: Array2<f64>,
    ) -> Result<Self> {
        if demographics.nrows() != num_patients {
            return Err(Error::ShapeMismatch(format!(
                "demographics has {} rows for {} patients",
                demographics.nrows(),
                num_patients
            )));
        }
        if let Some(&(i, j)) = positives
            .iter()
            .find(|&&(i, j)| i >= num_patients || j >= num_events)
        {
            return Err(Error::OutOfRange(format!(
                "positive ({i}, {j}) outside {num_patients}x{num_events}"
            )));
        }
        positives.sort_unstable();
        positives.dedup();
        Ok(Self {
            num_patients,
            num_events,
            positives,
            demographics,
            patient_ids: None,
            event_labels: None,
            event_categories: None,
        })
    }

    /// Sorted, duplicate-free positive entries.
    pub fn positives(&self) -> &[Pair] {
        &self.positives
    }

    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }

    pub fn density(&self) -> f64 {
        let cells = self.num_patients * self.num_events;
        if cells == 0 {
            0.0
        } else {
            self.positives.len() as f64 / cells as f64
        }
    }

    pub fn demographics_dim(&self) -> usize {
        self.demographics.ncols()
    }

    /// Number of patients with each event.
    pub fn event_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_events];
        for &(_, j) in &self.positives {
            counts[j] += 1;
        }
        counts
    }

    pub fn patient_degrees(&self) -> Vec<usize> {
        let mut degrees = vec![0; self.num_patients];
        for &(i, _) in &self.positives {
            degrees[i] += 1;
        }
        degrees
    }

    /// Per-event prevalence `(1/m) Σ_i x_ij`.
    pub fn event_frequencies(&self) -> Vec<f64> {
        let m = self.num_patients.max(1) as f64;
        self.event_counts()
            .into_iter()
            .map(|c| c as f64 / m)
            .collect()
    }

    /// Event label, falling back to the dense index.
    pub fn event_label(&self, j: usize) -> String {
        self.event_labels
            .as_ref()
            .map(|l| l[j].clone())
            .unwrap_or_else(|| j.to_string())
    }

    pub fn event_category(&self, j: usize) -> String {
        self.event_categories
            .as_ref()
            .map(|c| c[j].clone())
            .unwrap_or_default()
    }

    /// Restrict to `patients` (in the given order, reindexed densely).
    fn select_patients(&self, patients: &[usize]) -> Dataset {
        let mut new_index = vec![usize::MAX; self.num_patients];
        for (k, &i) in patients.iter().enumerate() {
            new_index[i] = k;
        }
        let positives = self
            .positives
            .iter()
            .filter(|&&(i, _)| new_index[i] != usize::MAX)
            .map(|&(i, j)| (new_index[i], j))
            .collect();
        let demographics = self.demographics.select(Axis(0), patients);
        let mut out = Dataset::new(patients.len(), self.num_events, positives, demographics)
            .expect("selection preserves ranges");
        out.patient_ids = self
            .patient_ids
            .as_ref()
            .map(|ids| patients.iter().map(|&i| ids[i].clone()).collect());
        out.event_labels = self.event_labels.clone();
        out.event_categories = self.event_categories.clone();
        out
    }

    /// Concatenates the patients of `other` after those of `self`. Both must
    /// share the event space.
    pub fn stack_patients(&self, other: &Dataset) -> Result<Dataset> {
        if self.num_events != other.num_events || self.demographics_dim() != other.demographics_dim()
        {
            return Err(Error::ShapeMismatch(
                "cannot stack datasets with different event spaces".into(),
            ));
        }
        let offset = self.num_patients;
        let mut positives = self.positives.clone();
        positives.extend(other.positives.iter().map(|&(i, j)| (i + offset, j)));
        let demographics = ndarray::concatenate(
            Axis(0),
            &[self.demographics.view(), other.demographics.view()],
        )
        .expect("column counts checked");
        let mut out = Dataset::new(
            self.num_patients + other.num_patients,
            self.num_events,
            positives,
            demographics,
        )?;
        out.event_labels = self.event_labels.clone();
        out.event_categories = self.event_categories.clone();
        Ok(out)
    }

    /// Writes `patient_id,event_id` rows (with header).
    pub fn write_triplets(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["patient_id", "event_id"])?;
        for &(i, j) in &self.positives {
            w.write_record([self.patient_id(i), self.event_label(j)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `patient_id,age,sex` rows (with header).
    pub fn write_demographics(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["patient_id", "age", "sex"])?;
        for i in 0..self.num_patients {
            let row = self.demographics.row(i);
            let sex = if row.len() > 1 && row[1] >= 0.5 { "1" } else { "0" };
            w.write_record([self.patient_id(i), row[0].to_string(), sex.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn patient_id(&self, i: usize) -> String {
        self.patient_ids
            .as_ref()
            .map(|ids| ids[i].clone())
            .unwrap_or_else(|| format!("P{i}"))
    }
}

fn is_header(record: &csv::StringRecord, first: &str) -> bool {
    record
        .get(0)
        .map(|f| f.trim().eq_ignore_ascii_case(first))
        .unwrap_or(false)
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?)
}

fn parse_sex(field: &str) -> Option<f64> {
    match field {
        "M" | "m" | "1" => Some(1.0),
        "F" | "f" | "0" => Some(0.0),
        _ => None,
    }
}

/// Reads a `patient_id,event_id` triplet file and a `patient_id,age,sex`
/// demographics file. Patients are indexed in demographics order, events in
/// order of first appearance.
pub fn load_triplets(path: &Path, demographics_path: &Path) -> Result<Dataset> {
    let mut patient_index: HashMap<String, usize> = HashMap::new();
    let mut patient_ids = Vec::new();
    let mut demo_rows: Vec<[f64; 2]> = Vec::new();

    for (k, record) in csv_reader(demographics_path)?.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(k as u64 + 1);
        if k == 0 && is_header(&record, "patient_id") {
            continue;
        }
        if record.len() != 3 {
            return Err(parse_error(
                demographics_path,
                line,
                format!("expected 3 fields `patient_id,age,sex`, found {}", record.len()),
            ));
        }
        let id = record[0].to_string();
        let age: f64 = record[1]
            .parse()
            .map_err(|_| parse_error(demographics_path, line, format!("bad age `{}`", &record[1])))?;
        let sex = parse_sex(&record[2]).ok_or_else(|| {
            parse_error(demographics_path, line, format!("bad sex `{}`", &record[2]))
        })?;
        if patient_index.insert(id.clone(), patient_ids.len()).is_some() {
            return Err(parse_error(
                demographics_path,
                line,
                format!("duplicate patient `{id}`"),
            ));
        }
        patient_ids.push(id);
        demo_rows.push([age, sex]);
    }

    let mut event_index: HashMap<String, usize> = HashMap::new();
    let mut event_labels = Vec::new();
    let mut positives = Vec::new();
    let mut missing = Vec::new();

    for (k, record) in csv_reader(path)?.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(k as u64 + 1);
        if k == 0 && is_header(&record, "patient_id") {
            continue;
        }
        if record.len() != 2 {
            return Err(parse_error(
                path,
                line,
                format!("expected 2 fields `patient_id,event_id`, found {}", record.len()),
            ));
        }
        let (pid, eid) = (&record[0], &record[1]);
        if pid.is_empty() || eid.is_empty() {
            return Err(parse_error(path, line, "empty identifier"));
        }
        let Some(&i) = patient_index.get(pid) else {
            if !missing.iter().any(|m: &String| m == pid) {
                missing.push(pid.to_string());
            }
            continue;
        };
        let next = event_labels.len();
        let j = *event_index.entry(eid.to_string()).or_insert_with(|| {
            event_labels.push(eid.to_string());
            next
        });
        positives.push((i, j));
    }
    if !missing.is_empty() {
        return Err(Error::MissingDemographics(missing));
    }

    let m = patient_ids.len();
    let demographics = Array2::from_shape_fn((m, 2), |(i, c)| demo_rows[i][c]);
    let mut d = Dataset::new(m, event_labels.len(), positives, demographics)?;
    d.patient_ids = Some(patient_ids);
    d.event_labels = Some(event_labels);
    Ok(d)
}

/// `event_index_map[original] = Some(new)` for retained events.
pub type EventIndexMap = Vec<Option<usize>>;

/// Drops events seen in fewer than `ceil(min_event_frequency · m)` patients.
pub fn filter_rare_events(d: &Dataset, min_event_frequency: f64) -> Result<(Dataset, EventIndexMap)> {
    if !(0.0..1.0).contains(&min_event_frequency) {
        return Err(Error::InvalidArgument(format!(
            "min_event_frequency must lie in [0, 1), got {min_event_frequency}"
        )));
    }
    // the epsilon keeps e.g. 0.001 * 1000 from rounding up to 2
    let threshold = (min_event_frequency * d.num_patients as f64 - 1e-9).ceil().max(0.0) as usize;
    let counts = d.event_counts();
    let mut map = vec![None; d.num_events];
    let mut kept = Vec::new();
    for (j, &c) in counts.iter().enumerate() {
        if c >= threshold && (c > 0 || threshold == 0) {
            map[j] = Some(kept.len());
            kept.push(j);
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }
    let positives = d
        .positives
        .iter()
        .filter_map(|&(i, j)| map[j].map(|nj| (i, nj)))
        .collect();
    let mut out = Dataset::new(d.num_patients, kept.len(), positives, d.demographics.clone())?;
    out.patient_ids = d.patient_ids.clone();
    out.event_labels = d
        .event_labels
        .as_ref()
        .map(|l| kept.iter().map(|&j| l[j].clone()).collect());
    out.event_categories = d
        .event_categories
        .as_ref()
        .map(|c| kept.iter().map(|&j| c[j].clone()).collect());
    Ok((out, map))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub test_mask_fraction: f64,
    pub min_event_frequency: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            test_mask_fraction: 0.3,
            min_event_frequency: 0.001,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let open = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        open("train_fraction", self.train_fraction)?;
        open("test_mask_fraction", self.test_mask_fraction)?;
        open("min_event_frequency", self.min_event_frequency)
    }
}

/// Train patients, test patients with part of their history masked out, and
/// the masked entries that serve as positive evaluation targets.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test_visible: Dataset,
    /// Held-out positives in `test_visible` patient indexing.
    pub test_heldout: Vec<Pair>,
    pub event_index_map: EventIndexMap,
    /// Original patient index of each train / test patient.
    pub train_patients: Vec<usize>,
    pub test_patients: Vec<usize>,
}

impl SplitDataset {
    /// Reproducibility record: seed, fractions and counts.
    pub fn manifest(&self, spec: &SplitSpec) -> String {
        let retained = self.event_index_map.iter().filter(|e| e.is_some()).count();
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", spec.seed);
        let _ = writeln!(s, "train_fraction={}", spec.train_fraction);
        let _ = writeln!(s, "test_mask_fraction={}", spec.test_mask_fraction);
        let _ = writeln!(s, "min_event_frequency={}", spec.min_event_frequency);
        let _ = writeln!(s, "original_events={}", self.event_index_map.len());
        let _ = writeln!(s, "retained_events={retained}");
        let _ = writeln!(s, "train_patients={}", self.train.num_patients);
        let _ = writeln!(s, "test_patients={}", self.test_visible.num_patients);
        let _ = writeln!(s, "train_positives={}", self.train.num_positives());
        let _ = writeln!(s, "test_visible_positives={}", self.test_visible.num_positives());
        let _ = writeln!(s, "test_heldout_positives={}", self.test_heldout.len());
        s
    }
}

/// Filters rare events, partitions patients, and masks a fraction of every
/// test patient's positives. Deterministic given `spec.seed`.
pub fn split(d: &Dataset, spec: &SplitSpec) -> Result<SplitDataset> {
    spec.validate()?;
    if d.num_patients < 2 {
        return Err(Error::InvalidArgument(format!(
            "split needs at least 2 patients, got {}",
            d.num_patients
        )));
    }
    let (filtered, event_index_map) = filter_rare_events(d, spec.min_event_frequency)?;

    let mut rng = substream(spec.seed, "split", 0);
    let mut order: Vec<usize> = (0..filtered.num_patients).collect();
    order.shuffle(&mut rng);
    let n_train = ((spec.train_fraction * filtered.num_patients as f64).round() as usize)
        .clamp(1, filtered.num_patients - 1);
    let mut train_patients = order[..n_train].to_vec();
    let mut test_patients = order[n_train..].to_vec();
    train_patients.sort_unstable();
    test_patients.sort_unstable();

    let train = filtered.select_patients(&train_patients);
    let test_all = filtered.select_patients(&test_patients);

    let mut mask_rng = substream(spec.seed, "test-mask", 0);
    let mut visible = Vec::with_capacity(test_all.num_positives());
    let mut heldout = Vec::new();
    for chunk in test_all.positives.chunk_by(|a, b| a.0 == b.0) {
        let degree = chunk.len();
        // rounding leaves a degree-1 history fully visible
        let n_mask = ((spec.test_mask_fraction * degree as f64).round() as usize).min(degree - 1);
        let mut events: Vec<Pair> = chunk.to_vec();
        events.shuffle(&mut mask_rng);
        heldout.extend_from_slice(&events[..n_mask]);
        visible.extend_from_slice(&events[n_mask..]);
    }
    heldout.sort_unstable();

    let mut test_visible = Dataset::new(
        test_all.num_patients,
        test_all.num_events,
        visible,
        test_all.demographics.clone(),
    )?;
    test_visible.patient_ids = test_all.patient_ids.clone();
    test_visible.event_labels = test_all.event_labels.clone();
    test_visible.event_categories = test_all.event_categories.clone();

    Ok(SplitDataset {
        train,
        test_visible,
        test_heldout: heldout,
        event_index_map,
        train_patients,
        test_patients,
    })
}

/// Standardizes continuous demographic columns with train statistics; columns
/// holding only 0/1 values pass through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct DemographicsScaler {
    pub shift: Array1<f64>,
    pub scale: Array1<f64>,
}

impl DemographicsScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: Array1::zeros(dim),
            scale: Array1::ones(dim),
        }
    }

    pub fn fit(demographics: &Array2<f64>) -> Self {
        let dim = demographics.ncols();
        let mut scaler = Self::identity(dim);
        if demographics.nrows() == 0 {
            return scaler;
        }
        for (c, col) in demographics.columns().into_iter().enumerate() {
            if col.iter().all(|&v| v == 0.0 || v == 1.0) {
                continue;
            }
            let mean = col.mean().unwrap_or(0.0);
            let std = col.std(0.0);
            scaler.shift[c] = mean;
            scaler.scale[c] = if std > 1e-12 { 1.0 / std } else { 1.0 };
        }
        scaler
    }

    pub fn transform(&self, demographics: &Array2<f64>) -> Array2<f64> {
        (demographics - &self.shift) * &self.scale
    }
}

/// Synthetic stand-in for an EHR cohort: low-rank logistic ground truth with
/// heavy-tailed event prevalences, observed through unary missingness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub patients: usize,
    pub events: usize,
    pub rank: usize,
    pub density: f64,
}

/// Probability that a true positive is recorded.
pub const OBSERVATION_PROBABILITY: f64 = 0.7;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws per-event prevalences from a log-normal with mean `density`,
/// clipped to `[1e-4, 0.45]`.
fn heavy_tailed_prevalences(n: usize, density: f64, rng: &mut impl Rng) -> Vec<f64> {
    const SIGMA: f64 = 1.0;
    let (lo, hi) = (1e-4, 0.45);
    let mut prev: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            density * (SIGMA * z - 0.5 * SIGMA * SIGMA).exp()
        })
        .collect();
    for _ in 0..50 {
        let mean = prev.iter().sum::<f64>() / n as f64;
        let factor = density / mean;
        if (factor - 1.0).abs() < 1e-12 {
            break;
        }
        for p in &mut prev {
            *p = (*p * factor).clamp(lo, hi);
        }
    }
    prev
}

/// Returns the observed dataset and the full ground-truth positive set.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Vec<Pair>)> {
    let SyntheticSpec {
        patients: m,
        events: n,
        rank,
        density,
    } = *spec;
    if m == 0 || n == 0 || rank == 0 || rank >= m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "synthetic generator needs 0 < rank < min(m, n); got m={m}, n={n}, rank={rank}"
        )));
    }
    if !(density > 0.0 && density < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "target density must lie in (0, 0.5), got {density}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let u = Array2::from_shape_simple_fn((m, rank), || normal(&mut rng));
    let v = Array2::from_shape_simple_fn((n, rank), || normal(&mut rng));
    let prevalence = heavy_tailed_prevalences(n, density, &mut rng);
    let logits = u.dot(&v.t());

    let mut bias = vec![0.0; n];
    for j in 0..n {
        let col = logits.column(j);
        let mean_prob = |b: f64| col.iter().map(|&s| sigmoid(s + b)).sum::<f64>() / m as f64;
        let (mut lo, mut hi) = (-60.0, 60.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if mean_prob(mid) < prevalence[j] {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        bias[j] = 0.5 * (lo + hi);
    }

    let mut truth = Vec::new();
    let mut observed = Vec::new();
    for i in 0..m {
        for j in 0..n {
            let p = sigmoid(logits[[i, j]] + bias[j]);
            if rng.random::<f64>() < p {
                truth.push((i, j));
                if rng.random::<f64>() < OBSERVATION_PROBABILITY {
                    observed.push((i, j));
                }
            }
        }
    }

    let rho: f64 = 0.7;
    let resid = (1.0 - rho * rho).sqrt();
    let mut demographics = Array2::zeros((m, 2));
    for i in 0..m {
        let z_age = normal(&mut rng);
        let z_sex = normal(&mut rng);
        let age = 55.0 + 12.0 * (rho * u[[i, 0]] + resid * z_age);
        demographics[[i, 0]] = (age * 10.0).round() / 10.0;
        demographics[[i, 1]] = if rho * u[[i, 0]] + resid * z_sex > 0.0 { 1.0 } else { 0.0 };
    }

    let mut d = Dataset::new(m, n, observed, demographics)?;
    let width = (n - 1).to_string().len();
    d.patient_ids = Some((0..m).map(|i| format!("P{i}")).collect());
    d.event_labels = Some((0..n).map(|j| format!("E{j:0width$}")).collect());
    d.event_categories = Some(
        (0..n)
            .map(|j| {
                let row = v.row(j);
                let (best, _) = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::MIN), |acc, (k, &x)| if x.abs() > acc.1 { (k, x.abs()) } else { acc });
                format!("C{best}")
            })
            .collect(),
    );
    Ok((d, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    fn toy(m: usize, n: usize, positives: Vec<Pair>) -> Dataset {
        Dataset::new(m, n, positives, Array2::zeros((m, 2))).unwrap()
    }

    #[test]
    fn duplicates_collapse_and_ids_reindex() {
        let dir = tempfile::tempdir().unwrap();
        let t = write(dir.path(), "t.csv", "p1,eA\np1,eA\np2,eB\n");
        let demo = write(dir.path(), "d.csv", "patient_id,age,sex\np1,40,M\np2,61,F\n");
        let d = load_triplets(&t, &demo).unwrap();
        assert_eq!((d.num_patients, d.num_events), (2, 2));
        assert_eq!(d.positives(), &[(0, 0), (1, 1)]);
        assert_eq!(d.demographics.row(0).to_vec(), vec![40.0, 1.0]);
    }

    #[test]
    fn empty_triplets_keep_all_patients() {
        let dir = tempfile::tempdir().unwrap();
        let t = write(dir.path(), "t.csv", "");
        let demo = write(dir.path(), "d.csv", "a,30,0\nb,31,1\nc,32,F\n");
        let d = load_triplets(&t, &demo).unwrap();
        assert_eq!(d.num_patients, 3);
        assert!(d.positives().is_empty());
    }

    #[test]
    fn extra_field_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let t = write(dir.path(), "t.csv", "p1,eA,extra\n");
        let demo = write(dir.path(), "d.csv", "p1,40,M\n");
        let err = load_triplets(&t, &demo).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn missing_demographics_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let t = write(dir.path(), "t.csv", "p1,eA\np7,eA\np9,eB\n");
        let demo = write(dir.path(), "d.csv", "p1,40,M\n");
        match load_triplets(&t, &demo).unwrap_err() {
            Error::MissingDemographics(ids) => assert_eq!(ids, vec!["p7", "p9"]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn filter_boundary() {
        // one positive at m=1000, threshold 0.001 -> ceil(1.0) = 1 -> kept
        let d = toy(1000, 2, vec![(3, 0)]);
        let (f, map) = filter_rare_events(&d, 0.001).unwrap();
        assert_eq!(f.num_events, 1);
        assert_eq!(map, vec![Some(0), None]);
    }

    #[test]
    fn filter_everything_errors() {
        let d = toy(10, 3, vec![]);
        assert!(matches!(
            filter_rare_events(&d, 0.5),
            Err(Error::EmptyAfterFiltering)
        ));
    }

    #[test]
    fn filter_is_idempotent() {
        let (d, _) = generate_synthetic(
            &SyntheticSpec { patients: 400, events: 80, rank: 4, density: 0.02 },
            3,
        )
        .unwrap();
        let (once, _) = filter_rare_events(&d, 0.01).unwrap();
        let (twice, map) = filter_rare_events(&once, 0.01).unwrap();
        assert_eq!(once, twice);
        assert!(map.iter().enumerate().all(|(j, m)| *m == Some(j)));
    }

    #[test]
    fn split_masks_rounded_fraction() {
        let positives: Vec<Pair> = (0..10).flat_map(|i| (0..10).map(move |j| (i, j))).collect();
        let d = toy(10, 10, positives);
        let spec = SplitSpec { train_fraction: 0.5, test_mask_fraction: 0.3, min_event_frequency: 0.01, seed: 1 };
        let s = split(&d, &spec).unwrap();
        for degree in s.test_visible.patient_degrees() {
            assert_eq!(degree, 7);
        }
        assert_eq!(s.test_heldout.len(), 3 * s.test_visible.num_patients);
    }

    #[test]
    fn degree_one_patient_stays_visible() {
        let d = toy(4, 2, vec![(0, 0), (1, 1), (2, 0), (3, 1)]);
        let spec = SplitSpec { train_fraction: 0.5, test_mask_fraction: 0.3, min_event_frequency: 0.01, seed: 5 };
        let s = split(&d, &spec).unwrap();
        assert!(s.test_heldout.is_empty());
        assert_eq!(s.test_visible.num_positives(), 2);
    }

    #[test]
    fn split_needs_two_patients() {
        let d = toy(1, 1, vec![(0, 0)]);
        assert!(split(&d, &SplitSpec::default()).is_err());
    }

    #[test]
    fn split_counts_and_determinism() {
        let (d, _) = generate_synthetic(
            &SyntheticSpec { patients: 10_000, events: 60, rank: 4, density: 0.03 },
            11,
        )
        .unwrap();
        let spec = SplitSpec { seed: 4, ..SplitSpec::default() };
        let a = split(&d, &spec).unwrap();
        let b = split(&d, &spec).unwrap();
        assert_eq!(a.train.num_patients, 7000);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test_visible, b.test_visible);
        assert_eq!(a.test_heldout, b.test_heldout);
        assert_eq!(a.train_patients, b.train_patients);
    }

    #[test]
    fn scaler_standardizes_age_only() {
        let demo = ndarray::array![[40.0, 1.0], [60.0, 0.0], [50.0, 1.0]];
        let s = DemographicsScaler::fit(&demo);
        let t = s.transform(&demo);
        assert!((t.column(0).mean().unwrap()).abs() < 1e-12);
        assert!((t.column(0).std(0.0) - 1.0).abs() < 1e-12);
        assert_eq!(t.column(1), demo.column(1));
    }

    #[test]
    fn synthetic_observed_subset_of_truth() {
        let spec = SyntheticSpec { patients: 300, events: 40, rank: 3, density: 0.05 };
        let (d, truth) = generate_synthetic(&spec, 8).unwrap();
        let truth: std::collections::HashSet<_> = truth.into_iter().collect();
        assert!(d.positives().iter().all(|p| truth.contains(p)));
        let (d2, _) = generate_synthetic(&spec, 8).unwrap();
        assert_eq!(d, d2);
    }
}
