//! End-to-end stages shared by the command line, the Python bindings, and
//! the integration tests: split, train, score, evaluate, compare samplers.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use serde::Serialize;

use crate::baselines::{FrequencyImputer, KnnConfig, KnnImputer};
use crate::config::RunConfig;
use crate::dataset::{split, SplitDataset};
use crate::error::{Error, Result};
use crate::evaluation::{bias_profile, evaluate_policies, BiasProfile, CutoffPolicy, GraphScorer, MetricsReport, RowScorer};
use crate::graph::BipartiteGraph;
use crate::model::GraphImputer;
use crate::sampler::{marginals, sample_batch, NegativeSampler};
use crate::training::{fit, EpochStats, TrainState};

/// Loads the configured data and splits it.
pub fn prepare(config: &RunConfig) -> Result<SplitDataset> {
    let data = config.load_dataset()?;
    split(&data, &config.split_spec())
}

/// Trains on the train patients of `split` with the configured sampler.
pub fn train_model(
    config: &RunConfig,
    split: &SplitDataset,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(TrainState, Vec<EpochStats>)> {
    fit(&split.train, &config.model, &config.train_config(), on_epoch)
}

/// Message-passing structure at test time: train positives plus the visible
/// test positives, with test patients numbered after the train patients.
pub fn inference_graph(split: &SplitDataset) -> Result<(BipartiteGraph, Array2<f64>)> {
    let all = split.train.stack_patients(&split.test_visible)?;
    let g = BipartiteGraph::build(all.positives(), all.num_patients, all.num_events)?;
    Ok((g, all.demographics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ImputerKind {
    Graph,
    Knn,
    Frequency,
}

impl ImputerKind {
    pub const ALL: [ImputerKind; 3] = [ImputerKind::Graph, ImputerKind::Knn, ImputerKind::Frequency];

    pub fn name(&self) -> &'static str {
        match self {
            ImputerKind::Graph => "graph",
            ImputerKind::Knn => "knn",
            ImputerKind::Frequency => "frequency",
        }
    }
}

impl fmt::Display for ImputerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ImputerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph" => Ok(ImputerKind::Graph),
            "knn" => Ok(ImputerKind::Knn),
            "frequency" => Ok(ImputerKind::Frequency),
            other => Err(Error::InvalidArgument(format!(
                "unknown imputer `{other}` (expected graph, knn, or frequency)"
            ))),
        }
    }
}

/// Reports of one imputer under several cutoff policies.
#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub imputer: ImputerKind,
    pub reports: Vec<MetricsReport>,
    /// Wall time of scoring plus metric computation, in seconds.
    pub runtime_s: f64,
    pub scores_per_second: f64,
}

fn run_evaluation(
    imputer: ImputerKind,
    scorer: &dyn RowScorer,
    split: &SplitDataset,
    policies: &[CutoffPolicy],
    start: Instant,
) -> Result<Evaluation> {
    let freqs = split.train.event_frequencies();
    let reports = evaluate_policies(scorer, &split.test_visible, &split.test_heldout, policies, &freqs)?;
    let runtime_s = start.elapsed().as_secs_f64();
    let scored = (split.test_visible.num_patients * split.test_visible.num_events) as f64;
    Ok(Evaluation { imputer, reports, runtime_s, scores_per_second: scored / runtime_s.max(1e-12) })
}

pub fn evaluate_graph(model: &GraphImputer, split: &SplitDataset, policies: &[CutoffPolicy]) -> Result<Evaluation> {
    let num_events = model.params.event_embeddings.nrows();
    if num_events != split.train.num_events {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has {num_events} events, data has {}",
            split.train.num_events
        )));
    }
    if model.scaler.shift.len() != split.train.demographics_dim() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint expects {} demographic columns, data has {}",
            model.scaler.shift.len(),
            split.train.demographics_dim()
        )));
    }
    let start = Instant::now();
    let (g, demographics) = inference_graph(split)?;
    let (p, e) = model.latents(&g, &demographics)?;
    let scorer = GraphScorer::new(model, &p, &e, split.train.num_patients);
    run_evaluation(ImputerKind::Graph, &scorer, split, policies, start)
}

pub fn evaluate_knn(knn: KnnConfig, split: &SplitDataset, policies: &[CutoffPolicy]) -> Result<Evaluation> {
    let start = Instant::now();
    let scorer = KnnImputer::new(&split.train, &split.test_visible, knn)?;
    run_evaluation(ImputerKind::Knn, &scorer, split, policies, start)
}

pub fn evaluate_frequency(split: &SplitDataset, policies: &[CutoffPolicy]) -> Result<Evaluation> {
    let start = Instant::now();
    let scorer = FrequencyImputer::new(&split.train);
    run_evaluation(ImputerKind::Frequency, &scorer, split, policies, start)
}

/// Per-event invisible and negative counts of one batch.
#[derive(Debug, Clone, Serialize)]
pub struct MarginalTable {
    pub sampler: NegativeSampler,
    pub invisible: Vec<usize>,
    pub negative: Vec<usize>,
}

impl MarginalTable {
    pub const CSV_HEADER: &'static str = "event,train_degree,invisible,negative";

    /// Counts from the first training batch of `sampler`.
    pub fn first_batch(config: &RunConfig, split: &SplitDataset, sampler: NegativeSampler) -> Result<Self> {
        let train = &split.train;
        let g = BipartiteGraph::build(train.positives(), train.num_patients, train.num_events)?;
        let tc = config.train_config();
        let batch = sample_batch(&g, tc.mask_probability, sampler, tc.max_repair_sweeps, tc.seed, 0)?;
        let (_, invisible) = marginals(&batch.invisible, g.num_patients(), g.num_events());
        let (_, negative) = marginals(&batch.negative, g.num_patients(), g.num_events());
        Ok(Self { sampler, invisible, negative })
    }

    pub fn to_csv(&self, degrees: &[usize], labels: &[String]) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for j in 0..self.invisible.len() {
            s.push_str(&format!("{},{},{},{}\n", labels[j], degrees[j], self.invisible[j], self.negative[j]));
        }
        s
    }
}

/// Two models identical except for the negative sampler.
pub struct SamplerComparison {
    pub uniform_config: RunConfig,
    pub balanced_config: RunConfig,
    pub uniform: Evaluation,
    pub balanced: Evaluation,
    pub uniform_stats: Vec<EpochStats>,
    pub balanced_stats: Vec<EpochStats>,
    pub profile: BiasProfile,
    pub marginals: [MarginalTable; 2],
}

pub fn compare_samplers(
    config: &RunConfig,
    split: &SplitDataset,
    policy: CutoffPolicy,
    mut on_epoch: impl FnMut(NegativeSampler, &EpochStats),
) -> Result<SamplerComparison> {
    let with = |s: NegativeSampler| {
        let mut c = config.clone();
        c.train.sampler = s;
        c
    };
    let uniform_config = with(NegativeSampler::Uniform);
    let balanced_config = with(NegativeSampler::DegreePreserving);

    let (u_state, uniform_stats) =
        train_model(&uniform_config, split, |s| on_epoch(NegativeSampler::Uniform, s))?;
    let uniform = evaluate_graph(&u_state.model, split, &[policy])?;
    drop(u_state);
    let (b_state, balanced_stats) =
        train_model(&balanced_config, split, |s| on_epoch(NegativeSampler::DegreePreserving, s))?;
    let balanced = evaluate_graph(&b_state.model, split, &[policy])?;

    let profile = bias_profile(&uniform.reports[0], &balanced.reports[0])?;
    let marginals = [
        MarginalTable::first_batch(config, split, NegativeSampler::Uniform)?,
        MarginalTable::first_batch(config, split, NegativeSampler::DegreePreserving)?,
    ];
    Ok(SamplerComparison {
        uniform_config,
        balanced_config,
        uniform,
        balanced,
        uniform_stats,
        balanced_stats,
        profile,
        marginals,
    })
}

/// Summary CSV covering every (imputer, policy) pair; runtime is left out
/// so repeated runs produce identical bytes.
pub fn summary_csv(evaluations: &[Evaluation]) -> String {
    let mut s = format!("{}\n", MetricsReport::SUMMARY_HEADER);
    for ev in evaluations {
        for r in &ev.reports {
            s.push_str(&r.summary_csv_row(ev.imputer.name()));
            s.push('\n');
        }
    }
    s
}

/// Human-readable table: method, cutoff, sensitivity, specificity,
/// balanced accuracy (mean ± std), runtime.
pub fn summary_table(evaluations: &[Evaluation]) -> String {
    let mut s = format!(
        "{:<10} {:<7} {:<15} {:<15} {:<15} {:>10}\n",
        "method", "cutoff", "sensitivity", "specificity", "balanced_acc", "runtime_s"
    );
    let pm = |m: &crate::evaluation::MeanStd| format!("{:.3} ± {:.3}", m.mean, m.std);
    for ev in evaluations {
        for r in &ev.reports {
            let sm = &r.summary;
            s.push_str(&format!(
                "{:<10} {:<7} {:<15} {:<15} {:<15} {:>10.2}\n",
                ev.imputer.name(),
                r.policy.label(),
                pm(&sm.sensitivity),
                pm(&sm.specificity),
                pm(&sm.balanced_accuracy),
                ev.runtime_s
            ));
        }
    }
    s
}
