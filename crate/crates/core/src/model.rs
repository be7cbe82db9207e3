//! Forward computation of the bipartite message-passing imputer.
//!
//! Patients start from an encoding of their demographics, events from a
//! learnable embedding table. Each layer updates both sides from the previous
//! layer's values:
//!
//! ```text
//! p'_i = W^p_1 p_i + W^p_2 mean_{j ∈ N_p(i)} e_j (+ b^p)
//! e'_j = W^e_1 e_j + W^e_2 mean_{i ∈ N_e(j)} p_i (+ b^e)
//! ```
//!
//! with a rectifier between layers (not after the last). An empty
//! neighborhood contributes a zero mean. A pair `(i, j)` is scored by
//! `sigmoid(w · relu(H [p_i ; e_j] + c) + b)`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DemographicsScaler, Pair};
use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub num_layers: usize,
    pub scorer_hidden: usize,
    #[serde(default = "default_demographics_dim")]
    pub demographics_dim: usize,
    /// Per-layer bias vectors in message passing. Off gives the bias-free
    /// update exactly.
    #[serde(default = "default_true")]
    pub use_bias: bool,
    #[serde(default = "default_power_iters")]
    pub svd_power_iters: usize,
}

fn default_demographics_dim() -> usize {
    2
}

fn default_true() -> bool {
    true
}

fn default_power_iters() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 95,
            num_layers: 3,
            scorer_hidden: 32,
            demographics_dim: 2,
            use_bias: true,
            svd_power_iters: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embedding_dim", self.embedding_dim),
            ("num_layers", self.num_layers),
            ("scorer_hidden", self.scorer_hidden),
            ("demographics_dim", self.demographics_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Weights of one message-passing layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub patient_self: Array2<f64>,
    pub patient_neighbor: Array2<f64>,
    pub event_self: Array2<f64>,
    pub event_neighbor: Array2<f64>,
    pub patient_bias: Array1<f64>,
    pub event_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `n × d` initial event features.
    pub event_embeddings: Array2<f64>,
    /// `d × q` demographics projection.
    pub encoder_weight: Array2<f64>,
    pub encoder_bias: Array1<f64>,
    pub layers: Vec<LayerParams>,
    /// `h × 2d`; the first `d` columns act on the patient latent.
    pub scorer_hidden_weight: Array2<f64>,
    pub scorer_hidden_bias: Array1<f64>,
    pub scorer_out_weight: Array1<f64>,
    /// Length 1.
    pub scorer_out_bias: Array1<f64>,
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, and the given event table.
    pub fn init(config: &ModelConfig, event_embeddings: Array2<f64>, rng: &mut impl Rng) -> Self {
        let d = config.embedding_dim;
        let h = config.scorer_hidden;
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                patient_self: glorot(d, d, rng),
                patient_neighbor: glorot(d, d, rng),
                event_self: glorot(d, d, rng),
                event_neighbor: glorot(d, d, rng),
                patient_bias: Array1::zeros(d),
                event_bias: Array1::zeros(d),
            })
            .collect();
        let encoder_weight = glorot(d, config.demographics_dim, rng);
        let scorer_hidden_weight = glorot(h, 2 * d, rng);
        let limit = (6.0 / (h + 1) as f64).sqrt();
        let scorer_out_weight = Array1::from_shape_simple_fn(h, || rng.random_range(-limit..limit));
        Self {
            event_embeddings,
            encoder_weight,
            encoder_bias: Array1::zeros(d),
            layers,
            scorer_hidden_weight,
            scorer_hidden_bias: Array1::zeros(h),
            scorer_out_weight,
            scorer_out_bias: Array1::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        Self {
            event_embeddings: z2(&self.event_embeddings),
            encoder_weight: z2(&self.encoder_weight),
            encoder_bias: z1(&self.encoder_bias),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    patient_self: z2(&l.patient_self),
                    patient_neighbor: z2(&l.patient_neighbor),
                    event_self: z2(&l.event_self),
                    event_neighbor: z2(&l.event_neighbor),
                    patient_bias: z1(&l.patient_bias),
                    event_bias: z1(&l.event_bias),
                })
                .collect(),
            scorer_hidden_weight: z2(&self.scorer_hidden_weight),
            scorer_hidden_bias: z1(&self.scorer_hidden_bias),
            scorer_out_weight: z1(&self.scorer_out_weight),
            scorer_out_bias: z1(&self.scorer_out_bias),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = vec![
            "event_embeddings".to_string(),
            "encoder.weight".into(),
            "encoder.bias".into(),
        ];
        for l in 0..self.layers.len() {
            for part in [
                "patient_self",
                "patient_neighbor",
                "event_self",
                "event_neighbor",
                "patient_bias",
                "event_bias",
            ] {
                names.push(format!("layers.{l}.{part}"));
            }
        }
        names.extend(
            ["scorer.hidden_weight", "scorer.hidden_bias", "scorer.out_weight", "scorer.out_bias"]
                .map(String::from),
        );
        names
    }

    /// Shapes in [`names`](Self::names) order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![
            self.event_embeddings.shape().to_vec(),
            self.encoder_weight.shape().to_vec(),
            self.encoder_bias.shape().to_vec(),
        ];
        for l in &self.layers {
            shapes.push(l.patient_self.shape().to_vec());
            shapes.push(l.patient_neighbor.shape().to_vec());
            shapes.push(l.event_self.shape().to_vec());
            shapes.push(l.event_neighbor.shape().to_vec());
            shapes.push(l.patient_bias.shape().to_vec());
            shapes.push(l.event_bias.shape().to_vec());
        }
        shapes.push(self.scorer_hidden_weight.shape().to_vec());
        shapes.push(self.scorer_hidden_bias.shape().to_vec());
        shapes.push(self.scorer_out_weight.shape().to_vec());
        shapes.push(self.scorer_out_bias.shape().to_vec());
        shapes
    }

    /// Flat views of every tensor in [`names`](Self::names) order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.event_embeddings.as_slice().expect("standard layout"),
            self.encoder_weight.as_slice().expect("standard layout"),
            self.encoder_bias.as_slice().expect("standard layout"),
        ];
        for l in &self.layers {
            out.extend([
                l.patient_self.as_slice().expect("standard layout"),
                l.patient_neighbor.as_slice().expect("standard layout"),
                l.event_self.as_slice().expect("standard layout"),
                l.event_neighbor.as_slice().expect("standard layout"),
                l.patient_bias.as_slice().expect("standard layout"),
                l.event_bias.as_slice().expect("standard layout"),
            ]);
        }
        out.extend([
            self.scorer_hidden_weight.as_slice().expect("standard layout"),
            self.scorer_hidden_bias.as_slice().expect("standard layout"),
            self.scorer_out_weight.as_slice().expect("standard layout"),
            self.scorer_out_bias.as_slice().expect("standard layout"),
        ]);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.event_embeddings.as_slice_mut().expect("standard layout"),
            self.encoder_weight.as_slice_mut().expect("standard layout"),
            self.encoder_bias.as_slice_mut().expect("standard layout"),
        ];
        for l in &mut self.layers {
            out.push(l.patient_self.as_slice_mut().expect("standard layout"));
            out.push(l.patient_neighbor.as_slice_mut().expect("standard layout"));
            out.push(l.event_self.as_slice_mut().expect("standard layout"));
            out.push(l.event_neighbor.as_slice_mut().expect("standard layout"));
            out.push(l.patient_bias.as_slice_mut().expect("standard layout"));
            out.push(l.event_bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.scorer_hidden_weight.as_slice_mut().expect("standard layout"));
        out.push(self.scorer_hidden_bias.as_slice_mut().expect("standard layout"));
        out.push(self.scorer_out_weight.as_slice_mut().expect("standard layout"));
        out.push(self.scorer_out_bias.as_slice_mut().expect("standard layout"));
        out
    }

    /// Rebuilds parameters of the given layout from flat tensors.
    pub fn from_slices(config: &ModelConfig, num_events: usize, tensors: &[Vec<f64>]) -> Result<Self> {
        let d = config.embedding_dim;
        let h = config.scorer_hidden;
        let template = Self {
            event_embeddings: Array2::zeros((num_events, d)),
            encoder_weight: Array2::zeros((d, config.demographics_dim)),
            encoder_bias: Array1::zeros(d),
            layers: (0..config.num_layers)
                .map(|_| LayerParams {
                    patient_self: Array2::zeros((d, d)),
                    patient_neighbor: Array2::zeros((d, d)),
                    event_self: Array2::zeros((d, d)),
                    event_neighbor: Array2::zeros((d, d)),
                    patient_bias: Array1::zeros(d),
                    event_bias: Array1::zeros(d),
                })
                .collect(),
            scorer_hidden_weight: Array2::zeros((h, 2 * d)),
            scorer_hidden_bias: Array1::zeros(h),
            scorer_out_weight: Array1::zeros(h),
            scorer_out_bias: Array1::zeros(1),
        };
        let mut params = template;
        let names = params.names();
        let mut slots = params.slices_mut();
        if slots.len() != tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tensors, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        for ((slot, src), name) in slots.iter_mut().zip(tensors).zip(&names) {
            if slot.len() != src.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor `{name}` has {} values, expected {}",
                    src.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(src);
        }
        Ok(params)
    }

    pub fn num_scalars(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

pub(crate) fn relu(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|x| x.max(0.0))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `relu(demographics · Wᵀ + b)`.
pub fn encode_patients(params: &ModelParams, demographics: ArrayView2<'_, f64>) -> Array2<f64> {
    relu(&encoder_pre_activation(params, demographics))
}

pub(crate) fn encoder_pre_activation(params: &ModelParams, demographics: ArrayView2<'_, f64>) -> Array2<f64> {
    demographics.dot(&params.encoder_weight.t()) + &params.encoder_bias
}

/// Mean of `source` rows over each patient's event neighbors.
pub(crate) fn patient_neighbor_mean(g: &BipartiteGraph, event_source: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((g.num_patients(), event_source.ncols()));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let nbrs = g.patient_neighbors(i);
        if nbrs.is_empty() {
            continue;
        }
        for &j in nbrs {
            row += &event_source.row(j);
        }
        row /= nbrs.len() as f64;
    }
    out
}

/// Mean of `source` rows over each event's patient neighbors.
pub(crate) fn event_neighbor_mean(g: &BipartiteGraph, patient_source: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((g.num_events(), patient_source.ncols()));
    for (j, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let nbrs = g.event_neighbors(j);
        if nbrs.is_empty() {
            continue;
        }
        for &i in nbrs {
            row += &patient_source.row(i);
        }
        row /= nbrs.len() as f64;
    }
    out
}

/// Intermediate values of a forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub encoder_pre: Array2<f64>,
    /// Per layer: inputs `(P, E)`.
    pub inputs: Vec<(Array2<f64>, Array2<f64>)>,
    /// Per layer: neighborhood means `(mean over events for patients, mean over patients for events)`.
    pub means: Vec<(Array2<f64>, Array2<f64>)>,
    /// Per layer: outputs before any rectifier.
    pub pre: Vec<(Array2<f64>, Array2<f64>)>,
    pub patient_latents: Array2<f64>,
    pub event_latents: Array2<f64>,
}

fn check_graph(g: &BipartiteGraph, patients: usize, events: usize) -> Result<()> {
    if g.num_patients() != patients || g.num_events() != events {
        return Err(Error::ShapeMismatch(format!(
            "graph is {}x{}, features are {patients}x{events}",
            g.num_patients(),
            g.num_events()
        )));
    }
    Ok(())
}

/// Runs every message-passing layer, keeping intermediates.
pub fn message_pass_traced(
    params: &ModelParams,
    config: &ModelConfig,
    g: &BipartiteGraph,
    patient_init: Array2<f64>,
    event_init: Array2<f64>,
) -> Result<ForwardTrace> {
    check_graph(g, patient_init.nrows(), event_init.nrows())?;
    let num_layers = params.layers.len();
    let mut inputs = Vec::with_capacity(num_layers);
    let mut means = Vec::with_capacity(num_layers);
    let mut pre = Vec::with_capacity(num_layers);
    let (mut p, mut e) = (patient_init, event_init);
    for (l, layer) in params.layers.iter().enumerate() {
        let mean_p = patient_neighbor_mean(g, &e);
        let mean_e = event_neighbor_mean(g, &p);
        let mut p_out = p.dot(&layer.patient_self.t()) + mean_p.dot(&layer.patient_neighbor.t());
        let mut e_out = e.dot(&layer.event_self.t()) + mean_e.dot(&layer.event_neighbor.t());
        if config.use_bias {
            p_out += &layer.patient_bias;
            e_out += &layer.event_bias;
        }
        let last = l + 1 == num_layers;
        let (p_next, e_next) = if last {
            (p_out.clone(), e_out.clone())
        } else {
            (relu(&p_out), relu(&e_out))
        };
        inputs.push((p, e));
        means.push((mean_p, mean_e));
        pre.push((p_out, e_out));
        p = p_next;
        e = e_next;
    }
    Ok(ForwardTrace {
        encoder_pre: Array2::zeros((0, 0)),
        inputs,
        means,
        pre,
        patient_latents: p,
        event_latents: e,
    })
}

/// Final patient and event latents after all layers.
pub fn message_pass(
    params: &ModelParams,
    config: &ModelConfig,
    g: &BipartiteGraph,
    patient_init: Array2<f64>,
    event_init: Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let t = message_pass_traced(params, config, g, patient_init, event_init)?;
    Ok((t.patient_latents, t.event_latents))
}

/// Full forward pass from scaled demographics.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    g: &BipartiteGraph,
    demographics: ArrayView2<'_, f64>,
) -> Result<ForwardTrace> {
    if demographics.ncols() != params.encoder_weight.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "demographics have {} columns, encoder expects {}",
            demographics.ncols(),
            params.encoder_weight.ncols()
        )));
    }
    let encoder_pre = encoder_pre_activation(params, demographics);
    let patient_init = relu(&encoder_pre);
    let mut trace = message_pass_traced(params, config, g, patient_init, params.event_embeddings.clone())?;
    trace.encoder_pre = encoder_pre;
    Ok(trace)
}

/// First scorer layer split into its patient and event halves, so a pair's
/// hidden pre-activation is `patient_proj[i] + event_proj[j] + c`.
#[derive(Debug, Clone)]
pub struct ScorerProjections {
    pub patient_proj: Array2<f64>,
    pub event_proj: Array2<f64>,
}

impl ScorerProjections {
    pub fn new(params: &ModelParams, patient_latents: &Array2<f64>, event_latents: &Array2<f64>) -> Self {
        let d = patient_latents.ncols();
        let w = &params.scorer_hidden_weight;
        Self {
            patient_proj: patient_latents.dot(&w.slice(s![.., ..d]).t()),
            event_proj: event_latents.dot(&w.slice(s![.., d..]).t()),
        }
    }

    /// Logit of pair `(i, j)`.
    #[inline]
    pub fn logit(&self, params: &ModelParams, i: usize, j: usize) -> f64 {
        let a = self.patient_proj.row(i);
        let b = self.event_proj.row(j);
        let c = &params.scorer_hidden_bias;
        let w = &params.scorer_out_weight;
        let mut acc = params.scorer_out_bias[0];
        for k in 0..w.len() {
            let z = (a[k] + c[k]) + b[k];
            if z > 0.0 {
                acc += w[k] * z;
            }
        }
        acc
    }

    /// Probabilities of patient `i` against every event.
    pub fn score_row(&self, params: &ModelParams, i: usize, out: &mut [f64]) {
        let a = self.patient_proj.row(i);
        let c = &params.scorer_hidden_bias;
        let w = params.scorer_out_weight.as_slice().expect("standard layout");
        let base: Vec<f64> = (0..w.len()).map(|k| a[k] + c[k]).collect();
        for (j, slot) in out.iter_mut().enumerate() {
            let b = self.event_proj.row(j);
            let b = b.as_slice().expect("standard layout");
            let mut acc = params.scorer_out_bias[0];
            for k in 0..w.len() {
                let z = base[k] + b[k];
                if z > 0.0 {
                    acc += w[k] * z;
                }
            }
            *slot = sigmoid(acc);
        }
    }
}

/// Probability of an edge for each pair.
pub fn score_edges(
    params: &ModelParams,
    patient_latents: &Array2<f64>,
    event_latents: &Array2<f64>,
    pairs: &[Pair],
) -> Result<Vec<f64>> {
    if let Some(&(i, j)) = pairs
        .iter()
        .find(|&&(i, j)| i >= patient_latents.nrows() || j >= event_latents.nrows())
    {
        return Err(Error::OutOfRange(format!("pair ({i}, {j})")));
    }
    let proj = ScorerProjections::new(params, patient_latents, event_latents);
    Ok(pairs.iter().map(|&(i, j)| sigmoid(proj.logit(params, i, j))).collect())
}

/// A trained model: configuration, parameters, and demographics scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphImputer {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub scaler: DemographicsScaler,
}

impl GraphImputer {
    /// Latents for the patients of `g` given their raw demographics.
    pub fn latents(&self, g: &BipartiteGraph, demographics: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let scaled = self.scaler.transform(demographics);
        let t = forward(&self.params, &self.config, g, scaled.view())?;
        Ok((t.patient_latents, t.event_latents))
    }
}
