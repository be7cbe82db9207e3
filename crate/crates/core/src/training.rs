//! Balanced binary cross-entropy, its exact gradient through the whole
//! model, and Adam updates.
//!
//! The backward pass is written out by hand for the fixed architecture
//! (encoder, message-passing layers, pair scorer) and checked against
//! central finite differences in the test suite.

use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DemographicsScaler, Pair};
use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::model::{
    forward, score_edges, sigmoid, GraphImputer, ModelConfig, ModelParams, ScorerProjections,
};
use crate::rng::{derive_seed, substream};
use crate::sampler::{sample_batch, EdgeBatch, NegativeSampler, DEFAULT_MAX_REPAIR_SWEEPS};
use crate::svd::svd_event_embeddings;

/// Floor applied inside every logarithm of the loss.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub mask_probability: f64,
    pub epochs: usize,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_epsilon")]
    pub adam_epsilon: f64,
    #[serde(skip)]
    pub seed: u64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_sampler")]
    pub sampler: NegativeSampler,
    #[serde(default = "default_sweeps")]
    pub max_repair_sweeps: usize,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_sampler() -> NegativeSampler {
    NegativeSampler::DegreePreserving
}
fn default_sweeps() -> usize {
    DEFAULT_MAX_REPAIR_SWEEPS
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0066,
            mask_probability: 0.2,
            epochs: 200,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_epsilon: default_epsilon(),
            seed: 0,
            grad_clip: None,
            sampler: default_sampler(),
            max_repair_sweeps: default_sweeps(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.mask_probability > 0.0 && self.mask_probability < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mask_probability must lie in (0, 1), got {}",
                self.mask_probability
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.adam_epsilon <= 0.0 {
            return Err(Error::InvalidArgument("adam_epsilon must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if c < 0.0 || c.is_nan() {
                return Err(Error::InvalidArgument(format!("grad_clip must be non-negative, got {c}")));
            }
        }
        Ok(())
    }
}

/// `−(1/2k) [Σ log p_inv + Σ log(1 − p_neg)]` with logs floored at
/// [`LOG_FLOOR`].
pub fn balanced_bce(p_inv: &[f64], p_neg: &[f64]) -> Result<f64> {
    let k = p_inv.len();
    if k == 0 {
        return Err(Error::EmptyBatch);
    }
    if p_neg.len() != k {
        return Err(Error::InvalidArgument(format!(
            "{} positive and {} negative predictions; counts must match",
            k,
            p_neg.len()
        )));
    }
    let pos: f64 = p_inv.iter().map(|&p| p.max(LOG_FLOOR).ln()).sum();
    let neg: f64 = p_neg.iter().map(|&p| (1.0 - p).max(LOG_FLOOR).ln()).sum();
    Ok(-(pos + neg) / (2 * k) as f64)
}

/// Loss of one batch by a plain forward pass.
pub fn batch_loss(
    params: &ModelParams,
    config: &ModelConfig,
    g_visible: &BipartiteGraph,
    demographics: ArrayView2<'_, f64>,
    invisible: &[Pair],
    negative: &[Pair],
) -> Result<f64> {
    let t = forward(params, config, g_visible, demographics)?;
    let p_inv = score_edges(params, &t.patient_latents, &t.event_latents, invisible)?;
    let p_neg = score_edges(params, &t.patient_latents, &t.event_latents, negative)?;
    balanced_bce(&p_inv, &p_neg)
}

/// Loss and its gradient with respect to every parameter tensor.
///
/// `demographics` must already be scaled. Message passing runs on
/// `g_visible` only.
pub fn loss_and_gradients(
    params: &ModelParams,
    config: &ModelConfig,
    g_visible: &BipartiteGraph,
    demographics: ArrayView2<'_, f64>,
    invisible: &[Pair],
    negative: &[Pair],
) -> Result<(f64, ModelParams)> {
    let k = invisible.len();
    if k == 0 {
        return Err(Error::EmptyBatch);
    }
    if negative.len() != k {
        return Err(Error::InvalidArgument(format!(
            "{k} invisible but {} negative edges",
            negative.len()
        )));
    }
    let trace = forward(params, config, g_visible, demographics)?;
    let (m, n) = (g_visible.num_patients(), g_visible.num_events());
    let d = config.embedding_dim;
    let h = config.scorer_hidden;
    let proj = ScorerProjections::new(params, &trace.patient_latents, &trace.event_latents);
    let mut grads = params.zeros_like();

    // scorer
    let scale = 1.0 / (2 * k) as f64;
    let mut loss = 0.0;
    let mut d_patient_proj = Array2::<f64>::zeros((m, h));
    let mut d_event_proj = Array2::<f64>::zeros((n, h));
    let labelled = invisible.iter().map(|&e| (e, true)).chain(negative.iter().map(|&e| (e, false)));
    let w_out = &params.scorer_out_weight;
    let c = &params.scorer_hidden_bias;
    for ((i, j), positive) in labelled {
        if i >= m || j >= n {
            return Err(Error::OutOfRange(format!("pair ({i}, {j})")));
        }
        let p = sigmoid(proj.logit(params, i, j));
        let d_logit = if positive {
            loss -= p.max(LOG_FLOOR).ln();
            if p > LOG_FLOOR { -(1.0 - p) * scale } else { 0.0 }
        } else {
            loss -= (1.0 - p).max(LOG_FLOOR).ln();
            if 1.0 - p > LOG_FLOOR { p * scale } else { 0.0 }
        };
        grads.scorer_out_bias[0] += d_logit;
        let a = proj.patient_proj.row(i);
        let b = proj.event_proj.row(j);
        for u in 0..h {
            let z = a[u] + b[u] + c[u];
            if z > 0.0 {
                grads.scorer_out_weight[u] += d_logit * z;
                let dz = d_logit * w_out[u];
                grads.scorer_hidden_bias[u] += dz;
                d_patient_proj[[i, u]] += dz;
                d_event_proj[[j, u]] += dz;
            }
        }
    }
    loss *= scale;

    let w_hidden = &params.scorer_hidden_weight;
    grads
        .scorer_hidden_weight
        .slice_mut(s![.., ..d])
        .assign(&d_patient_proj.t().dot(&trace.patient_latents));
    grads
        .scorer_hidden_weight
        .slice_mut(s![.., d..])
        .assign(&d_event_proj.t().dot(&trace.event_latents));
    let mut d_p = d_patient_proj.dot(&w_hidden.slice(s![.., ..d]));
    let mut d_e = d_event_proj.dot(&w_hidden.slice(s![.., d..]));

    // message passing, last layer first
    let num_layers = params.layers.len();
    for l in (0..num_layers).rev() {
        let layer = &params.layers[l];
        let (p_in, e_in) = &trace.inputs[l];
        let (mean_p, mean_e) = &trace.means[l];
        let (pre_p, pre_e) = &trace.pre[l];
        if l + 1 < num_layers {
            d_p.zip_mut_with(pre_p, |g, &z| if z <= 0.0 { *g = 0.0 });
            d_e.zip_mut_with(pre_e, |g, &z| if z <= 0.0 { *g = 0.0 });
        }
        let gl = &mut grads.layers[l];
        gl.patient_self = d_p.t().dot(p_in);
        gl.patient_neighbor = d_p.t().dot(mean_p);
        gl.event_self = d_e.t().dot(e_in);
        gl.event_neighbor = d_e.t().dot(mean_e);
        if config.use_bias {
            gl.patient_bias = d_p.sum_axis(Axis(0));
            gl.event_bias = d_e.sum_axis(Axis(0));
        }

        let d_mean_p = d_p.dot(&layer.patient_neighbor);
        let d_mean_e = d_e.dot(&layer.event_neighbor);
        let mut d_p_in = d_p.dot(&layer.patient_self);
        let mut d_e_in = d_e.dot(&layer.event_self);
        for i in 0..m {
            let nbrs = g_visible.patient_neighbors(i);
            if nbrs.is_empty() {
                continue;
            }
            let row = &d_mean_p.row(i) / nbrs.len() as f64;
            for &j in nbrs {
                let mut target = d_e_in.row_mut(j);
                target += &row;
            }
        }
        for j in 0..n {
            let nbrs = g_visible.event_neighbors(j);
            if nbrs.is_empty() {
                continue;
            }
            let row = &d_mean_e.row(j) / nbrs.len() as f64;
            for &i in nbrs {
                let mut target = d_p_in.row_mut(i);
                target += &row;
            }
        }
        d_p = d_p_in;
        d_e = d_e_in;
    }

    // encoder and embedding table
    d_p.zip_mut_with(&trace.encoder_pre, |g, &z| if z <= 0.0 { *g = 0.0 });
    grads.encoder_weight = d_p.t().dot(&demographics);
    grads.encoder_bias = d_p.sum_axis(Axis(0));
    grads.event_embeddings = d_e;

    for (name, slice) in grads.names().into_iter().zip(grads.slices()) {
        if slice.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    Ok((loss, grads))
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            learning_rate: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            epsilon: config.adam_epsilon,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for idx in 0..p.len() {
                let gi = g[idx];
                m[idx] = self.beta1 * m[idx] + (1.0 - self.beta1) * gi;
                v[idx] = self.beta2 * v[idx] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[idx] / c1;
                let v_hat = v[idx] / c2;
                p[idx] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) {
    let norm = grads
        .slices()
        .iter()
        .flat_map(|s| s.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = if norm > 0.0 { max_norm / norm } else { 0.0 };
        for s in grads.slices_mut() {
            s.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub invisible: usize,
    pub relaxed: bool,
    pub event_marginal_l1_gap: usize,
    pub wall_time_ms: f64,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str = "epoch,loss,invisible,relaxed_rate,wall_time_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.epoch,
            self.loss,
            self.invisible,
            if self.relaxed { 1.0 } else { 0.0 },
            self.wall_time_ms
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: GraphImputer,
    pub optimizer: Adam,
    pub loss_history: Vec<f64>,
}

/// Model with SVD-initialized event embeddings and seeded weights.
pub fn initialize(train: &Dataset, model_config: &ModelConfig, train_config: &TrainConfig) -> Result<TrainState> {
    let mut config = *model_config;
    config.demographics_dim = train.demographics_dim();
    config.validate()?;
    train_config.validate()?;
    let graph = BipartiteGraph::build(train.positives(), train.num_patients, train.num_events)?;
    let embeddings = svd_event_embeddings(
        &graph,
        config.embedding_dim,
        config.svd_power_iters,
        derive_seed(train_config.seed, "svd", 0),
    );
    let mut rng = substream(train_config.seed, "init", 0);
    let params = ModelParams::init(&config, embeddings, &mut rng);
    let optimizer = Adam::new(&params, train_config);
    Ok(TrainState {
        model: GraphImputer {
            config,
            params,
            scaler: DemographicsScaler::fit(&train.demographics),
        },
        optimizer,
        loss_history: Vec::new(),
    })
}

/// One gradient step on a fixed batch. Returns the pre-update loss.
pub fn train_step(
    state: &mut TrainState,
    g_visible: &BipartiteGraph,
    demographics: ArrayView2<'_, f64>,
    invisible: &[Pair],
    negative: &[Pair],
    grad_clip: Option<f64>,
) -> Result<f64> {
    let (loss, mut grads) = loss_and_gradients(
        &state.model.params,
        &state.model.config,
        g_visible,
        demographics,
        invisible,
        negative,
    )?;
    if let Some(c) = grad_clip {
        clip_global_norm(&mut grads, c);
    }
    state.optimizer.update(&mut state.model.params, &grads);
    state.loss_history.push(loss);
    Ok(loss)
}

/// One training iteration: resample the partition, message-pass over the
/// visible edges, score invisible and negative edges, update.
pub fn train_epoch(
    state: &mut TrainState,
    train_graph: &BipartiteGraph,
    demographics: ArrayView2<'_, f64>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let start = Instant::now();
    let batch: EdgeBatch = sample_batch(
        train_graph,
        config.mask_probability,
        config.sampler,
        config.max_repair_sweeps,
        config.seed,
        epoch as u64,
    )?;
    let g_visible = BipartiteGraph::build(&batch.visible, train_graph.num_patients(), train_graph.num_events())?;
    let loss = train_step(
        state,
        &g_visible,
        demographics,
        &batch.invisible,
        &batch.negative,
        config.grad_clip,
    )?;
    Ok(EpochStats {
        epoch,
        loss,
        invisible: batch.invisible.len(),
        relaxed: batch.relaxed,
        event_marginal_l1_gap: batch.event_marginal_l1_gap,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Initializes and trains for `config.epochs` iterations.
pub fn fit(
    train: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(TrainState, Vec<EpochStats>)> {
    let mut state = initialize(train, model_config, config)?;
    let graph = BipartiteGraph::build(train.positives(), train.num_patients, train.num_events)?;
    let demographics = state.model.scaler.transform(&train.demographics);
    let mut stats = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let s = train_epoch(&mut state, &graph, demographics.view(), config, epoch)?;
        log::debug!("epoch {epoch}: loss {:.5}", s.loss);
        on_epoch(&s);
        stats.push(s);
    }
    Ok((state, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn uniform_predictions_cost_ln2() {
        for k in [1, 7, 100] {
            let l = balanced_bce(&vec![0.5; k], &vec![0.5; k]).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let l = balanced_bce(&[1.0 - 1e-15], &[1e-15]).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn hand_computed_loss() {
        let l = balanced_bce(&[0.9, 0.8], &[0.2, 0.1]).unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln() + 0.8f64.ln() + 0.9f64.ln()) / 4.0;
        assert!((l - want).abs() < 1e-15);
        assert!((l - 0.1643).abs() < 1e-4);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(matches!(balanced_bce(&[], &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn clamped_log_stays_finite() {
        let l = balanced_bce(&[0.0], &[1.0]).unwrap();
        assert!((l - (-LOG_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let config = ModelConfig { embedding_dim: 3, num_layers: 1, scorer_hidden: 2, ..Default::default() };
        let mut rng = rng_from_seed(1);
        let emb = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0));
        let mut params = ModelParams::init(&config, emb, &mut rng);
        let before = params.clone();
        let mut adam = Adam::new(&params, &TrainConfig::default());
        adam.update(&mut params, &before.zeros_like());
        assert_eq!(params, before);
    }

    #[test]
    fn clip_to_zero_freezes() {
        let config = ModelConfig { embedding_dim: 2, num_layers: 1, scorer_hidden: 2, ..Default::default() };
        let mut rng = rng_from_seed(2);
        let emb = Array2::from_shape_simple_fn((3, 2), || rng.random_range(-1.0..1.0));
        let params = ModelParams::init(&config, emb, &mut rng);
        let mut grads = params.clone();
        clip_global_norm(&mut grads, 0.0);
        assert!(grads.slices().iter().all(|s| s.iter().all(|&x| x == 0.0)));
    }
}
