//! Oracles shared by the integration tests.
#![allow(dead_code)]

use graphimpute::baselines::Distance;
use graphimpute::graph::BipartiteGraph;
use graphimpute::model::{ModelConfig, ModelParams};
use graphimpute::rng::rng_from_seed;
use graphimpute::sampler::{sample_invisible, sample_negative_uniform};
use graphimpute::training::{batch_loss, loss_and_gradients};
use graphimpute::{Dataset, Pair};
use ndarray::Array2;
use rand::Rng;

/// A random graph where event `j` is present with a probability drawn
/// log-uniformly from `[lo, hi]`.
pub fn random_graph(m: usize, n: usize, lo: f64, hi: f64, seed: u64) -> BipartiteGraph {
    let mut rng = rng_from_seed(seed);
    let probs: Vec<f64> = (0..n).map(|_| (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()).collect();
    let edges: Vec<Pair> = (0..m)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(_, j)| rng.random_bool(probs[j]))
        .collect();
    BipartiteGraph::build(&edges, m, n).unwrap()
}

pub struct GradInstance {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub g_visible: BipartiteGraph,
    pub demographics: Array2<f64>,
    pub invisible: Vec<Pair>,
    pub negative: Vec<Pair>,
}

/// Small instance with non-zero biases so that every parameter is exercised.
pub fn grad_instance(m: usize, n: usize, d: usize, layers: usize, seed: u64) -> GradInstance {
    let mut rng = rng_from_seed(seed);
    let config = ModelConfig {
        embedding_dim: d,
        num_layers: layers,
        scorer_hidden: 8,
        demographics_dim: 2,
        use_bias: true,
        svd_power_iters: 2,
    };
    let emb = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
    let mut params = ModelParams::init(&config, emb, &mut rng);
    for s in params.slices_mut() {
        for v in s.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let g = loop {
        let g = random_graph(m, n, 0.3, 0.6, rng.random());
        if g.edge_count() >= 8 && g.edge_count() <= m * n - 8 {
            break g;
        }
    };
    let (invisible, visible) = loop {
        let (inv, vis) = sample_invisible(&g, 0.4, rng.random()).unwrap();
        if !inv.is_empty() && inv.len() <= m * n - g.edge_count() {
            break (inv, vis);
        }
    };
    let negative = sample_negative_uniform(&g, invisible.len(), rng.random()).unwrap();
    let demographics = Array2::from_shape_simple_fn((m, 2), || rng.random_range(-1.5..1.5));
    GradInstance {
        config,
        params,
        g_visible: BipartiteGraph::build(&visible, m, n).unwrap(),
        demographics,
        invisible,
        negative,
    }
}

/// Worst relative error of the analytic gradient against central
/// differences, with the tensor it occurred in.
pub fn gradient_check(inst: &GradInstance, h: f64) -> (f64, String) {
    let loss = |p: &ModelParams| {
        batch_loss(p, &inst.config, &inst.g_visible, inst.demographics.view(), &inst.invisible, &inst.negative).unwrap()
    };
    let (_, grads) = loss_and_gradients(
        &inst.params,
        &inst.config,
        &inst.g_visible,
        inst.demographics.view(),
        &inst.invisible,
        &inst.negative,
    )
    .unwrap();
    let names = inst.params.names();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let mut probe = inst.params.clone();
    let mut worst = (0.0, String::new());
    for (t, name) in names.iter().enumerate() {
        for k in 0..analytic[t].len() {
            let orig = probe.slices()[t][k];
            probe.slices_mut()[t][k] = orig + h;
            let up = loss(&probe);
            probe.slices_mut()[t][k] = orig - h;
            let down = loss(&probe);
            probe.slices_mut()[t][k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[t][k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if err > worst.0 {
                worst = (err, format!("{name}[{k}]: analytic {a:e}, numeric {numeric:e}"));
            }
        }
    }
    worst
}

/// Plain k-NN: boolean rows, full stable sort by (distance, index).
pub fn brute_force_knn(train: &Dataset, test: &Dataset, k: usize, distance: Distance) -> Array2<f64> {
    let dense = |d: &Dataset| {
        let mut x = vec![vec![false; d.num_events]; d.num_patients];
        for &(i, j) in d.positives() {
            x[i][j] = true;
        }
        x
    };
    let (tr, te) = (dense(train), dense(test));
    let mut out = Array2::zeros((te.len(), train.num_events));
    for (q, row) in te.iter().enumerate() {
        let mut ds: Vec<(f64, usize)> = tr
            .iter()
            .enumerate()
            .map(|(t, r)| {
                let inter = row.iter().zip(r).filter(|(a, b)| **a && **b).count() as f64;
                let union = row.iter().zip(r).filter(|(a, b)| **a || **b).count() as f64;
                let diff = row.iter().zip(r).filter(|(a, b)| a != b).count() as f64;
                let dist = match distance {
                    Distance::Hamming => diff,
                    Distance::Jaccard => {
                        if union == 0.0 {
                            0.0
                        } else {
                            1.0 - inter / union
                        }
                    }
                };
                (dist, t)
            })
            .collect();
        ds.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, t) in &ds[..k] {
            for j in 0..train.num_events {
                if tr[t][j] {
                    out[[q, j]] += 1.0;
                }
            }
        }
        out.row_mut(q).mapv_inplace(|c| c / k as f64);
    }
    out
}
