//! Imputation of sparse unary patient × event matrices with bipartite-graph
//! message passing and degree-preserving negative sampling.
//!
//! Typical flow: [`dataset::split`] a [`Dataset`], [`training::fit`] a
//! [`GraphImputer`] on the train patients, then [`evaluation::evaluate`] it
//! on the masked test patients against the [`baselines`].

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod svd;
pub mod training;

pub use baselines::{frequency_baseline, knn_impute, Distance, FrequencyImputer, KnnConfig, KnnImputer};
pub use config::RunConfig;
pub use dataset::{
    filter_rare_events, generate_synthetic, load_triplets, split, Dataset, Pair, SplitDataset, SplitSpec,
    SyntheticSpec,
};
pub use error::{Error, Result};
pub use evaluation::{bias_profile, evaluate, CutoffPolicy, MetricsReport, RowScorer};
pub use graph::BipartiteGraph;
pub use model::{forward, score_edges, GraphImputer, ModelConfig, ModelParams};
pub use sampler::{sample_batch, sample_invisible, EdgeBatch, NegativeSampler};
pub use training::{balanced_bce, fit, TrainConfig};
