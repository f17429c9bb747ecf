//! Dual-encoder graph embeddings for link prediction.
//!
//! A per-node structure embedding and an attribute MLP are trained jointly
//! with a margin ranking loss and an alignment term, so nodes never seen
//! during training can still be scored from their attributes alone.

pub mod checkpoint;
pub mod distance;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod grad;
pub mod graph;
pub mod loss;
pub mod split;
pub mod training;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use distance::{shortest_path_distances, DistanceCache, HopDistance, DEFAULT_D_MAX};
pub use encoders::{
    cosine_similarity, encode_attribute_rows, encode_attributes, encode_structure, AttrEncoderParams, EmbeddingKind,
    EmbeddingMatrix, Matrix, ModelParams, StructEncoderParams,
};
pub use error::{DealError, Result};
pub use grad::{
    adam_step, finite_difference_check, gradient, loss_and_gradient, BatchObjective, Objective, OptimizerConfig,
    OptimizerKind, OptimizerState, ParamVector,
};
pub use graph::{load_graph, load_graph_files, AttributedGraph, LoadReport, NodeId, SparseRows};
pub use loss::{
    generalized_logistic, loose_align_loss, negative_weight, ranking_loss, tight_align_loss, total_loss, AlignMode,
    BatchPair, HyperParams, MiniBatch, TightScope,
};
pub use split::{EvalSet, Pair, SplitMode, SplitRecipe, SplitSpec};
pub use eval::{
    auc, average_precision, default_lambda, evaluate, hop_similarity_profile, link_score, run_trials, Endpoint,
    HopSimilarity, Metrics, NodeEmbeddings, TrialMetrics,
};
pub use training::{sample_minibatch, train, train_logged, BatchSampler, EpochLog, TrainConfig, TrainedModel};
