//! Metric-learning engine with noise-robust adaptive hierarchical margins.
//!
//! The crate trains a small feed-forward embedding model with pair-based
//! metric losses whose margins adapt per epoch to class-wise similarity
//! statistics, optionally on Poincare-ball geometry, and evaluates retrieval
//! quality with Recall@K. Everything is deterministic given a config and a
//! seed.
//!
//! Module map:
//!
//! * [`geometry`] — cosine and hyperbolic similarity kernels with gradients.
//! * [`class_stats`] — intra/inter class similarity matrix and rescaling.
//! * [`margins`] — the per-epoch margin table.
//! * [`batch`] / [`losses`] — mini-batch pair sets and the metric losses.
//! * [`perturb`] — feature-space augmentation and label-noise injection.
//! * [`model`] / [`optim`] / [`trainer`] — the embedding model, Adam, and
//!   the training loop.
//! * [`dataio`] — synthetic hierarchical data and feature file formats.
//! * [`eval`] — Recall@K and neighbor dumps.
//! * [`experiment`] — config-driven runs and the ablation grid.

pub mod batch;
pub mod class_stats;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod losses;
pub mod margins;
pub mod model;
pub mod optim;
pub mod perturb;
pub mod rng;
pub mod trainer;

pub use batch::{EmbeddingBatch, PairSets};
pub use class_stats::{
    class_similarity_matrix, min_intra_similarity, rescale_to_unit_fifth, ClassSimilarityMatrix,
    RescaledSet,
};
pub use dataio::{
    generate_hierarchical, load_features, save_features, FeatureDataset, FileFormat,
    HierarchySpec,
};
pub use error::{Error, Result};
pub use eval::{neighbor_dump, recall_at_k, RecallReport};
pub use experiment::{run, run_ablation, DatasetSource, ExperimentConfig, MetricsRow};
pub use geometry::{
    cosine_sim, embedding_similarity, exp_map, exp_map_standard, poincare_distance, BallPoint,
    SimilarityKind,
};
pub use losses::{
    finite_difference_check, lifted_loss, ms_loss, ms_star_loss, triplet_batch_loss,
    triplet_loss, triplet_star_loss, LossResult, MarginSource, MsHyperParams,
};
pub use margins::{build_margin_table, ConsistencyStat, InterTransform, MarginParams, MarginTable};
pub use model::MlpModel;
pub use optim::{AdamParams, AdamState};
pub use perturb::{inject_label_noise, strong_augment, weak_augment, AugmentPolicy, NoiseSpec};
pub use trainer::{fit, train_epoch, LossKind, MarginMode, TrainConfig};
