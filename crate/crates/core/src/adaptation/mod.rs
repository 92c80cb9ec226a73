//! Source-free multi-source adaptation.
//!
//! Each source model keeps its classifier frozen. The feature extractors and
//! a set of simplex-constrained aggregation weights are trained together on
//! unlabeled target data by minimizing prediction entropy, maximizing the
//! entropy of the mean prediction, and fitting nearest-centroid pseudo-labels.

pub mod alpha;
pub mod baselines;
pub mod engine;
pub mod losses;
pub mod pseudo;

pub use alpha::{alpha_project, AggregationWeights};
pub use baselines::{mean_softmax, shot_ens};
pub use engine::{
    adapt, batch_objective, ensemble_accuracy, ensemble_predict, label_entropy, weights_only_adapt, AdaptOutcome,
    AdaptationConfig, BatchObjective, EpochMetrics, Trainable,
};
pub use losses::{diversity_loss, entropy_loss, pl_loss, total_loss, LossTerms, Objective};
pub use pseudo::{
    assign_pseudo_labels, compute_centroids, pseudo_label, pseudo_label_models, DistanceMode, PseudoLabelState,
    SourceViews,
};
