//! Semi-supervised classification on tabular cohorts.
//!
//! The pipeline learns a latent representation with a batch-normalised
//! autoencoder, diffuses the few known labels over a locally scaled k-NN
//! graph built in that latent space, and couples consecutive classes with
//! entropic optimal transport so that the representation can be refined
//! against the transport cost.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`dataset`] | CSV ingestion, synthetic cohorts, stratified splits, label masking |
//! | [`preprocessing`] | quality filter, ratio features, KNN imputation, robust scaling |
//! | [`autoencoder`] | MLP autoencoder with batch norm, analytic gradients, Adam training |
//! | [`graph`] | k-NN affinity graph and the symmetric normalised operator |
//! | [`propagation`] | iterative and closed-form label propagation |
//! | [`transport`] | Sinkhorn scaling and stage-to-stage transport costs |
//! | [`pipeline`] | alternating optimisation of the joint objective |
//! | [`metrics`] | accuracy, Cohen's kappa, weighted P/R/F1, confusion matrices |

pub mod autoencoder;
pub mod dataset;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod preprocessing;
pub mod propagation;
pub mod sparse;
pub mod transport;

pub use autoencoder::{Autoencoder, TrainConfig};
pub use dataset::{FeatureTable, Modality, SemiLabels, SynthConfig};
pub use graph::AffinityGraph;
pub use metrics::MetricsReport;
pub use pipeline::{FittedModel, JointConfig};
pub use propagation::PropagationResult;
pub use transport::{StageProgression, TransportPlan};
