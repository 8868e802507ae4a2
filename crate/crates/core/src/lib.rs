//! Analytic class-incremental learning over pre-extracted embeddings.
//!
//! Features from a specialized branch and a universal branch are each
//! ℓ2-normalized and concatenated ([`calibration`]), lifted through a frozen
//! random ReLU projection ([`buffer`]) and classified by ridge regression
//! maintained with recursive least squares ([`analytic`]). The regularizer is
//! picked once by leave-one-out cross-validation ([`lambda`]). At inference
//! the analytic logits nominate top-K candidates that are rescored against
//! text prototypes ([`semantic`]). [`harness`] runs the task loop and
//! [`rigidity`] holds the subspace geometry and synthetic data generators.

pub mod analytic;
pub mod buffer;
pub mod calibration;
pub mod config;
pub mod error;
pub mod harness;
pub mod lambda;
pub mod rigidity;
pub mod semantic;
pub mod store;

pub use analytic::{ridge_fit, AnalyticState, GramForm, OneHot};
pub use buffer::ProjectionBuffer;
pub use calibration::{l2_normalize, ugc_fuse};
pub use config::{Branches, LambdaSetting, RunConfig, SplitMode};
pub use error::{Error, Result};
pub use harness::{
    emit_report, run_experiment, run_inference, run_learning, split_stream, Featurizer,
    MetricsReport, TaskStream,
};
pub use lambda::{loocv_score, select_lambda, LambdaGrid};
pub use rigidity::{
    generate_stream, grassmann_distance, projection_residual, projector, rigidity_sweep,
    SubspaceBasis, SyntheticStreamSpec,
};
pub use semantic::{cse_scores, fuse_predictions, top_k, CandidateSet, PrototypeBank};
pub use store::{read_dataset, read_prototype_bank, write_dataset, DatasetHeader, FeatureRecord};
