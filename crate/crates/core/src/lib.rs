//! Policy model, geometric alignment and probing for the reach task.
//!
//! [`VlaParams`] is the backbone used at inference. Training may add an
//! alignment term: layer-ℓ visual tokens pass through a [`Projector`] and
//! are pulled towards [`teacher_features`] by cosine similarity. The
//! projector never takes part in [`VlaParams::predict_action`].

pub mod alignment;
pub mod checkpoint;
pub mod config;
mod error;
pub mod model;
pub mod probe;

pub use alignment::{
    align_loss, combine_losses, fourier_embed, patch_statistics, positional_embedding, teacher_calls, teacher_features,
    total_loss, LossWeights, Projector, TeacherFeatures,
};
pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use error::{ModelError, Result};
pub use model::{action_chunk, action_loss, patchify, ForwardOutput, Segment, TokenSequence, VlaParams};
pub use probe::{
    alignment_diagnostics, centroid_distance, fit_probe, linear_cka, probe_rmse, probe_rmse_on, train_probe,
    visual_taps, DiagnosticsReport, ProbeConfig, ProbeHead, ProbeSamples, Sample,
};
