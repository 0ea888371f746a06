//! Out-of-distribution detection on hyperspherical embeddings.
//!
//! Normalized embeddings are modeled as a mixture of von Mises-Fisher
//! distributions; the intrinsic-likelihood score
//! `S(z) = tau * log sum_j exp(mu_j' z / tau)` equals the mixture
//! log-density up to an additive constant and therefore ranks samples
//! exactly as the density does. Around that core: a synthetic-task
//! generator whose ground-truth density is exactly computable ([`synth`]),
//! a small manually backpropagated encoder trained under the vMF
//! negative-log-likelihood ([`encoder`]), the baseline scores
//! ([`scores`]), threshold calibration ([`detector`]), and an
//! AUROC/FPR@95/latency harness ([`metrics`]).

pub mod detector;
pub mod encoder;
pub mod linalg;
pub mod metrics;
pub mod scores;
pub mod seeding;
pub mod synth;
pub mod vmf;

mod error;

pub use error::{Error, Result};

pub use detector::{calibrate, CalibratedDetector, Decision};
pub use encoder::{
    nll_loss, train, train_ce_twin, CeModel, EncoderModel, Layer, PrototypeBank, TrainConfig,
};
pub use scores::ScoreFunction;
pub use synth::{LabeledEmbeddingSet, RawInputSet};
pub use vmf::{UnitVector, VmfComponent, VmfMixture};
