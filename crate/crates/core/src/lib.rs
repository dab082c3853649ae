//! Pose-based video anomaly detection.
//!
//! Pipeline: pose tracks ([`pose_io`]) are cut into fixed-length windows,
//! turned into token sequences ([`tokenizer`]), and passed through a
//! shared-encoder transformer with two decoders ([`model`]). One decoder
//! reconstructs the current window, the other predicts the next one; their
//! errors become per-person scores that are normalized, fused and reduced
//! to per-frame scores ([`scoring`]), then evaluated with AUC-ROC and EER
//! ([`metrics`]). [`synth`] provides a deterministic benchmark with
//! injected anomalies, and [`pipeline`] wires everything into runs driven
//! by a [`config::RunConfig`].

pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pose_io;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use model::{Branch, Mode, TrainConfig, UetdConfig, UetdWeights};
pub use pose_io::{Keypoint, PoseFrame, PoseTrack, PoseWindow};
pub use tokenizer::{SchemeKind, TokenSequence, TokenizationScheme};
