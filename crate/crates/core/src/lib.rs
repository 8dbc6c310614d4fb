//! detbench: a desk-scale benchmark for the adversarial robustness of
//! AI-generated-image detectors.
//!
//! Everything runs in seconds-to-minutes on one CPU core: a small reverse-mode
//! autodiff graph, two toy detector families, gradient attacks (FGSM/BIM/PGD)
//! under L-inf and L2 budgets, common-degradation models (JPEG, blur, noise),
//! classification and perceptual metrics, a robust-embedding defense, a
//! synthetic image corpus with a controlled generator artifact, and an
//! experiment harness that writes deterministic reports.

pub mod attack;
pub mod checkpoint;
pub mod corpus;
pub mod data;
pub mod defense;
pub mod degrade;
pub mod detector;
pub mod error;
pub mod fsutil;
pub mod graph;
pub mod harness;
#[cfg(test)]
mod probe_tmp;
pub mod metrics;
pub mod rng;
pub mod tensor;

pub use data::{Label, LabeledImage, ScoredSample};
pub use error::{Error, Result};
pub use tensor::Tensor;
