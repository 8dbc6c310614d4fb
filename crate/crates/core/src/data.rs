//! Shared data types: class labels, labeled images, scored samples.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Binary class label. `Fake` means AI-generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Training/loss target: real = 0, fake = 1.
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s.trim() {
            "real" => Some(Label::Real),
            "fake" => Some(Label::Fake),
            _ => None,
        }
    }
}

/// An image with pixels in `[0,1]`, shape `(3, H, W)`, plus label and id.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub label: Label,
    pub id: String,
}

/// A detector score for one sample; scores live in `[0,1]`.
#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub score: f64,
    pub label: Label,
    pub id: String,
}

impl ScoredSample {
    pub fn new(score: f64, label: Label, id: impl Into<String>) -> Self {
        ScoredSample { score, label, id: id.into() }
    }
}

/// The shipped textured test image: a deterministic mix of sinusoidal bands
/// and slow gradients with full-range contrast. Used by degradation and
/// quality-metric checks that need "some texture" without a corpus.
pub fn textured_test_image(h: usize, w: usize) -> Tensor {
    let mut d = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = 0.5
                    + 0.28 * ((x as f64) * 0.9 + (y as f64) * 0.4 + c as f64).sin()
                    + 0.17 * ((y as f64) * 1.7 - (x as f64) * 0.2).cos()
                    + 0.05 * (((x * y) as f64) * 0.05).sin();
                d.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![3, h, w], d).expect("sized correctly")
}
