//! White-box gradient attacks — FGSM, BIM, PGD — under L-infinity and L2
//! budgets. All three share one iterative core: ascend the loss on the true
//! label, project onto the epsilon-ball around the original, clip to [0,1].
//!
//! Attacks operate on continuous tensors; 8-bit quantization happens only at
//! PNG export, and `verify_constraint` offers the matching quantized slack.
//! Outputs satisfy the continuous constraint with zero slack: the ball
//! enforcement loops on exactly the comparison the verifier performs.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::png_bytes;
use crate::data::{Label, LabeledImage};
use crate::detector::{Detector, Family};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::metrics::{feature_distance, psnr, ssim};
use crate::rng::{derive_seed, rng_from, tag};
use crate::tensor::Tensor;

pub const FGSM_STEPS: usize = 1;
pub const BIM_STEPS: usize = 10;
pub const BIM_RELATIVE_STEP: f64 = 0.2;
pub const PGD_STEPS: usize = 40;
pub const PGD_RELATIVE_STEP: f64 = 1.0 / 30.0;

/// Quantized-slack unit: half of one 8-bit step.
const QUANT_SLACK: f64 = 0.5 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fgsm,
    Bim,
    Pgd,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Fgsm => "fgsm",
            Method::Bim => "bim",
            Method::Pgd => "pgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn name(&self) -> &'static str {
        match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        }
    }
}

/// Default L-infinity budget grid, in pixel scale: 1/255 ..= 8/255.
pub fn default_linf_grid() -> Vec<f64> {
    (1..=8).map(|k| k as f64 / 255.0).collect()
}

/// Default L2 budget grid: 1 ..= 8.
pub fn default_l2_grid() -> Vec<f64> {
    (1..=8).map(|k| k as f64).collect()
}

/// Budgets below the 8-bit quantization increment (L-infinity).
pub fn sub_quantization_linf_grid() -> Vec<f64> {
    vec![1e-4, 5e-4, 1e-3, 5e-3]
}

/// Small L2 budgets whose per-pixel share is below one quantization step.
pub fn sub_quantization_l2_grid() -> Vec<f64> {
    vec![0.0625, 0.125, 0.25, 0.5]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: Method,
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub relative_step: f64,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(norm: Norm, epsilon: f64, seed: u64) -> Self {
        AttackConfig {
            method: Method::Fgsm,
            norm,
            epsilon,
            steps: FGSM_STEPS,
            relative_step: 1.0,
            random_start: false,
            seed,
        }
    }

    pub fn bim(norm: Norm, epsilon: f64, seed: u64) -> Self {
        AttackConfig {
            method: Method::Bim,
            norm,
            epsilon,
            steps: BIM_STEPS,
            relative_step: BIM_RELATIVE_STEP,
            random_start: false,
            seed,
        }
    }

    pub fn pgd(norm: Norm, epsilon: f64, seed: u64) -> Self {
        AttackConfig {
            method: Method::Pgd,
            norm,
            epsilon,
            steps: PGD_STEPS,
            relative_step: PGD_RELATIVE_STEP,
            random_start: true,
            seed,
        }
    }

    /// Epsilon zero is legal and produces the original image back.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.steps < 1 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if !(self.relative_step > 0.0 && self.relative_step <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "relative_step {} outside (0,1]",
                self.relative_step
            )));
        }
        match self.method {
            Method::Fgsm => {
                if self.steps != 1 || self.relative_step != 1.0 || self.random_start {
                    return Err(Error::InvalidArgument(
                        "FGSM requires steps=1, relative_step=1, no random start".into(),
                    ));
                }
            }
            Method::Bim => {
                if self.random_start {
                    return Err(Error::InvalidArgument("BIM does not use a random start".into()));
                }
            }
            Method::Pgd => {
                if !self.random_start {
                    return Err(Error::InvalidArgument("PGD requires a random start".into()));
                }
            }
        }
        Ok(())
    }
}

/// Perceptual quality of the adversarial image relative to its original.
/// `ssim` is absent when the input is not a large-enough 3-channel image;
/// `feature_distance` is absent unless the detector has a frozen extractor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub feature_distance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AdversarialResult {
    pub adversarial: Tensor,
    pub original_id: String,
    /// Ground-truth label of the original.
    pub label: Label,
    pub config: AttackConfig,
    pub pre_score: f64,
    pub post_score: f64,
    pub pre_label: Label,
    pub post_label: Label,
    /// Predicted label flipped, in either direction.
    pub success: bool,
    pub perturbation_linf: f64,
    pub perturbation_l2: f64,
    pub quality: Quality,
    /// Set when the attack could not run normally (zero gradient, bad input).
    pub note: Option<String>,
}

/// Projects a perturbation onto the epsilon-ball: per-coordinate clamp for
/// L-infinity, rescale-if-outside for L2.
pub fn project(delta: &Tensor, norm: Norm, epsilon: f64) -> Result<Tensor> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be >= 0")));
    }
    Ok(match norm {
        Norm::Linf => delta.map(|v| v.clamp(-epsilon, epsilon)),
        Norm::L2 => {
            let n = l2_norm(delta.data());
            if n > epsilon {
                let s = epsilon / n;
                delta.map(|v| v * s)
            } else {
                delta.clone()
            }
        }
    })
}

/// True iff ||adversarial - original||_p <= epsilon + slack. Slack is zero
/// for continuous tensors; with `quantized` it is half a quantization step
/// per coordinate (L-infinity) or that times sqrt(d) (L2).
pub fn verify_constraint(
    original: &Tensor,
    adversarial: &Tensor,
    norm: Norm,
    epsilon: f64,
    quantized: bool,
) -> Result<bool> {
    if original.shape() != adversarial.shape() {
        return Err(Error::shape(
            "verify_constraint",
            format!("{:?}", original.shape()),
            format!("{:?}", adversarial.shape()),
        ));
    }
    let d = original.len() as f64;
    Ok(match norm {
        Norm::Linf => {
            let slack = if quantized { QUANT_SLACK } else { 0.0 };
            original
                .data()
                .iter()
                .zip(adversarial.data())
                .all(|(o, a)| (a - o).abs() <= epsilon + slack)
        }
        Norm::L2 => {
            let slack = if quantized { QUANT_SLACK * d.sqrt() } else { 0.0 };
            let diff: Vec<f64> =
                original.data().iter().zip(adversarial.data()).map(|(o, a)| a - o).collect();
            l2_norm(&diff) <= epsilon + slack
        }
    })
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Moves `x` onto the epsilon-ball around `original` such that the exact
/// comparisons in `verify_constraint` (slack 0) hold despite floating-point
/// rounding in `original + delta`.
pub(crate) fn enforce_ball(original: &Tensor, x: Tensor, norm: Norm, epsilon: f64) -> Tensor {
    match norm {
        Norm::Linf => {
            let o = original.data();
            let mut data = x.into_data();
            for (v, oi) in data.iter_mut().zip(o) {
                // Coarse clamp, then at most a couple of 1-ulp nudges to
                // absorb the rounding of `oi + epsilon`.
                *v = v.clamp(oi - epsilon, oi + epsilon);
                while *v - oi > epsilon {
                    *v = v.next_down();
                }
                while oi - *v > epsilon {
                    *v = v.next_up();
                }
            }
            Tensor::new(original.shape().to_vec(), data).expect("sized")
        }
        Norm::L2 => {
            let o = original.data();
            let mut x = x;
            // One shrink normally suffices; the loop absorbs re-rounding.
            for _ in 0..8 {
                let diff: Vec<f64> = o.iter().zip(x.data()).map(|(oi, v)| v - oi).collect();
                let n = l2_norm(&diff);
                if n <= epsilon {
                    break;
                }
                let s = (epsilon / n) * (1.0 - 4.0 * f64::EPSILON);
                let data: Vec<f64> = o.iter().zip(&diff).map(|(oi, d)| oi + s * d).collect();
                x = Tensor::new(x.shape().to_vec(), data).expect("sized");
            }
            x
        }
    }
}

/// Ascent direction per step: gradient sign (L-infinity) or the normalized
/// gradient (L2). None when the gradient vanishes identically.
pub(crate) fn step_direction(grad: &Tensor, norm: Norm) -> Option<Tensor> {
    match norm {
        Norm::Linf => {
            if grad.data().iter().all(|&g| g == 0.0) {
                return None;
            }
            Some(grad.map(|g| {
                if g > 0.0 {
                    1.0
                } else if g < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }))
        }
        Norm::L2 => {
            let n = l2_norm(grad.data());
            if n == 0.0 {
                return None;
            }
            Some(grad.map(|g| g / n))
        }
    }
}

pub(crate) fn random_start(original: &Tensor, norm: Norm, epsilon: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let d = original.len();
    let delta: Vec<f64> = match norm {
        Norm::Linf => (0..d).map(|_| rng.gen_range(-epsilon..=epsilon)).collect(),
        Norm::L2 => {
            // Uniform in the ball: uniform direction, radius eps * u^(1/d).
            let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = l2_norm(&dir).max(f64::MIN_POSITIVE);
            let r = epsilon * rng.gen::<f64>().powf(1.0 / d as f64);
            dir.iter_mut().for_each(|v| *v *= r / n);
            dir
        }
    };
    let data: Vec<f64> =
        original.data().iter().zip(&delta).map(|(o, u)| (o + u).clamp(0.0, 1.0)).collect();
    Tensor::new(original.shape().to_vec(), data).expect("sized")
}

fn attack_quality(detector: &Detector, original: &Tensor, adversarial: &Tensor) -> Quality {
    Quality {
        psnr: psnr(original, adversarial).unwrap_or(f64::NAN),
        ssim: ssim(original, adversarial).ok(),
        feature_distance: match detector.family() {
            Family::FeatureProbe => feature_distance(detector, original, adversarial).ok(),
            Family::CompactCnn => None,
        },
    }
}

/// Shared iterative core. Untargeted: ascends the BCE loss on the true
/// label, projecting onto the ball and clipping to [0,1] after every step.
fn run_attack(
    detector: &Detector,
    image: &Tensor,
    label: Label,
    config: &AttackConfig,
) -> Result<AdversarialResult> {
    config.validate()?;
    let pre_score = detector.score(image)?;
    let threshold = detector.threshold();
    let pre_label = if pre_score >= threshold { Label::Fake } else { Label::Real };

    let mut x = image.clone();
    let mut note = None;
    if config.epsilon > 0.0 {
        if config.random_start {
            let mut rng = rng_from(derive_seed(config.seed, &[tag("start")]));
            x = enforce_ball(image, random_start(image, config.norm, config.epsilon, &mut rng), config.norm, config.epsilon);
        }
        let alpha = config.relative_step * config.epsilon;
        for step in 0..config.steps {
            let (_, _, grad) = detector.loss_input_gradient(&x, label.target())?;
            let Some(dir) = step_direction(&grad, config.norm) else {
                note = Some(format!("zero gradient at step {step}"));
                break;
            };
            let stepped: Vec<f64> =
                x.data().iter().zip(dir.data()).map(|(v, s)| v + alpha * s).collect();
            x = Tensor::new(x.shape().to_vec(), stepped)?;
            x = enforce_ball(image, x, config.norm, config.epsilon).clamped(0.0, 1.0);
        }
        // Clipping only moves coordinates toward the original, but make the
        // zero-slack guarantee unconditional.
        x = enforce_ball(image, x, config.norm, config.epsilon);
    }

    let post_score = detector.score(&x)?;
    let post_label = if post_score >= threshold { Label::Fake } else { Label::Real };
    let diff: Vec<f64> = image.data().iter().zip(x.data()).map(|(o, a)| a - o).collect();
    Ok(AdversarialResult {
        quality: attack_quality(detector, image, &x),
        perturbation_linf: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
        perturbation_l2: l2_norm(&diff),
        adversarial: x,
        original_id: String::new(),
        label,
        config: *config,
        pre_score,
        post_score,
        pre_label,
        post_label,
        success: post_label != pre_label,
        note,
    })
}

fn run_method(
    detector: &Detector,
    image: &Tensor,
    label: Label,
    config: &AttackConfig,
    method: Method,
) -> Result<AdversarialResult> {
    if config.method != method {
        return Err(Error::InvalidArgument(format!(
            "config.method is {} but {} was called",
            config.method.name(),
            method.name()
        )));
    }
    run_attack(detector, image, label, config)
}

/// Single-step sign (L-infinity) or normalized-gradient (L2) attack.
pub fn fgsm(
    detector: &Detector,
    image: &Tensor,
    label: Label,
    config: &AttackConfig,
) -> Result<AdversarialResult> {
    run_method(detector, image, label, config, Method::Fgsm)
}

/// Iterated FGSM with per-step projection; no random start.
pub fn bim(
    detector: &Detector,
    image: &Tensor,
    label: Label,
    config: &AttackConfig,
) -> Result<AdversarialResult> {
    run_method(detector, image, label, config, Method::Bim)
}

/// BIM from a seeded uniform start inside the epsilon-ball.
pub fn pgd(
    detector: &Detector,
    image: &Tensor,
    label: Label,
    config: &AttackConfig,
) -> Result<AdversarialResult> {
    run_method(detector, image, label, config, Method::Pgd)
}

/// Attacks every image in order. Each image gets its own seed derived from
/// `config.seed` and its index (recorded in the per-result config), so runs
/// are reproducible and independent of batch splitting. Per-image failures
/// become flagged identity results; the batch never aborts.
pub fn attack_batch(
    detector: &Detector,
    images: &[LabeledImage],
    config: &AttackConfig,
) -> Result<Vec<AdversarialResult>> {
    config.validate()?;
    let mut out = Vec::with_capacity(images.len());
    for (index, img) in images.iter().enumerate() {
        let per_image =
            AttackConfig { seed: derive_seed(config.seed, &[tag("attack"), index as u64]), ..*config };
        let mut result = match run_attack(detector, &img.pixels, img.label, &per_image) {
            Ok(r) => r,
            Err(e) => AdversarialResult {
                adversarial: img.pixels.clone(),
                original_id: String::new(),
                label: img.label,
                config: per_image,
                pre_score: f64::NAN,
                post_score: f64::NAN,
                pre_label: img.label,
                post_label: img.label,
                success: false,
                perturbation_linf: 0.0,
                perturbation_l2: 0.0,
                quality: Quality { psnr: 80.0, ssim: None, feature_distance: None },
                note: Some(format!("attack failed: {e}")),
            },
        };
        result.original_id = img.id.clone();
        out.push(result);
    }
    Ok(out)
}

/// Sidecar record written next to each exported adversarial PNG.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdversarialSidecar {
    pub original_id: String,
    pub label: Label,
    pub config: AttackConfig,
    pub success: bool,
    pub pre_score: f64,
    pub post_score: f64,
    pub pre_label: Label,
    pub post_label: Label,
    pub perturbation_linf: f64,
    pub perturbation_l2: f64,
    pub quality: Quality,
    pub note: Option<String>,
}

impl AdversarialSidecar {
    pub fn from_result(r: &AdversarialResult) -> Self {
        AdversarialSidecar {
            original_id: r.original_id.clone(),
            label: r.label,
            config: r.config,
            success: r.success,
            pre_score: r.pre_score,
            post_score: r.post_score,
            pre_label: r.pre_label,
            post_label: r.post_label,
            perturbation_linf: r.perturbation_linf,
            perturbation_l2: r.perturbation_l2,
            quality: r.quality,
            note: r.note.clone(),
        }
    }
}

/// Writes `<id>.png` (8-bit) and `<id>.json` into `dir`.
pub fn export_adversarial(result: &AdversarialResult, dir: &Path) -> Result<()> {
    let png = png_bytes(&result.adversarial)?;
    atomic_write(&dir.join(format!("{}.png", result.original_id)), &png)?;
    let sidecar = serde_json::to_vec_pretty(&AdversarialSidecar::from_result(result))?;
    atomic_write(&dir.join(format!("{}.json", result.original_id)), &sidecar)?;
    Ok(())
}
