//! Two toy detector families: FeatureProbe (a frozen random convolutional
//! feature extractor probed by one trainable linear layer) and CompactCnn (a
//! small fully trainable CNN whose first convolution keeps full spatial
//! resolution). Both score fake-probability through a sigmoid head and train
//! with plain seeded SGD on binary cross-entropy.
//!
//! A trained detector is safe for concurrent read-only scoring; training
//! returns a new detector and never mutates its input.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{Label, LabeledImage, ScoredSample};
use crate::degrade;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Padding, Wrt};
use crate::rng::{derive_seed, rng_from, tag};
use crate::tensor::Tensor;

pub const DEFAULT_RESOLUTION: (usize, usize) = (32, 32);
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_FEATURE_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    FeatureProbe,
    CompactCnn,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::FeatureProbe => "feature_probe",
            Family::CompactCnn => "compact_cnn",
        }
    }
}

/// Augmentations applied per training sample; all draws come from the
/// training stream, so runs are reproducible.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub noise: bool,
    pub hflip: bool,
    pub jpeg: bool,
}

impl Augment {
    pub fn any(&self) -> bool {
        self.noise || self.hflip || self.jpeg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub augment: Augment,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 20, lr: 0.05, augment: Augment::default(), seed: 0 }
    }
}

impl TrainConfig {
    /// Shipped per-family defaults. The probe's lone linear layer tolerates a
    /// large step size; the end-to-end CNN needs a gentle one plus light
    /// augmentation.
    pub fn shipped(family: Family) -> TrainConfig {
        match family {
            Family::FeatureProbe => TrainConfig { epochs: 20, lr: 2.0, ..TrainConfig::default() },
            Family::CompactCnn => TrainConfig {
                epochs: 20,
                lr: 0.02,
                augment: Augment { noise: true, hflip: true, jpeg: false },
                seed: 0,
            },
        }
    }
}

/// What training ran, including the mean per-epoch loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: usize,
    pub lr: f64,
    pub augment: Augment,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
}

/// Robust-finetuning provenance, filled by the defense module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseRecord {
    pub epsilon: f64,
    pub inner_steps: usize,
    pub relative_step: f64,
    pub outer_epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorMeta {
    pub family: Family,
    pub seed: u64,
    pub input_shape: Vec<usize>,
    pub threshold: f64,
    pub feature_dim: Option<usize>,
    pub trained: Option<TrainRecord>,
    pub defense: Option<DefenseRecord>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub(crate) graph: Graph,
    pub(crate) input: NodeId,
    pub(crate) target: NodeId,
    pub(crate) score_node: NodeId,
    pub(crate) loss: NodeId,
    /// Pooled pre-head features; the frozen embedding for FeatureProbe.
    pub(crate) embed: NodeId,
    pub(crate) first_conv: NodeId,
    pub(crate) frozen: BTreeSet<String>,
    pub meta: DetectorMeta,
}

fn he_conv(rng: &mut impl Rng, cout: usize, cin: usize, k: usize) -> Tensor {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    let data = (0..cout * cin * k * k)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect();
    Tensor::new(vec![cout, cin, k, k], data).expect("sized")
}

/// He-scaled filters projected to zero DC gain, so responses carry texture
/// rather than local brightness. Both families init convs this way: frozen
/// probe features stay informative, and trainable stacks avoid starting with
/// brightness-saturated (dead or always-on) relu units.
fn zero_dc_conv(rng: &mut impl Rng, cout: usize, cin: usize, k: usize) -> Tensor {
    let t = he_conv(rng, cout, cin, k);
    let per_filter = cin * k * k;
    let mut data = t.data().to_vec();
    for f in 0..cout {
        let slice = &mut data[f * per_filter..(f + 1) * per_filter];
        let mean = slice.iter().sum::<f64>() / per_filter as f64;
        slice.iter_mut().for_each(|v| *v -= mean);
    }
    Tensor::new(vec![cout, cin, k, k], data).expect("sized")
}

fn check_square_resolution(resolution: (usize, usize), divisor: usize) -> Result<()> {
    let (h, w) = resolution;
    if h != w || h % divisor != 0 || h == 0 {
        return Err(Error::InvalidArgument(format!(
            "detector resolution {h}x{w} must be square and a multiple of {divisor}"
        )));
    }
    Ok(())
}

/// FeatureProbe at the default 32x32 resolution.
pub fn build_feature_probe(seed: u64, feature_dim: usize) -> Result<Detector> {
    build_feature_probe_at(seed, feature_dim, DEFAULT_RESOLUTION)
}

/// Frozen random two-conv extractor pooled globally to `feature_dim`, with a
/// single trainable linear layer on top. Equal seeds give identical frozen
/// weights.
pub fn build_feature_probe_at(
    seed: u64,
    feature_dim: usize,
    resolution: (usize, usize),
) -> Result<Detector> {
    if feature_dim < 8 {
        return Err(Error::InvalidArgument(format!("feature_dim {feature_dim} must be >= 8")));
    }
    check_square_resolution(resolution, 4)?;
    let (h, w) = resolution;
    let mut rng = rng_from(derive_seed(seed, &[tag("feature_probe")]));

    let mut g = Graph::new();
    let input = g.input(&[3, h, w]);
    let target = g.input(&[1]);
    let w1 = g.param("conv1.w", zero_dc_conv(&mut rng, 16, 3, 3))?;
    let b1 = g.param("conv1.b", Tensor::zeros(&[16]))?;
    let c1 = g.conv2d(input, w1, b1, 2, Padding::Same)?;
    let r1 = g.relu(c1)?;
    let w2 = g.param("conv2.w", zero_dc_conv(&mut rng, feature_dim, 16, 3))?;
    let b2 = g.param("conv2.b", Tensor::zeros(&[feature_dim]))?;
    let c2 = g.conv2d(r1, w2, b2, 2, Padding::Same)?;
    let r2 = g.relu(c2)?;
    let pooled = g.avg_pool2d(r2, h / 4)?;
    let embed = g.flatten(pooled)?;
    // Zero head: the only trainable layer starts from the symmetric point.
    let hw = g.param("head.w", Tensor::zeros(&[1, feature_dim]))?;
    let hb = g.param("head.b", Tensor::zeros(&[1]))?;
    let logit = g.linear(embed, hw, hb)?;
    let score_node = g.sigmoid(logit)?;
    let loss = g.sigmoid_bce_loss(logit, target)?;

    let frozen: BTreeSet<String> =
        ["conv1.w", "conv1.b", "conv2.w", "conv2.b"].iter().map(|s| s.to_string()).collect();
    Ok(Detector {
        graph: g,
        input,
        target,
        logit,
        score_node,
        loss,
        embed,
        first_conv: c1,
        frozen,
        meta: DetectorMeta {
            family: Family::FeatureProbe,
            seed,
            input_shape: vec![3, h, w],
            threshold: DEFAULT_THRESHOLD,
            feature_dim: Some(feature_dim),
            trained: None,
            defense: None,
        },
    })
}

/// CompactCnn at the default 32x32 resolution.
pub fn build_compact_cnn(seed: u64) -> Result<Detector> {
    build_compact_cnn_at(seed, DEFAULT_RESOLUTION)
}

/// Fully trainable three-conv CNN. The first convolution has stride 1 with
/// nothing pooling before it, so its output keeps the input's spatial size.
pub fn build_compact_cnn_at(seed: u64, resolution: (usize, usize)) -> Result<Detector> {
    check_square_resolution(resolution, 8)?;
    let (h, w) = resolution;
    let mut rng = rng_from(derive_seed(seed, &[tag("compact_cnn")]));

    let mut g = Graph::new();
    let input = g.input(&[3, h, w]);
    let target = g.input(&[1]);
    let w1 = g.param("conv1.w", zero_dc_conv(&mut rng, 8, 3, 3))?;
    let b1 = g.param("conv1.b", Tensor::zeros(&[8]))?;
    let c1 = g.conv2d(input, w1, b1, 1, Padding::Same)?;
    let r1 = g.relu(c1)?;
    let p1 = g.avg_pool2d(r1, 2)?;
    let w2 = g.param("conv2.w", zero_dc_conv(&mut rng, 16, 8, 3))?;
    let b2 = g.param("conv2.b", Tensor::zeros(&[16]))?;
    let c2 = g.conv2d(p1, w2, b2, 1, Padding::Same)?;
    let r2 = g.relu(c2)?;
    let p2 = g.avg_pool2d(r2, 2)?;
    let w3 = g.param("conv3.w", zero_dc_conv(&mut rng, 16, 16, 3))?;
    let b3 = g.param("conv3.b", Tensor::zeros(&[16]))?;
    let c3 = g.conv2d(p2, w3, b3, 1, Padding::Same)?;
    let r3 = g.relu(c3)?;
    let p3 = g.avg_pool2d(r3, 2)?;
    let embed = g.flatten(p3)?;
    let n_embed = 16 * (h / 8) * (w / 8);
    let head_std = 1.0 / (n_embed as f64).sqrt();
    let head_init: Vec<f64> =
        (0..n_embed).map(|_| rng.sample::<f64, _>(StandardNormal) * head_std).collect();
    let hw = g.param("head.w", Tensor::new(vec![1, n_embed], head_init)?)?;
    let hb = g.param("head.b", Tensor::zeros(&[1]))?;
    let logit = g.linear(embed, hw, hb)?;
    let score_node = g.sigmoid(logit)?;
    let loss = g.sigmoid_bce_loss(logit, target)?;

    Ok(Detector {
        graph: g,
        input,
        target,
        logit,
        score_node,
        loss,
        embed,
        first_conv: c1,
        frozen: BTreeSet::new(),
        meta: DetectorMeta {
            family: Family::CompactCnn,
            seed,
            input_shape: vec![3, h, w],
            threshold: DEFAULT_THRESHOLD,
            feature_dim: None,
            trained: None,
            defense: None,
        },
    })
}

impl Detector {
    pub fn family(&self) -> Family {
        self.meta.family
    }

    /// Stable short name, e.g. `feature_probe_11`; robust variants append
    /// their defense tag, e.g. `feature_probe_11_r2`.
    pub fn name(&self) -> String {
        let base = format!("{}_{}", self.meta.family.name(), self.meta.seed);
        match &self.meta.defense {
            Some(d) => format!("{base}_r{}", (d.epsilon * 255.0).round() as u32),
            None => base,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.meta.threshold
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.meta.input_shape
    }

    pub fn frozen_ids(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    /// Shape of the first convolution's output; its spatial extents equal the
    /// input's for CompactCnn.
    pub fn first_conv_shape(&self) -> &[usize] {
        self.graph.node_shape(self.first_conv).expect("built")
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.graph
            .param_names()
            .iter()
            .filter(|n| !self.frozen.contains(*n))
            .map(|n| self.graph.param_value(n).expect("listed").len())
            .sum()
    }

    pub fn params_snapshot(&self) -> Vec<(String, Tensor)> {
        self.graph.params_snapshot()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.meta.input_shape.as_slice() {
            return Err(Error::shape(
                "detector input",
                format!("{:?}", self.meta.input_shape),
                format!("{:?}", image.shape()),
            ));
        }
        Ok(())
    }

    /// Fake-probability in [0,1].
    pub fn score(&self, image: &Tensor) -> Result<f64> {
        self.check_image(image)?;
        self.graph.forward_to(self.score_node, &[(self.input, image)])?.get(self.score_node)?.item()
    }

    pub fn score_batch(&self, images: &[LabeledImage]) -> Result<Vec<ScoredSample>> {
        images
            .iter()
            .map(|img| Ok(ScoredSample::new(self.score(&img.pixels)?, img.label, img.id.clone())))
            .collect()
    }

    /// Fake iff score >= threshold (ties classify as Fake).
    pub fn predict_label(&self, image: &Tensor, threshold: f64) -> Result<Label> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0,1)")));
        }
        Ok(if self.score(image)? >= threshold { Label::Fake } else { Label::Real })
    }

    /// The frozen extractor embedding; only FeatureProbe has one.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        if self.meta.family != Family::FeatureProbe {
            return Err(Error::InvalidArgument(
                "embeddings require a frozen feature extractor (FeatureProbe)".into(),
            ));
        }
        self.check_image(image)?;
        Ok(self.graph.forward_to(self.embed, &[(self.input, image)])?.get(self.embed)?.clone())
    }

    /// Loss, score, and the gradient of the BCE loss w.r.t. the image at
    /// (image, target). This is the attack surface.
    pub fn loss_input_gradient(&self, image: &Tensor, target: f64) -> Result<(f64, f64, Tensor)> {
        self.check_image(image)?;
        let t = Tensor::new(vec![1], vec![target])?;
        let feeds = [(self.input, image), (self.target, &t)];
        let acts = self.graph.forward_eval(&feeds)?;
        let loss = acts.get(self.loss)?.item()?;
        let score = acts.get(self.score_node)?.item()?;
        let grads = self.graph.backward_from(self.loss, &feeds, &acts, Wrt::Inputs)?;
        let grad = grads
            .inputs
            .get(&self.input)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("input gradient missing".into()))?;
        Ok((loss, score, grad))
    }
}

fn flip_horizontal(image: &Tensor) -> Tensor {
    let (c, h, w) = image.chw_dims().expect("CHW image");
    let src = image.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = src[row + (w - 1 - x)];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("sized")
}

const AUGMENT_NOISE_STD: f64 = 2.0 / 255.0;

fn apply_augment(pixels: &Tensor, augment: &Augment, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut img = pixels.clone();
    if augment.hflip && rng.gen_bool(0.5) {
        img = flip_horizontal(&img);
    }
    if augment.jpeg {
        let quality = rng.gen_range(30..=95);
        img = degrade::jpeg_roundtrip(&img, quality)?;
    }
    if augment.noise {
        img = img
            .map(|v| v + AUGMENT_NOISE_STD * rng.sample::<f64, _>(StandardNormal))
            .clamped(0.0, 1.0);
    }
    Ok(img)
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    idx
}

/// Per-sample SGD on binary cross-entropy with seeded shuffling. Frozen
/// parameters are never touched. Returns the trained detector; the input is
/// left unmodified.
pub fn train_detector(
    detector: &Detector,
    train: &[LabeledImage],
    cfg: &TrainConfig,
) -> Result<Detector> {
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {} must be > 0", cfg.lr)));
    }
    let n_fake = train.iter().filter(|s| s.label == Label::Fake).count();
    if train.is_empty() || n_fake == 0 || n_fake == train.len() {
        return Err(Error::SingleClass("training set needs both labels".into()));
    }
    for img in train {
        detector.check_image(&img.pixels)?;
    }

    let mut out = detector.clone();
    let mut losses = Vec::with_capacity(cfg.epochs);
    if cfg.epochs > 0 {
        // FeatureProbe with no augmentation trains only the head on fixed
        // embeddings, so extract them once and use the closed-form gradient
        // sigmoid(z) - t.
        if detector.meta.family == Family::FeatureProbe && !cfg.augment.any() {
            losses = train_head_on_embeddings(&mut out, train, cfg)?;
        } else {
            losses = train_full_graph(&mut out, train, cfg)?;
        }
    }
    out.meta.trained = Some(TrainRecord {
        epochs: cfg.epochs,
        lr: cfg.lr,
        augment: cfg.augment,
        seed: cfg.seed,
        epoch_losses: losses,
    });
    Ok(out)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn train_head_on_embeddings(
    out: &mut Detector,
    train: &[LabeledImage],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let embeddings: Vec<Tensor> = train.iter().map(|s| out.embed(&s.pixels)).collect::<Result<_>>()?;
    let targets: Vec<f64> = train.iter().map(|s| s.label.target()).collect();
    let dim = embeddings[0].len();
    let mut w = out.graph.param_value("head.w").expect("built").data().to_vec();
    let mut b = out.graph.param_value("head.b").expect("built").data()[0];

    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = rng_from(derive_seed(cfg.seed, &[tag("epoch"), epoch as u64]));
        let mut loss_acc = 0.0;
        for &i in &shuffled_indices(train.len(), &mut rng) {
            let e = embeddings[i].data();
            let t = targets[i];
            let mut z = b;
            for (wv, ev) in w.iter().zip(e.iter()) {
                z += wv * ev;
            }
            loss_acc += t * softplus(-z) + (1.0 - t) * softplus(z);
            let g = stable_sigmoid(z) - t;
            for (wv, ev) in w.iter_mut().zip(e.iter()) {
                *wv -= cfg.lr * g * ev;
            }
            b -= cfg.lr * g;
        }
        losses.push(loss_acc / train.len() as f64);
    }
    out.graph.set_param("head.w", Tensor::new(vec![1, dim], w)?)?;
    out.graph.set_param("head.b", Tensor::new(vec![1], vec![b])?)?;
    Ok(losses)
}

fn train_full_graph(out: &mut Detector, train: &[LabeledImage], cfg: &TrainConfig) -> Result<Vec<f64>> {
    let trainable: Vec<String> = out
        .graph
        .param_names()
        .into_iter()
        .filter(|n| !out.frozen.contains(n))
        .collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = rng_from(derive_seed(cfg.seed, &[tag("epoch"), epoch as u64]));
        let mut loss_acc = 0.0;
        for &i in &shuffled_indices(train.len(), &mut rng) {
            let sample = &train[i];
            let pixels = apply_augment(&sample.pixels, &cfg.augment, &mut rng)?;
            let t = Tensor::new(vec![1], vec![sample.label.target()])?;
            let feeds = [(out.input, &pixels), (out.target, &t)];
            let acts = out.graph.forward_to(out.loss, &feeds)?;
            loss_acc += acts.get(out.loss)?.item()?;
            let grads = out.graph.backward_from(out.loss, &feeds, &acts, Wrt::Params)?;
            for name in &trainable {
                let g = &grads.params[name];
                let gd = g.data();
                out.graph.update_param(name, |p| {
                    for (pv, gv) in p.iter_mut().zip(gd.iter()) {
                        *pv -= cfg.lr * gv;
                    }
                })?;
            }
        }
        losses.push(loss_acc / train.len() as f64);
    }
    Ok(losses)
}

// --- checkpoints ----------------------------------------------------------------

/// Saves the detector as a checkpoint: meta header plus every parameter
/// tensor (frozen included).
pub fn save_detector(detector: &Detector, path: &Path) -> Result<()> {
    let meta = serde_json::to_string(&detector.meta)?;
    checkpoint::save_tensors(path, &meta, &detector.params_snapshot())
}

/// Rebuilds the architecture from the header, then overwrites every
/// parameter from the checkpoint records.
pub fn load_detector(path: &Path) -> Result<Detector> {
    let (meta_json, tensors) = checkpoint::load_tensors(path)?;
    let meta: DetectorMeta = serde_json::from_str(&meta_json)?;
    let resolution = match meta.input_shape.as_slice() {
        [3, h, w] => (*h, *w),
        other => {
            return Err(Error::Checkpoint(format!("unsupported input shape {other:?}")));
        }
    };
    let mut detector = match meta.family {
        Family::FeatureProbe => {
            let dim = meta.feature_dim.ok_or_else(|| {
                Error::Checkpoint("feature_probe checkpoint missing feature_dim".into())
            })?;
            build_feature_probe_at(meta.seed, dim, resolution)?
        }
        Family::CompactCnn => build_compact_cnn_at(meta.seed, resolution)?,
    };
    let expected = detector.graph.param_names();
    if tensors.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: checkpoint has {}, architecture has {}",
            tensors.len(),
            expected.len()
        )));
    }
    for (name, value) in tensors {
        detector
            .graph
            .set_param(&name, value)
            .map_err(|e| Error::Checkpoint(format!("parameter {name:?}: {e}")))?;
    }
    detector.meta = meta;
    Ok(detector)
}
