//! Robust-backbone defense for the FeatureProbe family: adversarially
//! fine-tune the frozen feature extractor, unsupervised, so that embeddings
//! of perturbed images stay close to clean embeddings; then re-freeze it and
//! keep the existing linear head untouched.
//!
//! The fine-tuning target is the *pre-fine-tuning* extractor's clean
//! embedding, held fixed. Anchoring to the live extractor instead would make
//! a collapsed (constant) representation a trivial minimizer.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{enforce_ball, random_start, step_direction, Norm};
use crate::detector::{DefenseRecord, Detector, Family};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Wrt};
use crate::rng::{derive_seed, rng_from, tag};
use crate::tensor::Tensor;

pub const R2_EPSILON: f64 = 2.0 / 255.0;
pub const R4_EPSILON: f64 = 4.0 / 255.0;
pub const INNER_STEPS: usize = 10;
pub const INNER_RELATIVE_STEP: f64 = 0.25;
const DEFENSE_BATCH: usize = 16;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-parameter adaptive steps, state keyed by parameter name.
struct Adam {
    m: std::collections::BTreeMap<String, Vec<f64>>,
    v: std::collections::BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(names: &[String], graph: &Graph) -> Self {
        let mut m: std::collections::BTreeMap<String, Vec<f64>> = std::collections::BTreeMap::new();
        let mut v: std::collections::BTreeMap<String, Vec<f64>> = std::collections::BTreeMap::new();
        for n in names {
            let len = graph.param_value(n).map(|t| t.len()).unwrap_or(0);
            m.insert(n.clone(), vec![0.0; len]);
            v.insert(n.clone(), vec![0.0; len]);
        }
        Adam { m, v, t: 0 }
    }

    fn len_of(&self, name: &str) -> usize {
        self.m.get(name).map(Vec::len).unwrap_or(0)
    }

    fn step(
        &mut self,
        graph: &mut Graph,
        grad_sums: &std::collections::BTreeMap<String, Vec<f64>>,
        scale: f64,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (name, sum) in grad_sums {
            let m = self.m.get_mut(name).expect("known param");
            let v = self.v.get_mut(name).expect("known param");
            for ((mi, vi), gs) in m.iter_mut().zip(v.iter_mut()).zip(sum) {
                let g = gs * scale;
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
            }
            let (m, v) = (&self.m[name], &self.v[name]);
            let mut idx = 0;
            graph.update_param(name, |p| {
                for pv in p.iter_mut() {
                    let mh = m[idx] / bc1;
                    let vh = v[idx] / bc2;
                    *pv -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    idx += 1;
                }
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustFinetuneConfig {
    /// L-infinity budget of the inner embedding attack.
    pub epsilon: f64,
    pub inner_steps: usize,
    pub inner_relative_step: f64,
    pub outer_epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RobustFinetuneConfig {
    fn default() -> Self {
        RobustFinetuneConfig {
            epsilon: R2_EPSILON,
            inner_steps: INNER_STEPS,
            inner_relative_step: INNER_RELATIVE_STEP,
            outer_epochs: 3,
            lr: 0.05,
            seed: 0,
        }
    }
}

impl RobustFinetuneConfig {
    pub fn r2(seed: u64) -> Self {
        RobustFinetuneConfig { seed, ..RobustFinetuneConfig::default() }
    }

    pub fn r4(seed: u64) -> Self {
        RobustFinetuneConfig { epsilon: R4_EPSILON, seed, ..RobustFinetuneConfig::default() }
    }

    pub fn variant_name(&self) -> String {
        format!("r{:.0}", self.epsilon * 255.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.inner_steps < 1 {
            return Err(Error::InvalidArgument("inner_steps must be >= 1".into()));
        }
        if !(self.inner_relative_step > 0.0 && self.inner_relative_step <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "inner_relative_step {} outside (0,1]",
                self.inner_relative_step
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr {} must be > 0", self.lr)));
        }
        Ok(())
    }

    pub fn record(&self) -> DefenseRecord {
        DefenseRecord {
            epsilon: self.epsilon,
            inner_steps: self.inner_steps,
            relative_step: self.inner_relative_step,
            outer_epochs: self.outer_epochs,
            lr: self.lr,
            seed: self.seed,
        }
    }
}

/// The detector graph extended with an anchor parameter and the squared
/// embedding distance ||embed - anchor||^2 as an attackable loss. NodeIds of
/// the original graph remain valid in the clone.
struct EmbedObjective {
    graph: Graph,
    input: NodeId,
    embed: NodeId,
    loss: NodeId,
}

const ANCHOR: &str = "anchor";

fn require_probe(detector: &Detector) -> Result<()> {
    if detector.family() != Family::FeatureProbe {
        return Err(Error::InvalidArgument(
            "robust fine-tuning needs a frozen feature extractor (FeatureProbe)".into(),
        ));
    }
    Ok(())
}

fn build_embed_objective(detector: &Detector) -> Result<EmbedObjective> {
    require_probe(detector)?;
    let mut graph = detector.graph.clone();
    let dim: usize = graph.node_shape(detector.embed)?.iter().product();
    let anchor = graph.param(ANCHOR, Tensor::zeros(&[dim]))?;
    let loss = graph.sq_dist(detector.embed, anchor)?;
    Ok(EmbedObjective { graph, input: detector.input, embed: detector.embed, loss })
}

impl EmbedObjective {
    fn embed_of(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.graph.forward_to(self.embed, &[(self.input, image)])?.get(self.embed)?.clone())
    }

    fn set_anchor(&mut self, embedding: &Tensor) -> Result<()> {
        self.graph.set_param(ANCHOR, Tensor::new(vec![embedding.len()], embedding.data().to_vec())?)
    }

    fn loss_and_input_grad(&self, image: &Tensor) -> Result<(f64, Tensor)> {
        let feeds = [(self.input, image)];
        let acts = self.graph.forward_to(self.loss, &feeds)?;
        let loss = acts.get(self.loss)?.item()?;
        let grads = self.graph.backward_from(self.loss, &feeds, &acts, Wrt::Inputs)?;
        let g = grads
            .inputs
            .get(&self.input)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("input gradient missing".into()))?;
        Ok((loss, g))
    }

    /// PGD-L-infinity ascent on the anchored embedding distance. The anchor
    /// must already be set for `image`.
    fn pgd_drift(&self, image: &Tensor, cfg: &RobustFinetuneConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if cfg.epsilon == 0.0 {
            return Ok(image.clone());
        }
        let mut x = enforce_ball(
            image,
            random_start(image, Norm::Linf, cfg.epsilon, rng),
            Norm::Linf,
            cfg.epsilon,
        );
        let alpha = cfg.inner_relative_step * cfg.epsilon;
        for _ in 0..cfg.inner_steps {
            let (_, grad) = self.loss_and_input_grad(&x)?;
            let Some(dir) = step_direction(&grad, Norm::Linf) else { break };
            let stepped: Vec<f64> =
                x.data().iter().zip(dir.data()).map(|(v, s)| v + alpha * s).collect();
            x = Tensor::new(x.shape().to_vec(), stepped)?;
            x = enforce_ball(image, x, Norm::Linf, cfg.epsilon).clamped(0.0, 1.0);
        }
        Ok(enforce_ball(image, x, Norm::Linf, cfg.epsilon))
    }
}

/// Worst-case-embedding perturbation: PGD-L-infinity maximizing
/// ||phi(x') - phi(x)||^2 within the epsilon-ball and [0,1]. Seeded by
/// `cfg.seed`; epsilon 0 returns the input unchanged.
pub fn embed_attack(detector: &Detector, image: &Tensor, cfg: &RobustFinetuneConfig) -> Result<Tensor> {
    cfg.validate()?;
    let mut obj = build_embed_objective(detector)?;
    let clean = obj.embed_of(image)?;
    obj.set_anchor(&clean)?;
    let mut rng = rng_from(derive_seed(cfg.seed, &[tag("embed_attack")]));
    obj.pgd_drift(image, cfg, &mut rng)
}

/// Squared Euclidean distance between the detector's embeddings of `a` and
/// `b` (unnormalized, matching the fine-tuning objective).
pub fn embedding_drift(detector: &Detector, a: &Tensor, b: &Tensor) -> Result<f64> {
    let ea = detector.embed(a)?;
    let eb = detector.embed(b)?;
    Ok(ea.data().iter().zip(eb.data()).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Unsupervised adversarial fine-tuning of the extractor: per image, attack
/// the live extractor's embedding, then take one SGD step minimizing
/// ||phi'(x_adv) - phi_orig(x)||^2 against the pre-fine-tuning anchor.
/// The linear head is untouched and the extractor is returned re-frozen.
pub fn robust_finetune(
    detector: &Detector,
    images: &[Tensor],
    cfg: &RobustFinetuneConfig,
) -> Result<Detector> {
    cfg.validate()?;
    require_probe(detector)?;
    if images.is_empty() {
        return Err(Error::Empty("robust_finetune: no images".into()));
    }

    // Clean-embedding anchors from the original extractor, held fixed.
    let anchors: Vec<Tensor> = images.iter().map(|x| detector.embed(x)).collect::<Result<_>>()?;

    let mut obj = build_embed_objective(detector)?;
    let extractor: Vec<String> = detector.frozen_ids().iter().cloned().collect();
    // Mini-batch Adam: plain per-sample SGD oscillates on this objective and
    // the two conv layers carry gradients of very different scales.
    let batch = DEFENSE_BATCH.min(images.len());
    let mut opt = Adam::new(&extractor, &obj.graph);
    for epoch in 0..cfg.outer_epochs {
        let mut rng = rng_from(derive_seed(cfg.seed, &[tag("defense"), epoch as u64]));
        let mut order: Vec<usize> = (0..images.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rand::Rng::gen_range(&mut rng, 0..=i));
        }
        for chunk in order.chunks(batch) {
            let mut acc: std::collections::BTreeMap<String, Vec<f64>> =
                extractor.iter().map(|n| (n.clone(), vec![0.0; opt.len_of(n)])).collect();
            for &i in chunk {
                let image = &images[i];
                // Inner maximization and outer minimization share one
                // anchored objective (minimax on the same loss).
                obj.set_anchor(&anchors[i])?;
                let x_adv = obj.pgd_drift(image, cfg, &mut rng)?;
                let feeds = [(obj.input, &x_adv)];
                let acts = obj.graph.forward_to(obj.loss, &feeds)?;
                let grads = obj.graph.backward_from(obj.loss, &feeds, &acts, Wrt::Params)?;
                for name in &extractor {
                    let gd = grads.params[&name.clone()].data();
                    let a = acc.get_mut(name).expect("listed");
                    for (av, gv) in a.iter_mut().zip(gd) {
                        *av += gv;
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            opt.step(&mut obj.graph, &acc, scale, cfg.lr)?;
        }
    }

    let mut out = detector.clone();
    for name in &extractor {
        let value = obj
            .graph
            .param_value(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing extractor param {name:?}")))?
            .clone();
        out.graph.set_param(name, value)?;
    }
    out.meta.defense = Some(cfg.record());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::verify_constraint;
    use crate::corpus::{generate_corpus, train_eval_split, CorpusSpec};
    use crate::data::textured_test_image;
    use crate::detector::{build_compact_cnn_at, build_feature_probe_at};
    use crate::rng::rng_from;
    use std::sync::OnceLock;

    fn small_corpus() -> &'static (Vec<crate::data::LabeledImage>, Vec<crate::data::LabeledImage>) {
        static FIXTURE: OnceLock<(Vec<crate::data::LabeledImage>, Vec<crate::data::LabeledImage>)> =
            OnceLock::new();
        FIXTURE.get_or_init(|| {
            let spec = CorpusSpec {
                n_real: 60,
                n_fake: 60,
                resolution: (16, 16),
                seed: 8,
                ..Default::default()
            };
            let corpus = generate_corpus(&spec).unwrap();
            train_eval_split(&corpus, 0.67, spec.seed).unwrap()
        })
    }

    fn probe() -> Detector {
        build_feature_probe_at(2, 16, (16, 16)).unwrap()
    }

    #[test]
    fn zero_epsilon_embed_attack_is_the_identity() {
        let det = probe();
        let img = textured_test_image(16, 16);
        let cfg = RobustFinetuneConfig { epsilon: 0.0, ..RobustFinetuneConfig::r2(1) };
        let out = embed_attack(&det, &img, &cfg).unwrap();
        assert_eq!(out, img);
        assert_eq!(embedding_drift(&det, &img, &out).unwrap(), 0.0);
    }

    #[test]
    fn embed_attack_stays_in_the_ball_and_beats_random_noise() {
        let det = probe();
        let (train, _) = small_corpus();
        let cfg = RobustFinetuneConfig::r4(3);
        let mut wins = 0;
        let batch = &train[..20];
        for (i, img) in batch.iter().enumerate() {
            let adv = embed_attack(&det, &img.pixels, &cfg).unwrap();
            assert!(verify_constraint(&img.pixels, &adv, Norm::Linf, cfg.epsilon, false).unwrap());
            assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

            let mut rng = rng_from(derive_seed(900, &[i as u64]));
            let noisy = enforce_ball(
                &img.pixels,
                random_start(&img.pixels, Norm::Linf, cfg.epsilon, &mut rng),
                Norm::Linf,
                cfg.epsilon,
            );
            let attacked = embedding_drift(&det, &img.pixels, &adv).unwrap();
            let random = embedding_drift(&det, &img.pixels, &noisy).unwrap();
            if attacked >= random {
                wins += 1;
            }
        }
        assert!(wins * 100 >= batch.len() * 95, "attack beat noise on {wins}/{}", batch.len());
    }

    #[test]
    fn embed_attack_is_seeded() {
        let det = probe();
        let img = textured_test_image(16, 16);
        let a = embed_attack(&det, &img, &RobustFinetuneConfig::r2(5)).unwrap();
        let b = embed_attack(&det, &img, &RobustFinetuneConfig::r2(5)).unwrap();
        let c = embed_attack(&det, &img, &RobustFinetuneConfig::r2(6)).unwrap();
        assert_eq!(a, b);
        assert!(a.max_abs_diff(&c).unwrap() > 0.0);
    }

    #[test]
    fn wrong_family_and_zero_epoch_contracts() {
        let cnn = build_compact_cnn_at(0, (16, 16)).unwrap();
        let imgs = vec![textured_test_image(16, 16)];
        assert!(robust_finetune(&cnn, &imgs, &RobustFinetuneConfig::r2(0)).is_err());
        assert!(embed_attack(&cnn, &imgs[0], &RobustFinetuneConfig::r2(0)).is_err());

        let det = probe();
        let cfg = RobustFinetuneConfig { outer_epochs: 0, ..RobustFinetuneConfig::r2(0) };
        let out = robust_finetune(&det, &imgs, &cfg).unwrap();
        assert_eq!(det.params_snapshot(), out.params_snapshot());
        assert_eq!(out.meta.defense.as_ref().unwrap().epsilon, R2_EPSILON);
        assert!(robust_finetune(&det, &[], &cfg).is_err());
    }

    #[test]
    fn finetune_keeps_the_head_bit_identical_and_moves_the_extractor() {
        let det = probe();
        let (train, _) = small_corpus();
        let images: Vec<Tensor> = train.iter().take(30).map(|s| s.pixels.clone()).collect();
        let cfg = RobustFinetuneConfig { outer_epochs: 1, ..RobustFinetuneConfig::r2(7) };
        let tuned = robust_finetune(&det, &images, &cfg).unwrap();

        for name in ["head.w", "head.b"] {
            assert_eq!(
                det.graph.param_value(name).unwrap(),
                tuned.graph.param_value(name).unwrap(),
                "{name}"
            );
        }
        assert_eq!(det.frozen_ids(), tuned.frozen_ids());
        let moved = det
            .frozen_ids()
            .iter()
            .any(|n| {
                det.graph
                    .param_value(n)
                    .unwrap()
                    .max_abs_diff(tuned.graph.param_value(n).unwrap())
                    .unwrap()
                    > 0.0
            });
        assert!(moved, "extractor params should change");

        let again = robust_finetune(&det, &images, &cfg).unwrap();
        for ((na, ta), (nb, tb)) in tuned.params_snapshot().iter().zip(again.params_snapshot().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "{na} must be reproducible");
        }
    }

    #[test]
    fn finetuning_reduces_heldout_adversarial_drift() {
        let det = probe();
        let (train, eval) = small_corpus();
        let images: Vec<Tensor> = train.iter().map(|s| s.pixels.clone()).collect();
        let cfg = RobustFinetuneConfig { outer_epochs: 2, lr: 0.05, ..RobustFinetuneConfig::r2(4) };
        let tuned = robust_finetune(&det, &images, &cfg).unwrap();

        // Drift against each extractor's own worst-case perturbation, with
        // the original clean embedding as the common reference point.
        let mut pre = 0.0;
        let mut post = 0.0;
        let held: Vec<&Tensor> = eval.iter().take(20).map(|s| &s.pixels).collect();
        for (i, x) in held.iter().enumerate() {
            let salt = RobustFinetuneConfig { seed: 100 + i as u64, ..cfg };
            let adv_pre = embed_attack(&det, x, &salt).unwrap();
            let adv_post = embed_attack(&tuned, x, &salt).unwrap();
            pre += sq_dist_to_anchor(&det, x, &det, &adv_pre);
            post += sq_dist_to_anchor(&det, x, &tuned, &adv_post);
        }
        assert!(
            post < pre,
            "mean drift should fall: pre {:.5} post {:.5}",
            pre / held.len() as f64,
            post / held.len() as f64
        );
    }

    fn sq_dist_to_anchor(anchor_det: &Detector, x: &Tensor, live: &Detector, adv: &Tensor) -> f64 {
        let a = anchor_det.embed(x).unwrap();
        let b = live.embed(adv).unwrap();
        a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum()
    }
}
