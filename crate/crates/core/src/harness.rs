//! Experiment pipelines composing corpus, detectors, attacks, degradations
//! and the defense into reproducible studies, plus report persistence.
//!
//! Every pipeline is a pure function of its [`ExperimentConfig`]: equal
//! configs give byte-identical CSV reports. Quantities computable by two
//! pipelines (clean AUC, white-box diagonal ASR, ...) agree exactly because
//! all attack seeds derive from `(global_seed, crafting detector, method,
//! norm, epsilon)` and evaluation sets are shared through [`Prepared`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{
    attack_batch, default_l2_grid, default_linf_grid, sub_quantization_l2_grid,
    sub_quantization_linf_grid, AdversarialResult, AttackConfig, Method, Norm,
};
use crate::corpus::{generate_corpus, load_dataset, train_eval_split, CorpusSpec, Labeling};
use crate::data::{Label, LabeledImage, ScoredSample};
use crate::defense::{robust_finetune, RobustFinetuneConfig};
use crate::degrade::{
    blur_sigma_grid, degrade, jpeg_quality_grid, noise_level_grid, Degradation,
};
use crate::detector::{
    build_compact_cnn_at, build_feature_probe_at, load_detector, train_detector, Detector, Family,
    TrainConfig, DEFAULT_FEATURE_DIM,
};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, ensure_writable_dir};
use crate::metrics::{
    accuracy_at_threshold, attack_success_rate, auc_roc, mean_perturbation_spectrum, tpr_at_fpr,
    write_pgm16, MeanPerturbation,
};
use crate::rng::{derive_seed, tag};
use crate::tensor::Tensor;

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Reports quote TPR at this false-positive rate.
pub const REPORT_FPR: f64 = 0.05;
/// Default number of held-out images (balanced) that epsilon > 0 attacks run on.
pub const DEFAULT_EVAL_ATTACK_SUBSET: usize = 160;
/// Default number of unlabeled pool images feeding robust fine-tuning.
pub const DEFAULT_DEFENSE_POOL: usize = 256;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
pub const DEFAULT_GLOBAL_SEED: u64 = 7;

/// Where evaluation images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// Deterministic synthetic corpus.
    Synthetic(CorpusSpec),
    /// PNG directory ingested at a fixed resolution.
    Dataset { path: PathBuf, labeling: Labeling, resolution: (usize, usize) },
}

/// One detector to evaluate: loaded from `checkpoint` when that file exists,
/// trained fresh (in memory) otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub family: Family,
    pub seed: u64,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub train_fresh: bool,
}

fn default_true() -> bool {
    true
}

impl DetectorSpec {
    pub fn fresh(family: Family, seed: u64) -> Self {
        DetectorSpec { family, seed, checkpoint: None, train_fresh: true }
    }

    pub fn validate(&self) -> Result<()> {
        let have_checkpoint = self.checkpoint.as_deref().is_some_and(Path::exists);
        if !have_checkpoint && !self.train_fresh {
            return Err(Error::InvalidArgument(format!(
                "detector {}_{}: checkpoint missing and train_fresh is false",
                self.family.name(),
                self.seed
            )));
        }
        Ok(())
    }
}

/// A sweep of one attack method/norm over several epsilon values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackGrid {
    pub method: Method,
    pub norm: Norm,
    pub epsilons: Vec<f64>,
}

impl AttackGrid {
    pub fn new(method: Method, norm: Norm, epsilons: Vec<f64>) -> Self {
        AttackGrid { method, norm, epsilons }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() {
            return Err(Error::Empty(format!(
                "attack grid {} {}: no epsilon values",
                self.method.name(),
                self.norm.name()
            )));
        }
        for &e in &self.epsilons {
            if !(e.is_finite() && e >= 0.0) {
                return Err(Error::InvalidArgument(format!("grid epsilon {e} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Concrete attack at one epsilon. The caller supplies the derived seed.
    pub fn config_at(&self, epsilon: f64, seed: u64) -> AttackConfig {
        match self.method {
            Method::Fgsm => AttackConfig::fgsm(self.norm, epsilon, seed),
            Method::Bim => AttackConfig::bim(self.norm, epsilon, seed),
            Method::Pgd => AttackConfig::pgd(self.norm, epsilon, seed),
        }
    }

    /// Grid epsilons with a clean baseline prepended: sorted, deduplicated,
    /// starting at 0.
    pub fn epsilons_with_baseline(&self) -> Vec<f64> {
        let mut eps = self.epsilons.clone();
        eps.push(0.0);
        eps.sort_by(|a, b| a.partial_cmp(b).expect("validated finite"));
        eps.dedup();
        eps
    }
}

/// The paper-shaped default white-box grids: every method crossed with the
/// default and sub-quantization epsilon grids of both norms.
pub fn default_attack_grids() -> Vec<AttackGrid> {
    let mut linf = sub_quantization_linf_grid();
    linf.extend(default_linf_grid());
    linf.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    linf.dedup();
    let mut l2 = sub_quantization_l2_grid();
    l2.extend(default_l2_grid());
    l2.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    l2.dedup();
    let mut grids = Vec::new();
    for method in [Method::Fgsm, Method::Bim, Method::Pgd] {
        grids.push(AttackGrid::new(method, Norm::Linf, linf.clone()));
        grids.push(AttackGrid::new(method, Norm::L2, l2.clone()));
    }
    grids
}

/// Transfer-matrix default: the strong end of the L-infinity grid only.
pub fn default_transfer_grids() -> Vec<AttackGrid> {
    vec![
        AttackGrid::new(Method::Bim, Norm::Linf, vec![8.0 / 255.0]),
        AttackGrid::new(Method::Pgd, Norm::Linf, vec![8.0 / 255.0]),
    ]
}

/// Defense evaluation default: all methods at the small-epsilon end plus the
/// strong 8/255 point, L-infinity.
pub fn default_defense_attack_grids() -> Vec<AttackGrid> {
    let eps = vec![1.0 / 255.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0];
    vec![
        AttackGrid::new(Method::Pgd, Norm::Linf, eps.clone()),
        AttackGrid::new(Method::Bim, Norm::Linf, eps.clone()),
        AttackGrid::new(Method::Fgsm, Norm::Linf, eps),
    ]
}

/// Default degradation grid: identity, the JPEG quality sweep, the blur
/// sigma sweep and the additive-noise sweep. Noise seeds are explicit in the
/// config (one per level) so reruns are bit-identical.
pub fn default_degradations() -> Vec<Degradation> {
    let mut out = vec![Degradation::Identity];
    out.extend(jpeg_quality_grid().into_iter().map(|quality| Degradation::Jpeg { quality }));
    out.extend(blur_sigma_grid().into_iter().map(|sigma| Degradation::Blur { sigma }));
    out.extend(
        noise_level_grid().into_iter().map(|level| Degradation::Noise { level, seed: level as u64 }),
    );
    out
}

/// Full experiment description; every pipeline takes this one type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub detectors: Vec<DetectorSpec>,
    /// White-box sweep grids.
    pub attacks: Vec<AttackGrid>,
    /// Transfer-matrix grids (crafted per source, applied to every target).
    #[serde(default = "default_transfer_grids")]
    pub transfer: Vec<AttackGrid>,
    /// Degradations applied post-attack in the sweep pipeline.
    pub degradations: Vec<Degradation>,
    /// Attack used by the white-box/black-box degradation regimes.
    #[serde(default = "default_degradation_attack")]
    pub degradation_attack: AttackGrid,
    /// Robust fine-tuning variants (empty disables the defense pipeline).
    #[serde(default)]
    pub defense: Vec<RobustFinetuneConfig>,
    /// Attacks evaluated against undefended vs defended models.
    #[serde(default = "default_defense_attack_grids")]
    pub defense_attacks: Vec<AttackGrid>,
    /// Unlabeled training-pool size for robust fine-tuning.
    #[serde(default = "default_defense_pool")]
    pub defense_pool: usize,
    /// Balanced held-out subset size that epsilon > 0 attacks run on.
    #[serde(default = "default_eval_attack_subset")]
    pub eval_attack_subset: usize,
    pub output_dir: PathBuf,
    pub global_seed: u64,
}

fn default_train_fraction() -> f64 {
    DEFAULT_TRAIN_FRACTION
}

fn default_eval_attack_subset() -> usize {
    DEFAULT_EVAL_ATTACK_SUBSET
}

fn default_defense_pool() -> usize {
    DEFAULT_DEFENSE_POOL
}

fn default_degradation_attack() -> AttackGrid {
    AttackGrid::new(Method::Pgd, Norm::Linf, vec![8.0 / 255.0])
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusSource::Synthetic(CorpusSpec::default()),
            train_fraction: DEFAULT_TRAIN_FRACTION,
            detectors: vec![
                DetectorSpec::fresh(Family::FeatureProbe, 11),
                DetectorSpec::fresh(Family::FeatureProbe, 12),
                DetectorSpec::fresh(Family::CompactCnn, 21),
                DetectorSpec::fresh(Family::CompactCnn, 22),
            ],
            attacks: default_attack_grids(),
            transfer: default_transfer_grids(),
            degradations: default_degradations(),
            degradation_attack: default_degradation_attack(),
            defense: vec![RobustFinetuneConfig::r2(0), RobustFinetuneConfig::r4(0)],
            defense_attacks: default_defense_attack_grids(),
            defense_pool: DEFAULT_DEFENSE_POOL,
            eval_attack_subset: DEFAULT_EVAL_ATTACK_SUBSET,
            output_dir: PathBuf::from("out"),
            global_seed: DEFAULT_GLOBAL_SEED,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train_fraction {} outside (0,1)",
                self.train_fraction
            )));
        }
        if self.detectors.is_empty() {
            return Err(Error::Empty("config lists no detectors".into()));
        }
        for d in &self.detectors {
            d.validate()?;
        }
        for grid in
            self.attacks.iter().chain(&self.transfer).chain(&self.defense_attacks)
        {
            grid.validate()?;
        }
        self.degradation_attack.validate()?;
        for d in &self.degradations {
            d.validate()?;
        }
        for cfg in &self.defense {
            cfg.validate()?;
        }
        if self.eval_attack_subset < 2 {
            return Err(Error::InvalidArgument("eval_attack_subset must be >= 2".into()));
        }
        if self.defense_pool == 0 {
            return Err(Error::InvalidArgument("defense_pool must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex-encoded.
    pub fn sha256(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        let digest = Sha256::digest(&bytes);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Loads an [`ExperimentConfig`] from a JSON file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// One report record. Optional fields stay empty in CSV when a quantity does
/// not apply to the row (e.g. ASR on a benign row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub detector: String,
    /// `target` for rows about the evaluated model, `source` for rows
    /// aggregated per crafting surrogate.
    pub role: String,
    /// Surrogate the adversarial examples were crafted on, when different
    /// from `detector`.
    pub source: Option<String>,
    pub attack: Option<String>,
    pub norm: Option<String>,
    pub epsilon: Option<f64>,
    pub degradation: Option<String>,
    /// Degradation-sweep regime: `benign`, `whitebox` or `blackbox`.
    pub regime: Option<String>,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub tpr_at_5fpr: Option<f64>,
    pub asr: Option<f64>,
    /// ASR restricted to the fake-to-real flip direction.
    pub asr_fake_to_real: Option<f64>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_feature_distance: Option<f64>,
}

impl EvalRow {
    fn target(detector: &str) -> Self {
        EvalRow {
            detector: detector.to_string(),
            role: "target".into(),
            source: None,
            attack: None,
            norm: None,
            epsilon: None,
            degradation: None,
            regime: None,
            accuracy: None,
            auc: None,
            tpr_at_5fpr: None,
            asr: None,
            asr_fake_to_real: None,
            mean_psnr: None,
            mean_ssim: None,
            mean_feature_distance: None,
        }
    }
}

/// Run identity carried by every report. The timestamp lives only in the
/// JSON artifact; CSV bytes are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub toolkit_version: String,
    pub global_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub timestamp_unix: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub provenance: Provenance,
}

/// ASR matrix for one (method, norm, epsilon): `asr[source][target]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub method: Method,
    pub norm: Norm,
    pub epsilon: f64,
    pub detectors: Vec<String>,
    pub asr: Vec<Vec<Option<f64>>>,
}

/// Mean adversarial perturbation and its spectrum for one sweep cell.
#[derive(Debug, Clone)]
pub struct SpectrumArtifact {
    pub name: String,
    pub perturbation: MeanPerturbation,
}

/// Shared evaluation state: split corpus, the balanced attack subset, and
/// all detectors trained or loaded.
pub struct Prepared {
    pub train: Vec<LabeledImage>,
    pub eval: Vec<LabeledImage>,
    pub attack_set: Vec<LabeledImage>,
    pub detectors: Vec<Detector>,
}

fn split_seed(config: &ExperimentConfig) -> u64 {
    derive_seed(config.global_seed, &[tag("split")])
}

/// Seed for crafting adversarial examples in a sweep cell. Keyed by the
/// crafting detector only (plus the cell), so the white-box diagonal and the
/// transfer matrix reuse bit-identical adversarials.
fn craft_seed(global: u64, crafter: &str, method: Method, norm: Norm, epsilon: f64) -> u64 {
    derive_seed(
        global,
        &[tag("craft"), tag(crafter), tag(method.name()), tag(norm.name()), epsilon.to_bits()],
    )
}

fn timestamp_now() -> Option<u64> {
    SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs())
}

fn make_provenance(config: &ExperimentConfig) -> Result<Provenance> {
    let mut seeds = BTreeMap::new();
    seeds.insert("global".to_string(), config.global_seed);
    seeds.insert("split".to_string(), split_seed(config));
    if let CorpusSource::Synthetic(spec) = &config.corpus {
        seeds.insert("corpus".to_string(), spec.seed);
    }
    Ok(Provenance {
        config_sha256: config.sha256()?,
        toolkit_version: TOOLKIT_VERSION.to_string(),
        global_seed: config.global_seed,
        seeds,
        timestamp_unix: timestamp_now(),
    })
}

/// Materializes the corpus, splits it, picks the balanced attack subset and
/// trains or loads every detector. Rejects unwritable output directories and
/// non-finite training losses up front.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    ensure_writable_dir(&config.output_dir)?;

    let corpus = match &config.corpus {
        CorpusSource::Synthetic(spec) => generate_corpus(spec)?,
        CorpusSource::Dataset { path, labeling, resolution } => {
            load_dataset(path, *labeling, *resolution)?.images
        }
    };
    let (train, eval) = train_eval_split(&corpus, config.train_fraction, split_seed(config))?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Empty("train/eval split left an empty side".into()));
    }
    let attack_set = balanced_subset(&eval, config.eval_attack_subset)?;

    let shape = train[0].pixels.shape().to_vec();
    let resolution = (shape[1], shape[2]);
    let mut detectors = Vec::with_capacity(config.detectors.len());
    for spec in &config.detectors {
        let det = match &spec.checkpoint {
            Some(p) if p.exists() => load_detector(p)?,
            _ => train_fresh(spec, &train, resolution)?,
        };
        if det.input_shape() != shape.as_slice() {
            return Err(Error::shape(
                format!("detector {}", det.name()),
                format!("{shape:?}"),
                format!("{:?}", det.input_shape()),
            ));
        }
        if let Some(rec) = &det.meta.trained {
            if rec.epoch_losses.iter().any(|l| !l.is_finite()) {
                return Err(Error::NonFinite(format!("training loss for {}", det.name())));
            }
        }
        detectors.push(det);
    }
    Ok(Prepared { train, eval, attack_set, detectors })
}

fn train_fresh(
    spec: &DetectorSpec,
    train: &[LabeledImage],
    resolution: (usize, usize),
) -> Result<Detector> {
    let fresh = match spec.family {
        Family::FeatureProbe => build_feature_probe_at(spec.seed, DEFAULT_FEATURE_DIM, resolution)?,
        Family::CompactCnn => build_compact_cnn_at(spec.seed, resolution)?,
    };
    let cfg = TrainConfig { seed: spec.seed, ..TrainConfig::shipped(spec.family) };
    train_detector(&fresh, train, &cfg)
}

/// First `k/2` images of each class, in evaluation order.
fn balanced_subset(eval: &[LabeledImage], k: usize) -> Result<Vec<LabeledImage>> {
    let per_class = (k / 2).max(1);
    let mut out: Vec<LabeledImage> = Vec::new();
    for label in [Label::Real, Label::Fake] {
        let taken: Vec<_> =
            eval.iter().filter(|s| s.label == label).take(per_class).cloned().collect();
        if taken.is_empty() {
            return Err(Error::SingleClass(format!("no {} images in the eval split", label.name())));
        }
        out.extend(taken);
    }
    Ok(out)
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Accuracy at the detector threshold, AUC and TPR@5%FPR of a scored set.
/// TPR is omitted when the set is too small for the FPR resolution.
fn scored_metrics(det: &Detector, scored: &[ScoredSample]) -> Result<(f64, f64, Option<f64>)> {
    let tpr = match tpr_at_fpr(scored, REPORT_FPR) {
        Ok(v) => Some(v),
        Err(Error::InvalidArgument(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((accuracy_at_threshold(scored, det.threshold())?, auc_roc(scored)?, tpr))
}

/// ASR restricted to truth-Fake samples the detector classified correctly
/// before the attack.
fn asr_fake_to_real(results: &[AdversarialResult]) -> Option<f64> {
    let mut attempts = 0usize;
    let mut flips = 0usize;
    for r in results {
        if r.label == Label::Fake && r.pre_label == Label::Fake {
            attempts += 1;
            if r.post_label != r.pre_label {
                flips += 1;
            }
        }
    }
    (attempts > 0).then(|| flips as f64 / attempts as f64)
}

/// Post-attack metrics of the crafting detector itself.
fn whitebox_row(
    det: &Detector,
    grid: &AttackGrid,
    epsilon: f64,
    results: &[AdversarialResult],
) -> Result<EvalRow> {
    let scored: Vec<ScoredSample> = results
        .iter()
        .map(|r| ScoredSample { score: r.post_score, label: r.label, id: r.original_id.clone() })
        .collect();
    let (accuracy, auc, tpr) = scored_metrics(det, &scored)?;
    let truth: Vec<Label> = results.iter().map(|r| r.label).collect();
    let mut row = EvalRow::target(&det.name());
    row.attack = Some(grid.method.name().to_string());
    row.norm = Some(grid.norm.name().to_string());
    row.epsilon = Some(epsilon);
    row.accuracy = Some(accuracy);
    row.auc = Some(auc);
    row.tpr_at_5fpr = tpr;
    row.asr = attack_success_rate(results, &truth)?;
    row.asr_fake_to_real = asr_fake_to_real(results);
    row.mean_psnr = mean_opt(results.iter().map(|r| Some(r.quality.psnr)));
    row.mean_ssim = mean_opt(results.iter().map(|r| r.quality.ssim));
    row.mean_feature_distance = mean_opt(results.iter().map(|r| r.quality.feature_distance));
    Ok(row)
}

/// Re-scores adversarials crafted elsewhere on `target`; returns the scored
/// set, overall ASR and fake-to-real ASR under the target's labels.
fn rescore_on(
    target: &Detector,
    originals: &[LabeledImage],
    results: &[AdversarialResult],
) -> Result<(Vec<ScoredSample>, Option<f64>, Option<f64>)> {
    if originals.len() != results.len() {
        return Err(Error::shape(
            "rescore_on",
            format!("{} results", originals.len()),
            format!("{}", results.len()),
        ));
    }
    let thr = target.threshold();
    let mut scored = Vec::with_capacity(results.len());
    let (mut attempts, mut flips) = (0usize, 0usize);
    let (mut fake_attempts, mut fake_flips) = (0usize, 0usize);
    for (orig, r) in originals.iter().zip(results) {
        let pre = target.predict_label(&orig.pixels, thr)?;
        let post_score = target.score(&r.adversarial)?;
        let post = if post_score >= thr { Label::Fake } else { Label::Real };
        scored.push(ScoredSample { score: post_score, label: orig.label, id: orig.id.clone() });
        if pre == orig.label {
            attempts += 1;
            if post != pre {
                flips += 1;
            }
            if orig.label == Label::Fake {
                fake_attempts += 1;
                if post != pre {
                    fake_flips += 1;
                }
            }
        }
    }
    let asr = (attempts > 0).then(|| flips as f64 / attempts as f64);
    let asr_fake = (fake_attempts > 0).then(|| fake_flips as f64 / fake_attempts as f64);
    Ok((scored, asr, asr_fake))
}

/// Clean baseline study: accuracy at the shipped threshold, AUC and
/// TPR@5%FPR per detector on the held-out split. One row per detector.
pub fn run_benign(config: &ExperimentConfig) -> Result<EvalReport> {
    let prep = prepare(config)?;
    let mut rows = Vec::new();
    for det in &prep.detectors {
        let scored = det.score_batch(&prep.eval)?;
        let (accuracy, auc, tpr) = scored_metrics(det, &scored)?;
        let mut row = EvalRow::target(&det.name());
        row.accuracy = Some(accuracy);
        row.auc = Some(auc);
        row.tpr_at_5fpr = tpr;
        rows.push(row);
    }
    Ok(EvalReport { rows, provenance: make_provenance(config)? })
}

/// White-box sweep: every detector attacked over every configured grid, with
/// a clean epsilon = 0 baseline row per grid. Epsilon 0 runs on the full
/// held-out split (so its AUC equals the benign AUC); epsilon > 0 runs on
/// the balanced attack subset. Also returns the mean-perturbation spectrum
/// at each grid's largest epsilon.
pub fn run_whitebox(config: &ExperimentConfig) -> Result<(EvalReport, Vec<SpectrumArtifact>)> {
    let prep = prepare(config)?;
    let mut rows = Vec::new();
    let mut spectra = Vec::new();
    for det in &prep.detectors {
        for grid in &config.attacks {
            let eps_grid = grid.epsilons_with_baseline();
            let top = *eps_grid.last().expect("non-empty");
            for &eps in &eps_grid {
                let seed = craft_seed(config.global_seed, &det.name(), grid.method, grid.norm, eps);
                let cfg = grid.config_at(eps, seed);
                let set = if eps == 0.0 { &prep.eval } else { &prep.attack_set };
                let results = attack_batch(det, set, &cfg)?;
                rows.push(whitebox_row(det, grid, eps, &results)?);
                if eps == top && eps > 0.0 {
                    let originals: Vec<Tensor> =
                        set.iter().map(|s| s.pixels.clone()).collect();
                    let adversarials: Vec<Tensor> =
                        results.iter().map(|r| r.adversarial.clone()).collect();
                    spectra.push(SpectrumArtifact {
                        name: format!(
                            "spectrum_{}_{}_{}",
                            det.name(),
                            grid.method.name(),
                            grid.norm.name()
                        ),
                        perturbation: mean_perturbation_spectrum(&originals, &adversarials)?,
                    });
                }
            }
        }
    }
    Ok((EvalReport { rows, provenance: make_provenance(config)? }, spectra))
}

/// Black-box transfer study: adversarials crafted on each source, applied to
/// every target. Row per (source, target, grid, epsilon); matrices carry the
/// same ASR values in `asr[source][target]` form.
pub fn run_transfer_matrix(
    config: &ExperimentConfig,
) -> Result<(EvalReport, Vec<TransferMatrix>)> {
    let prep = prepare(config)?;
    if prep.detectors.len() < 2 {
        return Err(Error::InvalidArgument("transfer study needs at least two detectors".into()));
    }
    let names: Vec<String> = prep.detectors.iter().map(|d| d.name()).collect();
    let mut rows = Vec::new();
    let mut matrices = Vec::new();
    for grid in &config.transfer {
        for &eps in &grid.epsilons {
            let mut matrix =
                vec![vec![None; prep.detectors.len()]; prep.detectors.len()];
            for (si, source) in prep.detectors.iter().enumerate() {
                let seed =
                    craft_seed(config.global_seed, &source.name(), grid.method, grid.norm, eps);
                let results = attack_batch(source, &prep.attack_set, &grid.config_at(eps, seed))?;
                for (ti, target) in prep.detectors.iter().enumerate() {
                    let (scored, asr, asr_fake) =
                        rescore_on(target, &prep.attack_set, &results)?;
                    let (accuracy, auc, tpr) = scored_metrics(target, &scored)?;
                    matrix[si][ti] = asr;
                    let mut row = EvalRow::target(&names[ti]);
                    row.source = Some(names[si].clone());
                    row.attack = Some(grid.method.name().to_string());
                    row.norm = Some(grid.norm.name().to_string());
                    row.epsilon = Some(eps);
                    row.accuracy = Some(accuracy);
                    row.auc = Some(auc);
                    row.tpr_at_5fpr = tpr;
                    row.asr = asr;
                    row.asr_fake_to_real = asr_fake;
                    rows.push(row);
                }
            }
            matrices.push(TransferMatrix {
                method: grid.method,
                norm: grid.norm,
                epsilon: eps,
                detectors: names.clone(),
                asr: matrix,
            });
        }
    }
    Ok((EvalReport { rows, provenance: make_provenance(config)? }, matrices))
}

fn degrade_set(images: &[LabeledImage], d: &Degradation) -> Result<Vec<LabeledImage>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            // Noise draws a fresh per-image stream from the configured seed.
            let cfg = match *d {
                Degradation::Noise { level, seed } => Degradation::Noise {
                    level,
                    seed: derive_seed(seed, &[tag("img"), i as u64]),
                },
                other => other,
            };
            Ok(LabeledImage {
                pixels: degrade(&img.pixels, &cfg)?,
                label: img.label,
                id: img.id.clone(),
            })
        })
        .collect()
}

fn degraded_adversarials(
    results: &[AdversarialResult],
    originals: &[LabeledImage],
    d: &Degradation,
) -> Result<Vec<LabeledImage>> {
    let carrier: Vec<LabeledImage> = results
        .iter()
        .zip(originals)
        .map(|(r, o)| LabeledImage { pixels: r.adversarial.clone(), label: o.label, id: o.id.clone() })
        .collect();
    degrade_set(&carrier, d)
}

/// Degradation interaction study over three regimes: `benign` (clean images
/// degraded), `whitebox` (each detector's own adversarials degraded) and
/// `blackbox` (per source, mean accuracy across the other targets).
/// Degradation is always applied after the attack.
pub fn run_degradation_sweep(config: &ExperimentConfig) -> Result<EvalReport> {
    let prep = prepare(config)?;
    let grid = &config.degradation_attack;
    let mut rows = Vec::new();

    for d in &config.degradations {
        let degraded_eval = degrade_set(&prep.eval, d)?;
        for det in &prep.detectors {
            let scored = det.score_batch(&degraded_eval)?;
            let (accuracy, auc, tpr) = scored_metrics(det, &scored)?;
            let mut row = EvalRow::target(&det.name());
            row.degradation = Some(d.name());
            row.regime = Some("benign".into());
            row.accuracy = Some(accuracy);
            row.auc = Some(auc);
            row.tpr_at_5fpr = tpr;
            rows.push(row);
        }
    }

    for &eps in &grid.epsilons {
        // One crafted batch per detector, shared by every degradation.
        let mut crafted = Vec::new();
        for det in &prep.detectors {
            let seed = craft_seed(config.global_seed, &det.name(), grid.method, grid.norm, eps);
            crafted.push(attack_batch(det, &prep.attack_set, &grid.config_at(eps, seed))?);
        }

        for d in &config.degradations {
            for (det, results) in prep.detectors.iter().zip(&crafted) {
                let degraded = degraded_adversarials(results, &prep.attack_set, d)?;
                let scored = det.score_batch(&degraded)?;
                let (accuracy, auc, tpr) = scored_metrics(det, &scored)?;
                let mut row = EvalRow::target(&det.name());
                row.attack = Some(grid.method.name().to_string());
                row.norm = Some(grid.norm.name().to_string());
                row.epsilon = Some(eps);
                row.degradation = Some(d.name());
                row.regime = Some("whitebox".into());
                row.accuracy = Some(accuracy);
                row.auc = Some(auc);
                row.tpr_at_5fpr = tpr;
                rows.push(row);
            }

            for (si, source) in prep.detectors.iter().enumerate() {
                let degraded = degraded_adversarials(&crafted[si], &prep.attack_set, d)?;
                let mut accs = Vec::new();
                for (ti, target) in prep.detectors.iter().enumerate() {
                    if ti == si {
                        continue;
                    }
                    let scored = target.score_batch(&degraded)?;
                    accs.push(accuracy_at_threshold(&scored, target.threshold())?);
                }
                let mut row = EvalRow::target(&source.name());
                row.role = "source".into();
                row.attack = Some(grid.method.name().to_string());
                row.norm = Some(grid.norm.name().to_string());
                row.epsilon = Some(eps);
                row.degradation = Some(d.name());
                row.regime = Some("blackbox".into());
                row.accuracy = Some(accs.iter().sum::<f64>() / accs.len() as f64);
                rows.push(row);
            }
        }
    }
    Ok(EvalReport { rows, provenance: make_provenance(config)? })
}

/// Defense study: robust variants fine-tuned from the first FeatureProbe,
/// then clean rows (full held-out split) and attacked rows (attack subset)
/// for undefended vs each variant, plus transfer rows with the variants as
/// targets of adversarials crafted on the base detectors.
pub fn run_defense_eval(config: &ExperimentConfig) -> Result<EvalReport> {
    if config.defense.is_empty() {
        return Err(Error::Empty("defense config list is empty".into()));
    }
    let prep = prepare(config)?;
    let probe = prep
        .detectors
        .iter()
        .find(|d| d.family() == Family::FeatureProbe)
        .ok_or_else(|| Error::InvalidArgument("defense eval needs a FeatureProbe detector".into()))?;

    let pool: Vec<Tensor> = balanced_subset(&prep.train, config.defense_pool)?
        .into_iter()
        .map(|s| s.pixels)
        .collect();
    let mut models = vec![probe.clone()];
    for cfg in &config.defense {
        models.push(robust_finetune(probe, &pool, cfg)?);
    }

    let mut rows = Vec::new();
    for model in &models {
        let scored = model.score_batch(&prep.eval)?;
        let (accuracy, auc, tpr) = scored_metrics(model, &scored)?;
        let mut row = EvalRow::target(&model.name());
        row.accuracy = Some(accuracy);
        row.auc = Some(auc);
        row.tpr_at_5fpr = tpr;
        rows.push(row);
    }

    for model in &models {
        for grid in &config.defense_attacks {
            for &eps in &grid.epsilons {
                let seed =
                    craft_seed(config.global_seed, &model.name(), grid.method, grid.norm, eps);
                let results = attack_batch(model, &prep.attack_set, &grid.config_at(eps, seed))?;
                rows.push(whitebox_row(model, grid, eps, &results)?);
            }
        }
    }

    // Black-box rows: base detectors as surrogates, variants as targets.
    for grid in &config.transfer {
        for &eps in &grid.epsilons {
            for source in &prep.detectors {
                let seed =
                    craft_seed(config.global_seed, &source.name(), grid.method, grid.norm, eps);
                let results = attack_batch(source, &prep.attack_set, &grid.config_at(eps, seed))?;
                for variant in &models[1..] {
                    let (scored, asr, asr_fake) = rescore_on(variant, &prep.attack_set, &results)?;
                    let (accuracy, auc, tpr) = scored_metrics(variant, &scored)?;
                    let mut row = EvalRow::target(&variant.name());
                    row.source = Some(source.name());
                    row.attack = Some(grid.method.name().to_string());
                    row.norm = Some(grid.norm.name().to_string());
                    row.epsilon = Some(eps);
                    row.accuracy = Some(accuracy);
                    row.auc = Some(auc);
                    row.tpr_at_5fpr = tpr;
                    row.asr = asr;
                    row.asr_fake_to_real = asr_fake;
                    rows.push(row);
                }
            }
        }
    }
    Ok(EvalReport { rows, provenance: make_provenance(config)? })
}

/// Writes `{stem}.csv` (rows only, byte-reproducible) and `{stem}.json`
/// (rows + provenance) atomically; returns the written paths.
pub fn emit_report(report: &EvalReport, out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    ensure_writable_dir(out_dir)?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in &report.rows {
        writer.serialize(row)?;
    }
    let csv_bytes =
        writer.into_inner().map_err(|e| Error::InvalidArgument(format!("csv flush: {e}")))?;
    let csv_path = out_dir.join(format!("{stem}.csv"));
    atomic_write(&csv_path, &csv_bytes)?;

    let json_path = out_dir.join(format!("{stem}.json"));
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    atomic_write(&json_path, &json)?;
    Ok(vec![csv_path, json_path])
}

fn eps_slug(eps: f64) -> String {
    format!("{eps:.6}").replace('.', "p")
}

/// Writes one CSV grid per matrix with the average row, average column and
/// overall-average corner appended; returns the written paths.
pub fn write_transfer_matrices(
    matrices: &[TransferMatrix],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    ensure_writable_dir(out_dir)?;
    let mut paths = Vec::new();
    for m in matrices {
        let n = m.detectors.len();
        let cell = |v: &Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let mut text = String::from("source\\target");
        for name in &m.detectors {
            text.push(',');
            text.push_str(name);
        }
        text.push_str(",avg\n");
        let mut col_sums = vec![(0.0, 0usize); n];
        let mut all = (0.0, 0usize);
        for (si, name) in m.detectors.iter().enumerate() {
            text.push_str(name);
            let mut row_sum = (0.0, 0usize);
            for (ti, v) in m.asr[si].iter().enumerate() {
                text.push(',');
                text.push_str(&cell(v));
                if let Some(x) = v {
                    row_sum = (row_sum.0 + x, row_sum.1 + 1);
                    col_sums[ti] = (col_sums[ti].0 + x, col_sums[ti].1 + 1);
                    all = (all.0 + x, all.1 + 1);
                }
            }
            let avg = (row_sum.1 > 0).then(|| row_sum.0 / row_sum.1 as f64);
            text.push(',');
            text.push_str(&cell(&avg));
            text.push('\n');
        }
        text.push_str("avg");
        for (sum, count) in &col_sums {
            let avg = (*count > 0).then(|| sum / *count as f64);
            text.push(',');
            text.push_str(&cell(&avg));
        }
        let overall = (all.1 > 0).then(|| all.0 / all.1 as f64);
        text.push(',');
        text.push_str(&cell(&overall));
        text.push('\n');

        let path = out_dir.join(format!(
            "transfer_{}_{}_eps{}.csv",
            m.method.name(),
            m.norm.name(),
            eps_slug(m.epsilon)
        ));
        atomic_write(&path, text.as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}

/// Writes each artifact's spectrum and pixel-mean field as 16-bit PGMs.
pub fn write_spectra(artifacts: &[SpectrumArtifact], out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_writable_dir(out_dir)?;
    let mut paths = Vec::new();
    for a in artifacts {
        let spec_path = out_dir.join(format!("{}.pgm", a.name));
        write_pgm16(&spec_path, &a.perturbation.spectrum.magnitudes)?;
        let pixel_path = out_dir.join(format!("{}_pixel.pgm", a.name));
        write_pgm16(&pixel_path, &a.perturbation.pixel_mean)?;
        paths.push(spec_path);
        paths.push(pixel_path);
    }
    Ok(paths)
}
