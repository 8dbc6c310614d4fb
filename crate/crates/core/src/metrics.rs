//! Classification and image-quality metrics, plus spectral analysis of
//! perturbations.
//!
//! AUC is computed with exact tie handling (ties count half) using integer
//! half-units, so it agrees bit-for-bit with brute-force pair counting.
//! Predictions follow the crate-wide rule: a sample is called Fake when its
//! score is `>=` the threshold.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::attack::AdversarialResult;
use crate::data::{Label, ScoredSample};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::tensor::Tensor;

/// PSNR is reported in dB and capped here; identical images hit the cap.
pub const PSNR_CAP_DB: f64 = 80.0;

fn check_scores(samples: &[ScoredSample], context: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Empty(format!("{context}: no samples")));
    }
    for s in samples {
        if !s.score.is_finite() {
            return Err(Error::NonFinite(format!("{context}: score of sample {:?}", s.id)));
        }
    }
    Ok(())
}

/// Fraction of samples whose thresholded prediction matches the label.
pub fn accuracy_at_threshold(samples: &[ScoredSample], threshold: f64) -> Result<f64> {
    check_scores(samples, "accuracy_at_threshold")?;
    if !threshold.is_finite() {
        return Err(Error::InvalidArgument("threshold must be finite".into()));
    }
    let correct = samples
        .iter()
        .filter(|s| {
            let predicted = if s.score >= threshold { Label::Fake } else { Label::Real };
            predicted == s.label
        })
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

/// Area under the ROC curve: the probability that a random fake outscores a
/// random real, ties counting one half. Exact for any tie structure.
pub fn auc_roc(samples: &[ScoredSample]) -> Result<f64> {
    check_scores(samples, "auc_roc")?;
    let n_fake = samples.iter().filter(|s| s.label == Label::Fake).count() as u64;
    let n_real = samples.len() as u64 - n_fake;
    if n_fake == 0 || n_real == 0 {
        return Err(Error::SingleClass("auc_roc needs both classes".into()));
    }
    let mut sorted: Vec<(f64, bool)> = samples.iter().map(|s| (s.score, s.label == Label::Fake)).collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    // Half-units: a strict win counts 2, a tie counts 1.
    let mut half_units: u64 = 0;
    let mut reals_below: u64 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let mut fakes_here = 0u64;
        let mut reals_here = 0u64;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                fakes_here += 1;
            } else {
                reals_here += 1;
            }
            j += 1;
        }
        half_units += fakes_here * (2 * reals_below + reals_here);
        reals_below += reals_here;
        i = j;
    }
    Ok(half_units as f64 / (2 * n_fake * n_real) as f64)
}

/// True-positive rate at the smallest threshold whose false-positive rate is
/// `<= fpr_target`. Candidate thresholds are all observed scores plus +inf
/// (which always satisfies any target, giving TPR 0 in the worst case).
/// Requires at least 20 real samples so the FPR is meaningfully resolved.
pub fn tpr_at_fpr(samples: &[ScoredSample], fpr_target: f64) -> Result<f64> {
    check_scores(samples, "tpr_at_fpr")?;
    if !(0.0..=1.0).contains(&fpr_target) {
        return Err(Error::InvalidArgument(format!("fpr_target {fpr_target} outside [0,1]")));
    }
    let reals: Vec<f64> = samples.iter().filter(|s| s.label == Label::Real).map(|s| s.score).collect();
    let fakes: Vec<f64> = samples.iter().filter(|s| s.label == Label::Fake).map(|s| s.score).collect();
    if reals.len() < 20 {
        return Err(Error::InvalidArgument(format!(
            "tpr_at_fpr needs >= 20 real samples, got {}",
            reals.len()
        )));
    }
    if fakes.is_empty() {
        return Err(Error::SingleClass("tpr_at_fpr needs fake samples".into()));
    }

    let mut candidates: Vec<f64> = samples.iter().map(|s| s.score).collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    candidates.dedup();
    candidates.push(f64::INFINITY);

    let fpr_at = |t: f64| reals.iter().filter(|&&s| s >= t).count() as f64 / reals.len() as f64;
    let threshold = candidates
        .iter()
        .copied()
        .find(|&t| fpr_at(t) <= fpr_target)
        .expect("+inf always satisfies the target");
    Ok(fakes.iter().filter(|&&s| s >= threshold).count() as f64 / fakes.len() as f64)
}

fn check_same_shape(a: &Tensor, b: &Tensor, context: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(context, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    if a.is_empty() {
        return Err(Error::Empty(format!("{context}: zero-size tensors")));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(a, b, "mse")?;
    let mut acc = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB for signals in `[0,1]`, capped at
/// [`PSNR_CAP_DB`]. Symmetric in its arguments.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// Converts a `(3,H,W)` image to BT.601 luma, or passes through `(1,H,W)` /
/// `(H,W)` single-channel data.
fn to_luma(t: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    match t.shape() {
        [3, h, w] => {
            let (h, w) = (*h, *w);
            let d = t.data();
            let plane = h * w;
            let mut y = vec![0.0; plane];
            for i in 0..plane {
                y[i] = 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i];
            }
            Ok((y, h, w))
        }
        [1, h, w] => Ok((t.data().to_vec(), *h, *w)),
        [h, w] => Ok((t.data().to_vec(), *h, *w)),
        other => Err(Error::shape("to_luma", "(3,H,W), (1,H,W) or (H,W)", format!("{other:?}"))),
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_window_weights() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut sum = 0.0;
    for dy in -half..=half {
        for dx in -half..=half {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w.push(v);
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean structural similarity over valid 11x11 Gaussian windows (sigma 1.5)
/// on luma, dynamic range 1. Identical inputs give exactly 1.0. May dip
/// slightly negative for structurally inverted inputs.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(a, b, "ssim")?;
    let (ya, h, w) = to_luma(a)?;
    let (yb, _, _) = to_luma(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let weights = ssim_window_weights();
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);

    let mut total = 0.0;
    let mut count = 0u64;
    for oy in 0..=(h - SSIM_WINDOW) {
        for ox in 0..=(w - SSIM_WINDOW) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut e_aa = 0.0;
            let mut e_bb = 0.0;
            let mut e_ab = 0.0;
            let mut k = 0;
            for dy in 0..SSIM_WINDOW {
                let row = (oy + dy) * w + ox;
                for dx in 0..SSIM_WINDOW {
                    let wt = weights[k];
                    k += 1;
                    let va = ya[row + dx];
                    let vb = yb[row + dx];
                    mu_a += wt * va;
                    mu_b += wt * vb;
                    e_aa += wt * va * va;
                    e_bb += wt * vb * vb;
                    e_ab += wt * va * vb;
                }
            }
            let var_a = e_aa - mu_a * mu_a;
            let var_b = e_bb - mu_b * mu_b;
            let cov = e_ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Squared Euclidean distance between frozen-extractor embeddings of `a` and
/// `b`, normalized by embedding dimension. Requires a detector with a frozen
/// extractor (FeatureProbe); 0 iff the embeddings are identical.
pub fn feature_distance(detector: &Detector, a: &Tensor, b: &Tensor) -> Result<f64> {
    let ea = detector.embed(a)?;
    let eb = detector.embed(b)?;
    let sq: f64 = ea.data().iter().zip(eb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sq / ea.len() as f64)
}

/// Fraction of attempts whose predicted label flipped, where an attempt is a
/// sample the detector classified correctly before the attack. No attempts
/// means the rate is undefined: `Ok(None)`.
pub fn attack_success_rate(
    results: &[AdversarialResult],
    pre_labels: &[Label],
) -> Result<Option<f64>> {
    if results.len() != pre_labels.len() {
        return Err(Error::InvalidArgument(format!(
            "attack_success_rate needs aligned sequences, got {} results and {} labels",
            results.len(),
            pre_labels.len()
        )));
    }
    let mut attempts = 0usize;
    let mut flips = 0usize;
    for (r, truth) in results.iter().zip(pre_labels) {
        if r.pre_label == *truth {
            attempts += 1;
            if r.post_label != r.pre_label {
                flips += 1;
            }
        }
    }
    Ok(if attempts == 0 { None } else { Some(flips as f64 / attempts as f64) })
}

// --- spectral analysis -------------------------------------------------------

/// Mean over samples of the channel-averaged perturbation `adv - orig`,
/// shape `(H, W)`.
pub fn mean_perturbation(originals: &[Tensor], adversarials: &[Tensor]) -> Result<Tensor> {
    if originals.is_empty() || originals.len() != adversarials.len() {
        return Err(Error::InvalidArgument(format!(
            "mean_perturbation needs equal nonempty sample lists, got {} and {}",
            originals.len(),
            adversarials.len()
        )));
    }
    let (c, h, w) = originals[0].chw_dims()?;
    let mut acc = vec![0.0; h * w];
    for (o, a) in originals.iter().zip(adversarials.iter()) {
        check_same_shape(o, a, "mean_perturbation")?;
        if o.shape() != originals[0].shape() {
            return Err(Error::shape(
                "mean_perturbation",
                format!("{:?}", originals[0].shape()),
                format!("{:?}", o.shape()),
            ));
        }
        let od = o.data();
        let ad = a.data();
        let plane = h * w;
        for i in 0..plane {
            let mut d = 0.0;
            for ch in 0..c {
                d += ad[ch * plane + i] - od[ch * plane + i];
            }
            acc[i] += d / c as f64;
        }
    }
    let n = originals.len() as f64;
    for v in &mut acc {
        *v /= n;
    }
    Tensor::new(vec![h, w], acc)
}

/// Unnormalized forward 2-D DFT of a real `(H, W)` field, row-major complex.
pub fn dft2(field: &Tensor) -> Result<Vec<Complex<f64>>> {
    let shape = field.shape();
    if shape.len() != 2 {
        return Err(Error::shape("dft2", "(H, W)", format!("{shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);

    let mut buf: Vec<Complex<f64>> = field.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    Ok(buf)
}

/// Magnitude spectrum of a real 2-D field. Centered spectra place the DC bin
/// at `(H/2, W/2)`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub magnitudes: Tensor,
    pub centered: bool,
    pub log_scaled: bool,
}

impl Spectrum {
    /// Bin holding the largest magnitude, as `(row, col)`.
    pub fn peak_bin(&self) -> (usize, usize) {
        let w = self.magnitudes.shape()[1];
        let (mut best, mut at) = (f64::NEG_INFINITY, 0);
        for (i, &v) in self.magnitudes.data().iter().enumerate() {
            if v > best {
                best = v;
                at = i;
            }
        }
        (at / w, at % w)
    }

    /// Largest deviation between the centered magnitude image and its own
    /// 180-degree rotation about the DC bin (zero for real-valued inputs, up
    /// to floating-point error).
    pub fn conjugate_symmetry_error(&self) -> f64 {
        let (h, w) = (self.magnitudes.shape()[0], self.magnitudes.shape()[1]);
        let d = self.magnitudes.data();
        let mut worst = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                let r = d[((h - i) % h) * w + (w - j) % w];
                worst = worst.max((d[i * w + j] - r).abs());
            }
        }
        worst
    }
}

/// Centered log-magnitude spectrum of a real field: `log1p(|DFT|)` with the
/// DC bin shifted to `(H/2, W/2)`.
pub fn spectrum_of(field: &Tensor) -> Result<Spectrum> {
    let shape = field.shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let freq = dft2(field)?;
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let su = (u + h / 2) % h;
            let sv = (v + w / 2) % w;
            out[su * w + sv] = freq[u * w + v].norm().ln_1p();
        }
    }
    Ok(Spectrum {
        magnitudes: Tensor::new(vec![h, w], out)?,
        centered: true,
        log_scaled: true,
    })
}

/// Pixel-space mean perturbation together with its centered log-magnitude
/// spectrum.
#[derive(Debug, Clone)]
pub struct MeanPerturbation {
    pub pixel_mean: Tensor,
    pub spectrum: Spectrum,
}

/// Averages channel-mean perturbations `adv - orig` over samples, then takes
/// the spectrum of that mean field.
pub fn mean_perturbation_spectrum(
    originals: &[Tensor],
    adversarials: &[Tensor],
) -> Result<MeanPerturbation> {
    let pixel_mean = mean_perturbation(originals, adversarials)?;
    let spectrum = spectrum_of(&pixel_mean)?;
    Ok(MeanPerturbation { pixel_mean, spectrum })
}

/// Writes a `(H, W)` field as a 16-bit binary PGM, min-max scaled, with a
/// JSON sidecar (`<path>.json`) recording the original min/max so values can
/// be recovered.
pub fn write_pgm16(path: &Path, field: &Tensor) -> Result<()> {
    let shape = field.shape();
    if shape.len() != 2 {
        return Err(Error::shape("write_pgm16", "(H, W)", format!("{shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in field.data() {
        if !v.is_finite() {
            return Err(Error::NonFinite("write_pgm16 field".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in field.data() {
        let q = if span == 0.0 {
            0u16
        } else {
            (((v - lo) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16
        };
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    atomic_write(path, &bytes)?;
    let sidecar = path.with_extension(format!(
        "{}.json",
        path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    let meta = serde_json::json!({ "min": lo, "max": hi, "height": h, "width": w });
    atomic_write(&sidecar, serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label::{Fake, Real};

    fn s(score: f64, label: Label) -> ScoredSample {
        ScoredSample::new(score, label, "t")
    }

    /// O(n^2) pair-counting oracle in integer half-units.
    fn auc_oracle(samples: &[ScoredSample]) -> f64 {
        let fakes: Vec<f64> = samples.iter().filter(|x| x.label == Fake).map(|x| x.score).collect();
        let reals: Vec<f64> = samples.iter().filter(|x| x.label == Real).map(|x| x.score).collect();
        let mut half: u64 = 0;
        for &f in &fakes {
            for &r in &reals {
                if f > r {
                    half += 2;
                } else if f == r {
                    half += 1;
                }
            }
        }
        half as f64 / (2 * fakes.len() * reals.len()) as f64
    }

    #[test]
    fn auc_perfect_reversed_and_tied() {
        let perfect = vec![s(0.9, Fake), s(0.8, Fake), s(0.2, Real), s(0.1, Real)];
        assert_eq!(auc_roc(&perfect).unwrap(), 1.0);
        let reversed = vec![s(0.1, Fake), s(0.2, Fake), s(0.8, Real), s(0.9, Real)];
        assert_eq!(auc_roc(&reversed).unwrap(), 0.0);
        let all_tied = vec![s(0.5, Fake), s(0.5, Fake), s(0.5, Real), s(0.5, Real)];
        assert_eq!(auc_roc(&all_tied).unwrap(), 0.5);
    }

    #[test]
    fn auc_matches_pair_counting_oracle_exactly() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(11);
        for _ in 0..50 {
            let n = 60 + rng.gen_range(0..60);
            let samples: Vec<ScoredSample> = (0..n)
                .map(|_| {
                    // Coarse score lattice to force plenty of ties.
                    let score = (rng.gen_range(0..=20) as f64) / 20.0;
                    let label = if rng.gen_bool(0.5) { Fake } else { Real };
                    s(score, label)
                })
                .collect();
            let nf = samples.iter().filter(|x| x.label == Fake).count();
            if nf == 0 || nf == samples.len() {
                continue;
            }
            assert_eq!(auc_roc(&samples).unwrap(), auc_oracle(&samples));
        }
    }

    #[test]
    fn auc_invariant_under_strictly_increasing_transform() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(3);
        let samples: Vec<ScoredSample> = (0..100)
            .map(|_| {
                let score: f64 = rng.gen_range(0.0..1.0);
                s(score, if rng.gen_bool(0.4) { Fake } else { Real })
            })
            .collect();
        let mapped: Vec<ScoredSample> = samples
            .iter()
            .map(|x| s((x.score * 3.0 + 0.1).tanh(), x.label))
            .collect();
        assert_eq!(auc_roc(&samples).unwrap(), auc_roc(&mapped).unwrap());
    }

    #[test]
    fn auc_label_swap_complements() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(5);
        let samples: Vec<ScoredSample> = (0..80)
            .map(|_| {
                let score = (rng.gen_range(0..=10) as f64) / 10.0;
                s(score, if rng.gen_bool(0.5) { Fake } else { Real })
            })
            .collect();
        let swapped: Vec<ScoredSample> = samples
            .iter()
            .map(|x| s(x.score, if x.label == Fake { Real } else { Fake }))
            .collect();
        let a = auc_roc(&samples).unwrap();
        let b = auc_roc(&swapped).unwrap();
        assert_eq!(a + b, 1.0);
    }

    #[test]
    fn auc_rejects_single_class_and_empty() {
        assert!(matches!(auc_roc(&[]), Err(Error::Empty(_))));
        let one_class = vec![s(0.5, Fake), s(0.6, Fake)];
        assert!(matches!(auc_roc(&one_class), Err(Error::SingleClass(_))));
    }

    #[test]
    fn accuracy_counts_threshold_ties_as_fake() {
        let samples = vec![s(0.5, Fake), s(0.5, Real), s(0.4, Real), s(0.6, Fake)];
        // At 0.5: predictions fake, fake, real, fake -> correct 3 of 4.
        assert_eq!(accuracy_at_threshold(&samples, 0.5).unwrap(), 0.75);
        assert!(accuracy_at_threshold(&[], 0.5).is_err());
    }

    #[test]
    fn tpr_at_fpr_matches_exhaustive_scan() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(17);
        for _ in 0..30 {
            let samples: Vec<ScoredSample> = (0..90)
                .map(|_| {
                    let label = if rng.gen_bool(0.5) { Fake } else { Real };
                    let base: f64 = if label == Fake { 0.55 } else { 0.45 };
                    let score = (base + rng.gen_range(-0.45..0.45)).clamp(0.0, 1.0);
                    let score = (score * 40.0).round() / 40.0;
                    s(score, label)
                })
                .collect();
            let reals: Vec<f64> = samples.iter().filter(|x| x.label == Real).map(|x| x.score).collect();
            let fakes: Vec<f64> = samples.iter().filter(|x| x.label == Fake).map(|x| x.score).collect();
            if reals.len() < 20 || fakes.is_empty() {
                continue;
            }
            for target in [0.0, 0.05, 0.1, 0.5, 1.0] {
                // Oracle: try every observed score and +inf as a threshold,
                // keep feasible ones, pick the smallest.
                let mut cands: Vec<f64> = samples.iter().map(|x| x.score).collect();
                cands.push(f64::INFINITY);
                cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut best: Option<f64> = None;
                for &t in &cands {
                    let fpr = reals.iter().filter(|&&v| v >= t).count() as f64 / reals.len() as f64;
                    if fpr <= target {
                        best = Some(t);
                        break;
                    }
                }
                let t = best.unwrap();
                let expect = fakes.iter().filter(|&&v| v >= t).count() as f64 / fakes.len() as f64;
                assert_eq!(tpr_at_fpr(&samples, target).unwrap(), expect);
            }
        }
    }

    #[test]
    fn tpr_at_full_fpr_budget_is_one_when_a_fake_tops_the_minimum() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(23);
        let mut samples: Vec<ScoredSample> = (0..40)
            .map(|i| {
                let label = if i % 2 == 0 { Fake } else { Real };
                s(rng.gen_range(0.1..0.9), label)
            })
            .collect();
        samples.push(s(0.05, Real)); // strict minimum is a real
        assert_eq!(tpr_at_fpr(&samples, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn tpr_requires_twenty_reals() {
        let samples: Vec<ScoredSample> = (0..25)
            .map(|i| s(0.5, if i < 10 { Real } else { Fake }))
            .collect();
        assert!(tpr_at_fpr(&samples, 0.05).is_err());
    }

    #[test]
    fn psnr_of_quantization_step_matches_closed_form() {
        // Uniform difference of 1/255 -> MSE = (1/255)^2 -> 20*log10(255).
        let a = Tensor::filled(&[3, 8, 8], 0.5);
        let b = a.map(|v| v + 1.0 / 255.0);
        let expect = 20.0 * 255f64.log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 48.13).abs() < 0.01);
    }

    #[test]
    fn psnr_identical_hits_cap_and_is_symmetric() {
        let a = Tensor::filled(&[3, 8, 8], 0.25);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = a.map(|v| v + 0.1);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_of_full_scale_difference_is_zero() {
        let a = Tensor::zeros(&[3, 8, 8]);
        let b = Tensor::filled(&[3, 8, 8], 1.0);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
    }

    use crate::data::textured_test_image as textured;

    #[test]
    fn ssim_self_is_exactly_one() {
        let a = textured(16, 16);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_is_symmetric_and_below_one_for_different_images() {
        let a = textured(16, 16);
        let b = a.map(|v| (v + 0.07).clamp(0.0, 1.0));
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 1.0 && ab > 0.0);
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = Tensor::zeros(&[3, 8, 8]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn ssim_of_negated_structure_goes_negative() {
        // Luma centered at 0.5 so x and 1-x share means but anti-correlate.
        let (h, w) = (24usize, 24usize);
        let mut d = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                d.push(0.5 + 0.35 * ((x as f64) * 0.8).sin() * ((y as f64) * 0.6).cos());
            }
        }
        let a = Tensor::new(vec![h, w], d).unwrap();
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_degrades_monotonically_under_widening_blur() {
        let img = textured(24, 24);
        let sigma_one = ssim(&img, &crate::degrade::gaussian_blur(&img, 1.0).unwrap()).unwrap();
        assert!(sigma_one > 0.0 && sigma_one < 1.0);
        let mut prev = 1.0;
        for sigma in crate::degrade::blur_sigma_grid() {
            let v = ssim(&img, &crate::degrade::gaussian_blur(&img, sigma).unwrap()).unwrap();
            assert!(v <= prev + 1e-12, "sigma {sigma}: {v} vs prev {prev}");
            prev = v;
        }
    }

    /// Brute-force O(n^2) DFT used as the oracle for the FFT-backed path.
    fn dft2_naive(field: &Tensor) -> Vec<Complex<f64>> {
        let (h, w) = (field.shape()[0], field.shape()[1]);
        let d = field.data();
        let mut out = vec![Complex::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let phase = -2.0 * std::f64::consts::PI
                            * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        acc += d[y * w + x] * Complex::new(phase.cos(), phase.sin());
                    }
                }
                out[u * w + v] = acc;
            }
        }
        out
    }

    #[test]
    fn dft_matches_naive_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(29);
        let data: Vec<f64> = (0..12 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = Tensor::new(vec![12, 8], data).unwrap();
        let fast = dft2(&f).unwrap();
        let slow = dft2_naive(&f);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).norm() < 1e-9, "fast {a} vs naive {b}");
        }
    }

    #[test]
    fn constant_perturbation_concentrates_at_centered_dc() {
        // Single sample, every channel shifted by c = 0.3.
        let o = Tensor::zeros(&[3, 16, 16]);
        let a = Tensor::filled(&[3, 16, 16], 0.3);
        let mp = mean_perturbation_spectrum(&[o], &[a]).unwrap();
        let spec = &mp.spectrum;
        assert!(spec.centered && spec.log_scaled);
        assert_eq!(spec.peak_bin(), (8, 8));
        // DC magnitude of an unnormalized DFT is |c| * H * W.
        let d = spec.magnitudes.data();
        assert!((d[8 * 16 + 8] - (0.3 * 256.0f64).ln_1p()).abs() < 1e-9);
        for (i, &v) in d.iter().enumerate() {
            if i != 8 * 16 + 8 {
                assert!(v.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_perturbation_gives_zero_spectrum() {
        let imgs = vec![textured(16, 16), textured(16, 16)];
        let mp = mean_perturbation_spectrum(&imgs, &imgs).unwrap();
        assert!(mp.pixel_mean.data().iter().all(|&v| v == 0.0));
        assert!(mp.spectrum.magnitudes.data().iter().all(|&v| v == 0.0));
        assert!(mean_perturbation_spectrum(&[], &[]).is_err());
    }

    #[test]
    fn horizontal_sinusoid_peaks_at_symmetric_bins() {
        // cos(2*pi*f*x/W) across all channels: analytic peaks at (H/2, W/2±f).
        let (h, w, f) = (16usize, 16usize, 3usize);
        let o = Tensor::zeros(&[3, h, w]);
        let mut a = Tensor::zeros(&[3, h, w]);
        {
            let d = a.data_mut();
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        d[(c * h + y) * w + x] =
                            0.01 * (2.0 * std::f64::consts::PI * f as f64 * x as f64 / w as f64).cos();
                    }
                }
            }
        }
        let spec = mean_perturbation_spectrum(&[o], &[a]).unwrap().spectrum;
        let m = spec.magnitudes.data();
        let expect = (0.005 * (h * w) as f64).ln_1p(); // each peak holds a/2 * H * W
        assert!((m[(h / 2) * w + (w / 2 - f)] - expect).abs() < 1e-9);
        assert!((m[(h / 2) * w + (w / 2 + f)] - expect).abs() < 1e-9);
        let peak_total: f64 =
            m[(h / 2) * w + (w / 2 - f)] + m[(h / 2) * w + (w / 2 + f)];
        let rest: f64 = m.iter().sum::<f64>() - peak_total;
        assert!(rest.abs() < 1e-9, "all energy sits in the two bins");
    }

    #[test]
    fn centered_magnitudes_match_their_own_rotation() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(37);
        let o = Tensor::zeros(&[3, 12, 16]);
        let a = o.map(|_| rng.gen_range(-0.03..0.03));
        let spec = mean_perturbation_spectrum(&[o], &[a]).unwrap().spectrum;
        assert!(spec.conjugate_symmetry_error() <= 1e-9);
    }

    #[test]
    fn real_field_spectrum_is_conjugate_symmetric() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(31);
        let (h, w) = (16, 16);
        let data: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = Tensor::new(vec![h, w], data).unwrap();
        let freq = dft2(&f).unwrap();
        for u in 0..h {
            for v in 0..w {
                let conj = freq[((h - u) % h) * w + (w - v) % w].conj();
                assert!((freq[u * w + v] - conj).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn pgm16_writes_header_sidecar_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("spec.pgm");
        let f = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        write_pgm16(&p, &f).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n65535\n"));
        let payload = &bytes[b"P5\n3 2\n65535\n".len()..];
        assert_eq!(payload.len(), 12);
        assert_eq!(u16::from_be_bytes([payload[0], payload[1]]), 0);
        assert_eq!(u16::from_be_bytes([payload[10], payload[11]]), 65535);
        let side: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("spec.pgm.json")).unwrap()).unwrap();
        assert_eq!(side["min"], 0.0);
        assert_eq!(side["max"], 5.0);
    }

    #[test]
    fn mean_perturbation_averages_channels_and_samples() {
        let o1 = Tensor::zeros(&[3, 2, 2]);
        let mut a1 = Tensor::zeros(&[3, 2, 2]);
        a1.data_mut()[0] = 0.3; // channel 0, pixel (0,0)
        let o2 = Tensor::zeros(&[3, 2, 2]);
        let a2 = Tensor::filled(&[3, 2, 2], 0.06);
        let m = mean_perturbation(&[o1, o2], &[a1, a2]).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert!((m.data()[0] - (0.3 / 3.0 + 0.06) / 2.0).abs() < 1e-12);
        assert!((m.data()[1] - 0.03).abs() < 1e-12);
    }

    #[test]
    fn feature_distance_is_a_symmetric_premetric_on_probe_embeddings() {
        let probe = crate::detector::build_feature_probe_at(1, 8, (16, 16)).unwrap();
        let a = textured(16, 16);
        let b = a.map(|v| (v + 0.1).min(1.0));
        assert_eq!(feature_distance(&probe, &a, &a).unwrap(), 0.0);
        let ab = feature_distance(&probe, &a, &b).unwrap();
        let ba = feature_distance(&probe, &b, &a).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-15);

        let cnn = crate::detector::build_compact_cnn_at(1, (16, 16)).unwrap();
        assert!(feature_distance(&cnn, &a, &b).is_err());
    }

    fn synthetic_result(truth: Label, pre: Label, post: Label) -> AdversarialResult {
        let img = Tensor::zeros(&[1]);
        AdversarialResult {
            adversarial: img,
            original_id: "s".into(),
            label: truth,
            config: crate::attack::AttackConfig::fgsm(crate::attack::Norm::Linf, 0.01, 0),
            pre_score: 0.5,
            post_score: 0.5,
            pre_label: pre,
            post_label: post,
            success: pre != post,
            perturbation_linf: 0.0,
            perturbation_l2: 0.0,
            quality: crate::attack::Quality { psnr: 80.0, ssim: None, feature_distance: None },
            note: None,
        }
    }

    #[test]
    fn attack_success_rate_counts_only_correct_pre_attack_samples() {
        use Label::{Fake, Real};
        // 5 samples: 4 correctly classified pre-attack (attempts), 3 flip.
        let results = vec![
            synthetic_result(Fake, Fake, Real),
            synthetic_result(Fake, Fake, Real),
            synthetic_result(Real, Real, Fake),
            synthetic_result(Real, Real, Real),
            synthetic_result(Fake, Real, Fake), // misclassified pre-attack: excluded
        ];
        let truths: Vec<Label> = results.iter().map(|r| r.label).collect();
        assert_eq!(attack_success_rate(&results, &truths).unwrap(), Some(0.75));

        let all_flip = vec![synthetic_result(Fake, Fake, Real); 3];
        let t = vec![Fake; 3];
        assert_eq!(attack_success_rate(&all_flip, &t).unwrap(), Some(1.0));

        let none_flip = vec![synthetic_result(Fake, Fake, Fake); 3];
        assert_eq!(attack_success_rate(&none_flip, &t).unwrap(), Some(0.0));

        // Every sample misclassified before the attack: rate is undefined.
        let no_attempts = vec![synthetic_result(Fake, Real, Fake); 2];
        assert_eq!(attack_success_rate(&no_attempts, &[Fake, Fake]).unwrap(), None);

        assert!(attack_success_rate(&results, &truths[..3]).is_err());
    }
}
