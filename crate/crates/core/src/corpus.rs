//! Deterministic synthetic corpus: "real" images are isotropic 1/f^beta
//! Gaussian random fields with sensor noise; "fake" images are the same field
//! family generated at half resolution, nearest-neighbor upsampled, and
//! lightly smoothed, which plants spectral-replication ridges near the
//! half-sampling frequencies. Both classes are normalized to the same global
//! mean/contrast so the separating signal is spectral, not brightness.
//!
//! Generation of distinct indices is independent: each (seed, label, index)
//! derives its own RNG stream.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{Label, LabeledImage};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::rng::{derive_seed, rng_from, tag};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealParams {
    /// Power-spectrum exponent: power density proportional to 1/f^beta.
    pub beta: f64,
    pub sensor_noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FakeParams {
    pub upsample: usize,
    /// Symmetric 3-tap post-filter, applied separably and circularly (the
    /// synthesized fields are periodic). Must sum to 1.
    pub taps: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_real: usize,
    pub n_fake: usize,
    pub resolution: (usize, usize),
    pub seed: u64,
    pub real_params: RealParams,
    pub fake_params: FakeParams,
}

/// Target mean/std the per-channel fields are normalized to before clipping.
const FIELD_MEAN: f64 = 0.5;
const FIELD_STD: f64 = 0.15;

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_real: 1000,
            n_fake: 1000,
            resolution: (32, 32),
            seed: 7,
            real_params: RealParams { beta: 2.0, sensor_noise_std: 2.0 / 255.0 },
            // Very light low-pass: heavier taps would erase the replication
            // ridges the fake class is defined by.
            fake_params: FakeParams { upsample: 2, taps: [1.0 / 32.0, 30.0 / 32.0, 1.0 / 32.0] },
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        if self.n_real < 1 || self.n_fake < 1 {
            return Err(Error::InvalidArgument("corpus needs n_real, n_fake >= 1".into()));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::InvalidArgument(format!("resolution {h}x{w} must be multiple of 8")));
        }
        let s = self.fake_params.upsample;
        if s < 2 || h % s != 0 || w % s != 0 {
            return Err(Error::InvalidArgument(format!(
                "upsample factor {s} must be >= 2 and divide {h}x{w}"
            )));
        }
        let rp = &self.real_params;
        if !(rp.beta.is_finite() && rp.beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta {} must be positive", rp.beta)));
        }
        if !(rp.sensor_noise_std.is_finite() && rp.sensor_noise_std >= 0.0) {
            return Err(Error::InvalidArgument("sensor noise std must be >= 0".into()));
        }
        let t = &self.fake_params.taps;
        if t.iter().any(|v| !v.is_finite() || *v < 0.0) || (t.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("taps {t:?} must be nonnegative and sum to 1")));
        }
        Ok(())
    }
}

/// One channel of an isotropic 1/f^beta field: white Gaussian noise shaped in
/// the frequency domain by amplitude 1/f^(beta/2), zero DC, unit-free scale
/// (callers normalize).
fn gen_field(h: usize, w: usize, beta: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..h * w)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    let fwd_w = planner.plan_fft_forward(w);
    let fwd_h = planner.plan_fft_forward(h);
    for row in buf.chunks_exact_mut(w) {
        fwd_w.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        fwd_h.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    for u in 0..h {
        let fu = u.min(h - u) as f64;
        for v in 0..w {
            let fv = v.min(w - v) as f64;
            let f = (fu * fu + fv * fv).sqrt();
            let amp = if f == 0.0 { 0.0 } else { f.powf(-beta / 2.0) };
            buf[u * w + v] *= amp;
        }
    }
    let inv_w = planner.plan_fft_inverse(w);
    let inv_h = planner.plan_fft_inverse(h);
    for row in buf.chunks_exact_mut(w) {
        inv_w.process(row);
    }
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        inv_h.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    buf.into_iter().map(|z| z.re).collect()
}

/// Shifts and scales a plane to mean [`FIELD_MEAN`], std [`FIELD_STD`].
fn normalize_plane(plane: &mut [f64]) {
    let n = plane.len() as f64;
    let mean = plane.iter().sum::<f64>() / n;
    let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = if var > 0.0 { FIELD_STD / var.sqrt() } else { 0.0 };
    for v in plane.iter_mut() {
        *v = FIELD_MEAN + (*v - mean) * scale;
    }
}

/// A real sample: three independent 1/f^beta channels plus sensor noise,
/// clipped to [0,1]. Deterministic per (spec.seed, index).
pub fn gen_real(spec: &CorpusSpec, index: usize) -> Result<LabeledImage> {
    spec.validate()?;
    if index >= spec.n_real {
        return Err(Error::InvalidArgument(format!("real index {index} >= {}", spec.n_real)));
    }
    let (h, w) = spec.resolution;
    let mut rng = rng_from(derive_seed(spec.seed, &[tag("real"), index as u64]));
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        let mut plane = gen_field(h, w, spec.real_params.beta, &mut rng);
        normalize_plane(&mut plane);
        let std = spec.real_params.sensor_noise_std;
        for v in &mut plane {
            let n: f64 = rng.sample(StandardNormal);
            *v = (*v + std * n).clamp(0.0, 1.0);
        }
        data.extend_from_slice(&plane);
    }
    Ok(LabeledImage {
        pixels: Tensor::new(vec![3, h, w], data)?,
        label: Label::Real,
        id: format!("real_{index:05}"),
    })
}

/// Circular separable 3-tap filter in place.
fn smooth_circular(plane: &mut Vec<f64>, h: usize, w: usize, taps: [f64; 3]) {
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = plane[y * w + (x + w - 1) % w];
            let c = plane[y * w + x];
            let r = plane[y * w + (x + 1) % w];
            tmp[y * w + x] = taps[0] * l + taps[1] * c + taps[2] * r;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let u = tmp[((y + h - 1) % h) * w + x];
            let c = tmp[y * w + x];
            let d = tmp[((y + 1) % h) * w + x];
            plane[y * w + x] = taps[0] * u + taps[1] * c + taps[2] * d;
        }
    }
}

/// A fake sample: the same field family at reduced resolution, nearest-
/// neighbor upsampled and lightly smoothed, then normalized to the real
/// family's mean/contrast. No sensor noise; the class signature is spectral.
pub fn gen_fake(spec: &CorpusSpec, index: usize) -> Result<LabeledImage> {
    spec.validate()?;
    if index >= spec.n_fake {
        return Err(Error::InvalidArgument(format!("fake index {index} >= {}", spec.n_fake)));
    }
    let (h, w) = spec.resolution;
    let s = spec.fake_params.upsample;
    let (lh, lw) = (h / s, w / s);
    let mut rng = rng_from(derive_seed(spec.seed, &[tag("fake"), index as u64]));
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        let low = gen_field(lh, lw, spec.real_params.beta, &mut rng);
        let mut plane = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = low[(y / s) * lw + x / s];
            }
        }
        smooth_circular(&mut plane, h, w, spec.fake_params.taps);
        normalize_plane(&mut plane);
        for v in &mut plane {
            *v = v.clamp(0.0, 1.0);
        }
        data.extend_from_slice(&plane);
    }
    Ok(LabeledImage {
        pixels: Tensor::new(vec![3, h, w], data)?,
        label: Label::Fake,
        id: format!("fake_{index:05}"),
    })
}

/// All reals followed by all fakes, each deterministic in isolation.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_real + spec.n_fake);
    for i in 0..spec.n_real {
        out.push(gen_real(spec, i)?);
    }
    for i in 0..spec.n_fake {
        out.push(gen_fake(spec, i)?);
    }
    Ok(out)
}

/// Seeded stratified split: shuffles each class independently, then takes the
/// first `train_fraction` of each for training.
pub fn train_eval_split(
    corpus: &[LabeledImage],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidArgument(format!("train fraction {train_fraction} outside [0,1]")));
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for label in [Label::Real, Label::Fake] {
        let mut class: Vec<&LabeledImage> = corpus.iter().filter(|s| s.label == label).collect();
        let mut rng = rng_from(derive_seed(seed, &[tag("split"), tag(label.name())]));
        // Fisher-Yates, explicit so the order is locked by our RNG alone.
        for i in (1..class.len()).rev() {
            class.swap(i, rng.gen_range(0..=i));
        }
        let cut = (class.len() as f64 * train_fraction).round() as usize;
        for (i, s) in class.into_iter().enumerate() {
            if i < cut {
                train.push(s.clone());
            } else {
                eval.push(s.clone());
            }
        }
    }
    Ok((train, eval))
}

// --- PNG export / ingestion ----------------------------------------------------

/// Encodes a [0,1] CHW image as 8-bit RGB PNG bytes (round-to-nearest).
pub fn png_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw_dims()?;
    if c != 3 {
        return Err(Error::shape("png_bytes", "(3,H,W)", format!("{:?}", image.shape())));
    }
    let d = image.data();
    let plane = h * w;
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            rgb.push((d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img: image::RgbImage = image::ImageBuffer::from_raw(w as u32, h as u32, rgb)
        .ok_or_else(|| Error::Image("png buffer size mismatch".into()))?;
    let mut bytes = Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("png encode: {e}")))?;
    Ok(bytes.into_inner())
}

/// Decodes PNG bytes to a [0,1] `(3,H,W)` tensor.
pub fn image_from_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("png decode: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let src = img.as_raw();
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = f64::from(src[3 * i + ch]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes the corpus as `real/` and `fake/` PNG trees plus a `manifest.csv`
/// (`filename,label`, paths relative to `dir`, sorted).
pub fn save_corpus(dir: &Path, images: &[LabeledImage]) -> Result<()> {
    let mut rows: Vec<(String, &str)> = Vec::with_capacity(images.len());
    for img in images {
        let rel = format!("{}/{}.png", img.label.name(), img.id);
        atomic_write(&dir.join(&rel), &png_bytes(&img.pixels)?)?;
        rows.push((rel, img.label.name()));
    }
    rows.sort();
    let mut csv = String::from("filename,label\n");
    for (rel, label) in rows {
        csv.push_str(&format!("{rel},{label}\n"));
    }
    atomic_write(&dir.join("manifest.csv"), csv.as_bytes())
}

/// How [`load_dataset`] assigns labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Labeling {
    /// `real/` and `fake/` children of the dataset root.
    BySubdir,
    /// `manifest.csv` at the dataset root with header `filename,label`.
    ByManifest,
}

/// Loaded images plus entries for files that were flagged and skipped.
#[derive(Debug)]
pub struct LoadReport {
    pub images: Vec<LabeledImage>,
    pub skipped: Vec<String>,
}

/// Fits a decoded image to the target resolution: center crop when larger,
/// mid-gray pad when smaller.
fn fit_resolution(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, sh, sw) = t.chw_dims()?;
    if (sh, sw) == (h, w) {
        return Ok(t.clone());
    }
    let mut out = Tensor::filled(&[3, h, w], 0.5);
    let copy_h = sh.min(h);
    let copy_w = sw.min(w);
    let (src_y0, dst_y0) = if sh > h { ((sh - h) / 2, 0) } else { (0, (h - sh) / 2) };
    let (src_x0, dst_x0) = if sw > w { ((sw - w) / 2, 0) } else { (0, (w - sw) / 2) };
    let src = t.data();
    let dst = out.data_mut();
    for c in 0..3 {
        for y in 0..copy_h {
            for x in 0..copy_w {
                dst[(c * h + dst_y0 + y) * w + dst_x0 + x] =
                    src[(c * sh + src_y0 + y) * sw + src_x0 + x];
            }
        }
    }
    Ok(out)
}

fn load_one(path: &Path, resolution: (usize, usize)) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let img = image_from_png(&bytes)?;
    fit_resolution(&img, resolution.0, resolution.1)
}

/// Ingests a PNG directory, sorted by filename for determinism. Unreadable
/// or undecodable files are skipped with a report entry; an empty class is
/// rejected.
pub fn load_dataset(dir: &Path, labeling: Labeling, resolution: (usize, usize)) -> Result<LoadReport> {
    let mut entries: Vec<(String, Label)> = Vec::new();
    match labeling {
        Labeling::BySubdir => {
            for label in [Label::Real, Label::Fake] {
                let sub = dir.join(label.name());
                let rd = std::fs::read_dir(&sub).map_err(|e| {
                    Error::Corpus(format!("cannot read {}: {e}", sub.display()))
                })?;
                for entry in rd {
                    let entry = entry.map_err(|e| Error::Corpus(format!("read_dir: {e}")))?;
                    let name = entry.file_name().to_string_lossy().into_owned();
                    if name.to_ascii_lowercase().ends_with(".png") {
                        entries.push((format!("{}/{name}", label.name()), label));
                    }
                }
            }
        }
        Labeling::ByManifest => {
            let path = dir.join("manifest.csv");
            let mut rdr = csv::Reader::from_path(&path)
                .map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))?;
            let headers = rdr.headers()?.clone();
            if headers.iter().ne(["filename", "label"]) {
                return Err(Error::Corpus(format!(
                    "manifest header must be filename,label, got {headers:?}"
                )));
            }
            for record in rdr.records() {
                let record = record?;
                let filename = record.get(0).unwrap_or_default().to_string();
                let raw = record.get(1).unwrap_or_default();
                let label = Label::parse(raw)
                    .ok_or_else(|| Error::Corpus(format!("{filename}: unknown label {raw:?}")))?;
                entries.push((filename, label));
            }
        }
    }
    entries.sort();

    let mut images = Vec::new();
    let mut skipped = Vec::new();
    let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
    for (rel, label) in entries {
        match load_one(&dir.join(&rel), resolution) {
            Ok(pixels) => {
                let id = rel.trim_end_matches(".png").replace('/', "_");
                images.push(LabeledImage { pixels, label, id });
                *counts.entry(label).or_default() += 1;
            }
            Err(e) => skipped.push(format!("{rel}: {e}")),
        }
    }
    for label in [Label::Real, Label::Fake] {
        if counts.get(&label).copied().unwrap_or(0) == 0 {
            return Err(Error::Corpus(format!("no loadable {} images in {}", label.name(), dir.display())));
        }
    }
    Ok(LoadReport { images, skipped })
}
