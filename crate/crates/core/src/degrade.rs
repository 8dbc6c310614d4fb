//! Common-degradation models applied to `[0,1]` CHW images: JPEG round-trip
//! compression, Gaussian blur, and seeded additive Gaussian noise. Outputs are
//! clamped back into `[0,1]`.
//!
//! The JPEG path is a faithful desk-scale codec: JFIF YCbCr conversion, 8x8
//! blocks, type-II DCT in the standard JPEG normalization, Annex-K base
//! quantization tables scaled by the libjpeg integer quality mapping, and no
//! chroma subsampling (4:4:4). Blocks are padded by edge replication when the
//! image extent is not a multiple of 8.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// One degradation setting. Noise carries its own seed so a degradation grid
/// is fully reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degradation {
    Identity,
    Jpeg { quality: u8 },
    Blur { sigma: f64 },
    Noise { level: u8, seed: u64 },
}

impl Degradation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Degradation::Identity => Ok(()),
            Degradation::Jpeg { quality } => {
                if (1..=100).contains(&quality) {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("jpeg quality {quality} outside [1,100]")))
                }
            }
            Degradation::Blur { sigma } => {
                if sigma.is_finite() && sigma >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("blur sigma {sigma} must be finite and >= 0")))
                }
            }
            // Any u8 level is well defined (std = 2^i/255); the sweep grid
            // stays at [0,6].
            Degradation::Noise { .. } => Ok(()),
        }
    }

    /// Short stable name used in report rows, e.g. `jpeg_q30`, `blur_s0.64`.
    pub fn name(&self) -> String {
        match *self {
            Degradation::Identity => "identity".to_string(),
            Degradation::Jpeg { quality } => format!("jpeg_q{quality}"),
            Degradation::Blur { sigma } => format!("blur_s{sigma}"),
            Degradation::Noise { level, .. } => format!("noise_i{level}"),
        }
    }
}

/// Applies a degradation; the only stochastic kind (noise) draws from its own
/// seeded stream, so equal configs give bit-identical outputs.
pub fn degrade(image: &Tensor, config: &Degradation) -> Result<Tensor> {
    config.validate()?;
    let (_, _, _) = image.chw_dims()?;
    if !image.all_finite() {
        return Err(Error::NonFinite("degrade input".into()));
    }
    let out = match *config {
        Degradation::Identity => image.clone(),
        Degradation::Jpeg { quality } => jpeg_roundtrip(image, quality)?,
        Degradation::Blur { sigma } => gaussian_blur(image, sigma)?,
        Degradation::Noise { level, seed } => additive_noise(image, level, seed)?,
    };
    Ok(out.clamped(0.0, 1.0))
}

// --- blur --------------------------------------------------------------------

/// Kernel extent for a blur strength: 0 disables blurring entirely, sigma in
/// (0,1] uses 3x3, (1,2] uses 5x5, and anything above 2 uses 7x7. Negative
/// sigma is rejected.
pub fn kernel_size_for_sigma(sigma: f64) -> Result<usize> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidArgument(format!("blur sigma {sigma} must be finite and >= 0")));
    }
    Ok(if sigma == 0.0 {
        0
    } else if sigma <= 1.0 {
        3
    } else if sigma <= 2.0 {
        5
    } else {
        7
    })
}

/// Separable Gaussian blur with edge replication. A truncated normalized 2-D
/// Gaussian kernel factors exactly into normalized 1-D passes.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let (c, h, w) = image.chw_dims()?;
    let size = kernel_size_for_sigma(sigma)?;
    if size == 0 {
        return Ok(image.clone());
    }
    let half = (size / 2) as isize;
    let mut kernel = Vec::with_capacity(size);
    let mut sum = 0.0;
    for d in -half..=half {
        let v = (-((d * d) as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }

    let src = image.data();
    let mut mid = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + k as isize - half).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[row + xx];
                }
                mid[row + x] = acc;
            }
        }
    }
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + k as isize - half).clamp(0, h as isize - 1) as usize;
                    acc += kv * mid[(ch * h + yy) * w + x];
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

// --- noise -------------------------------------------------------------------

/// Additive Gaussian noise with std `2^level / 255`, drawn from a stream
/// seeded only by `seed`.
pub fn additive_noise(image: &Tensor, level: u8, seed: u64) -> Result<Tensor> {
    let std = 2f64.powi(i32::from(level)) / 255.0;
    let mut rng = rng_from(seed);
    Ok(image.map(|v| {
        let n: f64 = rng.sample(StandardNormal);
        v + std * n
    }))
}

// --- jpeg --------------------------------------------------------------------

/// Annex K luminance base table, row-major zigzag-free order.
const Q_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Annex K chrominance base table.
const Q_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// libjpeg integer quality scaling: entries are clamped to [1, 255].
fn scaled_table(base: &[u16; 64], quality: u8) -> [f64; 64] {
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (i, &b) in base.iter().enumerate() {
        let v = (b as u32 * scale + 50) / 100;
        out[i] = v.clamp(1, 255) as f64;
    }
    out
}

const DCT_N: usize = 8;

/// One 1-D pass of the JPEG type-II DCT: `G[u] = 0.5 C(u) sum g[n] cos((2n+1)u pi/16)`.
fn dct8(input: &[f64; 8], out: &mut [f64; 8]) {
    for (u, o) in out.iter_mut().enumerate() {
        let cu = if u == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
        let mut acc = 0.0;
        for (n, &g) in input.iter().enumerate() {
            acc += g * (((2 * n + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
        *o = 0.5 * cu * acc;
    }
}

fn idct8(input: &[f64; 8], out: &mut [f64; 8]) {
    for (n, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (u, &g) in input.iter().enumerate() {
            let cu = if u == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            acc += cu * g * (((2 * n + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
        *o = 0.5 * acc;
    }
}

fn dct2d(block: &mut [f64; 64], inverse: bool) {
    let mut line = [0.0; 8];
    let mut tmp = [0.0; 8];
    for r in 0..DCT_N {
        line.copy_from_slice(&block[r * 8..r * 8 + 8]);
        if inverse {
            idct8(&line, &mut tmp)
        } else {
            dct8(&line, &mut tmp)
        };
        block[r * 8..r * 8 + 8].copy_from_slice(&tmp);
    }
    for c in 0..DCT_N {
        for r in 0..DCT_N {
            line[r] = block[r * 8 + c];
        }
        if inverse {
            idct8(&line, &mut tmp)
        } else {
            dct8(&line, &mut tmp)
        };
        for r in 0..DCT_N {
            block[r * 8 + c] = tmp[r];
        }
    }
}

/// Compress-decompress one channel plane (values around [-128, 127] after the
/// level shift) against a quantization table.
fn jpeg_plane(plane: &mut [f64], h: usize, w: usize, table: &[f64; 64]) {
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block = [0.0; 64];
            for y in 0..8 {
                for x in 0..8 {
                    block[y * 8 + x] = plane[(by + y) * w + bx + x] - 128.0;
                }
            }
            dct2d(&mut block, false);
            for (v, &q) in block.iter_mut().zip(table.iter()) {
                *v = (*v / q).round() * q;
            }
            dct2d(&mut block, true);
            for y in 0..8 {
                for x in 0..8 {
                    plane[(by + y) * w + bx + x] = block[y * 8 + x] + 128.0;
                }
            }
        }
    }
}

/// Full JPEG compression round-trip at the given quality.
pub fn jpeg_roundtrip(image: &Tensor, quality: u8) -> Result<Tensor> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!("jpeg quality {quality} outside [1,100]")));
    }
    let (c, h, w) = image.chw_dims()?;
    if c != 3 {
        return Err(Error::shape("jpeg_roundtrip", "(3,H,W)", format!("{:?}", image.shape())));
    }
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let d = image.data();
    let plane = h * w;

    // RGB -> YCbCr on the 0..255 scale, padded by edge replication.
    let mut y_p = vec![0.0; ph * pw];
    let mut cb_p = vec![0.0; ph * pw];
    let mut cr_p = vec![0.0; ph * pw];
    for py in 0..ph {
        let sy = py.min(h - 1);
        for px in 0..pw {
            let sx = px.min(w - 1);
            let r = d[sy * w + sx] * 255.0;
            let g = d[plane + sy * w + sx] * 255.0;
            let b = d[2 * plane + sy * w + sx] * 255.0;
            y_p[py * pw + px] = 0.299 * r + 0.587 * g + 0.114 * b;
            cb_p[py * pw + px] = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
            cr_p[py * pw + px] = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
        }
    }

    let luma_table = scaled_table(&Q_LUMA, quality);
    let chroma_table = scaled_table(&Q_CHROMA, quality);
    jpeg_plane(&mut y_p, ph, pw, &luma_table);
    jpeg_plane(&mut cb_p, ph, pw, &chroma_table);
    jpeg_plane(&mut cr_p, ph, pw, &chroma_table);

    let mut out = vec![0.0; 3 * plane];
    for yy in 0..h {
        for xx in 0..w {
            let yv = y_p[yy * pw + xx];
            let cb = cb_p[yy * pw + xx] - 128.0;
            let cr = cr_p[yy * pw + xx] - 128.0;
            out[yy * w + xx] = (yv + 1.402 * cr) / 255.0;
            out[plane + yy * w + xx] = (yv - 0.344136 * cb - 0.714136 * cr) / 255.0;
            out[2 * plane + yy * w + xx] = (yv + 1.772 * cb) / 255.0;
        }
    }
    Ok(Tensor::new(image.shape().to_vec(), out)?.clamped(0.0, 1.0))
}

// --- paper grids ---------------------------------------------------------------

/// JPEG qualities used in degradation sweeps.
pub fn jpeg_quality_grid() -> Vec<u8> {
    vec![90, 60, 30]
}

/// Blur strengths `0.01 * 2^n` for n in 1..=10 (0.02 through 10.24).
pub fn blur_sigma_grid() -> Vec<f64> {
    (1..=10).map(|n| 0.01 * f64::from(1u32 << n)).collect()
}

/// Noise levels i, std `2^i/255`, for i in 0..=6.
pub fn noise_level_grid() -> Vec<u8> {
    (0..=6).collect()
}
