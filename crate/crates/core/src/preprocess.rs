//! The five-step input pipeline: augmentation (training only), histogram
//! equalization, resize, Gaussian blur and per-image standardization.

use std::path::Path;

use image::DynamicImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interp::linear_taps;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("cannot decode image {path}: {message}")]
    Decode { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Mode::Train),
            "eval" => Ok(Mode::Eval),
            other => Err(format!("unknown mode {other:?}, expected train or eval")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EqualizeMode {
    /// Equalize each colour channel independently.
    PerChannel,
    /// Equalize BT.601 luma and shift all channels by the luma change.
    Luminance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub rotation_range_deg: (f64, f64),
    pub translation_range_frac: (f64, f64),
    /// (height, width, channels)
    pub target_size: (usize, usize, usize),
    pub blur_window: usize,
    /// `None` selects the standard fixed binomial kernel for windows up to 7
    /// (for a 3-tap window: 1/4, 1/2, 1/4, nominal sigma 0.8) and a sampled
    /// Gaussian with the nominal sigma for larger windows.
    pub blur_sigma: Option<f64>,
    pub augment_enabled: bool,
    pub equalize: EqualizeMode,
    /// Intensity written into pixels exposed by rotation/translation.
    pub fill_value: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            rotation_range_deg: (-15.0, 15.0),
            translation_range_frac: (-0.05, 0.05),
            target_size: (256, 256, 3),
            blur_window: 3,
            blur_sigma: None,
            augment_enabled: true,
            equalize: EqualizeMode::PerChannel,
            fill_value: 0.0,
        }
    }
}

impl PreprocessConfig {
    pub fn with_target(mut self, height: usize, width: usize) -> Self {
        self.target_size = (height, width, self.target_size.2);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PreprocessError::InvalidConfig(m));
        let (rlo, rhi) = self.rotation_range_deg;
        if !(rlo.is_finite() && rhi.is_finite() && rlo <= rhi) {
            return bad(format!("rotation range [{rlo}, {rhi}] is not an interval"));
        }
        let (tlo, thi) = self.translation_range_frac;
        if !(tlo.is_finite() && thi.is_finite() && tlo <= thi) {
            return bad(format!("translation range [{tlo}, {thi}] is not an interval"));
        }
        if self.blur_window == 0 || self.blur_window % 2 == 0 {
            return bad(format!("blur window must be odd and >= 1, got {}", self.blur_window));
        }
        if let Some(s) = self.blur_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("blur sigma must be positive, got {s}"));
            }
        }
        let (h, w, c) = self.target_size;
        if h == 0 || w == 0 || !(c == 1 || c == 3) {
            return bad(format!("target size ({h}, {w}, {c}) must be positive with 1 or 3 channels"));
        }
        Ok(())
    }
}

/// H x W x C intensities, row-major with interleaved channels. Values are
/// 0..=255 integers for decoded images and arbitrary reals after filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(PreprocessError::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if !(channels == 1 || channels == 3) {
            return Err(PreprocessError::InvalidImage(format!(
                "expected 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(PreprocessError::InvalidImage(format!(
                "buffer of {} values does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Grayscale sources stay single-channel; everything else becomes RGB.
    /// 16-bit and float sources are rescaled to the 0..=255 range.
    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let gray = matches!(
            img,
            DynamicImage::ImageLuma8(_)
                | DynamicImage::ImageLumaA8(_)
                | DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA16(_)
        );
        let data: Vec<f64> = if gray {
            img.to_luma8().into_raw().into_iter().map(f64::from).collect()
        } else {
            img.to_rgb8().into_raw().into_iter().map(f64::from).collect()
        };
        RasterImage {
            width: w,
            height: h,
            channels: if gray { 1 } else { 3 },
            data,
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| PreprocessError::Decode {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn open(path: &Path) -> Result<Self> {
        let decode_err = |e: &dyn std::fmt::Display| PreprocessError::Decode {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let img = image::ImageReader::open(path)
            .map_err(|e| decode_err(&e))?
            .with_guessed_format()
            .map_err(|e| decode_err(&e))?
            .decode()
            .map_err(|e| decode_err(&e))?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// 8-bit RGB rendering; values are rounded and clamped.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in out.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = self.get(x as usize, y as usize, c.min(self.channels - 1));
                px.0[c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }

    /// Anisotropic total variation summed over channels.
    pub fn total_variation(&self) -> f64 {
        let mut tv = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let v = self.get(x, y, c);
                    if x + 1 < self.width {
                        tv += (self.get(x + 1, y, c) - v).abs();
                    }
                    if y + 1 < self.height {
                        tv += (self.get(x, y + 1, c) - v).abs();
                    }
                }
            }
        }
        tv
    }
}

/// Geometric augmentation drawn for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub angle_deg: f64,
    /// Horizontal shift as a fraction of the width (positive moves content right).
    pub shift_x: f64,
    /// Vertical shift as a fraction of the height (positive moves content down).
    pub shift_y: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        angle_deg: 0.0,
        shift_x: 0.0,
        shift_y: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, cfg: &PreprocessConfig) -> Self {
        let angle_deg = uniform(rng, cfg.rotation_range_deg);
        let shift_x = uniform(rng, cfg.translation_range_frac);
        let shift_y = uniform(rng, cfg.translation_range_frac);
        AugmentParams {
            angle_deg,
            shift_x,
            shift_y,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Random rotation about the image centre plus translation; exposed pixels
/// take `cfg.fill_value`. Returns the input unchanged when augmentation is
/// disabled (no random draws are made).
pub fn augment<R: Rng + ?Sized>(img: &RasterImage, rng: &mut R, cfg: &PreprocessConfig) -> RasterImage {
    if !cfg.augment_enabled {
        return img.clone();
    }
    let params = AugmentParams::sample(rng, cfg);
    apply_affine(img, &params, cfg.fill_value)
}

/// Inverse-maps every output pixel and samples the source bilinearly.
pub fn apply_affine(img: &RasterImage, params: &AugmentParams, fill: f64) -> RasterImage {
    let (w, h, ch) = (img.width, img.height, img.channels);
    let theta = params.angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let tx = params.shift_x * w as f64;
    let ty = params.shift_y * h as f64;
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - tx;
            let dy = y as f64 - cy - ty;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            for c in 0..ch {
                let tap = |xi: f64, yi: f64| -> f64 {
                    if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
                        fill
                    } else {
                        img.get(xi as usize, yi as usize, c)
                    }
                };
                let mut v = 0.0;
                for (wy, yi) in [(1.0 - fy, y0), (fy, y0 + 1.0)] {
                    if wy == 0.0 {
                        continue;
                    }
                    for (wx, xi) in [(1.0 - fx, x0), (fx, x0 + 1.0)] {
                        if wx == 0.0 {
                            continue;
                        }
                        v += wy * wx * tap(xi, yi);
                    }
                }
                out.set(x, y, c, v);
            }
        }
    }
    out
}

/// Histogram equalization over 256 integer levels. Each channel is remapped
/// by `round(255 * (cdf(v) - cdf_min) / (N - cdf_min))`; a single-level
/// channel is returned unchanged.
pub fn equalize_histogram(img: &RasterImage, mode: EqualizeMode) -> RasterImage {
    let quantize = |v: f64| v.round().clamp(0.0, 255.0) as usize;
    match mode {
        EqualizeMode::PerChannel => {
            let mut out = img.clone();
            for c in 0..img.channels {
                let levels: Vec<usize> = img
                    .data
                    .iter()
                    .skip(c)
                    .step_by(img.channels)
                    .map(|&v| quantize(v))
                    .collect();
                let lut = equalization_lut(&levels);
                for (i, level) in levels.into_iter().enumerate() {
                    out.data[i * img.channels + c] = lut[level];
                }
            }
            out
        }
        EqualizeMode::Luminance => {
            if img.channels == 1 {
                return equalize_histogram(img, EqualizeMode::PerChannel);
            }
            let luma: Vec<usize> = img
                .data
                .chunks_exact(3)
                .map(|p| quantize(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]))
                .collect();
            let lut = equalization_lut(&luma);
            let mut out = img.clone();
            for (px, y) in out.data.chunks_exact_mut(3).zip(luma) {
                let delta = lut[y] - y as f64;
                for v in px.iter_mut() {
                    *v = (v.round() + delta).clamp(0.0, 255.0);
                }
            }
            out
        }
    }
}

fn equalization_lut(levels: &[usize]) -> [f64; 256] {
    let mut hist = [0usize; 256];
    for &l in levels {
        hist[l] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (i, h) in hist.iter().enumerate() {
        acc += h;
        cdf[i] = acc;
    }
    let n = levels.len();
    let cdf_min = hist
        .iter()
        .zip(cdf.iter())
        .find(|(h, _)| **h > 0)
        .map(|(_, c)| *c)
        .unwrap_or(0);
    let mut lut = [0.0; 256];
    for (i, slot) in lut.iter_mut().enumerate() {
        *slot = if n == cdf_min {
            i as f64
        } else {
            let num = cdf[i].saturating_sub(cdf_min) as f64;
            (255.0 * num / (n - cdf_min) as f64).round()
        };
    }
    lut
}

/// Direct bilinear rescale to `target` (height, width, channels). Aspect
/// ratio is not preserved. Grayscale sources are replicated into three
/// channels; RGB sources requested as one channel are converted to luma.
pub fn resize(img: &RasterImage, target: (usize, usize, usize)) -> RasterImage {
    let (th, tw, tc) = target;
    let ty = linear_taps(img.height, th);
    let tx = linear_taps(img.width, tw);
    let src_c = img.channels;
    let mut data = Vec::with_capacity(th * tw * tc);
    let mut px = [0.0f64; 3];
    for y in &ty {
        for x in &tx {
            for (c, slot) in px.iter_mut().enumerate().take(src_c) {
                let a = img.get(x.lo, y.lo, c) * (1.0 - x.frac) + img.get(x.hi, y.lo, c) * x.frac;
                let b = img.get(x.lo, y.hi, c) * (1.0 - x.frac) + img.get(x.hi, y.hi, c) * x.frac;
                *slot = a * (1.0 - y.frac) + b * y.frac;
            }
            match (src_c, tc) {
                (1, 3) => data.extend_from_slice(&[px[0]; 3]),
                (3, 1) => data.push(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]),
                _ => data.extend_from_slice(&px[..tc]),
            }
        }
    }
    RasterImage {
        width: tw,
        height: th,
        channels: tc,
        data,
    }
}

const BINOMIAL_KERNELS: [&[f64]; 4] = [
    &[1.0],
    &[0.25, 0.5, 0.25],
    &[0.0625, 0.25, 0.375, 0.25, 0.0625],
    &[0.03125, 0.109375, 0.21875, 0.28125, 0.21875, 0.109375, 0.03125],
];

/// Nominal sigma for a window when none is given.
pub fn nominal_sigma(window: usize) -> f64 {
    0.3 * ((window as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

/// Normalized 1-D smoothing kernel.
pub fn gaussian_kernel_1d(window: usize, sigma: Option<f64>) -> Vec<f64> {
    assert!(window % 2 == 1, "blur window must be odd");
    if sigma.is_none() && window <= 7 {
        return BINOMIAL_KERNELS[window / 2].to_vec();
    }
    let sigma = sigma.unwrap_or_else(|| nominal_sigma(window));
    let half = (window / 2) as f64;
    let raw: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Row-major `window x window` kernel (outer product of the 1-D kernel).
pub fn gaussian_kernel_2d(window: usize, sigma: Option<f64>) -> Vec<f64> {
    let k = gaussian_kernel_1d(window, sigma);
    k.iter().flat_map(|a| k.iter().map(move |b| a * b)).collect()
}

/// Reflect-101 border index (`gfedcb|abcdefgh|gfedcba`).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= len as isize {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian smoothing with reflect-101 borders.
pub fn gaussian_blur(img: &RasterImage, window: usize, sigma: Option<f64>) -> RasterImage {
    let k = gaussian_kernel_1d(window, sigma);
    let half = (window / 2) as isize;
    let (w, h, ch) = (img.width, img.height, img.channels);
    let mut tmp = img.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xi = reflect(x as isize + j as isize - half, w);
                    acc += kv * img.get(xi, y, c);
                }
                tmp.set(x, y, c, acc);
            }
        }
    }
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let yi = reflect(y as isize + j as isize - half, h);
                    acc += kv * tmp.get(x, yi, c);
                }
                out.set(x, y, c, acc);
            }
        }
    }
    out
}

/// Standardized H x W x C tensor, stored as 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major H x W x C.
    pub values: Vec<f32>,
    pub source_id: Option<String>,
    /// Set when the input had zero variance; `values` are then all zero.
    pub degenerate: bool,
}

impl NormalizedTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Channel-major copy (C x H x W), the layout the networks consume.
    pub fn to_chw(&self) -> Vec<f32> {
        let (h, w, c) = self.shape();
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.values[(y * w + x) * c + ch];
                }
            }
        }
        out
    }

    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(self.values.iter().map(|&v| v as f64), self.values.len())
    }

    pub fn to_raster(&self) -> RasterImage {
        RasterImage {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.values.iter().map(|&v| v as f64).collect(),
        }
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Subtracts the image mean and divides by the population standard
/// deviation over all elements. Zero-variance images yield zeros with the
/// `degenerate` flag set.
pub fn normalize(img: &RasterImage) -> NormalizedTensor {
    let n = img.data.len();
    let (mean, std) = mean_std(img.data.iter().copied(), n);
    let degenerate = !(std > 1e-12 * mean.abs().max(1.0)) || !std.is_finite();
    let values = if degenerate {
        vec![0.0; n]
    } else {
        img.data.iter().map(|v| ((v - mean) / std) as f32).collect()
    };
    NormalizedTensor {
        height: img.height,
        width: img.width,
        channels: img.channels,
        values,
        source_id: None,
        degenerate,
    }
}

/// Runs the full pipeline. Augmentation only happens in [`Mode::Train`]
/// with `augment_enabled`; evaluation mode draws nothing from `rng`.
pub fn run_pipeline<R: Rng + ?Sized>(
    img: &RasterImage,
    mode: Mode,
    rng: &mut R,
    cfg: &PreprocessConfig,
) -> Result<NormalizedTensor> {
    cfg.validate()?;
    let augmented;
    let img = if mode == Mode::Train && cfg.augment_enabled {
        augmented = augment(img, rng, cfg);
        &augmented
    } else {
        img
    };
    let equalized = equalize_histogram(img, cfg.equalize);
    let resized = resize(&equalized, cfg.target_size);
    let blurred = gaussian_blur(&resized, cfg.blur_window, cfg.blur_sigma);
    Ok(normalize(&blurred))
}

/// Independent random stream for one sample of one epoch, so augmentation
/// does not depend on batch composition or worker scheduling.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}
