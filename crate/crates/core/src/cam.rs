//! Grad-CAM heatmaps over the attention output and colour overlays.

use std::path::Path;

use candle_core::{DType, IndexOp, Var};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interp::resize_grid;
use crate::nn::layers::no_grad;
use crate::nn::{Model, NnError};
use crate::preprocess::NormalizedTensor;
use crate::tensor_io::{self, TensorIoError};

#[derive(Debug, Error)]
pub enum CamError {
    #[error("invalid class {class}: model has {outputs} output(s)")]
    InvalidClass { class: usize, outputs: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),
}

impl From<candle_core::Error> for CamError {
    fn from(e: candle_core::Error) -> Self {
        CamError::Nn(NnError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, CamError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamResult {
    /// Feature-grid heatmap, row-major `grid_h x grid_w`, values in [0, 1].
    pub heatmap: Vec<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Bilinear upsampling of `heatmap` to `height x width`.
    pub upsampled: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub target_class: usize,
    pub image_id: Option<String>,
    /// Weighted activation sum was nowhere positive; the map is all zeros.
    pub degenerate: bool,
    /// Pre-activation score of the target class.
    pub score: f64,
}

impl CamResult {
    /// Re-upsamples the grid heatmap to another resolution.
    pub fn resized(&self, height: usize, width: usize) -> Vec<f64> {
        clamp01(resize_grid(&self.heatmap, self.grid_h, self.grid_w, height, width))
    }

    pub fn write_heatmap(&self, path: &Path) -> Result<()> {
        let v: Vec<f32> = self.heatmap.iter().map(|x| *x as f32).collect();
        tensor_io::write_tensor(path, &[self.grid_h, self.grid_w], &v)?;
        Ok(())
    }

    /// Fraction of upsampled heatmap mass inside a rectangle (`x0..x1`, `y0..y1`).
    pub fn mass_in(&self, x0: usize, x1: usize, y0: usize, y1: usize) -> f64 {
        let total: f64 = self.upsampled.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                inside += self.upsampled[y * self.width + x];
            }
        }
        inside / total
    }
}

fn clamp01(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect()
}

/// ReLU then per-image min-max normalization. Returns the map and the degenerate flag.
pub fn normalize_cam(raw: &[f64]) -> (Vec<f64>, bool) {
    if !raw.iter().any(|v| *v > 0.0) {
        return (vec![0.0; raw.len()], true);
    }
    let relu: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    let lo = relu.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = relu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= f64::EPSILON * hi {
        return (vec![1.0; raw.len()], false);
    }
    (relu.iter().map(|v| (v - lo) / (hi - lo)).collect(), false)
}

/// Number of classes a heatmap can target. Single-output models have two: 0 is the
/// positive class, 1 the negative class (score = negated logit).
pub fn target_classes(model: &Model) -> usize {
    model.spec().head.outputs.max(2)
}

/// Grad-CAM for one preprocessed image. The channel weights are spatial means of the
/// gradient of the target class's pre-activation score with respect to the attention output.
pub fn grad_cam(model: &Model, image: &NormalizedTensor, target_class: usize) -> Result<CamResult> {
    let outputs = model.spec().head.outputs;
    if target_class >= target_classes(model) {
        return Err(CamError::InvalidClass { class: target_class, outputs });
    }
    let x = model.input_tensor(std::slice::from_ref(image))?;
    let fm = no_grad(|| model.features(&x, false))?;
    let fm_var = Var::from_tensor(&fm)?;
    let logits = model.logits_from_features(&x, fm_var.as_tensor(), false)?;
    let score = if outputs == 1 { logits.i((0, 0))? } else { logits.i((0, target_class))? };
    let score = if outputs == 1 && target_class == 1 { score.neg()? } else { score };
    let grads = score.backward()?;
    let g = grads
        .get(fm_var.as_tensor())
        .ok_or_else(|| CamError::ShapeMismatch("no gradient reached the feature map".into()))?;
    let (_, c, h, w) = fm.dims4()?;
    let alpha = g.to_dtype(DType::F64)?.mean((2, 3))?.reshape((1, c))?;
    let a = fm.to_dtype(DType::F64)?.reshape((c, h * w))?;
    let raw = alpha.matmul(&a)?.flatten_all()?.to_vec1::<f64>()?;
    let (heatmap, degenerate) = normalize_cam(&raw);
    let [height, width] = model.spec().input_size;
    let upsampled = clamp01(resize_grid(&heatmap, h, w, height, width));
    Ok(CamResult {
        heatmap,
        grid_h: h,
        grid_w: w,
        upsampled,
        height,
        width,
        target_class,
        image_id: image.source_id.clone(),
        degenerate,
        score: score.to_dtype(DType::F64)?.to_scalar::<f64>()?,
    })
}

/// Jet colormap: blue (0) through cyan, yellow to red (1).
pub fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f64| ((1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Pure colour-mapped rendering of a heatmap grid.
pub fn colorize(map: &[f64], width: usize, height: usize) -> Result<RgbImage> {
    if map.len() != width * height {
        return Err(CamError::ShapeMismatch(format!("{} values for {width}x{height}", map.len())));
    }
    Ok(RgbImage::from_fn(width as u32, height as u32, |x, y| Rgb(jet(map[y as usize * width + x as usize]))))
}

/// Blends `round((1 - alpha) * source + alpha * jet(map))` per channel. The map must
/// match the source resolution (see [`CamResult::resized`]).
pub fn render_overlay(source: &RgbImage, map: &[f64], map_w: usize, map_h: usize, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CamError::InvalidAlpha(alpha));
    }
    if (source.width() as usize, source.height() as usize) != (map_w, map_h) || map.len() != map_w * map_h {
        return Err(CamError::ShapeMismatch(format!(
            "source is {}x{}, heatmap is {map_w}x{map_h}",
            source.width(),
            source.height()
        )));
    }
    let mut out = source.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let c = jet(map[y as usize * map_w + x as usize]);
        for k in 0..3 {
            px.0[k] = ((1.0 - alpha) * px.0[k] as f64 + alpha * c[k] as f64).round() as u8;
        }
    }
    Ok(out)
}

/// PNG encoding with fixed settings, so identical pixels give identical bytes.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| CamError::ShapeMismatch(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_guards() {
        assert_eq!(normalize_cam(&[-1.0, -2.0, 0.0]), (vec![0.0; 3], true));
        assert_eq!(normalize_cam(&[2.0, 2.0]), (vec![1.0, 1.0], false));
        let (m, d) = normalize_cam(&[-3.0, 1.0, 3.0]);
        assert!(!d);
        assert_eq!(m, vec![0.0, 1.0 / 3.0, 1.0]);
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0, 0, 128]);
        assert_eq!(jet(1.0), [128, 0, 0]);
        assert_eq!(jet(0.5), [128, 255, 128]);
    }

    #[test]
    fn overlay_alpha_extremes() {
        let src = RgbImage::from_fn(4, 3, |x, y| Rgb([x as u8 * 40, y as u8 * 70, 9]));
        let map: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        assert_eq!(render_overlay(&src, &map, 4, 3, 0.0).unwrap(), src);
        assert_eq!(render_overlay(&src, &map, 4, 3, 1.0).unwrap(), colorize(&map, 4, 3).unwrap());
        assert!(matches!(render_overlay(&src, &map, 3, 4, 0.5), Err(CamError::ShapeMismatch(_))));
        assert!(matches!(render_overlay(&src, &map, 4, 3, 1.5), Err(CamError::InvalidAlpha(_))));
    }
}
