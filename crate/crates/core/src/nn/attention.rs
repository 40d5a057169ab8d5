//! Feature pyramid attention over a backbone feature map.
//!
//! ```text
//! master  = conv1x1(x)
//! level_i = relu(conv_k_i stride 2 (level_{i-1})),  level_0 = x
//! refined_i = relu(conv_k_i(level_i))
//! merged  = coarse-to-fine: relu(refined_i + upsample(merged_{i+1}))
//! attn    = relu(conv1x1(upsample(merged_1)))
//! out     = relu(master * attn + conv1x1(global_avg_pool(x)))
//! ```

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{global_avg_pool, resize_bilinear, Conv2d};
use super::params::Builder;
use super::{NnError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Kernel size per pyramid level, finest first.
    pub kernels: Vec<usize>,
    /// Pyramid channels = input channels / reduction.
    pub reduction: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { kernels: vec![7, 5, 3], reduction: 4 }
    }
}

impl AttentionConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.kernels.is_empty() || self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(NnError::InvalidSpec(format!("pyramid kernels must be odd and non-empty: {:?}", self.kernels)));
        }
        if self.reduction == 0 || channels / self.reduction == 0 {
            return Err(NnError::InvalidSpec(format!(
                "reduction {} leaves no pyramid channels for {channels} inputs",
                self.reduction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PyramidAttention {
    channels: usize,
    master: Conv2d,
    global: Conv2d,
    down: Vec<Conv2d>,
    refine: Vec<Conv2d>,
    project: Conv2d,
}

impl PyramidAttention {
    pub fn new(b: &Builder, channels: usize, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate(channels)?;
        let mid = channels / cfg.reduction;
        let mut down = Vec::new();
        let mut refine = Vec::new();
        for (i, &k) in cfg.kernels.iter().enumerate() {
            let in_c = if i == 0 { channels } else { mid };
            down.push(Conv2d::new(&b.pp(format!("down{}", i + 1)), in_c, mid, k, 2, k / 2, true)?);
            refine.push(Conv2d::new(&b.pp(format!("refine{}", i + 1)), mid, mid, k, 1, k / 2, true)?);
        }
        Ok(Self {
            channels,
            master: Conv2d::new(&b.pp("master"), channels, channels, 1, 1, 0, true)?,
            global: Conv2d::new(&b.pp("global"), channels, channels, 1, 1, 0, true)?,
            down,
            refine,
            project: Conv2d::new(&b.pp("project"), mid, channels, 1, 1, 0, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(NnError::ShapeMismatch(format!("attention expects {} channels, got {c}", self.channels)));
        }
        let master = self.master.forward(x)?;
        let global = self.global.forward(&global_avg_pool(x)?)?;

        let mut levels = Vec::with_capacity(self.down.len());
        let mut cur = x.clone();
        for (d, r) in self.down.iter().zip(&self.refine) {
            cur = d.forward(&cur)?.relu()?;
            levels.push(r.forward(&cur)?.relu()?);
        }
        let mut merged = levels.pop().expect("at least one level");
        while let Some(finer) = levels.pop() {
            let (_, _, fh, fw) = finer.dims4()?;
            merged = (finer + resize_bilinear(&merged, fh, fw)?)?.relu()?;
        }
        let attn = self.project.forward(&resize_bilinear(&merged, h, w)?)?.relu()?;
        Ok((master * attn)?.broadcast_add(&global)?.relu()?)
    }
}
