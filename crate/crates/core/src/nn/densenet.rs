//! DenseNet feature extractor. Parameter names follow the torchvision layout
//! (`features.denseblock1.denselayer1.conv1.weight`, ...) so exported weights can be loaded.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{avg_pool_2x2, max_pool_3x3_s2, BatchNorm, Conv2d};
use super::params::Builder;
use super::{NnError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseNetConfig {
    pub growth_rate: usize,
    pub block_config: Vec<usize>,
    pub num_init_features: usize,
    pub bn_size: usize,
}

impl DenseNetConfig {
    pub fn densenet121() -> Self {
        Self { growth_rate: 32, block_config: vec![6, 12, 24, 16], num_init_features: 64, bn_size: 4 }
    }

    /// Small variant for CPU tests: stride 8, 32 output channels.
    pub fn tiny() -> Self {
        Self { growth_rate: 8, block_config: vec![2, 2], num_init_features: 16, bn_size: 4 }
    }

    pub fn out_channels(&self) -> usize {
        let mut c = self.num_init_features;
        for (i, n) in self.block_config.iter().enumerate() {
            c += n * self.growth_rate;
            if i + 1 < self.block_config.len() {
                c /= 2;
            }
        }
        c
    }

    /// Total downsampling factor: stem conv, max pool, one per transition.
    pub fn stride(&self) -> usize {
        4 << self.block_config.len().saturating_sub(1)
    }

    pub fn feature_size(&self, input: usize) -> usize {
        // conv 7x7/2 pad 3, maxpool 3x3/2 pad 1: both ceil(n/2); avgpool 2x2: floor
        let mut n = input.div_ceil(2).div_ceil(2);
        for _ in 1..self.block_config.len() {
            n /= 2;
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        if self.growth_rate == 0 || self.block_config.is_empty() || self.num_init_features == 0 || self.bn_size == 0 {
            return Err(NnError::InvalidSpec("densenet config has a zero dimension".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DenseLayer {
    norm1: BatchNorm,
    conv1: Conv2d,
    norm2: BatchNorm,
    conv2: Conv2d,
}

impl DenseLayer {
    fn new(b: &Builder, in_c: usize, growth: usize, bn_size: usize) -> Result<Self> {
        let mid = bn_size * growth;
        Ok(Self {
            norm1: BatchNorm::new(&b.pp("norm1"), in_c)?,
            conv1: Conv2d::new(&b.pp("conv1"), in_c, mid, 1, 1, 0, false)?,
            norm2: BatchNorm::new(&b.pp("norm2"), mid)?,
            conv2: Conv2d::new(&b.pp("conv2"), mid, growth, 3, 1, 1, false)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x, train)?.relu()?)?;
        self.conv2.forward(&self.norm2.forward(&h, train)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct Transition {
    norm: BatchNorm,
    conv: Conv2d,
}

#[derive(Debug, Clone)]
pub struct DenseNet {
    cfg: DenseNetConfig,
    conv0: Conv2d,
    norm0: BatchNorm,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    norm5: BatchNorm,
}

impl DenseNet {
    pub fn new(b: &Builder, cfg: &DenseNetConfig) -> Result<Self> {
        cfg.validate()?;
        let f = b.pp("features");
        let mut c = cfg.num_init_features;
        let conv0 = Conv2d::new(&f.pp("conv0"), 3, c, 7, 2, 3, false)?;
        let norm0 = BatchNorm::new(&f.pp("norm0"), c)?;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (i, n) in cfg.block_config.iter().enumerate() {
            let bb = f.pp(format!("denseblock{}", i + 1));
            let mut layers = Vec::new();
            for j in 0..*n {
                layers.push(DenseLayer::new(&bb.pp(format!("denselayer{}", j + 1)), c, cfg.growth_rate, cfg.bn_size)?);
                c += cfg.growth_rate;
            }
            blocks.push(layers);
            if i + 1 < cfg.block_config.len() {
                let tb = f.pp(format!("transition{}", i + 1));
                transitions.push(Transition {
                    norm: BatchNorm::new(&tb.pp("norm"), c)?,
                    conv: Conv2d::new(&tb.pp("conv"), c, c / 2, 1, 1, 0, false)?,
                });
                c /= 2;
            }
        }
        let norm5 = BatchNorm::new(&f.pp("norm5"), c)?;
        Ok(Self { cfg: cfg.clone(), conv0, norm0, blocks, transitions, norm5 })
    }

    pub fn config(&self) -> &DenseNetConfig {
        &self.cfg
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.norm0.forward(&self.conv0.forward(x)?, train)?.relu()?;
        let mut x = max_pool_3x3_s2(&x)?;
        for (i, block) in self.blocks.iter().enumerate() {
            for layer in block {
                let new = layer.forward(&x, train)?;
                x = Tensor::cat(&[&x, &new], 1)?;
            }
            if let Some(t) = self.transitions.get(i) {
                x = avg_pool_2x2(&t.conv.forward(&t.norm.forward(&x, train)?.relu()?)?)?;
            }
        }
        Ok(self.norm5.forward(&x, train)?.relu()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densenet121_geometry() {
        let c = DenseNetConfig::densenet121();
        assert_eq!(c.out_channels(), 1024);
        assert_eq!(c.stride(), 32);
        assert_eq!(c.feature_size(256), 8);
        assert_eq!(c.feature_size(224), 7);
    }

    #[test]
    fn tiny_geometry() {
        let c = DenseNetConfig::tiny();
        assert_eq!(c.out_channels(), 32);
        assert_eq!(c.feature_size(64), 8);
    }
}
