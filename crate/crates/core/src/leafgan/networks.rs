//! ResNet-style generator and patch discriminator.

use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{instance_norm, leaky_relu, reflection_pad2d, Conv, ConvTranspose, ParamStore};

const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Filters in the first layer.
    pub base_filters: usize,
    pub residual_blocks: usize,
}

impl GeneratorConfig {
    /// 9 residual blocks from 256² upward, 6 below.
    pub fn for_side(side: usize, base_filters: usize) -> Self {
        Self {
            base_filters,
            residual_blocks: if side >= 256 { 9 } else { 6 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_filters: usize,
    /// Strided layers; 3 gives the 70×70 receptive field.
    pub layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_filters: 64,
            layers: 3,
        }
    }
}

struct ResidualBlock {
    conv1: Conv,
    conv2: Conv,
}

impl ResidualBlock {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let h = instance_norm(&self.conv1.forward(&reflection_pad2d(xs, 1)?)?, NORM_EPS)?.relu()?;
        let h = instance_norm(&self.conv2.forward(&reflection_pad2d(&h, 1)?)?, NORM_EPS)?;
        xs + h
    }
}

/// `c7s1-k, d2k, d4k, R4k×n, u2k, uk, c7s1-3, tanh`.
pub struct ResnetGenerator {
    stem: Conv,
    down: Vec<Conv>,
    blocks: Vec<ResidualBlock>,
    up: Vec<ConvTranspose>,
    out: Conv,
}

impl ResnetGenerator {
    pub fn new(ps: &mut ParamStore, cfg: GeneratorConfig) -> Result<Self> {
        let k = cfg.base_filters;
        if k == 0 {
            return Err(Error::config("gan_generator_filters", "must be positive"));
        }
        let stem = Conv::new(ps, "stem", 3, k, 7, 1, 0, Some(INIT_STD))?;
        let down = vec![
            Conv::new(ps, "down0", k, 2 * k, 3, 2, 1, Some(INIT_STD))?,
            Conv::new(ps, "down1", 2 * k, 4 * k, 3, 2, 1, Some(INIT_STD))?,
        ];
        let blocks = (0..cfg.residual_blocks)
            .map(|i| {
                Ok(ResidualBlock {
                    conv1: Conv::new(ps, &format!("res{i}.conv1"), 4 * k, 4 * k, 3, 1, 0, Some(INIT_STD))?,
                    conv2: Conv::new(ps, &format!("res{i}.conv2"), 4 * k, 4 * k, 3, 1, 0, Some(INIT_STD))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let up = vec![
            ConvTranspose::new(ps, "up0", 4 * k, 2 * k, 3, 2, 1, 1, INIT_STD)?,
            ConvTranspose::new(ps, "up1", 2 * k, k, 3, 2, 1, 1, INIT_STD)?,
        ];
        let out = Conv::new(ps, "out", k, 3, 7, 1, 0, Some(INIT_STD))?;
        Ok(Self {
            stem,
            down,
            blocks,
            up,
            out,
        })
    }
}

impl Module for ResnetGenerator {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = instance_norm(&self.stem.forward(&reflection_pad2d(xs, 3)?)?, NORM_EPS)?.relu()?;
        for d in &self.down {
            h = instance_norm(&d.forward(&h)?, NORM_EPS)?.relu()?;
        }
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        for u in &self.up {
            h = instance_norm(&u.forward(&h)?, NORM_EPS)?.relu()?;
        }
        self.out.forward(&reflection_pad2d(&h, 3)?)?.tanh()
    }
}

/// PatchGAN: strided 4×4 convs with leaky ReLU, emitting a map of patch scores.
pub struct PatchDiscriminator {
    layers: Vec<(Conv, bool)>,
    out: Conv,
}

impl PatchDiscriminator {
    pub fn new(ps: &mut ParamStore, cfg: DiscriminatorConfig) -> Result<Self> {
        if cfg.base_filters == 0 || cfg.layers == 0 {
            return Err(Error::config("gan_discriminator_filters", "must be positive"));
        }
        let k = cfg.base_filters;
        let mut layers = vec![(Conv::new(ps, "conv0", 3, k, 4, 2, 1, Some(INIT_STD))?, false)];
        let mut prev = k;
        for n in 1..cfg.layers {
            let next = k * (1 << n).min(8);
            layers.push((Conv::new(ps, &format!("conv{n}"), prev, next, 4, 2, 1, Some(INIT_STD))?, true));
            prev = next;
        }
        let next = k * (1 << cfg.layers).min(8);
        layers.push((Conv::new(ps, &format!("conv{}", cfg.layers), prev, next, 4, 1, 1, Some(INIT_STD))?, true));
        let out = Conv::new(ps, "out", next, 1, 4, 1, 1, Some(INIT_STD))?;
        Ok(Self { layers, out })
    }
}

impl Module for PatchDiscriminator {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = xs.clone();
        for (conv, norm) in &self.layers {
            h = conv.forward(&h)?;
            if *norm {
                h = instance_norm(&h, NORM_EPS)?;
            }
            h = leaky_relu(&h, 0.2)?;
        }
        self.out.forward(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn generator_preserves_shape_and_range() {
        let mut ps = ParamStore::new(0, DType::F32, Device::Cpu);
        let g = ResnetGenerator::new(&mut ps, GeneratorConfig { base_filters: 4, residual_blocks: 2 }).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let y = g.forward(&x).unwrap();
        assert_eq!(y.dims4().unwrap(), (2, 3, 16, 16));
        let max: f32 = y.abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(max <= 1.0);
    }

    #[test]
    fn patch_map_size() {
        let mut ps = ParamStore::new(0, DType::F32, Device::Cpu);
        let d = PatchDiscriminator::new(&mut ps, DiscriminatorConfig { base_filters: 4, layers: 3 }).unwrap();
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.forward(&x).unwrap().dims4().unwrap(), (1, 1, 6, 6));
    }

    #[test]
    fn block_count_follows_side() {
        assert_eq!(GeneratorConfig::for_side(256, 64).residual_blocks, 9);
        assert_eq!(GeneratorConfig::for_side(128, 64).residual_blocks, 6);
    }
}
