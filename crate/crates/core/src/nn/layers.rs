use candle_core::{Module, Tensor, D};

use super::ParamStore;
use crate::error::Result;

/// 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    /// Weights drawn from `N(0, std)`; a `std` of `None` uses He-normal scaling.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: Option<f64>,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let std = std.unwrap_or((2.0 / fan_in).sqrt());
        let weight = ps.normal(&format!("{name}.weight"), (c_out, c_in, kernel, kernel), std)?;
        let bias = ps.constant(&format!("{name}.bias"), c_out, 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }
}

impl Module for Conv {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let y = xs.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Transposed convolution used for ×2 upsampling.
#[derive(Debug, Clone)]
pub struct ConvTranspose {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl ConvTranspose {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        std: f64,
    ) -> Result<Self> {
        let weight = ps.normal(&format!("{name}.weight"), (c_in, c_out, kernel, kernel), std)?;
        let bias = ps.constant(&format!("{name}.bias"), c_out, 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            output_padding,
        })
    }
}

impl Module for ConvTranspose {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let y = xs.conv_transpose2d(&self.weight, self.padding, self.output_padding, self.stride, 1)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
}

impl Dense {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), (d_out, d_in), bound)?;
        let bias = ps.constant(&format!("{name}.bias"), d_out, 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Dense {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        xs.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

/// Per-sample, per-channel normalization over the spatial dims, no affine.
pub fn instance_norm(xs: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = xs.dims4()?;
    let flat = xs.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    normed.reshape((b, c, h, w))
}

pub fn leaky_relu(xs: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    xs.maximum(&(xs * slope)?)
}

/// Mirror padding without repeating the edge pixel.
pub fn reflection_pad2d(xs: &Tensor, pad: usize) -> candle_core::Result<Tensor> {
    if pad == 0 {
        return Ok(xs.clone());
    }
    let (_, _, h, w) = xs.dims4()?;
    let index = |n: usize| -> candle_core::Result<Tensor> {
        let idx: Vec<u32> = (0..n + 2 * pad)
            .map(|i| {
                let j = i as i64 - pad as i64;
                let r = if j < 0 {
                    -j
                } else if j >= n as i64 {
                    2 * (n as i64 - 1) - j
                } else {
                    j
                };
                r as u32
            })
            .collect();
        Tensor::new(idx.as_slice(), xs.device())
    };
    xs.index_select(&index(h)?, 2)?.index_select(&index(w)?, 3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn reflection_pad_matches_numpy_reflect() {
        let x = Tensor::new(&[1f32, 2., 3.], &Device::Cpu).unwrap().reshape((1, 1, 1, 3)).unwrap();
        let x = x.repeat((1, 1, 3, 1)).unwrap();
        let p = reflection_pad2d(&x, 2).unwrap();
        let row: Vec<f32> = p.get(0).unwrap().get(0).unwrap().get(0).unwrap().to_vec1().unwrap();
        assert_eq!(row, vec![3., 2., 1., 2., 3., 2., 1.]);
        assert_eq!(p.dims4().unwrap(), (1, 1, 7, 7));
    }

    #[test]
    fn instance_norm_is_zero_mean_unit_var() {
        let mut ps = ParamStore::new(0, DType::F64, Device::Cpu);
        let x = ps.normal("x", (2, 3, 4, 4), 3.0).unwrap();
        let y = instance_norm(&x, 1e-5).unwrap();
        let flat = y.reshape((6, 16)).unwrap();
        let mean: Vec<f64> = flat.mean(1).unwrap().to_vec1().unwrap();
        let var: Vec<f64> = flat.sqr().unwrap().mean(1).unwrap().to_vec1().unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-9));
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn upsampling_transpose_conv_doubles_side() {
        let mut ps = ParamStore::new(0, DType::F32, Device::Cpu);
        let up = ConvTranspose::new(&mut ps, "up", 4, 2, 3, 2, 1, 1, 0.02).unwrap();
        let x = Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(up.forward(&x).unwrap().dims4().unwrap(), (1, 2, 16, 16));
    }
}
