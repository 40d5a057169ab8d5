//! Layer primitives built from differentiable tensor ops.

use std::cell::Cell;

use candle_core::{DType, Tensor, Var, D};

use super::params::{Builder, Init};
use super::Result;
use crate::interp::linear_matrix;

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

struct Restore(bool);

impl Drop for Restore {
    fn drop(&mut self) {
        NO_GRAD.with(|c| c.set(self.0));
    }
}

/// Runs `f` with parameters detached from the autograd graph on this thread, so
/// intermediate activations are freed as soon as they go out of scope.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _restore = Restore(NO_GRAD.with(|c| c.replace(true)));
    f()
}

/// Parameter tensor as seen by the current pass.
fn w(v: &Var) -> Tensor {
    if NO_GRAD.with(|c| c.get()) {
        v.as_tensor().detach()
    } else {
        v.as_tensor().clone()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &Builder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = b.param("weight", &[out_c, in_c, kernel, kernel], Init::KaimingNormal { fan_in })?;
        let bias = if bias {
            Some(b.param("bias", &[out_c], Init::Uniform { bound: 1.0 / (fan_in as f64).sqrt() })?)
        } else {
            None
        };
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&w(&self.weight), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&w(b).reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(b: &Builder, in_f: usize, out_f: usize) -> Result<Self> {
        let bound = 1.0 / (in_f as f64).sqrt();
        Ok(Self {
            weight: b.param("weight", &[out_f, in_f], Init::Uniform { bound })?,
            bias: b.param("bias", &[out_f], Init::Uniform { bound })?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&w(&self.weight).t()?)?.broadcast_add(&w(&self.bias))?)
    }
}

/// Batch normalization over dim 1 of a rank-2 or rank-4 input.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(b: &Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", &[channels], Init::Const(1.0))?,
            bias: b.param("bias", &[channels], Init::Const(0.0))?,
            running_mean: b.buffer("running_mean", &[channels], 0.0)?,
            running_var: b.buffer("running_var", &[channels], 1.0)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    fn per_channel(t: &Tensor, rank: usize) -> Result<Tensor> {
        Ok(if rank == 4 { t.reshape((1, (), 1, 1))? } else { t.reshape((1, ()))? })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let rank = x.rank();
        let gamma = Self::per_channel(&w(&self.weight), rank)?;
        let beta = Self::per_channel(&w(&self.bias), rank)?;
        if train {
            let (mean, centered, var) = if rank == 4 {
                let mean = x.mean_keepdim((0, 2, 3))?;
                let c = x.broadcast_sub(&mean)?;
                let var = c.sqr()?.mean_keepdim((0, 2, 3))?;
                (mean, c, var)
            } else {
                let mean = x.mean_keepdim(0)?;
                let c = x.broadcast_sub(&mean)?;
                let var = c.sqr()?.mean_keepdim(0)?;
                (mean, c, var)
            };
            let n = x.elem_count() / x.dim(1)?;
            let m = self.momentum;
            let rm = self.running_mean.as_tensor().detach();
            let new_mean = ((rm * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            self.running_mean.set(&new_mean)?;
            if n > 1 {
                let unbiased = (var.detach().flatten_all()? * (n as f64 / (n as f64 - 1.0)))?;
                let rv = self.running_var.as_tensor().detach();
                let new_var = ((rv * (1.0 - m))? + (unbiased * m)?)?;
                self.running_var.set(&new_var)?;
            }
            let xhat = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
            Ok(xhat.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
        } else {
            let rm = Self::per_channel(&self.running_mean.as_tensor().detach(), rank)?;
            let rv = Self::per_channel(&self.running_var.as_tensor().detach(), rank)?;
            let xhat = x.broadcast_sub(&rm)?.broadcast_div(&(rv + self.eps)?.sqrt()?)?;
            Ok(xhat.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
        }
    }
}

/// Numerically stable logistic function: `0.5 * (tanh(x / 2) + 1)`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// 3x3 max pool, stride 2, padding 1. The input must be non-negative (post-ReLU)
/// since the border is padded with zeros.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    let xp = x.pad_with_zeros(2, 1, 2)?.pad_with_zeros(3, 1, 2)?;
    let mut out: Option<Tensor> = None;
    for di in 0..3 {
        for dj in 0..3 {
            let v = xp
                .narrow(2, di, 2 * ho)?
                .narrow(3, dj, 2 * wo)?
                .contiguous()?
                .reshape((b, c, ho, 2, wo, 2))?
                .narrow(3, 0, 1)?
                .narrow(5, 0, 1)?
                .reshape((b, c, ho, wo))?;
            out = Some(match out {
                None => v,
                Some(o) => o.maximum(&v)?,
            });
        }
    }
    Ok(out.expect("nine taps"))
}

/// 2x2 average pool, stride 2, odd trailing rows/columns dropped.
pub fn avg_pool_2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    Ok(x.narrow(2, 0, 2 * ho)?
        .narrow(3, 0, 2 * wo)?
        .contiguous()?
        .reshape((b, c, ho, 2, wo, 2))?
        .mean((3, 5))?)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim((2, 3))?)
}

/// Bilinear resize (half-pixel centres) of a `(B, C, H, W)` tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let uh = Tensor::from_vec(linear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let uw_t = Tensor::from_vec(linear_matrix(w, out_w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let y = x.contiguous()?.broadcast_matmul(&uw_t)?;
    Ok(uh.broadcast_matmul(&y)?)
}

pub fn to_f64_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t4(v: Vec<f64>, s: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, s, &Device::Cpu).unwrap()
    }

    fn naive_max_pool(v: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (ho, wo) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
        let mut out = vec![f64::NEG_INFINITY; ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                for di in 0..3 {
                    for dj in 0..3 {
                        let (y, x) = (2 * i + di, 2 * j + dj);
                        if y >= 1 && x >= 1 && y - 1 < h && x - 1 < w {
                            out[i * wo + j] = out[i * wo + j].max(v[(y - 1) * w + x - 1]);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn no_grad_detaches_and_restores() {
        let b = Builder::new(DType::F64, 0);
        let lin = Linear::new(&b, 2, 1).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0]], &Device::Cpu).unwrap();
        let y = no_grad(|| lin.forward(&x).unwrap());
        assert!(y.sum_all().unwrap().backward().unwrap().get(lin.weight.as_tensor()).is_none());
        let y = lin.forward(&x).unwrap();
        assert!(y.sum_all().unwrap().backward().unwrap().get(lin.weight.as_tensor()).is_some());
    }

    #[test]
    fn max_pool_matches_naive() {
        for (h, w) in [(5, 7), (8, 8), (1, 1), (6, 3)] {
            let v: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64).collect();
            let got = max_pool_3x3_s2(&t4(v.clone(), (1, 1, h, w))).unwrap();
            let got = got.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(got, naive_max_pool(&v, h, w), "{h}x{w}");
        }
    }

    #[test]
    fn max_pool_has_gradient() {
        let v = Var::from_tensor(&t4((0..16).map(|i| i as f64).collect(), (1, 1, 4, 4))).unwrap();
        let y = max_pool_3x3_s2(v.as_tensor()).unwrap().sum_all().unwrap();
        let g = y.backward().unwrap();
        let g = g.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // outputs pick elements 5, 7, 13, 15
        let mut expect = vec![0.0; 16];
        for i in [5, 7, 13, 15] {
            expect[i] = 1.0;
        }
        assert_eq!(g, expect);
    }

    #[test]
    fn avg_pool_drops_odd_edge() {
        let x = t4((0..15).map(|i| i as f64).collect(), (1, 1, 3, 5));
        let y = avg_pool_2x2(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![3.0, 5.0]);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let x = Tensor::new(&[-40.0f64, 0.0, 40.0, -1000.0], &Device::Cpu).unwrap();
        let v = Var::from_tensor(&x).unwrap();
        let s = sigmoid(v.as_tensor()).unwrap();
        let vals = s.to_vec1::<f64>().unwrap();
        assert!(vals[0] < 1e-15 && (vals[1] - 0.5).abs() < 1e-15 && vals[2] > 1.0 - 1e-15);
        let g = s.sum_all().unwrap().backward().unwrap();
        assert!(g.get(v.as_tensor()).unwrap().to_vec1::<f64>().unwrap().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn batchnorm_identity_configuration() {
        let b = Builder::new(DType::F64, 0);
        let bn = BatchNorm::new(&b, 3).unwrap();
        // eps = 1e-5 scales by 1/sqrt(1 + eps); within 1e-6 of identity for |x| <= 0.2
        let x = t4((0..12).map(|i| i as f64 / 30.0 - 0.2).collect(), (1, 3, 2, 2));
        let y = bn.forward(&x, false).unwrap();
        let d = (&y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-6, "{d}");
        let exact = (&x / (1.0f64 + 1e-5).sqrt()).unwrap();
        let d = (y - exact).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-14);
    }

    #[test]
    fn resize_matches_grid_resize() {
        let v: Vec<f64> = (0..12).map(|i| (i as f64).sqrt()).collect();
        let y = resize_bilinear(&t4(v.clone(), (1, 1, 3, 4)), 7, 5).unwrap();
        let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let want = crate::interp::resize_grid(&v, 3, 4, 7, 5);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
