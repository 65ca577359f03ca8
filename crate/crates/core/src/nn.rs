//! Small layer helpers on top of candle, all built from a [`ParamStore`],
//! plus fixed linear resampling operators (adaptive average pooling and
//! bilinear interpolation) expressed as matrices so they are differentiable
//! through ordinary matmuls.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig};

use crate::error::Result;
use crate::params::{Init, ParamStore};

pub fn linear(
    store: &mut ParamStore,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
) -> Result<Linear> {
    linear_with(store, name, in_dim, out_dim, bias, Init::fan_in(in_dim))
}

pub fn linear_with(
    store: &mut ParamStore,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
    weight_init: Init,
) -> Result<Linear> {
    let w = store.get(&format!("{name}.weight"), &[out_dim, in_dim], weight_init)?;
    let b = if bias {
        Some(store.get(&format!("{name}.bias"), &[out_dim], Init::fan_in(in_dim))?)
    } else {
        None
    };
    Ok(Linear::new(w, b))
}

/// Batched product `a · b` with broadcasting over leading axes.
///
/// Both operands are made contiguous first: candle's backward pass returns
/// wrong gradients for a strided left operand once the batch exceeds one.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.contiguous()?.broadcast_matmul(&b.contiguous()?)?)
}

/// `y = x Wᵀ + b` over the last axis of any-rank input.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.contiguous()?.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

pub fn conv2d(
    store: &mut ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    config: Conv2dConfig,
) -> Result<Conv2d> {
    let fan_in = in_ch * kernel * kernel;
    conv2d_with(store, name, in_ch, out_ch, kernel, config, Init::fan_in(fan_in), Init::fan_in(fan_in))
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_with(
    store: &mut ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    config: Conv2dConfig,
    weight_init: Init,
    bias_init: Init,
) -> Result<Conv2d> {
    let w = store.get(
        &format!("{name}.weight"),
        &[out_ch, in_ch, kernel, kernel],
        weight_init,
    )?;
    let b = store.get(&format!("{name}.bias"), &[out_ch], bias_init)?;
    Ok(Conv2d::new(w, Some(b), config))
}

/// Same-length convolution along the token axis of a `(B, C, N)` tensor.
///
/// The weight keeps the usual `(out, in, k)` layout but the product runs
/// through a `(1, k)` 2-D convolution on explicitly zero-padded input,
/// whose gradients are exact for every batch size.
#[derive(Debug, Clone)]
pub struct TokenConv {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl TokenConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        weight_init: Init,
        bias_init: Init,
    ) -> Result<Self> {
        assert!(kernel % 2 == 1, "token convolution needs an odd kernel");
        let weight = store.get(&format!("{name}.weight"), &[out_ch, in_ch, kernel], weight_init)?;
        let bias = store.get(&format!("{name}.bias"), &[out_ch], bias_init)?;
        Ok(Self { weight, bias, kernel })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for TokenConv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let half = self.kernel / 2;
        let x = x.pad_with_zeros(2, half, half)?.unsqueeze(2)?;
        let w = self.weight.unsqueeze(2)?;
        let y = x.conv2d(&w, 0, 1, 1, 1)?.squeeze(2)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1))?)
    }
}

pub fn padded(padding: usize, stride: usize) -> Conv2dConfig {
    Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    }
}

/// Layer norm over the last axis, built from differentiable primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f32,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.get(&format!("{name}.weight"), &[dim], Init::Ones)?,
            bias: store.get(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        candle_nn::ops::layer_norm_slow(xs, &self.weight, &self.bias, self.eps)
    }
}

/// Row-stochastic `(output × input)` matrix averaging over the adaptive
/// pooling window of each output cell: `[⌊i·n/m⌋, ⌈(i+1)·n/m⌉)`.
///
/// When `output > input` the windows overlap and the operation replicates
/// input cells.
pub fn adaptive_pool_weights(input: usize, output: usize) -> Vec<f64> {
    let mut w = vec![0.0; output * input];
    for i in 0..output {
        let start = (i * input) / output;
        let end = ((i + 1) * input).div_ceil(output);
        let count = (end - start) as f64;
        for j in start..end {
            w[i * input + j] = 1.0 / count;
        }
    }
    w
}

/// `(output × input)` bilinear interpolation matrix with half-pixel centers
/// (no corner alignment, no antialiasing).
pub fn bilinear_weights(input: usize, output: usize) -> Vec<f64> {
    let mut w = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        w[i * input + i0] += 1.0 - frac;
        w[i * input + i1] += frac;
    }
    w
}

/// A separable fixed linear map on the two trailing axes of a
/// `(…, H, W)` tensor. Axes whose size is unchanged are left untouched.
#[derive(Debug, Clone)]
pub struct Resample2d {
    rows: Option<Tensor>,
    cols: Option<Tensor>,
    pub from: (usize, usize),
    pub to: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleKind {
    AdaptiveAvg,
    Bilinear,
}

impl Resample2d {
    pub fn new(
        kind: ResampleKind,
        from: (usize, usize),
        to: (usize, usize),
        dtype: DType,
    ) -> Result<Self> {
        let weights = |n: usize, m: usize| match kind {
            ResampleKind::AdaptiveAvg => adaptive_pool_weights(n, m),
            ResampleKind::Bilinear => bilinear_weights(n, m),
        };
        let mk = |n: usize, m: usize| -> Result<Option<Tensor>> {
            if n == m {
                return Ok(None);
            }
            Ok(Some(
                Tensor::from_vec(weights(n, m), (m, n), &Device::Cpu)?.to_dtype(dtype)?,
            ))
        };
        Ok(Self {
            rows: mk(from.0, to.0)?,
            cols: mk(from.1, to.1)?,
            from,
            to,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.rows.is_none() && self.cols.is_none()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        if let Some(cols) = &self.cols {
            x = matmul(&x, &cols.t()?)?;
        }
        if let Some(rows) = &self.rows {
            x = matmul(rows, &x)?;
        }
        Ok(x)
    }
}

/// Exact GELU, `x * Phi(x)`, composed from `erf` so its gradient is exact too.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let phi = ((x * std::f64::consts::FRAC_1_SQRT_2)?.erf()? + 1.0)? * 0.5;
    Ok((x * phi?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_rows_are_stochastic() {
        for (n, m) in [(8, 4), (7, 3), (2, 4), (5, 5), (1, 3)] {
            let w = adaptive_pool_weights(n, m);
            for i in 0..m {
                let s: f64 = w[i * n..(i + 1) * n].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_identity_and_halving() {
        let w = bilinear_weights(3, 3);
        assert_eq!(w, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        // 4 → 2 samples at 0.5 and 2.5
        assert_eq!(bilinear_weights(4, 2), vec![0.5, 0.5, 0., 0., 0., 0., 0.5, 0.5]);
        // 2 → 4 upsampling: src = -0.25→0, 0.25, 0.75, 1.25→clamped
        let w = bilinear_weights(2, 4);
        assert_eq!(w, vec![1.0, 0.0, 0.75, 0.25, 0.25, 0.75, 0.0, 1.0]);
    }

    #[test]
    fn resample_matches_loops() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f64, 2.0 * 6.0 * 4.0, &dev)
            .unwrap()
            .reshape((1, 2, 6, 4))
            .unwrap();
        let r = Resample2d::new(ResampleKind::AdaptiveAvg, (6, 4), (3, 2), DType::F64).unwrap();
        let y4 = r.apply(&x).unwrap().squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        let xs = x.squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..2 {
                    let mut s = 0.0;
                    for a in 2 * i..2 * i + 2 {
                        for b in 2 * j..2 * j + 2 {
                            s += xs[c][a][b];
                        }
                    }
                    assert!((y4[c][i][j] - s / 4.0).abs() < 1e-12);
                }
            }
        }
    }
}
