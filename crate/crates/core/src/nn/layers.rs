//! Layers used by the codec and the discriminators.
//!
//! Codec layers are channels-last (`[batch, time, channels]`) so pointwise
//! convolutions reduce to matrix products. Discriminator convolutions are
//! channels-first and computed as shifted input slices stacked along the
//! channel axis times a weight matrix.

use candle_core::{Tensor, Var, D};

use super::ops;
use super::params::Initializer;
use crate::error::{Error, Result};

/// Pointwise (1x1) convolution on channels-last input.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(init: &mut Initializer, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Self {
            weight: init.uniform(&format!("{name}.weight"), &[input, output], bound)?,
            bias: init.uniform(&format!("{name}.bias"), &[output], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(self.weight.as_tensor())?.broadcast_add(self.bias.as_tensor())?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
}

impl LayerNorm {
    pub fn new(init: &mut Initializer, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, self.gamma.as_tensor(), self.beta.as_tensor(), 1e-6)
    }
}

/// Depthwise convolution along time with "same" zero padding.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    weight: Var,
    bias: Var,
    kernel: usize,
}

impl DepthwiseConv {
    pub fn new(init: &mut Initializer, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel {kernel} must be odd")));
        }
        let bound = 1.0 / (kernel as f64).sqrt();
        Ok(Self {
            weight: init.uniform(&format!("{name}.weight"), &[kernel, channels], bound)?,
            bias: init.uniform(&format!("{name}.bias"), &[channels], bound)?,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let time = x.dim(1)?;
        let pad = self.kernel / 2;
        let padded = x.pad_with_zeros(1, pad, pad)?;
        let w = self.weight.as_tensor();
        let mut acc = self.bias.as_tensor().broadcast_as(x.shape())?.contiguous()?;
        for k in 0..self.kernel {
            let tap = w.get(k)?;
            acc = (acc + padded.narrow(1, k, time)?.broadcast_mul(&tap)?)?;
        }
        Ok(acc)
    }
}

/// Global response normalization across time.
#[derive(Debug, Clone)]
pub struct GlobalResponseNorm {
    gamma: Var,
    beta: Var,
}

impl GlobalResponseNorm {
    pub fn new(init: &mut Initializer, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 0.0)?,
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let gx = x.sqr()?.sum_keepdim(1)?.affine(1.0, 1e-12)?.sqrt()?;
        let nx = gx.broadcast_div(&gx.mean_keepdim(D::Minus1)?.affine(1.0, 1e-6)?)?;
        let scaled = x.broadcast_mul(&nx)?.broadcast_mul(self.gamma.as_tensor())?;
        Ok((scaled.broadcast_add(self.beta.as_tensor())? + x)?)
    }
}

/// Depthwise conv, layer norm, pointwise expansion, GELU, GRN, pointwise projection, residual.
#[derive(Debug, Clone)]
pub struct ConvNextBlock {
    dwconv: DepthwiseConv,
    norm: LayerNorm,
    expand: Linear,
    grn: GlobalResponseNorm,
    project: Linear,
}

impl ConvNextBlock {
    pub fn new(init: &mut Initializer, name: &str, dim: usize, hidden: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            dwconv: DepthwiseConv::new(init, &format!("{name}.dwconv"), dim, kernel)?,
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim)?,
            expand: Linear::new(init, &format!("{name}.expand"), dim, hidden)?,
            grn: GlobalResponseNorm::new(init, &format!("{name}.grn"), hidden)?,
            project: Linear::new(init, &format!("{name}.project"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.dwconv.forward(x)?;
        let h = self.norm.forward(&h)?;
        let h = self.expand.forward(&h)?.gelu_erf()?;
        let h = self.grn.forward(&h)?;
        let h = self.project.forward(&h)?;
        Ok((h + x)?)
    }
}

/// Strided convolution with kernel == stride, reducing the frame rate by `ratio`.
#[derive(Debug, Clone)]
pub struct Downsample {
    proj: Linear,
    ratio: usize,
}

impl Downsample {
    pub fn new(init: &mut Initializer, name: &str, input: usize, output: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(init, name, input * ratio, output)?,
            ratio,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        if t % self.ratio != 0 {
            return Err(Error::invalid(format!(
                "{t} frames are not divisible by the downsampling ratio {}",
                self.ratio
            )));
        }
        let folded = x.contiguous()?.reshape((b, t / self.ratio, self.ratio * c))?;
        self.proj.forward(&folded)
    }
}

/// Transposed convolution with kernel == stride, raising the frame rate by `ratio`.
#[derive(Debug, Clone)]
pub struct Upsample {
    proj: Linear,
    ratio: usize,
    output: usize,
}

impl Upsample {
    pub fn new(init: &mut Initializer, name: &str, input: usize, output: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(init, name, input, output * ratio)?,
            ratio,
            output,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        Ok(self.proj.forward(x)?.reshape((b, t * self.ratio, self.output))?)
    }
}

/// Gathers `count` windows of `k` taps spaced `stride` apart along `dim`, giving
/// `count * k` entries in window-major order.
/// Tap `j` of every strided window along the last axis: `[.., count]` picking
/// `x[.., t * stride + j]`. `x` must hold at least `j + count * stride` entries.
fn strided_tap(x: &Tensor, j: usize, count: usize, stride: usize) -> Result<Tensor> {
    let tap = x.narrow(D::Minus1, j, count * stride)?;
    if stride == 1 {
        return Ok(tap);
    }
    let mut dims = tap.dims().to_vec();
    let last = dims.len() - 1;
    dims[last] = count;
    dims.push(stride);
    Ok(tap.reshape(dims)?.narrow(D::Minus1, 0, 1)?.squeeze(D::Minus1)?)
}

/// Channels-first 1-D convolution (`[batch, channels, time]`).
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv1d {
    pub fn new(
        init: &mut Initializer,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((input * kernel) as f64).sqrt();
        Ok(Self {
            weight: init.uniform(&format!("{name}.weight"), &[output, input, kernel], bound)?,
            bias: init.uniform(&format!("{name}.bias"), &[output], bound)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, len) = x.dims3()?;
        let (out, _, k) = self.weight.as_tensor().dims3()?;
        let padded_len = len + 2 * self.padding;
        if padded_len < k {
            return Err(Error::invalid(format!("conv1d input of {len} samples is shorter than kernel {k}")));
        }
        let t = (padded_len - k) / self.stride + 1;
        // Extra right padding so every tap can take `t * stride` samples.
        let x = x.pad_with_zeros(2, self.padding, self.padding + self.stride)?;
        // [b, k * c, t], tap-major
        let taps = (0..k)
            .map(|j| strided_tap(&x, j, t, self.stride))
            .collect::<Result<Vec<_>>>()?;
        let cols = Tensor::cat(&taps, 1)?;
        let w = self.weight.as_tensor().permute((0, 2, 1))?.reshape((out, k * c))?;
        Ok(w.broadcast_matmul(&cols)?.broadcast_add(&self.bias.as_tensor().reshape((out, 1))?)?)
    }
}

/// Channels-first 2-D convolution (`[batch, channels, height, width]`), stride 1.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    padding: usize,
}

impl Conv2d {
    pub fn new(init: &mut Initializer, name: &str, input: usize, output: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / ((input * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: init.uniform(&format!("{name}.weight"), &[output, input, kernel, kernel], bound)?,
            bias: init.uniform(&format!("{name}.bias"), &[output], bound)?,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (out, _, k, _) = self.weight.as_tensor().dims4()?;
        let p = self.padding;
        let padded = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
        // [b, k * k * c, h * w], offset-major
        let mut taps = Vec::with_capacity(k * k);
        for dy in 0..k {
            let rows = padded.narrow(2, dy, h)?;
            for dx in 0..k {
                taps.push(rows.narrow(3, dx, w)?.reshape((b, c, h * w))?);
            }
        }
        let cols = Tensor::cat(&taps, 1)?;
        let wt = self.weight.as_tensor().permute((0, 2, 3, 1))?.reshape((out, k * k * c))?;
        let y = wt.broadcast_matmul(&cols)?.broadcast_add(&self.bias.as_tensor().reshape((out, 1))?)?;
        Ok(y.reshape((b, out, h, w))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{rng_for, ParamStore};
    use candle_core::{DType, Device};

    fn store() -> ParamStore {
        ParamStore::new(DType::F64, Device::Cpu)
    }

    #[test]
    fn depthwise_conv_matches_direct_sum() {
        let mut s = store();
        let conv = DepthwiseConv::new(&mut Initializer::new(&mut s, rng_for(0, "dw")), "dw", 2, 3).unwrap();
        let x = Tensor::new(&[[[1.0f64, -1.0], [2.0, 0.5], [3.0, 0.0], [-1.0, 4.0]]], &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap().to_vec3::<f64>().unwrap();
        let w = s.get("dw.weight").unwrap().as_tensor().to_vec2::<f64>().unwrap();
        let b = s.get("dw.bias").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        let xv = x.to_vec3::<f64>().unwrap();
        for t in 0..4 {
            for c in 0..2 {
                let mut acc = b[c];
                for k in 0..3 {
                    let src = t as isize + k as isize - 1;
                    if (0..4).contains(&src) {
                        acc += w[k][c] * xv[0][src as usize][c];
                    }
                }
                assert!((y[0][t][c] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn down_then_up_shapes() {
        let mut s = store();
        let mut init = Initializer::new(&mut s, rng_for(0, "ud"));
        let down = Downsample::new(&mut init, "down", 3, 5, 4).unwrap();
        let up = Upsample::new(&mut init, "up", 5, 3, 4).unwrap();
        let x = Tensor::zeros((2, 16, 3), DType::F64, &Device::Cpu).unwrap();
        let z = down.forward(&x).unwrap();
        assert_eq!(z.dims(), &[2, 4, 5]);
        assert_eq!(up.forward(&z).unwrap().dims(), &[2, 16, 3]);
        let bad = Tensor::zeros((1, 15, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(down.forward(&bad).is_err());
    }

    #[test]
    fn downsample_groups_consecutive_frames() {
        let mut s = store();
        let down = Downsample::new(&mut Initializer::new(&mut s, rng_for(1, "d")), "down", 1, 1, 2).unwrap();
        let w = s.get("down.weight").unwrap().as_tensor().to_vec2::<f64>().unwrap();
        let b = s.get("down.bias").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        let x = Tensor::new(&[[[1.0f64], [2.0], [3.0], [4.0]]], &Device::Cpu).unwrap();
        let y = down.forward(&x).unwrap().to_vec3::<f64>().unwrap();
        assert!((y[0][0][0] - (w[0][0] * 1.0 + w[1][0] * 2.0 + b[0])).abs() < 1e-12);
        assert!((y[0][1][0] - (w[0][0] * 3.0 + w[1][0] * 4.0 + b[0])).abs() < 1e-12);
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut s = store();
        let conv = Conv1d::new(&mut Initializer::new(&mut s, rng_for(2, "c1")), "c", 2, 3, 5, 3, 2).unwrap();
        let mut rng = rng_for(3, "x");
        let xv: Vec<f64> = (0..2 * 2 * 11).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let x = Tensor::from_vec(xv.clone(), (2, 2, 11), &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap().to_vec3::<f64>().unwrap();
        let w = s.get("c.weight").unwrap().as_tensor().to_vec3::<f64>().unwrap();
        let b = s.get("c.bias").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        assert_eq!(y[0][0].len(), (11 + 4 - 5) / 3 + 1);
        for n in 0..2 {
            for o in 0..3 {
                for (t, yv) in y[n][o].iter().enumerate() {
                    let mut acc = b[o];
                    for c in 0..2 {
                        for k in 0..5 {
                            let src = (t * 3 + k) as isize - 2;
                            if (0..11).contains(&src) {
                                acc += w[o][c][k] * xv[(n * 2 + c) * 11 + src as usize];
                            }
                        }
                    }
                    assert!((yv - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut s = store();
        let conv = Conv2d::new(&mut Initializer::new(&mut s, rng_for(4, "c2")), "c", 2, 2, 3).unwrap();
        let (h, wd) = (4, 5);
        let mut rng = rng_for(5, "x");
        let xv: Vec<f64> = (0..2 * h * wd).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let x = Tensor::from_vec(xv.clone(), (1, 2, h, wd), &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap().squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        let w = s.get("c.weight").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = s.get("c.bias").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        for o in 0..2 {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = b[o];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (si, sj) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                                if (0..h as isize).contains(&si) && (0..wd as isize).contains(&sj) {
                                    acc += w[((o * 2 + c) * 3 + ki) * 3 + kj] * xv[(c * h + si as usize) * wd + sj as usize];
                                }
                            }
                        }
                    }
                    assert!((y[o][i][j] - acc).abs() < 1e-12);
                }
            }
        }
    }
}
