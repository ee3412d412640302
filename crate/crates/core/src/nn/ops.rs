//! Differentiable primitives missing from candle, built from ops that have backward passes.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, D};

use crate::error::Result;

struct Atan2;

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("atan2 expects contiguous inputs"),
    }
}

fn atan2_scalar_f32(y: f32, x: f32) -> f32 {
    crate::frontend::fold_phase_f32(y.atan2(x))
}

fn atan2_scalar_f64(y: f64, x: f64) -> f64 {
    let v = y.atan2(x);
    if v <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        v
    }
}

impl CustomOp2 for Atan2 {
    fn name(&self) -> &'static str {
        "atan2"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        if l1.shape() != l2.shape() {
            candle_core::bail!("atan2 shape mismatch {:?} vs {:?}", l1.shape(), l2.shape());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(x)) => {
                let (y, x) = (contiguous(y, l1)?, contiguous(x, l2)?);
                CpuStorage::F32(y.iter().zip(x).map(|(&y, &x)| atan2_scalar_f32(y, x)).collect())
            }
            (CpuStorage::F64(y), CpuStorage::F64(x)) => {
                let (y, x) = (contiguous(y, l1)?, contiguous(x, l2)?);
                CpuStorage::F64(y.iter().zip(x).map(|(&y, &x)| atan2_scalar_f64(y, x)).collect())
            }
            _ => candle_core::bail!("atan2 supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        y: &Tensor,
        x: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        // d/dy = x / r^2, d/dx = -y / r^2
        let r2 = (x.sqr()? + y.sqr()?)?.affine(1.0, 1e-12)?;
        let gy = (grad * x)?.div(&r2)?;
        let gx = (grad * y)?.div(&r2)?.neg()?;
        Ok((Some(gy), Some(gx)))
    }
}

/// Elementwise two-argument arctangent `atan2(y, x)` in `(-pi, pi]`, with gradients.
pub fn atan2(y: &Tensor, x: &Tensor) -> Result<Tensor> {
    Ok(y.contiguous()?.apply_op2(&x.contiguous()?, Atan2)?)
}

/// `|x - 2 pi round(x / 2 pi)|`, rounding half away from zero.
pub fn anti_wrap(x: &Tensor) -> Result<Tensor> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let k = x.affine(1.0 / two_pi, 0.0)?.round()?.detach();
    Ok((x - k.affine(two_pi, 0.0)?)?.abs()?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_all()?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Layer normalization over the last dimension.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&var.affine(1.0, eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Sum of a slice of equally shaped tensors.
pub fn sum_tensors(items: &[Tensor]) -> Result<Tensor> {
    let mut iter = items.iter();
    let first = iter
        .next()
        .ok_or_else(|| crate::Error::invalid("cannot sum an empty tensor list"))?
        .clone();
    iter.try_fold(first, |acc, t| Ok((acc + t)?))
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use std::f64::consts::PI;

    #[test]
    fn atan2_matches_std_and_stays_in_range() {
        let ys = [0.0f64, 1.0, -1.0, -0.0, 0.5, -2.0];
        let xs = [1.0f64, 0.0, -1.0, -1.0, -3.0, 0.25];
        let y = Tensor::new(&ys, &Device::Cpu).unwrap();
        let x = Tensor::new(&xs, &Device::Cpu).unwrap();
        let out = atan2(&y, &x).unwrap().to_vec1::<f64>().unwrap();
        for i in 0..ys.len() {
            assert!(out[i] > -PI && out[i] <= PI);
            if ys[i].atan2(xs[i]) > -PI {
                assert_eq!(out[i], ys[i].atan2(xs[i]));
            }
        }
        // atan2(-0, -1) is -pi in IEEE arithmetic; folded to +pi.
        assert_eq!(out[3], PI);
    }

    #[test]
    fn atan2_gradient_matches_finite_differences() {
        let y0 = [0.3f64, -1.2, 2.0];
        let x0 = [0.7f64, 0.4, -1.5];
        let y = Var::from_tensor(&Tensor::new(&y0, &Device::Cpu).unwrap()).unwrap();
        let x = Var::from_tensor(&Tensor::new(&x0, &Device::Cpu).unwrap()).unwrap();
        let w = Tensor::new(&[1.0f64, 2.0, -0.5], &Device::Cpu).unwrap();
        let loss = (atan2(y.as_tensor(), x.as_tensor()).unwrap() * &w).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let gy = grads.get(y.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let gx = grads.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let wv = [1.0, 2.0, -0.5];
        let h = 1e-6;
        for i in 0..3 {
            let fy = |d: f64| (y0[i] + d).atan2(x0[i]) * wv[i];
            let fx = |d: f64| y0[i].atan2(x0[i] + d) * wv[i];
            assert!((gy[i] - (fy(h) - fy(-h)) / (2.0 * h)).abs() < 1e-8);
            assert!((gx[i] - (fx(h) - fx(-h)) / (2.0 * h)).abs() < 1e-8);
        }
    }

    #[test]
    fn anti_wrap_tensor_values() {
        let x = Tensor::new(&[0.0f64, 2.0 * PI, 3.0 * PI, -PI / 2.0, 7.5], &Device::Cpu).unwrap();
        let y = anti_wrap(&x).unwrap().to_vec1::<f64>().unwrap();
        assert!(y[0].abs() < 1e-12);
        assert!(y[1].abs() < 1e-12);
        assert!((y[2] - PI).abs() < 1e-12);
        assert!((y[3] - PI / 2.0).abs() < 1e-12);
        assert!((y[4] - (7.5 - 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_normalizes_last_axis() {
        let x = Tensor::new(&[[1.0f32, 2.0, 3.0, 6.0]], &Device::Cpu).unwrap();
        let g = Tensor::ones(4, DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros(4, DType::F32, &Device::Cpu).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-6).unwrap().to_vec2::<f32>().unwrap();
        let mean: f32 = y[0].iter().sum::<f32>() / 4.0;
        let var: f32 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
