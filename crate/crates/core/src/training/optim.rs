//! AdamW with decoupled weight decay and exportable state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::TensorData;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
}

#[derive(Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl AdamW {
    pub fn new<'a>(params: impl Iterator<Item = (&'a String, &'a Var)>, cfg: AdamWConfig) -> Result<Self> {
        let params: Vec<(String, Var)> = params.map(|(n, v)| (n.clone(), v.clone())).collect();
        let m = params
            .iter()
            .map(|(_, v)| Ok(v.as_tensor().zeros_like()?))
            .collect::<Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { cfg, params, m, v, step: 0 })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// One update with learning rate `lr`. Parameters without a gradient are left untouched.
    /// Returns the global gradient norm before clipping.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<f64> {
        let gs: Vec<Option<Tensor>> = self.params.iter().map(|(_, v)| grads.get(v.as_tensor()).cloned()).collect();
        let mut sq = 0.0;
        for g in gs.iter().flatten() {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::invalid(format!("non-finite gradient norm at optimizer step {}", self.step + 1)));
        }
        let scale = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (i, g) in gs.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let g = if scale != 1.0 { g.affine(scale, 0.0)? } else { g };
            let m = ((&self.m[i] * b1)? + (&g * (1.0 - b1))?)?;
            let v = ((&self.v[i] * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let var = &self.params[i].1;
            let p = var.as_tensor().detach();
            let update = (&m / bc1)?.div(&((&v / bc2)?.sqrt()? + self.cfg.eps)?)?;
            let decayed = (&p * (1.0 - lr * self.cfg.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(norm)
    }

    /// Moment estimates keyed `m.<param>` / `v.<param>` under `prefix`.
    pub fn export_state(&self, prefix: &str) -> Result<BTreeMap<String, TensorData>> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("{prefix}m.{name}"), TensorData::from_tensor(&self.m[i])?);
            out.insert(format!("{prefix}v.{name}"), TensorData::from_tensor(&self.v[i])?);
        }
        Ok(out)
    }

    pub fn load_state(&mut self, prefix: &str, state: &BTreeMap<String, TensorData>, steps: usize) -> Result<()> {
        for (i, (name, var)) in self.params.iter().enumerate() {
            for (key, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let full = format!("{prefix}{key}.{name}");
                let data = state
                    .get(&full)
                    .ok_or_else(|| Error::Incompatible(format!("optimizer state lacks {full}")))?;
                if data.shape != var.dims() {
                    return Err(Error::Incompatible(format!("optimizer state {full} has the wrong shape")));
                }
                *slot = data.to_tensor(var.dtype(), var.device())?;
            }
        }
        self.step = steps;
        Ok(())
    }
}
