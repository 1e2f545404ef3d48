//! AdamW with decoupled weight decay, and EMA shadow parameters.
//!
//! Moments are plain tensors keyed by parameter name so they can be written
//! to and restored from checkpoints exactly.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: None,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if !ok {
            return Err(Error::config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    /// L2 norm over all gradients present in `grads`.
    pub fn grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for (_, var) in store.named_vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                total += g
                    .sqr()?
                    .sum_all()?
                    .to_dtype(DType::F64)?
                    .to_scalar::<f64>()?;
            }
        }
        Ok(total.sqrt())
    }

    /// Applies one update to every parameter with a gradient; returns the
    /// pre-clip gradient norm.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let norm = Self::grad_norm(store, grads)?;
        if !norm.is_finite() {
            return Err(Error::numeric(format!("gradient norm is {norm}")));
        }
        let c = self.config;
        let scale = match c.grad_clip {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var) in store.named_vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.affine(scale, 0.0)?;
            let m = match self.m.get(&name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(&name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let p = var.as_tensor();
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let decayed = (p * (1.0 - c.lr * c.weight_decay))?;
            var.set(&(decayed - (update * c.lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(norm)
    }
}

/// `ema <- decay * ema + (1 - decay) * model`, elementwise.
pub fn ema_update(
    ema: &mut BTreeMap<String, Tensor>,
    model: &BTreeMap<String, Tensor>,
    decay: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::config(format!("EMA decay {decay} outside [0, 1]")));
    }
    if ema.len() != model.len() || ema.keys().zip(model.keys()).any(|(a, b)| a != b) {
        return Err(Error::contract("EMA and model parameter sets differ"));
    }
    for (name, e) in ema.iter_mut() {
        let m = &model[name];
        if e.dims() != m.dims() {
            return Err(Error::contract(format!("EMA shape mismatch for `{name}`")));
        }
        *e = if decay == 0.0 {
            m.detach().copy()?
        } else if decay == 1.0 {
            e.clone()
        } else {
            ((&*e * decay)? + (m.detach() * (1.0 - decay))?)?
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use candle_core::Device;

    fn tree(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("a".to_string(), Tensor::new(&[v, v], &Device::Cpu).unwrap())])
    }

    fn val(t: &BTreeMap<String, Tensor>) -> f64 {
        t["a"].to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn ema_extremes_and_closed_form() {
        let mut e = tree(3.0);
        ema_update(&mut e, &tree(1.0), 0.0).unwrap();
        assert_eq!(val(&e), 1.0);
        let mut e = tree(3.0);
        ema_update(&mut e, &tree(1.0), 1.0).unwrap();
        assert_eq!(val(&e), 3.0);

        let (e0, m, d, k) = (5.0, -2.0, 0.9, 37);
        let mut e = tree(e0);
        for _ in 0..k {
            ema_update(&mut e, &tree(m), d).unwrap();
        }
        let want = m + d.powi(k) * (e0 - m);
        assert!((val(&e) - want).abs() < 1e-10);

        let mut bad =
            BTreeMap::from([("b".to_string(), Tensor::new(&[0f64], &Device::Cpu).unwrap())]);
        assert!(ema_update(&mut bad, &tree(1.0), 0.5).is_err());
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr * sign(g) when |g| >> eps
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let w = store.get(&[3], "w", Init::Ones).unwrap();
        let loss = (&w * Tensor::new(&[2.0, -3.0, 0.5], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        })
        .unwrap();
        let norm = opt.step(&store, &grads).unwrap();
        assert!((norm - (4.0f64 + 9.0 + 0.25).sqrt()).abs() < 1e-12);
        let got = store
            .var("w")
            .unwrap()
            .as_tensor()
            .to_vec1::<f64>()
            .unwrap();
        for (g, want) in got.iter().zip([0.9, 1.1, 0.9]) {
            assert!((g - want).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let w = store.get(&[2], "w", Init::Normal(1.0)).unwrap();
        let before = w.to_vec1::<f64>().unwrap();
        let grads = w.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            ..Default::default()
        })
        .unwrap();
        opt.step(&store, &grads).unwrap();
        assert_eq!(
            store
                .var("w")
                .unwrap()
                .as_tensor()
                .to_vec1::<f64>()
                .unwrap(),
            before
        );
    }
}
