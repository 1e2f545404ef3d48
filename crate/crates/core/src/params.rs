//! Named trainable parameters.
//!
//! Modules ask the store for a parameter by dotted name; the first request
//! initialises it, later requests (or a store filled from a checkpoint)
//! return the existing variable. Iteration order is the name order, which
//! keeps optimizer state and checkpoints stable.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};

use crate::error::{Error, Result};
use crate::ops::add_rows;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`; shape is `(out, in)`.
    XavierUniform,
    Identity,
    /// 2-d sinusoidal table over an `height × width` grid, shape `(h·w, dim)`.
    Sinusoidal2d {
        height: usize,
        width: usize,
    },
}

#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    rng: Arc<Mutex<SeededRng>>,
    dtype: DType,
    device: Device,
    prefix: String,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("prefix", &self.prefix)
            .field("params", &self.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            rng: Arc::new(Mutex::new(SeededRng::new(seed))),
            dtype,
            device: device.clone(),
            prefix: String::new(),
        }
    }

    /// A view whose names are prefixed with `name.`.
    pub fn pp(&self, name: &str) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            prefix,
            ..self.clone()
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let mut vars = self.vars.lock().unwrap();
        if let Some(v) = vars.get(&full) {
            if v.dims() != shape {
                return Err(Error::data(format!(
                    "parameter `{full}` has shape {:?}, model expects {:?}",
                    v.dims(),
                    shape
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = {
            let mut rng = self.rng.lock().unwrap();
            match init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::Normal(std) => (0..numel).map(|_| rng.normal() * std).collect(),
                Init::XavierUniform => {
                    let (fan_out, fan_in) = match shape {
                        [o, i] => (*o, *i),
                        _ => (numel, numel),
                    };
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..numel)
                        .map(|_| (rng.uniform() * 2.0 - 1.0) * bound)
                        .collect()
                }
                Init::Sinusoidal2d { height, width } => {
                    let [l, d] = shape else {
                        return Err(Error::contract("sinusoidal init needs a 2-d shape"));
                    };
                    if *l != height * width {
                        return Err(Error::contract(format!(
                            "sinusoidal init for {height}x{width} given {l} rows"
                        )));
                    }
                    crate::backbone::sinusoidal_table_2d(height, width, *d)
                }
                Init::Identity => {
                    let [o, i] = shape else {
                        return Err(Error::contract("identity init needs a 2-d shape"));
                    };
                    (0..numel)
                        .map(|k| {
                            if k / i == k % i && k / i < *o {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect()
                }
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(full, var);
        Ok(out)
    }

    /// All parameters in name order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_scalars(&self) -> usize {
        self.vars
            .lock()
            .unwrap()
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    /// Inserts a parameter with a given value (used when loading).
    pub fn insert(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        self.vars.lock().unwrap().insert(name.to_string(), var);
        Ok(())
    }

    /// Overwrites existing parameter values in place.
    pub fn assign_from(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let vars = self.vars.lock().unwrap();
        for (name, var) in vars.iter() {
            let v = values
                .get(name)
                .ok_or_else(|| Error::data(format!("no value for parameter `{name}`")))?;
            var.set(&v.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Detached copies of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// A fresh store holding copies of `values`, with no shared variables.
    pub fn from_values(
        values: &BTreeMap<String, Tensor>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let store = Self::new(0, dtype, device);
        for (k, v) in values {
            store.insert(k, v)?;
        }
        Ok(store)
    }
}

/// A bias-carrying linear map `y = x W^T + b` with `W: (out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &ParamStore, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        let weight = store.get(&[out_dim, in_dim], "weight", init)?;
        let bias = store.get(&[out_dim], "bias", Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    /// Same weights cut off from any gradient tracking.
    pub fn detached(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.as_ref().map(|b| b.detach()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.t()?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            _ => {
                let dims = x.dims().to_vec();
                let last = dims[dims.len() - 1];
                let lead: usize = dims[..dims.len() - 1].iter().product();
                let y = x.reshape((lead, last))?.matmul(&w)?;
                let mut out = dims;
                *out.last_mut().unwrap() = self.weight.dim(0)?;
                y.reshape(out)?
            }
        };
        Ok(match &self.bias {
            Some(b) => {
                let (out, dims) = (b.elem_count(), y.dims().to_vec());
                add_rows(&y.reshape((1, (), out))?, &b.reshape((1, 1, out))?)?.reshape(dims)?
            }
            None => y,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn get_is_idempotent_and_shape_checked() {
        let s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let a = s.pp("x").get(&[2, 3], "w", Init::Normal(1.0)).unwrap();
        let b = s.pp("x").get(&[2, 3], "w", Init::Zeros).unwrap();
        assert_eq!(a.to_vec2::<f64>().unwrap(), b.to_vec2::<f64>().unwrap());
        assert!(s.pp("x").get(&[3, 2], "w", Init::Zeros).is_err());
        assert_eq!(s.named_vars()[0].0, "x.w");
    }

    #[test]
    fn identity_linear() {
        let s = ParamStore::new(0, DType::F32, &Device::Cpu);
        let l = Linear::new(&s, 3, 3, Init::Identity).unwrap();
        let x = Tensor::new(&[[[1f32, 2., 3.]]], &Device::Cpu).unwrap();
        assert_eq!(
            l.forward(&x).unwrap().to_vec3::<f32>().unwrap(),
            vec![vec![vec![1., 2., 3.]]]
        );
    }
}
