use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::ops::{add_rows, gelu, mul_rows};
use crate::params::{Init, Linear, ParamStore};

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok((x / (x.neg()?.exp()? + 1.0)?)?)
}

/// Row-wise softmax over the last axis.
pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Layer norm without affine parameters (modulation supplies them).
pub(crate) fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// `x·(1 + scale) + shift` with `x: (G, ..., D)` and one row per `G`.
fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    let (g, d) = (dims[0], dims[dims.len() - 1]);
    let x3 = x.reshape((g, (), d))?;
    let scale = (scale.reshape((g, 1, d))? + 1.0)?;
    Ok(add_rows(&mul_rows(&x3, &scale)?, &shift.reshape((g, 1, d))?)?.reshape(dims)?)
}

/// Multi-head self-attention over the middle axis of `(N, S, D)`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(store: &ParamStore, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(&store.pp("qkv"), dim, 3 * dim, Init::XavierUniform)?,
            proj: Linear::new(&store.pp("proj"), dim, dim, Init::XavierUniform)?,
            heads,
        })
    }

    /// Returns the output and, when `record`, the head-averaged attention `(N, S, S)`.
    pub fn forward(&self, x: &Tensor, record: bool) -> Result<(Tensor, Option<Tensor>)> {
        let (n, s, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((n, s, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = softmax_last(&scores)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, s, d))?;
        let out = self.proj.forward(&out)?;
        let avg = if record { Some(attn.mean(1)?) } else { None };
        Ok((out, avg))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Spatial,
    Temporal,
}

/// Pre-norm transformer block with adaptive layer-norm conditioning:
/// `x + g1·Attn(mod(LN x)) ` then `x + g2·MLP(mod(LN x))`, where shifts,
/// scales and gates come from the timestep embedding.
#[derive(Debug, Clone)]
pub struct StBlock {
    pub kind: BlockKind,
    attn: SelfAttention,
    fc1: Linear,
    fc2: Linear,
    ada: Linear,
}

impl StBlock {
    pub fn new(
        store: &ParamStore,
        kind: BlockKind,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        zero_modulation: bool,
    ) -> Result<Self> {
        let ada_init = if zero_modulation {
            Init::Zeros
        } else {
            Init::Normal(0.02)
        };
        Ok(Self {
            kind,
            attn: SelfAttention::new(&store.pp("attn"), dim, heads)?,
            fc1: Linear::new(
                &store.pp("mlp.fc1"),
                dim,
                dim * mlp_ratio,
                Init::XavierUniform,
            )?,
            fc2: Linear::new(
                &store.pp("mlp.fc2"),
                dim * mlp_ratio,
                dim,
                Init::XavierUniform,
            )?,
            ada: Linear::new(&store.pp("ada"), dim, 6 * dim, ada_init)?,
        })
    }

    /// `x` is a view `(B·rep, S, D)`; `cond` is the per-sample embedding `(B, D)`,
    /// repeated `rep` times along the folded axis.
    pub fn forward(
        &self,
        x: &Tensor,
        cond: &Tensor,
        rep: usize,
        record: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let (b, d) = cond.dims2()?;
        let (n, _, xd) = x.dims3()?;
        if n != b * rep || xd != d {
            return Err(Error::contract(format!(
                "block input {:?} incompatible with conditioning {:?} x{rep}",
                x.dims(),
                cond.dims()
            )));
        }
        let m = self
            .ada
            .forward(&silu(cond)?)?
            .unsqueeze(1)?
            .broadcast_as((b, rep, 6 * d))?
            .reshape((n, 1, 6 * d))?;
        let chunk = |i: usize| m.narrow(2, i * d, d);
        let (shift1, scale1, gate1) = (chunk(0)?, chunk(1)?, chunk(2)?);
        let (shift2, scale2, gate2) = (chunk(3)?, chunk(4)?, chunk(5)?);

        let h = modulate(&layer_norm(x, 1e-6)?, &shift1, &scale1)?;
        let (a, rec) = self.attn.forward(&h, record)?;
        let x = (x + mul_rows(&a, &gate1)?)?;
        let h = modulate(&layer_norm(&x, 1e-6)?, &shift2, &scale2)?;
        let h = self.fc2.forward(&gelu(&self.fc1.forward(&h)?)?)?;
        let x = (x + mul_rows(&h, &gate2)?)?;
        Ok((x, rec))
    }
}

/// Final adaptive norm and linear head back to patch vectors.
#[derive(Debug, Clone)]
pub struct FinalLayer {
    ada: Linear,
    head: Linear,
}

impl FinalLayer {
    pub fn new(
        store: &ParamStore,
        dim: usize,
        out_dim: usize,
        zero_head: bool,
        zero_modulation: bool,
    ) -> Result<Self> {
        let head_init = if zero_head {
            Init::Zeros
        } else {
            Init::XavierUniform
        };
        let ada_init = if zero_modulation {
            Init::Zeros
        } else {
            Init::Normal(0.02)
        };
        Ok(Self {
            ada: Linear::new(&store.pp("ada"), dim, 2 * dim, ada_init)?,
            head: Linear::new(&store.pp("head"), dim, out_dim, head_init)?,
        })
    }

    /// `x: (B, F, L, D)`, `cond: (B, D)`.
    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let d = cond.dim(1)?;
        let m = self.ada.forward(&silu(cond)?)?.unsqueeze(1)?.unsqueeze(1)?;
        let shift = m.narrow(3, 0, d)?;
        let scale = m.narrow(3, d, d)?;
        self.head
            .forward(&modulate(&layer_norm(x, 1e-6)?, &shift, &scale)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn single_token_attention_is_one() {
        let store = ParamStore::new(3, DType::F64, &Device::Cpu);
        let attn = SelfAttention::new(&store, 8, 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (3, 1, 8), &Device::Cpu).unwrap();
        let (_, rec) = attn.forward(&x, true).unwrap();
        let rec = rec
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!(rec.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let store = ParamStore::new(5, DType::F32, &Device::Cpu);
        let attn = SelfAttention::new(&store, 16, 4).unwrap();
        let x = Tensor::randn(0f32, 2.0, (4, 9, 16), &Device::Cpu).unwrap();
        let (_, rec) = attn.forward(&x, true).unwrap();
        let rec = rec.unwrap();
        let sums = rec
            .sum(2)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
        assert!(rec
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .iter()
            .all(|&v| v >= 0.0));
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = Tensor::new(&[[1f64, 2., 3., 4.]], &Device::Cpu).unwrap();
        let y = layer_norm(&x, 0.0).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}
