//! Prior guidance: aligns the backbone's spatial attention with attention
//! maps from a frozen 2-D encoder.
//!
//! Per level, the prior map of each frame passes through a trainable
//! stride-2 3×3 convolution; student and adapted prior maps are brought to a
//! common side by average pooling of whichever is larger; the Pearson
//! correlation is taken per frame. The loss is `1 - mean corr` over levels
//! and frames, and enters the objective as `elbo + alpha * loss`.

pub mod provider;

use candle_core::{DType, Device, Tensor};

pub use provider::{frame_hash, CachedPrior, MapStack, PriorProvider, ReplayPrior, ToyPrior};

use crate::backbone::SpatialAttentionRecord;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

/// Prior-loss weight used by default.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub value: f64,
    /// Set when either input had zero variance; `value` is then 0.
    pub degenerate: bool,
}

/// `Cov(a, b) / sqrt(Var(a) Var(b))`. Constant inputs give a flagged 0.
pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "correlation inputs differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::contract("correlation needs at least two values"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Correlation {
        value: (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Row-wise Pearson correlation of two `(N, M)` tensors, differentiable in
/// both. Returns the `(N,)` correlations and how many rows were degenerate.
pub fn pearson_corr_rows(a: &Tensor, b: &Tensor) -> Result<(Tensor, usize)> {
    if a.dims() != b.dims() || a.rank() != 2 {
        return Err(Error::contract(format!(
            "row correlation needs equal (N, M) shapes, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let ac = a.broadcast_sub(&a.mean_keepdim(1)?)?;
    let bc = b.broadcast_sub(&b.mean_keepdim(1)?)?;
    let num = (&ac * &bc)?.sum(1)?;
    let ssa = ac.sqr()?.sum(1)?;
    let ssb = bc.sqr()?.sum(1)?;
    let raw_a = a.sqr()?.sum(1)?;
    let raw_b = b.sqr()?.sum(1)?;

    let v = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?) };
    let (ssa_v, ssb_v, raw_a_v, raw_b_v) = (v(&ssa)?, v(&ssb)?, v(&raw_a)?, v(&raw_b)?);
    // Rounding leaves ~1e-15 relative residue on constant rows.
    let tol = match a.dtype() {
        DType::F64 => 1e-24,
        _ => 1e-10,
    };
    let mask: Vec<f64> = (0..ssa_v.len())
        .map(|i| {
            let deg = ssa_v[i] <= tol * raw_a_v[i].max(1e-300)
                || ssb_v[i] <= tol * raw_b_v[i].max(1e-300);
            if deg {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let degenerate = mask.iter().filter(|&&m| m > 0.0).count();
    let mask = Tensor::from_vec(mask, ssa_v.len(), a.device())?.to_dtype(a.dtype())?;
    let den = ((ssa * ssb)? + &mask)?.sqrt()?;
    let keep = (mask.neg()? + 1.0)?;
    Ok((((num / den)? * keep)?, degenerate))
}

/// Output side of a 3×3, stride-2, padding-1 convolution.
pub fn adapted_side(side: usize) -> usize {
    (side - 1) / 2 + 1
}

/// Patch matrix `(N·S'·S', C·9)` for a 3×3 stride-2 padding-1 convolution
/// over `(N, C, S, S)` maps; out-of-range taps are zero.
fn im2col<T: Copy + Default>(maps: &[T], n: usize, channels: usize, side: usize) -> Vec<T> {
    let out = adapted_side(side);
    let k = channels * 9;
    let mut cols = vec![T::default(); n * out * out * k];
    for i in 0..n {
        for oy in 0..out {
            for ox in 0..out {
                let row = ((i * out + oy) * out + ox) * k;
                for c in 0..channels {
                    let base = (i * channels + c) * side * side;
                    for ky in 0..3 {
                        let y = (2 * oy + ky) as isize - 1;
                        for kx in 0..3 {
                            let x = (2 * ox + kx) as isize - 1;
                            if y >= 0 && x >= 0 && (y as usize) < side && (x as usize) < side {
                                cols[row + c * 9 + ky * 3 + kx] =
                                    maps[base + y as usize * side + x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Trainable 3×3, stride-2, padding-1 convolution from `channels` map
/// channels to one. Weights are laid out `(channels·9, 1)`, row-major taps.
#[derive(Debug, Clone)]
pub struct AdapterConv {
    pub weight: Tensor,
    pub bias: Tensor,
    channels: usize,
}

impl AdapterConv {
    pub fn new(store: &ParamStore, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.get(&[channels * 9, 1], "weight", Init::Normal(0.1))?,
            bias: store.get(&[1], "bias", Init::Zeros)?,
            channels,
        })
    }

    pub fn from_kernel(kernel: &[f64], bias: f64, device: &Device) -> Result<Self> {
        if !kernel.len().is_multiple_of(9) || kernel.is_empty() {
            return Err(Error::contract(
                "kernel length must be a positive multiple of 9",
            ));
        }
        Ok(Self {
            weight: Tensor::from_vec(kernel.to_vec(), (kernel.len(), 1), device)?,
            bias: Tensor::new(&[bias], device)?,
            channels: kernel.len() / 9,
        })
    }

    fn check(&self, len: usize, n: usize, side: usize) -> Result<()> {
        if side < 3 {
            return Err(Error::contract(format!(
                "map side {side} too small for a 3x3 adapter"
            )));
        }
        if len != n * self.channels * side * side {
            return Err(Error::contract(
                "map buffer does not match (n, channels, side, side)",
            ));
        }
        Ok(())
    }

    /// Convolves `n` constant maps of shape `(channels, side, side)`, returning
    /// `(n, side', side')` with gradients flowing to the adapter weights only.
    pub fn apply(&self, maps: &[f32], n: usize, side: usize) -> Result<Tensor> {
        self.check(maps.len(), n, side)?;
        let out = adapted_side(side);
        let cols = Tensor::from_vec(
            im2col(maps, n, self.channels, side),
            (n * out * out, self.channels * 9),
            self.weight.device(),
        )?
        .to_dtype(self.weight.dtype())?;
        let y = cols.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        Ok(y.reshape((n, out, out))?)
    }

    /// One map in f64, flattened row-major.
    pub fn adapt_map(&self, map: &[f64], side: usize) -> Result<Vec<f64>> {
        self.check(map.len(), 1, side)?;
        let out = adapted_side(side);
        let cols = Tensor::from_vec(
            im2col(map, 1, self.channels, side),
            (out * out, self.channels * 9),
            self.weight.device(),
        )?;
        let y = cols
            .matmul(&self.weight.to_dtype(DType::F64)?)?
            .broadcast_add(&self.bias.to_dtype(DType::F64)?)?;
        Ok(y.flatten_all()?.to_vec1::<f64>()?)
    }
}

/// Adaptive average pooling matrix `(out, input)`: row `i` averages inputs
/// `floor(i·in/out) .. ceil((i+1)·in/out)`.
pub fn pooling_matrix(input: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    for i in 0..out {
        let lo = i * input / out;
        let hi = ((i + 1) * input).div_ceil(out);
        let w = 1.0 / (hi - lo) as f64;
        for j in lo..hi {
            m[i * input + j] = w;
        }
    }
    m
}

/// Average-pools `(N, S, S)` maps to `(N, out, out)`.
pub fn pool_maps(maps: &Tensor, out: usize) -> Result<Tensor> {
    let (n, s, s2) = maps.dims3()?;
    if s != s2 {
        return Err(Error::contract("maps must be square"));
    }
    if s == out {
        return Ok(maps.clone());
    }
    let p = Tensor::from_vec(pooling_matrix(s, out), (out, s), maps.device())?
        .to_dtype(maps.dtype())?;
    let p = p.unsqueeze(0)?.broadcast_as((n, out, s))?.contiguous()?;
    let pt = p.transpose(1, 2)?.contiguous()?;
    Ok(p.matmul(&maps.contiguous()?)?.matmul(&pt)?)
}

/// Even spread of `levels` prior levels over `spatial_blocks` student blocks:
/// level `i` pairs with block `round(i·(S-1)/(levels-1))`.
pub fn default_pairing(levels: usize, spatial_blocks: usize) -> Vec<usize> {
    if levels <= 1 {
        return vec![0; levels];
    }
    (0..levels)
        .map(|i| ((i * (spatial_blocks - 1)) as f64 / (levels - 1) as f64).round() as usize)
        .collect()
}

#[derive(Debug, Clone)]
pub struct PriorLossOutput {
    /// Scalar `1 - mean corr`, differentiable.
    pub loss: Tensor,
    pub corr_per_level: Vec<f64>,
    pub degenerate: usize,
    /// Correlations averaged, i.e. levels × frames.
    pub rows: usize,
}

impl PriorLossOutput {
    pub fn value(&self) -> Result<f64> {
        Ok(self.loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

/// Adapters for every level plus the level → spatial-block pairing.
#[derive(Debug, Clone)]
pub struct PriorGuidance {
    adapters: Vec<AdapterConv>,
    pairing: Vec<usize>,
}

impl PriorGuidance {
    pub fn new(
        store: &ParamStore,
        levels: usize,
        pairing: Vec<usize>,
        spatial_blocks: usize,
    ) -> Result<Self> {
        if pairing.len() != levels {
            return Err(Error::config(format!(
                "pairing lists {} blocks for {levels} prior levels",
                pairing.len()
            )));
        }
        if let Some(&b) = pairing.iter().find(|&&b| b >= spatial_blocks) {
            return Err(Error::config(format!(
                "pairing names spatial block {b}, model has {spatial_blocks}"
            )));
        }
        let adapters = (0..levels)
            .map(|i| AdapterConv::new(&store.pp(&format!("adapter.{i}")), 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { adapters, pairing })
    }

    pub fn pairing(&self) -> &[usize] {
        &self.pairing
    }

    pub fn levels(&self) -> usize {
        self.adapters.len()
    }

    /// Scalar parameter count: `levels × (9 + 1)`.
    pub fn parameter_count(levels: usize) -> usize {
        levels * 10
    }

    /// `1 - mean corr` over levels and frames. `prior` holds one stack per
    /// level with `B·F` maps in the same (sample, frame) order as the record.
    pub fn prior_loss(
        &self,
        student: &SpatialAttentionRecord,
        prior: &[MapStack],
    ) -> Result<PriorLossOutput> {
        if prior.len() != self.adapters.len() {
            return Err(Error::contract(format!(
                "{} prior levels for {} adapters",
                prior.len(),
                self.adapters.len()
            )));
        }
        let mut total: Option<Tensor> = None;
        let mut corr_per_level = Vec::with_capacity(prior.len());
        let mut degenerate = 0;
        let mut rows = 0usize;
        for (lvl, (stack, adapter)) in prior.iter().zip(&self.adapters).enumerate() {
            let block = self.pairing[lvl];
            let smap = student.maps.get(block).ok_or_else(|| {
                Error::contract(format!(
                    "level {lvl} paired with unrecorded spatial block {block}"
                ))
            })?;
            let (b, f, l, _) = smap.dims4()?;
            if stack.count != b * f {
                return Err(Error::contract(format!(
                    "level {lvl}: {} prior maps for {} student frames",
                    stack.count,
                    b * f
                )));
            }
            let adapted = adapter.apply(&stack.data, stack.count, stack.side)?;
            let a_side = adapted.dim(1)?;
            let common = a_side.min(l);
            let s = pool_maps(&smap.reshape((b * f, l, l))?, common)?;
            let p = pool_maps(&adapted.to_dtype(s.dtype())?, common)?;
            if s.dims() != p.dims() {
                return Err(Error::contract(
                    "student and prior maps differ after adaptation",
                ));
            }
            let n = b * f;
            let (corr, deg) = pearson_corr_rows(
                &s.reshape((n, common * common))?,
                &p.reshape((n, common * common))?,
            )?;
            degenerate += deg;
            corr_per_level.push(corr.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?);
            let sum = corr.sum_all()?;
            total = Some(match total {
                None => sum,
                Some(t) => (t + sum)?,
            });
            rows += n;
        }
        let total = total.ok_or_else(|| Error::contract("no prior levels"))?;
        let loss = (total * (-1.0 / rows as f64))?.affine(1.0, 1.0)?;
        Ok(PriorLossOutput {
            loss,
            corr_per_level,
            degenerate,
            rows,
        })
    }
}

/// `elbo + alpha * prior`, rejecting non-finite terms.
pub fn total_loss(elbo: f64, prior: f64, alpha: f64) -> Result<f64> {
    for (name, v) in [("elbo", elbo), ("prior", prior), ("alpha", alpha)] {
        if !v.is_finite() {
            return Err(Error::numeric(format!("{name} term is {v}")));
        }
    }
    Ok(elbo + alpha * prior)
}
