//! Noise-estimator backbone: patch tokens, spatial + temporal positional
//! embedding, strictly alternating spatial/temporal transformer blocks
//! (spatial first), and a linear head back to latent space.

mod block;
pub mod tokens;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use block::silu;
pub(crate) use block::{layer_norm, softmax_last};
pub use block::{BlockKind, FinalLayer, SelfAttention, StBlock};
pub use tokens::{
    add_positional, from_spatial_view, from_temporal_view, patch_vectors, sinusoidal_table,
    sinusoidal_table_2d, spatial_view, temporal_view, unpatch_vectors, GridMeta,
    PositionalEmbedding, TokenGrid,
};

use crate::diffusion::NoiseEstimator;
use crate::error::{Error, Result};
use crate::params::{Init, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Number of transformer blocks; even, spatial/temporal pairs.
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub time_embed_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Frames per video clip.
    pub frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_channels: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl BackboneConfig {
    /// 28 blocks, width 1152, 16 heads over a 16×16×4 latent of 16 frames.
    pub fn full() -> Self {
        Self {
            depth: 28,
            dim: 1152,
            heads: 16,
            patch: 2,
            time_embed_dim: 256,
            mlp_ratio: 4,
            frames: 16,
            latent_height: 16,
            latent_width: 16,
            latent_channels: 4,
        }
    }

    pub fn tiny() -> Self {
        Self {
            depth: 4,
            dim: 64,
            heads: 4,
            patch: 2,
            time_embed_dim: 64,
            mlp_ratio: 4,
            frames: 8,
            latent_height: 16,
            latent_width: 16,
            latent_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || !self.depth.is_multiple_of(2) {
            return Err(Error::config(format!(
                "depth must be even and >= 2, got {}",
                self.depth
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.patch == 0
            || !self.latent_height.is_multiple_of(self.patch)
            || !self.latent_width.is_multiple_of(self.patch)
        {
            return Err(Error::config(format!(
                "patch {} must divide latent {}x{}",
                self.patch, self.latent_height, self.latent_width
            )));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config("time_embed_dim must be even and positive"));
        }
        if self.frames == 0 || self.latent_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::config(
                "frames, latent_channels and mlp_ratio must be positive",
            ));
        }
        Ok(())
    }

    pub fn locations(&self) -> usize {
        (self.latent_height / self.patch) * (self.latent_width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.latent_channels
    }

    pub fn spatial_blocks(&self) -> usize {
        self.depth / 2
    }

    pub fn latent_shape(&self, batch: usize, frames: usize) -> [usize; 5] {
        [
            batch,
            frames,
            self.latent_height,
            self.latent_width,
            self.latent_channels,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitScheme {
    pub zero_head: bool,
    pub zero_modulation: bool,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self {
            zero_head: true,
            zero_modulation: true,
        }
    }
}

impl InitScheme {
    /// Every parameter random; used where gradients must be non-trivial.
    pub fn random() -> Self {
        Self {
            zero_head: false,
            zero_modulation: false,
        }
    }
}

/// Head-averaged spatial attention, one `(B, F, L, L)` tensor per spatial block
/// in depth order.
#[derive(Debug, Clone, Default)]
pub struct SpatialAttentionRecord {
    pub maps: Vec<Tensor>,
}

/// Which blocks [`Backbone::forward_blocks`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockFilter {
    All,
    SpatialOnly,
    TemporalOnly,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    patch_embed: Linear,
    spatial_pe: Tensor,
    t_fc1: Linear,
    t_fc2: Linear,
    blocks: Vec<StBlock>,
    final_layer: FinalLayer,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, store: &ParamStore, init: InitScheme) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let kind = if i % 2 == 0 {
                BlockKind::Spatial
            } else {
                BlockKind::Temporal
            };
            blocks.push(StBlock::new(
                &store.pp(&format!("blocks.{i}")),
                kind,
                d,
                cfg.heads,
                cfg.mlp_ratio,
                init.zero_modulation,
            )?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: Linear::new(
                &store.pp("patch_embed"),
                cfg.patch_dim(),
                d,
                Init::XavierUniform,
            )?,
            spatial_pe: store.get(
                &[cfg.locations(), d],
                "spatial_pe",
                Init::Sinusoidal2d {
                    height: cfg.latent_height / cfg.patch,
                    width: cfg.latent_width / cfg.patch,
                },
            )?,
            t_fc1: Linear::new(
                &store.pp("time.fc1"),
                cfg.time_embed_dim,
                d,
                Init::Normal(0.02),
            )?,
            t_fc2: Linear::new(&store.pp("time.fc2"), d, d, Init::Normal(0.02))?,
            blocks,
            final_layer: FinalLayer::new(
                &store.pp("final"),
                d,
                cfg.patch_dim(),
                init.zero_head,
                init.zero_modulation,
            )?,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.spatial_pe.dtype()
    }

    /// Scalar parameter count implied by a configuration.
    pub fn parameter_count(cfg: &BackboneConfig) -> usize {
        let d = cfg.dim;
        let hidden = d * cfg.mlp_ratio;
        let linear = |i: usize, o: usize| i * o + o;
        let block = linear(d, 3 * d)
            + linear(d, d)
            + linear(d, hidden)
            + linear(hidden, d)
            + linear(d, 6 * d);
        linear(cfg.patch_dim(), d)
            + cfg.locations() * d
            + linear(cfg.time_embed_dim, d)
            + linear(d, d)
            + cfg.depth * block
            + linear(d, 2 * d)
            + linear(d, cfg.patch_dim())
    }

    /// Sinusoidal timestep features followed by a two-layer MLP, `(B, D)`.
    pub fn time_embedding(&self, ts: &[usize]) -> Result<Tensor> {
        let half = self.cfg.time_embed_dim / 2;
        let mut feats = Vec::with_capacity(ts.len() * 2 * half);
        for &t in ts {
            let t = t as f64;
            for i in 0..half {
                let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
                feats.push((t * freq).cos());
            }
            for i in 0..half {
                let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
                feats.push((t * freq).sin());
            }
        }
        let x = Tensor::from_vec(feats, (ts.len(), 2 * half), self.spatial_pe.device())?
            .to_dtype(self.dtype())?;
        self.t_fc2.forward(&silu(&self.t_fc1.forward(&x)?)?)
    }

    pub fn positional(&self, frames: usize) -> Result<PositionalEmbedding> {
        PositionalEmbedding::new(self.spatial_pe.clone(), frames)
    }

    /// Patch vectors projected to width `D`.
    pub fn patchify(&self, latent: &Tensor) -> Result<TokenGrid> {
        let (vectors, meta) = patch_vectors(latent, self.cfg.patch)?;
        if meta.locations() != self.cfg.locations() || meta.channels != self.cfg.latent_channels {
            return Err(Error::contract(format!(
                "latent {:?} does not match configured {}x{}x{}",
                latent.dims(),
                self.cfg.latent_height,
                self.cfg.latent_width,
                self.cfg.latent_channels
            )));
        }
        TokenGrid::new(self.patch_embed.forward(&vectors)?, meta)
    }

    /// Runs the block stack on an embedded grid.
    pub fn forward_blocks(
        &self,
        grid: &TokenGrid,
        cond: &Tensor,
        filter: BlockFilter,
        record: bool,
    ) -> Result<(TokenGrid, SpatialAttentionRecord)> {
        let meta = grid.meta;
        let mut zs = spatial_view(grid)?;
        let mut rec = SpatialAttentionRecord::default();
        for (i, block) in self.blocks.iter().enumerate() {
            let run = match (filter, block.kind) {
                (BlockFilter::All, _) => true,
                (BlockFilter::SpatialOnly, BlockKind::Spatial) => true,
                (BlockFilter::TemporalOnly, BlockKind::Temporal) => true,
                _ => false,
            };
            if !run {
                continue;
            }
            match block.kind {
                BlockKind::Spatial => {
                    let (out, maps) = block.forward(&zs, cond, meta.frames, record)?;
                    zs = out;
                    if let Some(m) = maps {
                        let l = meta.locations();
                        rec.maps.push(m.reshape((meta.batch, meta.frames, l, l))?);
                    }
                }
                BlockKind::Temporal => {
                    let zt = temporal_view(&zs, &meta)?;
                    let (out, _) = block.forward(&zt, cond, meta.locations(), false)?;
                    zs = from_temporal_view(&out, &meta)?;
                }
            }
            let check = zs.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !check.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite activations after block {i}"
                )));
            }
        }
        Ok((from_spatial_view(&zs, meta)?, rec))
    }

    /// `eps_theta(x_t, t)` for a `(B, F, h, w, C)` latent with one timestep per
    /// sample. Optionally records spatial attention for the prior loss.
    pub fn predict_noise(
        &self,
        xt: &Tensor,
        ts: &[usize],
        record_attention: bool,
    ) -> Result<(Tensor, SpatialAttentionRecord)> {
        let (b, f, h, w, c) = xt.dims5()?;
        if (h, w, c)
            != (
                self.cfg.latent_height,
                self.cfg.latent_width,
                self.cfg.latent_channels,
            )
        {
            return Err(Error::contract(format!(
                "latent {:?} does not match configured {}x{}x{}",
                xt.dims(),
                self.cfg.latent_height,
                self.cfg.latent_width,
                self.cfg.latent_channels
            )));
        }
        if ts.len() != b || ts.contains(&0) {
            return Err(Error::contract("need one timestep >= 1 per sample"));
        }
        let xt = xt.to_dtype(self.dtype())?;
        let grid = self.patchify(&xt)?;
        let grid = add_positional(&grid, &self.positional(f)?)?;
        let cond = self.time_embedding(ts)?;
        let (grid, rec) = self.forward_blocks(&grid, &cond, BlockFilter::All, record_attention)?;
        let vectors = self.final_layer.forward(&grid.tokens, &cond)?;
        let out = unpatch_vectors(&vectors, &grid.meta)?;
        let check = out.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !check.is_finite() {
            return Err(Error::numeric("non-finite noise prediction"));
        }
        Ok((out, rec))
    }
}

impl NoiseEstimator for Backbone {
    fn predict_noise(&self, xt: &Tensor, t: usize) -> Result<Tensor> {
        let b = xt.dim(0)?;
        let (eps, _) = Backbone::predict_noise(self, xt, &vec![t; b], false)?;
        Ok(eps.to_dtype(xt.dtype())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn cfg(frames: usize, h: usize, w: usize) -> BackboneConfig {
        BackboneConfig {
            depth: 2,
            dim: 16,
            heads: 2,
            patch: 2,
            time_embed_dim: 8,
            mlp_ratio: 2,
            frames,
            latent_height: h,
            latent_width: w,
            latent_channels: 3,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(2, 4, 4);
        c.depth = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = cfg(2, 4, 4);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = cfg(2, 4, 4);
        c.patch = 3;
        assert!(c.validate().is_err());
        assert!(BackboneConfig::full().validate().is_ok());
    }

    #[test]
    fn zero_head_predicts_zero() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let m = Backbone::new(&cfg(2, 4, 4), &store, InitScheme::default()).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 2, 4, 4, 3), &Device::Cpu).unwrap();
        let (eps, _) = m.predict_noise(&x, &[3, 7], false).unwrap();
        let v = eps.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn parameter_count_matches_store() {
        let c = cfg(2, 8, 4);
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        Backbone::new(&c, &store, InitScheme::default()).unwrap();
        assert_eq!(store.num_scalars(), Backbone::parameter_count(&c));
    }

    #[test]
    fn rejects_wrong_latent_shape() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let m = Backbone::new(&cfg(2, 4, 4), &store, InitScheme::default()).unwrap();
        let x = Tensor::zeros((1, 2, 8, 4, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(m.predict_noise(&x, &[1], false).is_err());
        let x = Tensor::zeros((1, 2, 4, 4, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(m.predict_noise(&x, &[0], false).is_err());
    }
}
