//! Patch tokenization, positional embeddings and the two token views.
//!
//! Token grids are stored as `(B, F, L, D)` with `L = (h/p)·(w/p)` and
//! patches in row-major order within a frame. The spatial view folds frames
//! into the batch axis, `(B·F, L, D)`; the temporal view folds locations in,
//! `(B·L, F, D)`. Both are pure reshapes/permutations.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridMeta {
    pub batch: usize,
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub channels: usize,
}

impl GridMeta {
    pub fn locations(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn latent_dims(&self) -> (usize, usize, usize, usize, usize) {
        (
            self.batch,
            self.frames,
            self.grid_h * self.patch,
            self.grid_w * self.patch,
            self.channels,
        )
    }
}

/// Tokens plus the geometry needed to undo tokenization.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub meta: GridMeta,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, meta: GridMeta) -> Result<Self> {
        let (b, f, l, _) = tokens.dims4()?;
        if (b, f, l) != (meta.batch, meta.frames, meta.locations()) {
            return Err(Error::contract(format!(
                "token tensor {:?} inconsistent with grid {meta:?}",
                tokens.dims()
            )));
        }
        Ok(Self { tokens, meta })
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[3]
    }
}

/// Splits a `(B, F, h, w, C)` latent into raw patch vectors `(B, F, L, p·p·C)`.
pub fn patch_vectors(latent: &Tensor, patch: usize) -> Result<(Tensor, GridMeta)> {
    let (b, f, h, w, c) = latent.dims5()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!(
            "patch size {patch} does not divide latent {h}x{w}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let meta = GridMeta {
        batch: b,
        frames: f,
        grid_h: gh,
        grid_w: gw,
        patch,
        channels: c,
    };
    let v = latent
        .reshape(vec![b, f, gh, patch, gw, patch, c])?
        .permute(vec![0, 1, 2, 4, 3, 5, 6])?
        .contiguous()?
        .reshape((b, f, gh * gw, patch * patch * c))?;
    Ok((v, meta))
}

/// Inverse of [`patch_vectors`].
pub fn unpatch_vectors(vectors: &Tensor, meta: &GridMeta) -> Result<Tensor> {
    let (b, f, l, pd) = vectors.dims4()?;
    if (b, f, l, pd) != (meta.batch, meta.frames, meta.locations(), meta.patch_dim()) {
        return Err(Error::contract(format!(
            "patch vectors {:?} inconsistent with grid {meta:?}",
            vectors.dims()
        )));
    }
    let p = meta.patch;
    let out = vectors
        .reshape(vec![b, f, meta.grid_h, meta.grid_w, p, p, meta.channels])?
        .permute(vec![0, 1, 2, 4, 3, 5, 6])?
        .contiguous()?
        .reshape((b, f, meta.grid_h * p, meta.grid_w * p, meta.channels))?;
    Ok(out)
}

/// `Z^S`: `(B, F, L, D)` → `(B·F, L, D)`.
pub fn spatial_view(grid: &TokenGrid) -> Result<Tensor> {
    let (b, f, l, d) = grid.tokens.dims4()?;
    Ok(grid.tokens.reshape((b * f, l, d))?)
}

pub fn from_spatial_view(zs: &Tensor, meta: GridMeta) -> Result<TokenGrid> {
    let (_, l, d) = zs.dims3()?;
    TokenGrid::new(zs.reshape((meta.batch, meta.frames, l, d))?, meta)
}

/// `Z^T`: `(B·F, L, D)` → `(B·L, F, D)`.
pub fn temporal_view(zs: &Tensor, meta: &GridMeta) -> Result<Tensor> {
    let (bf, l, d) = zs.dims3()?;
    if bf != meta.batch * meta.frames || l != meta.locations() {
        return Err(Error::contract("spatial view inconsistent with grid meta"));
    }
    Ok(zs
        .reshape((meta.batch, meta.frames, l, d))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((meta.batch * l, meta.frames, d))?)
}

/// Inverse of [`temporal_view`], back to `(B·F, L, D)`.
pub fn from_temporal_view(zt: &Tensor, meta: &GridMeta) -> Result<Tensor> {
    let (bl, f, d) = zt.dims3()?;
    if bl != meta.batch * meta.locations() || f != meta.frames {
        return Err(Error::contract("temporal view inconsistent with grid meta"));
    }
    let l = meta.locations();
    Ok(zt
        .reshape((meta.batch, l, f, d))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((meta.batch * f, l, d))?)
}

/// Fixed sinusoidal table `(rows, dim)`: column `2i` is `sin(r / 10000^(2i/dim))`,
/// column `2i+1` the matching cosine.
pub fn sinusoidal_table(rows: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * dim];
    for r in 0..rows {
        for col in 0..dim {
            let i = col / 2;
            let angle = r as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            out[r * dim + col] = if col % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            };
        }
    }
    out
}

/// Row `y·w + x` holds the sinusoidal code of `y` in its first `dim / 2`
/// columns and that of `x` in the rest.
pub fn sinusoidal_table_2d(h: usize, w: usize, dim: usize) -> Vec<f64> {
    let dy = dim / 2;
    let (ty, tx) = (sinusoidal_table(h, dy), sinusoidal_table(w, dim - dy));
    let mut out = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&ty[y * dy..(y + 1) * dy]);
            out.extend_from_slice(&tx[x * (dim - dy)..(x + 1) * (dim - dy)]);
        }
    }
    out
}

/// Spatial table (`L × D`, learned) and temporal table (`F × D`, sinusoidal).
#[derive(Debug, Clone)]
pub struct PositionalEmbedding {
    pub spatial: Tensor,
    pub temporal: Tensor,
}

impl PositionalEmbedding {
    pub fn new(spatial: Tensor, frames: usize) -> Result<Self> {
        let (_, dim) = spatial.dims2()?;
        let temporal = Tensor::from_vec(
            sinusoidal_table(frames, dim),
            (frames, dim),
            spatial.device(),
        )?
        .to_dtype(spatial.dtype())?;
        Ok(Self { spatial, temporal })
    }

    pub fn zeros(
        locations: usize,
        frames: usize,
        dim: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Ok(Self {
            spatial: Tensor::zeros((locations, dim), dtype, device)?,
            temporal: Tensor::zeros((frames, dim), dtype, device)?,
        })
    }

    /// `(F, L, D)` with entry `(f, l)` = `spatial[l] + temporal[f]`.
    pub fn combined(&self) -> Result<Tensor> {
        let (l, d) = self.spatial.dims2()?;
        let (f, _) = self.temporal.dims2()?;
        Ok(self
            .spatial
            .unsqueeze(0)?
            .broadcast_add(&self.temporal.unsqueeze(1)?)?
            .reshape((f, l, d))?)
    }
}

pub fn add_positional(grid: &TokenGrid, pe: &PositionalEmbedding) -> Result<TokenGrid> {
    let (_, f, l, d) = grid.tokens.dims4()?;
    let (pl, pd) = pe.spatial.dims2()?;
    let (pf, _) = pe.temporal.dims2()?;
    if (pl, pd, pf) != (l, d, f) {
        return Err(Error::contract(format!(
            "positional embedding (F={pf}, L={pl}, D={pd}) does not fit tokens (F={f}, L={l}, D={d})"
        )));
    }
    TokenGrid::new(
        grid.tokens.broadcast_add(&pe.combined()?.unsqueeze(0)?)?,
        grid.meta,
    )
}
