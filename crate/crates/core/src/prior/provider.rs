//! Frozen 2-D attention priors.
//!
//! A provider takes a stack of frames (a [`VideoClip`] whose frames are
//! treated as independent images, pixel values in [-1, 1]) and returns one
//! [`MapStack`] per declared level: for each frame, the head-averaged
//! token-to-token attention matrix of that level, `side × side`, rows summing
//! to one. Class or register tokens, if a backend has them, must be dropped
//! and rows renormalised before returning.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::backbone::{layer_norm, softmax_last};
use crate::error::{Error, Result};
use crate::params::{Init, Linear, ParamStore};
use crate::tensorfile::{NamedTensor, TensorData, TensorFile};
use crate::video::{resize_bilinear, VideoClip, CHANNELS};

/// Attention maps for `count` frames at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct MapStack {
    pub count: usize,
    pub side: usize,
    pub data: Vec<f32>,
}

impl MapStack {
    pub fn map(&self, i: usize) -> &[f32] {
        let n = self.side * self.side;
        &self.data[i * n..(i + 1) * n]
    }

    /// Largest deviation of any row sum from one.
    pub fn row_sum_error(&self) -> f64 {
        self.data
            .chunks(self.side)
            .map(|row| (row.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub trait PriorProvider: Send + Sync {
    /// Layer index reported for each level, in level order.
    fn layers(&self) -> &[usize];

    /// Native side length of every returned map.
    fn map_side(&self) -> usize;

    fn attention_maps(&self, frames: &VideoClip) -> Result<Vec<MapStack>>;

    fn id(&self) -> String;
}

/// Content hash of one frame, used to key caches and replay files.
pub fn frame_hash(height: usize, width: usize, data: &[f32]) -> String {
    let mut h = Sha256::new();
    h.update((height as u64).to_le_bytes());
    h.update((width as u64).to_le_bytes());
    for v in data {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..12])
}

#[derive(Debug, Clone)]
struct ToyLayer {
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

/// Desk-scale stand-in for a self-supervised ViT: a two-block transformer
/// encoder with fixed seeded weights. Frames are resized to `input_side`,
/// cut into `patch × patch` tokens, and both blocks' attention maps are
/// exposed twice, giving four levels `[0, 0, 1, 1]`.
#[derive(Debug, Clone)]
pub struct ToyPrior {
    seed: u64,
    input_side: usize,
    patch: usize,
    dim: usize,
    heads: usize,
    embed: Linear,
    pos: Tensor,
    blocks: Vec<ToyLayer>,
    layers: Vec<usize>,
}

impl ToyPrior {
    pub fn new(seed: u64, input_side: usize, patch: usize) -> Result<Self> {
        if patch == 0 || !input_side.is_multiple_of(patch) {
            return Err(Error::config(format!(
                "toy prior patch {patch} must divide input side {input_side}"
            )));
        }
        let dim = 32;
        let heads = 2;
        let store = ParamStore::new(seed, DType::F32, &Device::Cpu);
        let tokens = (input_side / patch).pow(2);
        let embed = Linear::new(
            &store.pp("embed"),
            patch * patch * CHANNELS,
            dim,
            Init::Normal(0.35),
        )?
        .detached();
        let pos = store
            .get(&[tokens, dim], "pos", Init::Normal(0.5))?
            .detach();
        let blocks = (0..2)
            .map(|i| {
                let s = store.pp(&format!("blocks.{i}"));
                Ok(ToyLayer {
                    qkv: Linear::new(&s.pp("qkv"), dim, 3 * dim, Init::Normal(0.3))?.detached(),
                    proj: Linear::new(&s.pp("proj"), dim, dim, Init::XavierUniform)?.detached(),
                    fc1: Linear::new(&s.pp("fc1"), dim, 2 * dim, Init::XavierUniform)?.detached(),
                    fc2: Linear::new(&s.pp("fc2"), 2 * dim, dim, Init::XavierUniform)?.detached(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed,
            input_side,
            patch,
            dim,
            heads,
            embed,
            pos,
            blocks,
            layers: vec![0, 0, 1, 1],
        })
    }

    /// 32×32 input, 4×4 patches: 64 tokens, 64×64 maps.
    pub fn desk(seed: u64) -> Result<Self> {
        Self::new(seed, 32, 4)
    }

    /// Digest of every weight; changes iff a weight changes.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        let mut add = |t: &Tensor| -> Result<()> {
            for v in t.flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
            Ok(())
        };
        add(&self.embed.weight)?;
        add(&self.pos)?;
        for b in &self.blocks {
            for l in [&b.qkv, &b.proj, &b.fc1, &b.fc2] {
                add(&l.weight)?;
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    fn tokens(&self, frames: &VideoClip) -> Result<Tensor> {
        let s = self.input_side;
        let p = self.patch;
        let g = s / p;
        let mut data = Vec::with_capacity(frames.frames * s * s * CHANNELS);
        for f in 0..frames.frames {
            data.extend(resize_bilinear(
                frames.frame(f),
                frames.height,
                frames.width,
                s,
                s,
            ));
        }
        let x = Tensor::from_vec(data, (frames.frames, g, p, g, p, CHANNELS), &Device::Cpu)?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((frames.frames, g * g, p * p * CHANNELS))?;
        Ok(self.embed.forward(&x)?.broadcast_add(&self.pos)?)
    }
}

impl PriorProvider for ToyPrior {
    fn layers(&self) -> &[usize] {
        &self.layers
    }

    fn map_side(&self) -> usize {
        (self.input_side / self.patch).pow(2)
    }

    fn attention_maps(&self, frames: &VideoClip) -> Result<Vec<MapStack>> {
        let mut x = self.tokens(frames)?;
        let (n, l, d) = x.dims3()?;
        let hd = self.dim / self.heads;
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let h = layer_norm(&x, 1e-6)?;
            let qkv = b
                .qkv
                .forward(&h)?
                .reshape((n, l, 3, self.heads, hd))?
                .permute((2, 0, 3, 1, 4))?;
            let (q, k, v) = (
                qkv.get(0)?.contiguous()?,
                qkv.get(1)?.contiguous()?,
                qkv.get(2)?.contiguous()?,
            );
            let attn = softmax_last(&(q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?)?;
            let out = attn
                .matmul(&v)?
                .transpose(1, 2)?
                .contiguous()?
                .reshape((n, l, d))?;
            x = (x + b.proj.forward(&out)?)?;
            let h = layer_norm(&x, 1e-6)?;
            x = (&x + b.fc2.forward(&b.fc1.forward(&h)?.relu()?)?)?;
            per_block.push(MapStack {
                count: n,
                side: l,
                data: attn.mean(1)?.flatten_all()?.to_vec1::<f32>()?,
            });
        }
        Ok(self.layers.iter().map(|&i| per_block[i].clone()).collect())
    }

    fn id(&self) -> String {
        format!(
            "toy-prior(seed={},side={},patch={})",
            self.seed, self.input_side, self.patch
        )
    }
}

/// Serves maps precomputed by another provider, keyed by frame content.
#[derive(Debug, Clone)]
pub struct ReplayPrior {
    layers: Vec<usize>,
    side: usize,
    index: HashMap<String, usize>,
    levels: Vec<MapStack>,
    source: String,
}

impl ReplayPrior {
    /// Runs `provider` over every frame of `clips` and packs the result into a
    /// container: tensors `level.<i>` of shape `(frames, side, side)` and
    /// metadata `{ "kind": "prior-replay", "layers", "side", "frame_hashes", "source" }`.
    pub fn record(provider: &dyn PriorProvider, clips: &[VideoClip]) -> Result<TensorFile> {
        let side = provider.map_side();
        let mut hashes = Vec::new();
        let mut levels: Vec<Vec<f32>> = vec![Vec::new(); provider.layers().len()];
        for clip in clips {
            let maps = provider.attention_maps(clip)?;
            for f in 0..clip.frames {
                hashes.push(frame_hash(clip.height, clip.width, clip.frame(f)));
            }
            for (acc, m) in levels.iter_mut().zip(maps) {
                acc.extend(m.data);
            }
        }
        let mut file = TensorFile::new(serde_json::json!({
            "kind": "prior-replay",
            "layers": provider.layers(),
            "side": side,
            "frame_hashes": hashes,
            "source": provider.id(),
        }));
        for (i, data) in levels.into_iter().enumerate() {
            file.push(NamedTensor::f32(
                format!("level.{i}"),
                vec![hashes.len(), side, side],
                data,
            ));
        }
        Ok(file)
    }

    pub fn from_file(file: &TensorFile) -> Result<Self> {
        let meta = &file.metadata;
        if meta["kind"] != "prior-replay" {
            return Err(Error::data("container is not a prior replay file"));
        }
        let layers: Vec<usize> = serde_json::from_value(meta["layers"].clone())?;
        let side: usize = serde_json::from_value(meta["side"].clone())?;
        let hashes: Vec<String> = serde_json::from_value(meta["frame_hashes"].clone())?;
        let mut levels = Vec::with_capacity(layers.len());
        for i in 0..layers.len() {
            let t = file.require(&format!("level.{i}"))?;
            let TensorData::F32(data) = &t.data else {
                return Err(Error::data("replay maps must be f32"));
            };
            if t.shape != [hashes.len(), side, side] {
                return Err(Error::data(format!(
                    "replay level {i} has shape {:?}",
                    t.shape
                )));
            }
            levels.push(MapStack {
                count: hashes.len(),
                side,
                data: data.clone(),
            });
        }
        let index = hashes
            .into_iter()
            .enumerate()
            .map(|(i, h)| (h, i))
            .collect();
        Ok(Self {
            layers,
            side,
            index,
            levels,
            source: meta["source"].as_str().unwrap_or("unknown").to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&TensorFile::load(path)?)
    }
}

impl PriorProvider for ReplayPrior {
    fn layers(&self) -> &[usize] {
        &self.layers
    }

    fn map_side(&self) -> usize {
        self.side
    }

    fn attention_maps(&self, frames: &VideoClip) -> Result<Vec<MapStack>> {
        let n = self.side * self.side;
        let mut out: Vec<MapStack> = self
            .levels
            .iter()
            .map(|_| MapStack {
                count: frames.frames,
                side: self.side,
                data: Vec::with_capacity(frames.frames * n),
            })
            .collect();
        for f in 0..frames.frames {
            let key = frame_hash(frames.height, frames.width, frames.frame(f));
            let &i = self
                .index
                .get(&key)
                .ok_or_else(|| Error::data(format!("frame {key} not present in replay file")))?;
            for (dst, src) in out.iter_mut().zip(&self.levels) {
                dst.data.extend_from_slice(src.map(i));
            }
        }
        Ok(out)
    }

    fn id(&self) -> String {
        format!("replay({})", self.source)
    }
}

/// Memoises per-frame maps of a frozen provider.
pub struct CachedPrior<P> {
    inner: P,
    cache: Mutex<HashMap<String, Vec<Vec<f32>>>>,
}

impl<P: PriorProvider> CachedPrior<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: PriorProvider> PriorProvider for CachedPrior<P> {
    fn layers(&self) -> &[usize] {
        self.inner.layers()
    }

    fn map_side(&self) -> usize {
        self.inner.map_side()
    }

    fn attention_maps(&self, frames: &VideoClip) -> Result<Vec<MapStack>> {
        let keys: Vec<String> = (0..frames.frames)
            .map(|f| frame_hash(frames.height, frames.width, frames.frame(f)))
            .collect();
        let mut cache = self.cache.lock().unwrap();
        let missing: Vec<usize> = (0..frames.frames)
            .filter(|&f| !cache.contains_key(&keys[f]))
            .collect();
        if !missing.is_empty() {
            let mut data = Vec::with_capacity(missing.len() * frames.frame_len());
            for &f in &missing {
                data.extend_from_slice(frames.frame(f));
            }
            let sub = VideoClip::new(missing.len(), frames.height, frames.width, data)?;
            let maps = self.inner.attention_maps(&sub)?;
            for (j, &f) in missing.iter().enumerate() {
                cache.insert(
                    keys[f].clone(),
                    maps.iter().map(|m| m.map(j).to_vec()).collect(),
                );
            }
        }
        let side = self.map_side();
        let levels = self.layers().len();
        let mut out: Vec<MapStack> = (0..levels)
            .map(|_| MapStack {
                count: frames.frames,
                side,
                data: Vec::with_capacity(frames.frames * side * side),
            })
            .collect();
        for key in &keys {
            for (lvl, m) in cache[key].iter().enumerate() {
                out[lvl].data.extend_from_slice(m);
            }
        }
        Ok(out)
    }

    fn id(&self) -> String {
        self.inner.id()
    }
}

impl PriorProvider for Box<dyn PriorProvider> {
    fn layers(&self) -> &[usize] {
        self.as_ref().layers()
    }

    fn map_side(&self) -> usize {
        self.as_ref().map_side()
    }

    fn attention_maps(&self, frames: &VideoClip) -> Result<Vec<MapStack>> {
        self.as_ref().attention_maps(frames)
    }

    fn id(&self) -> String {
        self.as_ref().id()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_clip;

    #[test]
    fn toy_prior_is_frozen_and_stochastic() {
        let p = ToyPrior::desk(3).unwrap();
        let clip = synth_clip(1, 2, 32, 32);
        let a = p.attention_maps(&clip).unwrap();
        let b = p.attention_maps(&clip).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        for m in &a {
            assert_eq!((m.count, m.side), (2, 64));
            assert!(m.row_sum_error() < 1e-4);
            assert!(m.data.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn toy_prior_is_input_sensitive() {
        let p = ToyPrior::desk(3).unwrap();
        let a = p.attention_maps(&synth_clip(1, 1, 32, 32)).unwrap();
        let b = p.attention_maps(&synth_clip(2, 1, 32, 32)).unwrap();
        let diff = a[0]
            .data
            .iter()
            .zip(&b[0].data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(diff > 1e-6, "max diff {diff}");
    }

    #[test]
    fn replay_and_cache_match_source() {
        let p = ToyPrior::desk(9).unwrap();
        let clips = vec![synth_clip(4, 3, 24, 24), synth_clip(5, 2, 24, 24)];
        let file = ReplayPrior::record(&p, &clips).unwrap();
        let bytes = file.to_bytes().unwrap();
        let replay = ReplayPrior::from_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
        let cached = CachedPrior::new(p.clone());
        for clip in &clips {
            let want = p.attention_maps(clip).unwrap();
            assert_eq!(replay.attention_maps(clip).unwrap(), want);
            assert_eq!(cached.attention_maps(clip).unwrap(), want);
            assert_eq!(cached.attention_maps(clip).unwrap(), want);
        }
        assert!(replay.attention_maps(&synth_clip(99, 1, 24, 24)).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let data: Vec<f32> = (0..4 * 4 * 3).map(|v| v as f32).collect();
        assert_eq!(resize_bilinear(&data, 4, 4, 4, 4), data);
        let c = vec![0.25f32; 5 * 7 * 3];
        assert!(resize_bilinear(&c, 5, 7, 3, 2)
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
