//! Encoders between pixel clips and the latent space diffusion runs in.
//!
//! Every codec works frame by frame on non-overlapping `k × k` pixel blocks:
//! `identity` (k = 1, C = 3), `pool` (block average, nearest-neighbour
//! decode, C = 3) and `tiny-ae` (a small per-block MLP autoencoder trained
//! on its own and frozen afterwards).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::silu;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Init, Linear, ParamStore};
use crate::rng::SeededRng;
use crate::video::{VideoClip, CHANNELS};

/// Encoded clip, `frames × height × width × channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl LatentClip {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != frames * height * width * channels {
            return Err(Error::contract(format!(
                "latent data has {} values, expected {frames}x{height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// `(B, F, h, w, C)` tensor from clips of identical shape.
    pub fn stack(clips: &[&LatentClip], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = clips
            .first()
            .ok_or_else(|| Error::contract("cannot stack zero latents"))?;
        let shape = (first.frames, first.height, first.width, first.channels);
        let mut data = Vec::with_capacity(clips.len() * first.data.len());
        for c in clips {
            if (c.frames, c.height, c.width, c.channels) != shape {
                return Err(Error::contract("latents to stack differ in shape"));
            }
            data.extend_from_slice(&c.data);
        }
        Ok(Tensor::from_vec(
            data,
            (clips.len(), shape.0, shape.1, shape.2, shape.3),
            device,
        )?
        .to_dtype(dtype)?)
    }

    pub fn unstack(t: &Tensor) -> Result<Vec<LatentClip>> {
        let (b, f, h, w, c) = t.dims5()?;
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let n = f * h * w * c;
        (0..b)
            .map(|i| LatentClip::new(f, h, w, c, flat[i * n..(i + 1) * n].to_vec()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecKind {
    Identity,
    Pool,
    TinyAe,
}

impl fmt::Display for CodecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodecKind::Identity => "identity",
            CodecKind::Pool => "pool",
            CodecKind::TinyAe => "tiny-ae",
        })
    }
}

impl FromStr for CodecKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(CodecKind::Identity),
            "pool" => Ok(CodecKind::Pool),
            "tiny-ae" => Ok(CodecKind::TinyAe),
            other => Err(Error::config(format!("unknown codec `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSpec {
    pub kind: CodecKind,
    /// Spatial downscale factor `k`.
    pub factor: usize,
    /// Latent channels `C`.
    pub channels: usize,
    /// Hidden width of the tiny autoencoder.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Optimization steps when fitting the tiny autoencoder.
    #[serde(default = "default_fit_steps")]
    pub fit_steps: usize,
    /// Latents are multiplied by this after encoding and divided before
    /// decoding, to bring them near unit variance.
    #[serde(default = "default_scale")]
    pub scale: f32,
}

fn default_scale() -> f32 {
    1.0
}

fn default_hidden() -> usize {
    32
}

fn default_fit_steps() -> usize {
    400
}

impl Default for CodecSpec {
    fn default() -> Self {
        Self {
            kind: CodecKind::Pool,
            factor: 2,
            channels: CHANNELS,
            hidden: default_hidden(),
            fit_steps: default_fit_steps(),
            scale: default_scale(),
        }
    }
}

impl CodecSpec {
    pub fn identity() -> Self {
        Self {
            kind: CodecKind::Identity,
            factor: 1,
            ..Self::default()
        }
    }

    pub fn pool(k: usize) -> Self {
        Self {
            factor: k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 || self.channels == 0 {
            return Err(Error::config("codec factor and channels must be positive"));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::config("codec scale must be positive"));
        }
        match self.kind {
            CodecKind::Identity
                if (self.factor, self.channels, self.scale) != (1, CHANNELS, 1.0) =>
            {
                Err(Error::config(
                    "identity codec needs factor 1, 3 channels and scale 1",
                ))
            }
            CodecKind::Pool if self.channels != CHANNELS => {
                Err(Error::config("pool codec keeps 3 channels"))
            }
            CodecKind::TinyAe if self.hidden == 0 => {
                Err(Error::config("tiny-ae hidden width must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Latent `(h, w)` for a pixel size; sizes must divide exactly.
    pub fn latent_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if !height.is_multiple_of(self.factor) || !width.is_multiple_of(self.factor) {
            return Err(Error::config(format!(
                "frame size {height}x{width} not divisible by codec factor {}",
                self.factor
            )));
        }
        Ok((height / self.factor, width / self.factor))
    }

    /// Scalar parameters of the codec (zero except for tiny-ae).
    pub fn parameter_count(&self) -> usize {
        match self.kind {
            CodecKind::TinyAe => {
                let p = self.factor * self.factor * CHANNELS;
                let (h, c) = (self.hidden, self.channels);
                (p * h + h) + (h * c + c) + (c * h + h) + (h * p + p)
            }
            _ => 0,
        }
    }
}

/// Per-block MLP autoencoder `k²·3 → hidden → C → hidden → k²·3`.
#[derive(Debug, Clone)]
pub struct TinyAe {
    store: ParamStore,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
}

impl TinyAe {
    pub fn new(spec: &CodecSpec, store: &ParamStore) -> Result<Self> {
        let p = spec.factor * spec.factor * CHANNELS;
        Ok(Self {
            store: store.clone(),
            enc1: Linear::new(&store.pp("enc1"), p, spec.hidden, Init::XavierUniform)?,
            enc2: Linear::new(
                &store.pp("enc2"),
                spec.hidden,
                spec.channels,
                Init::XavierUniform,
            )?,
            dec1: Linear::new(
                &store.pp("dec1"),
                spec.channels,
                spec.hidden,
                Init::XavierUniform,
            )?,
            dec2: Linear::new(&store.pp("dec2"), spec.hidden, p, Init::XavierUniform)?,
        })
    }

    pub fn encode_blocks(&self, x: &Tensor) -> Result<Tensor> {
        self.enc2.forward(&silu(&self.enc1.forward(x)?)?)
    }

    pub fn decode_blocks(&self, z: &Tensor) -> Result<Tensor> {
        self.dec2.forward(&silu(&self.dec1.forward(z)?)?)
    }

    /// Weights as detached tensors keyed by name.
    pub fn weights(&self) -> Result<BTreeMap<String, Tensor>> {
        self.store.snapshot()
    }

    pub fn from_weights(spec: &CodecSpec, weights: &BTreeMap<String, Tensor>) -> Result<Self> {
        let store = ParamStore::from_values(weights, DType::F32, &Device::Cpu)?;
        let ae = Self::new(spec, &store)?;
        if store.len() != 8 {
            return Err(Error::data("tiny-ae weights have unexpected entries"));
        }
        Ok(ae)
    }

    /// Fits the autoencoder by Adam on random frames of `clips`; returns the
    /// final reconstruction mean squared error.
    pub fn fit(
        &self,
        spec: &CodecSpec,
        clips: &[VideoClip],
        steps: usize,
        seed: u64,
    ) -> Result<f64> {
        if clips.is_empty() {
            return Err(Error::data("no clips to fit the codec on"));
        }
        let mut rng = SeededRng::new(seed);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 3e-3,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        })?;
        let mut last = f64::NAN;
        for _ in 0..steps {
            let clip = &clips[rng.index(clips.len())];
            let frame = clip.single_frame(rng.index(clip.frames))?;
            let x = to_blocks(&frame, spec.factor)?;
            let err = (self.decode_blocks(&self.encode_blocks(&x)?)? - &x)?
                .sqr()?
                .mean_all()?;
            last = err.to_scalar::<f32>()? as f64;
            if !last.is_finite() {
                return Err(Error::numeric("codec fit diverged"));
            }
            let grads = err.backward()?;
            opt.step(&self.store, &grads)?;
        }
        Ok(last)
    }
}

/// Pixel blocks `(F·h·w, k·k·3)` of a clip.
fn to_blocks(clip: &VideoClip, k: usize) -> Result<Tensor> {
    let (h, w) = (clip.height / k, clip.width / k);
    let t = Tensor::from_slice(
        &clip.data,
        (clip.frames, h, k, w, k, CHANNELS),
        &Device::Cpu,
    )?;
    Ok(t.permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((clip.frames * h * w, k * k * CHANNELS))?)
}

fn from_blocks(blocks: &Tensor, frames: usize, h: usize, w: usize, k: usize) -> Result<VideoClip> {
    let t = blocks
        .reshape((frames, h, w, k, k, CHANNELS))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .flatten_all()?
        .to_vec1::<f32>()?;
    VideoClip::new(frames, h * k, w * k, t)
}

#[derive(Debug, Clone)]
pub enum Codec {
    Identity,
    Pool { factor: usize, scale: f32 },
    TinyAe { spec: CodecSpec, ae: TinyAe },
}

impl Codec {
    /// Codec for a spec; tiny-ae starts from seeded untrained weights.
    pub fn build(spec: &CodecSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.kind {
            CodecKind::Identity => Codec::Identity,
            CodecKind::Pool => Codec::Pool {
                factor: spec.factor,
                scale: spec.scale,
            },
            CodecKind::TinyAe => {
                let store = ParamStore::new(seed, DType::F32, &Device::Cpu);
                Codec::TinyAe {
                    spec: spec.clone(),
                    ae: TinyAe::new(spec, &store)?,
                }
            }
        })
    }

    pub fn factor(&self) -> usize {
        match self {
            Codec::Identity => 1,
            Codec::Pool { factor, .. } => *factor,
            Codec::TinyAe { spec, .. } => spec.factor,
        }
    }

    pub fn scale(&self) -> f32 {
        match self {
            Codec::Identity => 1.0,
            Codec::Pool { scale, .. } => *scale,
            Codec::TinyAe { spec, .. } => spec.scale,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Codec::TinyAe { spec, .. } => spec.channels,
            _ => CHANNELS,
        }
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<LatentClip> {
        if !clip.in_range() {
            log::warn!("encoding a clip with values outside [-1, 1]");
        }
        let k = self.factor();
        if !clip.height.is_multiple_of(k) || !clip.width.is_multiple_of(k) {
            return Err(Error::config(format!(
                "frame size {}x{} not divisible by codec factor {k}",
                clip.height, clip.width
            )));
        }
        let (h, w) = (clip.height / k, clip.width / k);
        match self {
            Codec::Identity => LatentClip::new(clip.frames, h, w, CHANNELS, clip.data.clone()),
            Codec::Pool { factor, scale } => {
                let k = *factor;
                let norm = scale / (k * k) as f32;
                let mut out = vec![0.0f32; clip.frames * h * w * CHANNELS];
                for f in 0..clip.frames {
                    let src = clip.frame(f);
                    for y in 0..clip.height {
                        for x in 0..clip.width {
                            let o = ((f * h + y / k) * w + x / k) * CHANNELS;
                            let i = (y * clip.width + x) * CHANNELS;
                            for c in 0..CHANNELS {
                                out[o + c] += src[i + c] * norm;
                            }
                        }
                    }
                }
                LatentClip::new(clip.frames, h, w, CHANNELS, out)
            }
            Codec::TinyAe { spec, ae } => {
                let z = ae
                    .encode_blocks(&to_blocks(clip, k)?)?
                    .affine(f64::from(spec.scale), 0.0)?;
                LatentClip::new(
                    clip.frames,
                    h,
                    w,
                    spec.channels,
                    z.flatten_all()?.to_vec1::<f32>()?,
                )
            }
        }
    }

    pub fn decode(&self, latent: &LatentClip) -> Result<VideoClip> {
        if latent.channels != self.channels() {
            return Err(Error::contract(format!(
                "latent has {} channels, codec expects {}",
                latent.channels,
                self.channels()
            )));
        }
        let k = self.factor();
        let (hh, ww) = (latent.height * k, latent.width * k);
        match self {
            Codec::Identity => VideoClip::new(latent.frames, hh, ww, latent.data.clone()),
            Codec::Pool { scale, .. } => {
                let mut out = Vec::with_capacity(latent.frames * hh * ww * CHANNELS);
                for f in 0..latent.frames {
                    for y in 0..hh {
                        for x in 0..ww {
                            let i = ((f * latent.height + y / k) * latent.width + x / k) * CHANNELS;
                            out.extend(latent.data[i..i + CHANNELS].iter().map(|v| v / scale));
                        }
                    }
                }
                VideoClip::new(latent.frames, hh, ww, out)
            }
            Codec::TinyAe { spec, ae } => {
                let z = Tensor::from_slice(
                    &latent.data,
                    (latent.frames * latent.height * latent.width, spec.channels),
                    &Device::Cpu,
                )?
                .affine(1.0 / f64::from(spec.scale), 0.0)?;
                from_blocks(
                    &ae.decode_blocks(&z)?,
                    latent.frames,
                    latent.height,
                    latent.width,
                    k,
                )
            }
        }
    }

    /// Trainable weights, keyed by name; empty for fixed codecs.
    pub fn weights(&self) -> Result<BTreeMap<String, Tensor>> {
        match self {
            Codec::TinyAe { ae, .. } => ae.weights(),
            _ => Ok(BTreeMap::new()),
        }
    }

    pub fn from_weights(spec: &CodecSpec, weights: &BTreeMap<String, Tensor>) -> Result<Self> {
        spec.validate()?;
        match spec.kind {
            CodecKind::TinyAe => Ok(Codec::TinyAe {
                spec: spec.clone(),
                ae: TinyAe::from_weights(spec, weights)?,
            }),
            _ => Codec::build(spec, 0),
        }
    }
}
