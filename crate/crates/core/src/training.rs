//! Optimization loop: batch composition (video clips plus single frames),
//! whole-clip horizontal flips, AdamW steps on `elbo + alpha * prior`, EMA
//! shadow weights, checkpoints and validation-based early stopping.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, InitScheme};
use crate::codec::{Codec, LatentClip};
use crate::config::RunConfig;
use crate::diffusion::{
    self, elbo_loss, forward_marginal_batch, sample_timesteps, unit_weight, NoiseSchedule,
    ScheduleKind,
};
use crate::error::{Error, Result};
use crate::optim::{ema_update, AdamW};
use crate::params::ParamStore;
use crate::prior::{CachedPrior, MapStack, PriorGuidance, PriorProvider, ReplayPrior, ToyPrior};
use crate::rng::{RngState, SeededRng};
use crate::tensorfile::{NamedTensor, TensorData, TensorFile};
use crate::video::VideoClip;

pub const CHECKPOINT_FORMAT: &str = "vidiff-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.vdtc";

/// Mirrors every frame of a clip along the width axis.
pub fn hflip(clip: &VideoClip) -> VideoClip {
    let (h, w) = (clip.height, clip.width);
    let mut data = Vec::with_capacity(clip.data.len());
    for f in 0..clip.frames {
        let frame = clip.frame(f);
        for y in 0..h {
            for x in (0..w).rev() {
                let i = (y * w + x) * 3;
                data.extend_from_slice(&frame[i..i + 3]);
            }
        }
    }
    VideoClip { data, ..*clip }
}

/// One flip decision per clip, taken with probability `prob`.
pub fn augment_hflip(clip: &VideoClip, rng: &mut SeededRng, prob: f64) -> (VideoClip, bool) {
    if rng.bernoulli(prob) {
        (hflip(clip), true)
    } else {
        (clip.clone(), false)
    }
}

/// `(images, videos)` in a batch of `batch` at image share `ratio`, by
/// largest remainder; a tied remainder goes to the video side.
pub fn split_counts(batch: usize, ratio: f64) -> (usize, usize) {
    let exact_img = ratio * batch as f64;
    let exact_vid = batch as f64 - exact_img;
    let (mut img, mut vid) = (exact_img.floor() as usize, exact_vid.floor() as usize);
    let left = batch - img - vid;
    if left > 0 {
        let (fi, fv) = (exact_img - exact_img.floor(), exact_vid - exact_vid.floor());
        if fi > fv {
            img += left;
        } else {
            vid += left;
        }
    }
    (img, vid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImagePick {
    /// Entry of the image pool.
    Pool(usize),
    /// A single frame of a training video.
    Frame { clip: usize, frame: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub videos: Vec<usize>,
    pub images: Vec<ImagePick>,
}

/// Draws batch members uniformly with replacement. Single frames come from
/// the image pool when it is non-empty, otherwise from random video frames.
pub fn compose_batch(
    videos: &[VideoClip],
    images: &[VideoClip],
    batch: usize,
    ratio: f64,
    rng: &mut SeededRng,
) -> Result<BatchPlan> {
    let (n_img, n_vid) = split_counts(batch, ratio);
    if n_vid > 0 && videos.is_empty() {
        return Err(Error::data("video pool is empty"));
    }
    if n_img > 0 && images.is_empty() && videos.is_empty() {
        return Err(Error::data(
            "no images or videos to draw single frames from",
        ));
    }
    let video_ids = (0..n_vid).map(|_| rng.index(videos.len())).collect();
    let image_ids = (0..n_img)
        .map(|_| {
            if images.is_empty() {
                let clip = rng.index(videos.len());
                ImagePick::Frame {
                    clip,
                    frame: rng.index(videos[clip].frames),
                }
            } else {
                ImagePick::Pool(rng.index(images.len()))
            }
        })
        .collect();
    Ok(BatchPlan {
        videos: video_ids,
        images: image_ids,
    })
}

/// Clips held in memory, split into training and validation sets.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<VideoClip>,
    pub val: Vec<VideoClip>,
    /// Optional separate single-frame pool.
    pub images: Vec<VideoClip>,
}

impl TrainData {
    /// Holds out `floor(val_fraction · n)` clips chosen by a seeded shuffle.
    pub fn split(clips: Vec<VideoClip>, val_fraction: f64, seed: u64) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::data("dataset has no clips"));
        }
        let n_val = (val_fraction * clips.len() as f64).floor() as usize;
        let n_val = n_val.min(clips.len() - 1);
        let mut order: Vec<usize> = (0..clips.len()).collect();
        let mut rng = SeededRng::new(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.index(i + 1));
        }
        let val_ids: Vec<usize> = order[..n_val].to_vec();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, c) in clips.into_iter().enumerate() {
            if val_ids.contains(&i) {
                val.push(c);
            } else {
                train.push(c);
            }
        }
        Ok(Self {
            train,
            val,
            images: Vec::new(),
        })
    }

    pub fn from_index(
        index: &crate::data::ClipIndex,
        val_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let clips = (0..index.len())
            .map(|i| index.load(i))
            .collect::<Result<Vec<_>>>()?;
        Self::split(clips, val_fraction, seed)
    }
}

/// Frozen prior described by the config, or `None` when disabled.
pub fn prior_from_config(cfg: &RunConfig) -> Result<Option<Arc<dyn PriorProvider>>> {
    let p = &cfg.prior;
    let provider: Arc<dyn PriorProvider> = match p.kind.as_str() {
        "none" => return Ok(None),
        "toy" => Arc::new(CachedPrior::new(ToyPrior::new(
            p.seed,
            cfg.data.height,
            p.patch,
        )?)),
        "replay" => {
            let path = p
                .replay_path
                .as_ref()
                .ok_or_else(|| Error::config("prior.replay_path missing"))?;
            Arc::new(ReplayPrior::load(path)?)
        }
        other => return Err(Error::config(format!("unknown prior kind `{other}`"))),
    };
    if provider.layers().len() != p.levels {
        return Err(Error::config(format!(
            "prior exposes {} levels, config asks for {}",
            provider.layers().len(),
            p.levels
        )));
    }
    Ok(Some(provider))
}

/// Model inputs for one frame count.
#[derive(Debug, Clone)]
pub struct Group {
    pub x0: Tensor,
    pub ts: Vec<usize>,
    pub eps: Tensor,
    /// One stack per prior level, `batch · frames` maps each.
    pub prior: Option<Vec<MapStack>>,
}

/// A fully drawn batch: groups share one forward pass each.
#[derive(Debug, Clone)]
pub struct Batch {
    pub groups: Vec<Group>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.ts.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub best: Option<f64>,
    pub bad_evals: usize,
    pub stopped: bool,
}

impl EarlyStop {
    /// Records a validation value; returns true when patience runs out.
    pub fn observe(&mut self, value: f64, patience: usize) -> bool {
        match self.best {
            Some(b) if value >= b => self.bad_evals += 1,
            _ => {
                self.best = Some(value);
                self.bad_evals = 0;
            }
        }
        self.stopped = patience > 0 && self.bad_evals >= patience;
        self.stopped
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub total: f64,
    pub elbo: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior: Option<f64>,
    pub corr_per_level: Vec<f64>,
    pub degenerate: usize,
    pub grad_norm: f64,
}

/// Loss terms of one batch; `total` carries the graph.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub elbo: f64,
    pub prior: Option<f64>,
    pub corr_per_level: Vec<f64>,
    pub degenerate: usize,
}

/// Everything a checkpoint holds.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: BTreeMap<String, Tensor>,
    pub ema: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
    pub adam_step: u64,
    pub schedule: NoiseSchedule,
    pub rng: RngState,
    pub early: EarlyStop,
    pub codec: BTreeMap<String, Tensor>,
}

fn tensor_entry(name: String, t: &Tensor) -> Result<NamedTensor> {
    Ok(NamedTensor::f32(
        name,
        t.dims().to_vec(),
        t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
    ))
}

fn entry_tensor(e: &NamedTensor) -> Result<Tensor> {
    let t = match &e.data {
        TensorData::F32(v) => Tensor::from_slice(v, e.shape.as_slice(), &Device::Cpu)?,
        TensorData::F64(v) => {
            Tensor::from_slice(v, e.shape.as_slice(), &Device::Cpu)?.to_dtype(DType::F32)?
        }
    };
    Ok(t)
}

fn f64_entry(e: &NamedTensor) -> Result<Vec<f64>> {
    match &e.data {
        TensorData::F64(v) => Ok(v.clone()),
        TensorData::F32(_) => Err(Error::data(format!("`{}` must be stored as f64", e.name))),
    }
}

impl Checkpoint {
    pub fn to_file(&self) -> Result<TensorFile> {
        let meta = serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "step": self.step,
            "config": self.config.to_toml()?,
            "config_hash": self.config.hash()?,
            "rng": self.rng,
            "adam_step": self.adam_step,
            "early_stop": self.early,
            "schedule": self.schedule.kind(),
            "parameter_count": self.config.parameter_count(),
        });
        let mut file = TensorFile::new(meta);
        for (prefix, map) in [
            ("param.", &self.params),
            ("ema.", &self.ema),
            ("adam.m.", &self.adam_m),
            ("adam.v.", &self.adam_v),
            ("codec.", &self.codec),
        ] {
            for (k, t) in map {
                file.push(tensor_entry(format!("{prefix}{k}"), t)?);
            }
        }
        let n = self.schedule.steps() + 1;
        file.push(NamedTensor::f64(
            "schedule.alpha",
            vec![n],
            self.schedule.alphas().to_vec(),
        ));
        file.push(NamedTensor::f64(
            "schedule.sigma",
            vec![n],
            self.schedule.sigmas().to_vec(),
        ));
        Ok(file)
    }

    pub fn from_file(file: &TensorFile) -> Result<Self> {
        let meta = &file.metadata;
        if meta["format"] != CHECKPOINT_FORMAT {
            return Err(Error::data("not a checkpoint file"));
        }
        if meta["version"] != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {}",
                meta["version"]
            )));
        }
        let text = meta["config"]
            .as_str()
            .ok_or_else(|| Error::data("checkpoint lacks its config"))?;
        let config = RunConfig::from_toml_str(text, &[])?;
        if meta["config_hash"].as_str() != Some(config.hash()?.as_str()) {
            return Err(Error::data(
                "checkpoint config hash does not match its config",
            ));
        }
        let get_u64 = |k: &str| {
            meta[k]
                .as_u64()
                .ok_or_else(|| Error::data(format!("checkpoint lacks `{k}`")))
        };
        let step = get_u64("step")?;
        let adam_step = get_u64("adam_step")?;
        let rng: RngState = serde_json::from_value(meta["rng"].clone())?;
        let early: EarlyStop = serde_json::from_value(meta["early_stop"].clone())?;
        let kind: ScheduleKind = serde_json::from_value(meta["schedule"].clone())?;
        let schedule = NoiseSchedule::from_arrays(
            kind,
            f64_entry(file.require("schedule.alpha")?)?,
            f64_entry(file.require("schedule.sigma")?)?,
        )?;
        let mut maps: [BTreeMap<String, Tensor>; 5] = Default::default();
        let prefixes = ["param.", "ema.", "adam.m.", "adam.v.", "codec."];
        for e in &file.tensors {
            if e.name.starts_with("schedule.") {
                continue;
            }
            let slot = prefixes
                .iter()
                .position(|p| e.name.starts_with(p))
                .ok_or_else(|| Error::data(format!("unexpected checkpoint tensor `{}`", e.name)))?;
            maps[slot].insert(e.name[prefixes[slot].len()..].to_string(), entry_tensor(e)?);
        }
        let [params, ema, adam_m, adam_v, codec] = maps;
        Ok(Self {
            config,
            step,
            params,
            ema,
            adam_m,
            adam_v,
            adam_step,
            schedule,
            rng,
            early,
            codec,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&TensorFile::load(path)?)
    }

    pub fn codec(&self) -> Result<Codec> {
        Codec::from_weights(&self.config.codec, &self.codec)
    }

    /// Backbone running on the EMA weights.
    pub fn ema_backbone(&self) -> Result<Backbone> {
        let backbone_only: BTreeMap<String, Tensor> = self
            .ema
            .iter()
            .filter(|(k, _)| !k.starts_with("prior."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let store = ParamStore::from_values(&backbone_only, DType::F32, &Device::Cpu)?;
        let model = Backbone::new(&self.config.model, &store, InitScheme::default())?;
        if store.len() != backbone_only.len() {
            return Err(Error::data("checkpoint EMA weights do not match the model"));
        }
        Ok(model)
    }
}

/// Mutable training state: parameters, optimizer, EMA, generator, counters.
pub struct Trainer {
    cfg: RunConfig,
    store: ParamStore,
    backbone: Backbone,
    guidance: Option<PriorGuidance>,
    prior: Option<Arc<dyn PriorProvider>>,
    schedule: NoiseSchedule,
    codec: Codec,
    opt: AdamW,
    ema: BTreeMap<String, Tensor>,
    rng: SeededRng,
    step: u64,
    early: EarlyStop,
}

impl Trainer {
    /// Fresh parameters from `cfg.seed`.
    pub fn new(
        cfg: &RunConfig,
        codec: Codec,
        prior: Option<Arc<dyn PriorProvider>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(cfg.seed, DType::F32, &Device::Cpu);
        let mut t = Self::assemble(cfg, store, codec, prior)?;
        t.ema = t.store.snapshot()?;
        Ok(t)
    }

    fn assemble(
        cfg: &RunConfig,
        store: ParamStore,
        codec: Codec,
        prior: Option<Arc<dyn PriorProvider>>,
    ) -> Result<Self> {
        if codec.factor() != cfg.codec.factor || codec.channels() != cfg.codec.channels {
            return Err(Error::config("codec does not match the configured codec"));
        }
        let backbone = Backbone::new(&cfg.model, &store, InitScheme::default())?;
        let guidance = match &prior {
            Some(p) => {
                if p.layers().len() != cfg.prior.levels {
                    return Err(Error::config("prior level count differs from config"));
                }
                let spatial = cfg.model.spatial_blocks();
                Some(PriorGuidance::new(
                    &store.pp("prior"),
                    cfg.prior.levels,
                    cfg.prior.resolved_pairing(spatial),
                    spatial,
                )?)
            }
            None => None,
        };
        let schedule = NoiseSchedule::build(cfg.diffusion.steps, cfg.diffusion.family()?)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            guidance,
            prior,
            schedule,
            codec,
            opt: AdamW::new(cfg.train.adamw())?,
            ema: BTreeMap::new(),
            rng: SeededRng::new(cfg.seed).fork(1),
            step: 0,
            early: EarlyStop::default(),
        })
    }

    /// Restores the exact state saved in `ckpt`.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        prior: Option<Arc<dyn PriorProvider>>,
    ) -> Result<Self> {
        let store = ParamStore::from_values(&ckpt.params, DType::F32, &Device::Cpu)?;
        let mut t = Self::assemble(&ckpt.config, store, ckpt.codec()?, prior)?;
        if t.store.len() != ckpt.params.len() {
            return Err(Error::data(format!(
                "checkpoint has {} parameters, model built {}",
                ckpt.params.len(),
                t.store.len()
            )));
        }
        t.schedule = ckpt.schedule.clone();
        t.opt.m = ckpt.adam_m.clone();
        t.opt.v = ckpt.adam_v.clone();
        t.opt.step = ckpt.adam_step;
        t.ema = ckpt.ema.clone();
        t.rng = SeededRng::from_state(&ckpt.rng)?;
        t.step = ckpt.step;
        t.early = ckpt.early.clone();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.cfg.clone(),
            step: self.step,
            params: self.store.snapshot()?,
            ema: self.ema.clone(),
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
            adam_step: self.opt.step,
            schedule: self.schedule.clone(),
            rng: self.rng.state(),
            early: self.early.clone(),
            codec: self.codec.weights()?,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn ema(&self) -> &BTreeMap<String, Tensor> {
        &self.ema
    }

    pub fn early_stop(&self) -> &EarlyStop {
        &self.early
    }

    /// Replaces the learning rate; the rest of the optimizer state is kept.
    pub fn set_lr(&mut self, lr: f64) {
        self.opt.config.lr = lr;
        self.cfg.train.lr = lr;
    }

    fn group(&self, clips: &[VideoClip], rng: &mut SeededRng) -> Result<Group> {
        let latents = clips
            .iter()
            .map(|c| self.codec.encode(c))
            .collect::<Result<Vec<LatentClip>>>()?;
        let refs: Vec<&LatentClip> = latents.iter().collect();
        let x0 = LatentClip::stack(&refs, DType::F32, &Device::Cpu)?;
        let ts = sample_timesteps(clips.len(), self.schedule.steps(), rng)?;
        let eps = Tensor::from_vec(rng.normal_vec(x0.elem_count()), x0.dims(), &Device::Cpu)?;
        let prior = match &self.prior {
            Some(p) => {
                let mut levels: Vec<MapStack> = Vec::new();
                for clip in clips {
                    for (i, m) in p.attention_maps(clip)?.into_iter().enumerate() {
                        match levels.get_mut(i) {
                            Some(acc) => {
                                acc.count += m.count;
                                acc.data.extend(m.data);
                            }
                            None => levels.push(m),
                        }
                    }
                }
                Some(levels)
            }
            None => None,
        };
        Ok(Group { x0, ts, eps, prior })
    }

    /// Draws a batch from `data` with the trainer's generator.
    pub fn prepare_batch(&mut self, data: &TrainData) -> Result<Batch> {
        if data.train.is_empty() {
            return Err(Error::data("no training clips for a batch"));
        }
        let mut rng = self.rng.clone();
        let tc = &self.cfg.train;
        let plan = compose_batch(
            &data.train,
            &data.images,
            tc.batch_size,
            tc.image_ratio,
            &mut rng,
        )?;
        let videos: Vec<VideoClip> = plan
            .videos
            .iter()
            .map(|&i| augment_hflip(&data.train[i], &mut rng, tc.hflip_prob).0)
            .collect();
        let images: Vec<VideoClip> = plan
            .images
            .iter()
            .map(|pick| {
                let frame = match *pick {
                    ImagePick::Pool(i) => data.images[i].single_frame(0)?,
                    ImagePick::Frame { clip, frame } => data.train[clip].single_frame(frame)?,
                };
                Ok(augment_hflip(&frame, &mut rng, tc.hflip_prob).0)
            })
            .collect::<Result<_>>()?;
        let mut groups = Vec::new();
        for clips in [videos, images] {
            if !clips.is_empty() {
                groups.push(self.group(&clips, &mut rng)?);
            }
        }
        self.rng = rng;
        Ok(Batch { groups })
    }

    /// Batch over the given clips with noise from a fixed seed.
    pub fn fixed_batch(&self, clips: &[VideoClip], seed: u64) -> Result<Batch> {
        let mut rng = SeededRng::new(seed);
        let mut by_frames: BTreeMap<usize, Vec<VideoClip>> = BTreeMap::new();
        for c in clips {
            by_frames.entry(c.frames).or_default().push(c.clone());
        }
        let groups = by_frames
            .into_values()
            .rev()
            .map(|g| self.group(&g, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Batch { groups })
    }

    /// Loss terms on a batch with the current parameters.
    pub fn loss(&self, batch: &Batch) -> Result<LossParts> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::contract("empty batch"));
        }
        let mut elbo_acc: Option<Tensor> = None;
        let mut prior_acc: Option<Tensor> = None;
        let mut corr = vec![0.0; self.cfg.prior.levels];
        let (mut rows, mut degenerate) = (0usize, 0usize);
        for g in &batch.groups {
            let xt = forward_marginal_batch(&g.x0, &g.ts, &g.eps, &self.schedule)?;
            let record = self.guidance.is_some();
            let (pred, rec) = self.backbone.predict_noise(&xt, &g.ts, record)?;
            let e = (elbo_loss(&pred, &g.eps, &g.ts, unit_weight)? * g.ts.len() as f64)?;
            elbo_acc = Some(match elbo_acc {
                None => e,
                Some(acc) => (acc + e)?,
            });
            if let (Some(guide), Some(maps)) = (&self.guidance, &g.prior) {
                let out = guide.prior_loss(&rec, maps)?;
                let per_level = out.rows / guide.levels();
                for (c, v) in corr.iter_mut().zip(&out.corr_per_level) {
                    *c += v * per_level as f64;
                }
                degenerate += out.degenerate;
                let weighted = (out.loss * out.rows as f64)?;
                rows += out.rows;
                prior_acc = Some(match prior_acc {
                    None => weighted,
                    Some(acc) => (acc + weighted)?,
                });
            }
        }
        let elbo_t = (elbo_acc.expect("non-empty batch") / n as f64)?;
        let elbo = elbo_t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let alpha = self.cfg.prior.alpha;
        let (total, prior) = match prior_acc {
            Some(p) => {
                let p = (p / rows as f64)?;
                let pv = p.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                crate::prior::total_loss(elbo, pv, alpha)?;
                let total = if alpha > 0.0 {
                    (&elbo_t + (p * alpha)?)?
                } else {
                    elbo_t.clone()
                };
                (total, Some(pv))
            }
            None => (elbo_t.clone(), None),
        };
        let levels_rows = rows / self.cfg.prior.levels.max(1);
        let corr_per_level = if prior.is_some() {
            corr.iter().map(|c| c / levels_rows as f64).collect()
        } else {
            Vec::new()
        };
        Ok(LossParts {
            total,
            elbo,
            prior,
            corr_per_level,
            degenerate,
        })
    }

    /// Scalar total loss on a batch.
    pub fn total_loss_value(&self, batch: &Batch) -> Result<f64> {
        let parts = self.loss(batch)?;
        Ok(parts.elbo + parts.prior.map_or(0.0, |p| self.cfg.prior.alpha * p))
    }

    /// One AdamW step on a batch, then the EMA update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let parts = self.loss(batch)?;
        let total = parts.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !total.is_finite() {
            return Err(Error::numeric(format!("total loss is {total}")));
        }
        let grads = parts.total.backward()?;
        self.opt.config.lr = self.cfg.train.lr_at(self.step as usize);
        let grad_norm = self.opt.step(&self.store, &grads)?;
        ema_update(
            &mut self.ema,
            &self.store.snapshot()?,
            self.cfg.train.ema_decay,
        )?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            total,
            elbo: parts.elbo,
            prior: parts.prior,
            corr_per_level: parts.corr_per_level,
            degenerate: parts.degenerate,
            grad_norm,
        })
    }

    /// Draws a batch and trains on it.
    pub fn step(&mut self, data: &TrainData) -> Result<StepMetrics> {
        let batch = self.prepare_batch(data)?;
        self.train_step(&batch)
    }

    /// Mean ELBO over the validation clips with fixed noise.
    pub fn validation_elbo(&self, clips: &[VideoClip]) -> Result<f64> {
        let mut total = 0.0;
        for (i, chunk) in clips.chunks(self.cfg.train.batch_size.max(1)).enumerate() {
            let batch = self.fixed_batch(chunk, self.cfg.seed ^ (0x5eed_0000 + i as u64))?;
            let mut sum = 0.0;
            for g in &batch.groups {
                let xt = forward_marginal_batch(&g.x0, &g.ts, &g.eps, &self.schedule)?;
                let (pred, _) = self.backbone.predict_noise(&xt, &g.ts, false)?;
                let e = elbo_loss(&pred, &g.eps, &g.ts, unit_weight)?;
                sum += e.to_dtype(DType::F64)?.to_scalar::<f64>()? * g.ts.len() as f64;
            }
            total += sum;
        }
        Ok(total / clips.len() as f64)
    }

    /// Runs until `train.max_steps` or early stop, checkpointing into `out`.
    pub fn run(
        &mut self,
        data: &TrainData,
        out: Option<&Path>,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<RunSummary> {
        let tc = self.cfg.train.clone();
        let ckpt_path = out.map(|d| d.join(CHECKPOINT_FILE));
        let mut last = None;
        while (self.step as usize) < tc.max_steps && !self.early.stopped {
            let m = self.step(data)?;
            on_step(&m);
            let s = self.step as usize;
            if !data.val.is_empty() && s.is_multiple_of(tc.eval_every) {
                let v = self.validation_elbo(&data.val)?;
                log::info!("step {s}: validation elbo {v:.5}");
                if self.early.observe(v, tc.patience) {
                    log::info!("early stop at step {s}");
                }
            }
            if let Some(p) = &ckpt_path {
                if s.is_multiple_of(tc.checkpoint_every) {
                    self.checkpoint()?.save(p)?;
                }
            }
            last = Some(m);
        }
        if let Some(p) = &ckpt_path {
            self.checkpoint()?.save(p)?;
        }
        Ok(RunSummary {
            steps: self.step,
            stopped_early: self.early.stopped,
            last,
            checkpoint: ckpt_path,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: u64,
    pub stopped_early: bool,
    pub last: Option<StepMetrics>,
    pub checkpoint: Option<PathBuf>,
}

/// Builds the codec, fitting a tiny autoencoder on `clips` when configured.
pub fn codec_for_training(cfg: &RunConfig, clips: &[VideoClip]) -> Result<Codec> {
    let codec = Codec::build(&cfg.codec, cfg.seed ^ 0xc0dec)?;
    if let Codec::TinyAe { spec, ae } = &codec {
        let err = ae.fit(spec, clips, spec.fit_steps, cfg.seed ^ 0xc0dec)?;
        log::info!("tiny-ae fitted, reconstruction mse {err:.5}");
    }
    Ok(codec)
}

/// Samples `count` latents with the given backbone, `chunk` at a time.
/// Chunk `i` starts from the noise of seed `seed + i`.
pub fn sample_latents(
    model: &Backbone,
    schedule: &NoiseSchedule,
    count: usize,
    seed: u64,
    chunk: usize,
) -> Result<Vec<LatentClip>> {
    let c = model.config();
    let mut out = Vec::with_capacity(count);
    let chunk = chunk.max(1);
    for (i, start) in (0..count).step_by(chunk).enumerate() {
        let n = chunk.min(count - start);
        let shape = c.latent_shape(n, c.frames);
        let x = diffusion::sample(
            model,
            &shape,
            schedule,
            seed.wrapping_add(i as u64),
            model.dtype(),
            &Device::Cpu,
        )?;
        out.extend(LatentClip::unstack(&x)?);
    }
    Ok(out)
}

/// Decoded clips sampled from the checkpoint's EMA weights.
pub fn generate_clips(ckpt: &Checkpoint, count: usize, seed: u64) -> Result<Vec<VideoClip>> {
    let model = ckpt.ema_backbone()?;
    let codec = ckpt.codec()?;
    sample_latents(&model, &ckpt.schedule, count, seed, 4)?
        .iter()
        .map(|z| codec.decode(z))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_is_an_involution_and_mirrors() {
        let clip = crate::data::synth_clip(3, 3, 5, 6);
        assert_eq!(hflip(&hflip(&clip)), clip);
        let mut data = Vec::new();
        for _ in 0..2 {
            for x in 0..4 {
                data.extend([if x < 2 { -1.0 } else { 1.0 }; 3]);
            }
        }
        let half = VideoClip::new(1, 2, 4, data).unwrap();
        let flipped = hflip(&half);
        let firsts: Vec<f32> = flipped.data.chunks(3).map(|p| p[0]).collect();
        assert_eq!(firsts, vec![1., 1., -1., -1., 1., 1., -1., -1.]);
    }

    #[test]
    fn flip_frequency() {
        let mut rng = SeededRng::new(11);
        let clip = VideoClip::zeros(1, 1, 1);
        let n = 10_000;
        let flips = (0..n)
            .filter(|_| augment_hflip(&clip, &mut rng, 0.5).1)
            .count();
        let freq = flips as f64 / n as f64;
        assert!((0.48..=0.52).contains(&freq), "{freq}");
    }

    #[test]
    fn largest_remainder_split() {
        assert_eq!(split_counts(5, 0.4), (2, 3));
        assert_eq!(split_counts(5, 0.0), (0, 5));
        assert_eq!(split_counts(5, 1.0), (5, 0));
        assert_eq!(split_counts(5, 0.5), (2, 3));
        assert_eq!(split_counts(4, 0.25), (1, 3));
        assert_eq!(split_counts(5, 0.25), (1, 4));
        assert_eq!(split_counts(3, 0.7), (2, 1));
    }

    #[test]
    fn compose_respects_pools() {
        let vids = vec![crate::data::synth_clip(0, 4, 4, 4)];
        let mut rng = SeededRng::new(0);
        let p = compose_batch(&vids, &[], 5, 0.4, &mut rng).unwrap();
        assert_eq!((p.images.len(), p.videos.len()), (2, 3));
        assert!(p
            .images
            .iter()
            .all(|i| matches!(i, ImagePick::Frame { clip: 0, frame } if *frame < 4)));
        assert!(compose_batch(&[], &[], 2, 0.0, &mut rng).is_err());
        let imgs = vec![crate::data::synth_clip(1, 1, 4, 4)];
        let p = compose_batch(&[], &imgs, 3, 1.0, &mut rng).unwrap();
        assert_eq!(p.images, vec![ImagePick::Pool(0); 3]);
    }

    #[test]
    fn early_stop_counts_patience() {
        let mut e = EarlyStop::default();
        assert!(!e.observe(1.0, 2));
        assert!(!e.observe(0.5, 2));
        assert!(!e.observe(0.6, 2));
        assert!(e.observe(0.5, 2));
        let mut off = EarlyStop::default();
        for _ in 0..10 {
            assert!(!off.observe(1.0, 0));
        }
    }

    #[test]
    fn split_holds_out_floor_fraction() {
        let clips: Vec<VideoClip> = (0..40)
            .map(|s| crate::data::synth_clip(s, 1, 2, 2))
            .collect();
        let d = TrainData::split(clips.clone(), 0.05, 1).unwrap();
        assert_eq!((d.train.len(), d.val.len()), (38, 2));
        let d = TrainData::split(clips[..4].to_vec(), 0.05, 1).unwrap();
        assert_eq!((d.train.len(), d.val.len()), (4, 0));
    }
}
