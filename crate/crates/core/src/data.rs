//! Dataset ingestion and synthetic clips.
//!
//! On-disk layout: a root directory with one subdirectory per video, each
//! holding numbered frame images (`00000.png`, `00001.png`, ...). Frames are
//! sorted by file name, so names must be zero-padded. A video may instead be
//! a single `.vdtc` tensor container at the root holding a tensor `video` of
//! shape `(F, H, W, 3)` with values in [-1, 1].
//!
//! 8-bit pixels map to [-1, 1] as `x / 127.5 - 1`. Frames are center-cropped
//! to a square and bilinearly resized to the index resolution on access.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensorfile::{NamedTensor, TensorData, TensorFile};
use crate::video::{resize_bilinear, VideoClip, CHANNELS};

pub const DEFAULT_CLIP_LEN: usize = 16;
pub const DEFAULT_STRIDE: usize = 4;
pub const DEFAULT_RESIZE: (usize, usize) = (128, 128);

const FRAME_EXTENSIONS: &[&str] = &["png"];

/// Seeded moving-texture clip: a smooth random texture under a periodic
/// warp, plus a bright spot drifting along an ellipse.
pub fn synth_clip(seed: u64, frames: usize, height: usize, width: usize) -> VideoClip {
    let mut rng = SeededRng::new(seed);
    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..5)
        .map(|_| {
            let angle = rng.uniform() * 2.0 * PI;
            let freq = 0.6 + 1.6 * rng.uniform();
            let base = 0.12 + 0.1 * rng.uniform();
            Wave {
                fx: freq * angle.cos(),
                fy: freq * angle.sin(),
                phase: rng.uniform() * 2.0 * PI,
                amp: [
                    base * (0.7 + 0.6 * rng.uniform()),
                    base * (0.7 + 0.6 * rng.uniform()),
                    base * (0.7 + 0.6 * rng.uniform()),
                ],
            }
        })
        .collect();
    let tint = [
        0.25 + 0.15 * rng.uniform(),
        -0.1 + 0.1 * rng.uniform(),
        -0.2 + 0.1 * rng.uniform(),
    ];
    let warp_amp = 0.02 + 0.02 * rng.uniform();
    let warp_phase = rng.uniform() * 2.0 * PI;
    let period = 24.0 + 16.0 * rng.uniform();
    let orbit = (0.2 + 0.1 * rng.uniform(), 0.15 + 0.1 * rng.uniform());
    let orbit_phase = rng.uniform() * 2.0 * PI;
    let spot_radius = 0.08 + 0.04 * rng.uniform();

    let mut data = Vec::with_capacity(frames * height * width * CHANNELS);
    for f in 0..frames {
        let t = 2.0 * PI * f as f64 / period;
        let spot = (
            0.5 + orbit.0 * (t * 0.5 + orbit_phase).cos(),
            0.5 + orbit.1 * (t * 0.5 + orbit_phase).sin(),
        );
        for y in 0..height {
            let v = (y as f64 + 0.5) / height as f64;
            for x in 0..width {
                let u = (x as f64 + 0.5) / width as f64;
                let wu = u + warp_amp * (2.0 * PI * v + t + warp_phase).sin();
                let wv = v + warp_amp * (2.0 * PI * u - t).cos();
                let d2 = (u - spot.0).powi(2) + (v - spot.1).powi(2);
                let glow = 0.7 * (-d2 / (2.0 * spot_radius * spot_radius)).exp();
                for c in 0..CHANNELS {
                    let mut val = tint[c] + glow;
                    for w in &waves {
                        val += w.amp[c] * (2.0 * PI * (w.fx * wu + w.fy * wv) + w.phase).sin();
                    }
                    data.push(val.clamp(-1.0, 1.0) as f32);
                }
            }
        }
    }
    VideoClip {
        frames,
        height,
        width,
        data,
    }
}

/// Mean absolute difference between consecutive frames; 0 for one frame.
pub fn mean_interframe_diff(clip: &VideoClip) -> f64 {
    if clip.frames < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for f in 1..clip.frames {
        total += clip
            .frame(f)
            .iter()
            .zip(clip.frame(f - 1))
            .map(|(a, b)| f64::from((a - b).abs()))
            .sum::<f64>();
    }
    total / ((clip.frames - 1) * clip.frame_len()) as f64
}

pub fn to_unit_range(byte: u8) -> f32 {
    f32::from(byte) / 127.5 - 1.0
}

pub fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Reads an 8-bit RGB frame as `(height, width, data)` in [-1, 1].
pub fn read_frame(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok((
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(to_unit_range).collect(),
    ))
}

/// Center-crops to a square and resizes to `(out_h, out_w)`.
pub fn crop_resize(data: &[f32], h: usize, w: usize, out: (usize, usize)) -> Vec<f32> {
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let cropped: Vec<f32> = if side == h && side == w {
        data.to_vec()
    } else {
        let mut c = Vec::with_capacity(side * side * CHANNELS);
        for y in y0..y0 + side {
            c.extend_from_slice(&data[(y * w + x0) * CHANNELS..(y * w + x0 + side) * CHANNELS]);
        }
        c
    };
    resize_bilinear(&cropped, side, side, out.0, out.1)
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:05}.png")
}

/// Writes a clip as a folder of numbered PNG frames.
pub fn write_video_dir(dir: &Path, clip: &VideoClip) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in 0..clip.frames {
        let bytes: Vec<u8> = clip.frame(f).iter().map(|&v| to_byte(v)).collect();
        let img = RgbImage::from_raw(clip.width as u32, clip.height as u32, bytes)
            .ok_or_else(|| Error::contract("frame buffer does not match its size"))?;
        let path = dir.join(frame_file_name(f));
        img.save(&path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn write_video_container(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut file = TensorFile::default();
    file.push(NamedTensor::f32(
        "video",
        vec![clip.frames, clip.height, clip.width, CHANNELS],
        clip.data.clone(),
    ));
    file.save(path)
}

#[derive(Debug, Clone, PartialEq)]
pub enum VideoSource {
    Frames(Vec<PathBuf>),
    Container(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEntry {
    pub name: String,
    pub frames: usize,
    pub source: VideoSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipRecord {
    pub video: usize,
    pub start: usize,
    pub stride: usize,
}

/// Windows of `clip_len` consecutive frames, starting every `stride` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipIndex {
    pub root: PathBuf,
    pub clip_len: usize,
    pub stride: usize,
    pub resize: (usize, usize),
    pub videos: Vec<VideoEntry>,
    pub records: Vec<ClipRecord>,
}

/// Offsets `0, stride, 2·stride, ...` whose window fits in `frames`.
pub fn window_offsets(frames: usize, clip_len: usize, stride: usize) -> Vec<usize> {
    if frames < clip_len {
        return Vec::new();
    }
    (0..=frames - clip_len).step_by(stride).collect()
}

fn scan_video_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    frames.sort();
    // decode every frame once so broken videos are dropped at index time
    let mut size = None;
    for p in &frames {
        let (h, w, _) = read_frame(p)?;
        match size {
            None => size = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(Error::data(format!(
                    "{}: frame size {h}x{w} differs from {}x{}",
                    p.display(),
                    s.0,
                    s.1
                )))
            }
            _ => {}
        }
    }
    Ok(frames)
}

fn read_container(path: &Path) -> Result<VideoClip> {
    let file = TensorFile::load(path)?;
    let t = file.require("video")?;
    let [f, h, w, c] = t.shape[..] else {
        return Err(Error::data(format!(
            "{}: `video` must be (F, H, W, 3)",
            path.display()
        )));
    };
    if c != CHANNELS {
        return Err(Error::data(format!(
            "{}: `video` must have 3 channels",
            path.display()
        )));
    }
    let data = match &t.data {
        TensorData::F32(v) => v.clone(),
        TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
    };
    VideoClip::new(f, h, w, data)
}

impl ClipIndex {
    pub fn build(
        root: &Path,
        clip_len: usize,
        stride: usize,
        resize: (usize, usize),
    ) -> Result<Self> {
        if clip_len == 0 || stride == 0 {
            return Err(Error::config("clip length and stride must be positive"));
        }
        if resize.0 == 0 || resize.1 == 0 {
            return Err(Error::config("resize dimensions must be positive"));
        }
        let mut entries: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() || p.extension().is_some_and(|e| e == "vdtc"))
            .collect();
        entries.sort();
        if entries.is_empty() {
            return Err(Error::data(format!(
                "{} contains no videos",
                root.display()
            )));
        }
        let mut videos = Vec::new();
        let mut skipped = 0;
        for path in entries {
            let name = path
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let scanned = if path.is_dir() {
                scan_video_dir(&path).map(|f| (f.len(), VideoSource::Frames(f)))
            } else {
                read_container(&path).map(|c| (c.frames, VideoSource::Container(path.clone())))
            };
            match scanned {
                Ok((0, _)) => {
                    log::warn!("skipping {}: no frames", path.display());
                    skipped += 1;
                }
                Ok((frames, source)) => videos.push(VideoEntry {
                    name,
                    frames,
                    source,
                }),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    skipped += 1;
                }
            }
        }
        if skipped > 0 {
            log::warn!(
                "{skipped} unreadable video(s) skipped under {}",
                root.display()
            );
        }
        if videos.is_empty() {
            return Err(Error::data(format!(
                "{} contains no readable videos",
                root.display()
            )));
        }
        let records = videos
            .iter()
            .enumerate()
            .flat_map(|(v, e)| {
                window_offsets(e.frames, clip_len, stride)
                    .into_iter()
                    .map(move |start| ClipRecord {
                        video: v,
                        start,
                        stride,
                    })
            })
            .collect();
        Ok(Self {
            root: root.to_path_buf(),
            clip_len,
            stride,
            resize,
            videos,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Frames `start..start + len` of a video, cropped and resized.
    pub fn load_frames(&self, video: usize, start: usize, len: usize) -> Result<VideoClip> {
        let entry = self
            .videos
            .get(video)
            .ok_or_else(|| Error::contract(format!("no video {video}")))?;
        if start + len > entry.frames {
            return Err(Error::contract(format!(
                "frames {start}..{} outside video `{}` of {} frames",
                start + len,
                entry.name,
                entry.frames
            )));
        }
        let (oh, ow) = self.resize;
        let mut data = Vec::with_capacity(len * oh * ow * CHANNELS);
        match &entry.source {
            VideoSource::Frames(paths) => {
                for p in &paths[start..start + len] {
                    let (h, w, px) = read_frame(p)?;
                    data.extend(crop_resize(&px, h, w, self.resize));
                }
            }
            VideoSource::Container(path) => {
                let clip = read_container(path)?;
                for f in start..start + len {
                    data.extend(crop_resize(
                        clip.frame(f),
                        clip.height,
                        clip.width,
                        self.resize,
                    ));
                }
            }
        }
        VideoClip::new(len, oh, ow, data)
    }

    pub fn load(&self, record: usize) -> Result<VideoClip> {
        let r = self
            .records
            .get(record)
            .ok_or_else(|| Error::contract(format!("no clip record {record}")))?;
        self.load_frames(r.video, r.start, self.clip_len)
    }

    pub fn load_video(&self, video: usize) -> Result<VideoClip> {
        let n = self
            .videos
            .get(video)
            .ok_or_else(|| Error::contract(format!("no video {video}")))?
            .frames;
        self.load_frames(video, 0, n)
    }
}

pub fn build_clip_index(
    root: &Path,
    clip_len: usize,
    stride: usize,
    resize: (usize, usize),
) -> Result<ClipIndex> {
    ClipIndex::build(root, clip_len, stride, resize)
}

/// Writes `videos` synthetic videos as frame folders `video_000`, ...
/// Video `i` uses seed `seed + i`.
pub fn make_synthetic(
    root: &Path,
    videos: usize,
    frames: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    if videos == 0 || frames == 0 || size == 0 {
        return Err(Error::config("videos, frames and size must be positive"));
    }
    (0..videos)
        .map(|i| {
            let dir = root.join(format!("video_{i:03}"));
            write_video_dir(&dir, &synth_clip(seed + i as u64, frames, size, size))?;
            Ok(dir)
        })
        .collect()
}
