use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Raw pixel clip, `frames × height × width × 3`, values nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * height * width * CHANNELS {
            return Err(Error::contract(format!(
                "clip data has {} values, expected {}x{}x{}x3",
                data.len(),
                frames,
                height,
                width
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width * CHANNELS],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    /// Frames `start..start + len` as a new clip.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames || len == 0 {
            return Err(Error::contract(format!(
                "window {start}..{} outside clip of {} frames",
                start + len,
                self.frames
            )));
        }
        let n = self.frame_len();
        Self::new(
            len,
            self.height,
            self.width,
            self.data[start * n..(start + len) * n].to_vec(),
        )
    }

    pub fn single_frame(&self, f: usize) -> Result<Self> {
        self.window(f, 1)
    }

    pub fn from_frames(frames: &[Vec<f32>], height: usize, width: usize) -> Result<Self> {
        let data: Vec<f32> = frames.iter().flatten().copied().collect();
        Self::new(frames.len(), height, width, data)
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    /// Stacks clips of identical shape into a `(B, F, H, W, 3)` tensor.
    pub fn stack(clips: &[&VideoClip], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = clips
            .first()
            .ok_or_else(|| Error::contract("cannot stack an empty clip list"))?;
        let mut data = Vec::with_capacity(first.data.len() * clips.len());
        for c in clips {
            if (c.frames, c.height, c.width) != (first.frames, first.height, first.width) {
                return Err(Error::contract("clips in a stack must share one shape"));
            }
            data.extend_from_slice(&c.data);
        }
        let t = Tensor::from_vec(
            data,
            (
                clips.len(),
                first.frames,
                first.height,
                first.width,
                CHANNELS,
            ),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Inverse of [`VideoClip::stack`].
    pub fn unstack(t: &Tensor) -> Result<Vec<VideoClip>> {
        let (b, f, h, w, c) = t.dims5()?;
        if c != CHANNELS {
            return Err(Error::contract(format!("expected 3 channels, got {c}")));
        }
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let n = f * h * w * c;
        (0..b)
            .map(|i| VideoClip::new(f, h, w, flat[i * n..(i + 1) * n].to_vec()))
            .collect()
    }
}

/// Peak signal-to-noise ratio for signals spanning [-1, 1] (peak-to-peak 2).
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (4.0 / mse).log10()
}

/// Bilinear resampling of an `h × w × 3` frame (align-corners off).
pub fn resize_bilinear(data: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if (h, w) == (out_h, out_w) {
        return data.to_vec();
    }
    let mut out = vec![0.0f32; out_h * out_w * CHANNELS];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = (fy - y0 as f64) as f32;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = (fx - x0 as f64) as f32;
            for c in 0..CHANNELS {
                let p = |y: usize, x: usize| data[(y * w + x) * CHANNELS + c];
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bottom = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out[(oy * out_w + ox) * CHANNELS + c] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_unstack() {
        let a = VideoClip::new(2, 1, 2, (0..12).map(|v| v as f32 / 12.0).collect()).unwrap();
        let b = VideoClip::zeros(2, 1, 2);
        let t = VideoClip::stack(&[&a, &b], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 2, 1, 2, 3]);
        assert_eq!(VideoClip::unstack(&t).unwrap(), vec![a, b]);
    }

    #[test]
    fn psnr_known_value() {
        // constant error 0.2 → mse 0.04 → 10·log10(100) = 20 dB
        let a = vec![0.0f32; 10];
        let b = vec![0.2f32; 10];
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &a).is_infinite());
    }

    #[test]
    fn window_bounds() {
        let c = VideoClip::zeros(4, 2, 2);
        assert_eq!(c.window(1, 3).unwrap().frames, 3);
        assert!(c.window(2, 3).is_err());
    }
}
