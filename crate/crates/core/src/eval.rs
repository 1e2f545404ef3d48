//! Generation metrics: Fréchet distance between fitted Gaussians (FID on
//! frame features, FVD on clip features), Inception Score, and the clip
//! sampling protocol.
//!
//! The Fréchet trace term uses `Tr((A B)^{1/2}) = Tr((√A B √A)^{1/2})`; both
//! square roots come from symmetric eigendecompositions with eigenvalues
//! clipped at zero. A clearly negative eigenvalue of `√A B √A` would mean a
//! complex square root and is reported as an error instead of being dropped.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::video::{VideoClip, CHANNELS};

pub const DEFAULT_EVAL_CLIPS: usize = 2048;
pub const DEFAULT_EVAL_CLIP_LEN: usize = 16;
pub const DEFAULT_IS_SPLITS: usize = 10;

/// Sample mean and unbiased covariance of `n` feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub n: usize,
    pub mu: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<FeatureStats> {
    let mut acc = MomentAccumulator::new(features.first().map_or(0, Vec::len));
    for f in features {
        acc.push(f)?;
    }
    acc.finish()
}

/// Streaming mean and co-moment; partial accumulators merge exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    n: usize,
    mean: DVector<f64>,
    comoment: DMatrix<f64>,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(dim),
            comoment: DMatrix::zeros(dim, dim),
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.mean.len() {
            return Err(Error::contract(format!(
                "feature of length {} for accumulator of dimension {}",
                x.len(),
                self.mean.len()
            )));
        }
        let x = DVector::from_column_slice(x);
        self.n += 1;
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &x - &self.mean;
        self.comoment += &delta * delta2.transpose();
        Ok(())
    }

    pub fn merge(&mut self, other: &MomentAccumulator) -> Result<()> {
        if other.mean.len() != self.mean.len() {
            return Err(Error::contract(
                "merging accumulators of different dimension",
            ));
        }
        if other.n == 0 {
            return Ok(());
        }
        let n = self.n + other.n;
        let delta = &other.mean - &self.mean;
        let w = (self.n as f64) * (other.n as f64) / n as f64;
        self.comoment += &other.comoment + &delta * delta.transpose() * w;
        self.mean += &delta * (other.n as f64 / n as f64);
        self.n = n;
        Ok(())
    }

    pub fn finish(&self) -> Result<FeatureStats> {
        if self.n < 2 {
            return Err(Error::data(format!(
                "need at least 2 feature vectors, got {}",
                self.n
            )));
        }
        Ok(FeatureStats {
            n: self.n,
            mu: self.mean.clone(),
            cov: &self.comoment / (self.n - 1) as f64,
        })
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Square root of a symmetric positive semi-definite matrix. Eigenvalues
/// below `-tol · max(1, largest)` are an error; smaller negatives clip to 0.
pub fn psd_sqrt(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::contract("matrix square root needs a square matrix"));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite matrix entry"));
    }
    let (u, roots) = psd_eigen(m, tol)?;
    Ok(&u * DMatrix::from_diagonal(&roots) * u.transpose())
}

/// Eigenvectors and clipped square-root eigenvalues of a PSD matrix.
fn psd_eigen(m: &DMatrix<f64>, tol: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -tol * scale) {
        return Err(Error::numeric(format!(
            "matrix is not positive semi-definite (eigenvalue {bad:e})"
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok((eig.eigenvectors, roots))
}

/// `L = U Λ^{1/2}`, so that `m = L L^T`.
fn psd_factor(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let (u, roots) = psd_eigen(m, tol)?;
    Ok(u * DMatrix::from_diagonal(&roots))
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != b.cov.shape() {
        return Err(Error::contract(format!(
            "feature dimensions differ ({} vs {})",
            a.dim(),
            b.dim()
        )));
    }
    let ca = symmetrize(&a.cov);
    let cb = symmetrize(&b.cov);
    // Tr (Σa Σb)^{1/2} is the nuclear norm of La^T Lb for any factors
    // Σ = L L^T; this avoids the square root of a squared spectrum
    let la = psd_factor(&ca, 1e-10)?;
    let lb = psd_factor(&cb, 1e-10)?;
    let tr_sqrt: f64 = (la.transpose() * lb).singular_values().iter().sum();
    let diff = &a.mu - &b.mu;
    Ok(diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * tr_sqrt)
}

/// Inception Score mean and population standard deviation over splits.
/// Splits shrink to `n / 2` (at least 1) when there are fewer than
/// `2 · splits` rows.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    if splits == 0 {
        return Err(Error::config("inception score needs at least one split"));
    }
    if probs.is_empty() {
        return Err(Error::data("inception score of an empty set"));
    }
    let k = probs[0].len();
    for (i, row) in probs.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.len() != k || (sum - 1.0).abs() > 1e-5 || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::data(format!("row {i} is not a probability vector")));
        }
    }
    let mut splits = splits;
    if probs.len() < 2 * splits {
        let reduced = (probs.len() / 2).max(1);
        log::warn!(
            "{} rows are too few for {splits} splits; using {reduced}",
            probs.len()
        );
        splits = reduced;
    }
    let n = probs.len();
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let part = &probs[s * n / splits..(s + 1) * n / splits];
            let mut marginal = vec![0.0; k];
            for row in part {
                for (m, p) in marginal.iter_mut().zip(row) {
                    *m += p / part.len() as f64;
                }
            }
            let kl: f64 = part
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(&marginal)
                        .filter(|(&p, _)| p > 0.0)
                        .map(|(&p, &m)| p * (p / m).ln())
                        .sum::<f64>()
                })
                .sum::<f64>()
                / part.len() as f64;
            kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// One evaluation window: `len` frames of video `video` from `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipWindow {
    pub video: usize,
    pub start: usize,
}

/// Windows drawn by picking a usable video uniformly, then a start offset
/// uniformly. Videos shorter than `clip_len` are skipped.
pub fn sample_eval_clips(
    video_lengths: &[usize],
    count: usize,
    clip_len: usize,
    rng: &mut SeededRng,
) -> Result<Vec<ClipWindow>> {
    if clip_len == 0 {
        return Err(Error::config("clip length must be positive"));
    }
    let usable: Vec<usize> = (0..video_lengths.len())
        .filter(|&v| video_lengths[v] >= clip_len)
        .collect();
    let skipped = video_lengths.len() - usable.len();
    if skipped > 0 {
        log::warn!("{skipped} video(s) shorter than {clip_len} frames skipped");
    }
    if usable.is_empty() {
        return Err(Error::data(format!("no video has {clip_len} frames")));
    }
    Ok((0..count)
        .map(|_| {
            let video = usable[rng.index(usable.len())];
            let start = rng.int_inclusive(0, video_lengths[video] - clip_len);
            ClipWindow { video, start }
        })
        .collect())
}

/// Clip length actually used: the requested one, or the longest video when
/// every video is shorter.
pub fn effective_clip_len(video_lengths: &[usize], clip_len: usize) -> Result<usize> {
    let longest = video_lengths.iter().copied().max().unwrap_or(0);
    if longest == 0 {
        return Err(Error::data("no frames to evaluate"));
    }
    if longest < clip_len {
        log::warn!("clip length {clip_len} exceeds every video; reduced to {longest}");
        return Ok(longest);
    }
    Ok(clip_len)
}

/// Maps frames and clips to feature vectors, plus class probabilities for
/// the Inception Score. A pretrained backbone plugs in by implementing this.
pub trait FeatureExtractor {
    fn id(&self) -> String;
    /// Side of the square frames the extractor expects.
    fn input_side(&self) -> usize;
    fn frame_features(&self, frame: &[f32]) -> Vec<f64>;
    fn clip_features(&self, clip: &VideoClip) -> Vec<f64>;
    fn class_probs(&self, frame: &[f32]) -> Vec<f64>;
}

/// Frozen random projection with a tanh nonlinearity over 16×16 frames.
/// Clip features are the mean frame feature followed by the mean absolute
/// change of features between consecutive frames.
#[derive(Debug, Clone)]
pub struct ToyFeatureExtractor {
    seed: u64,
    side: usize,
    dim: usize,
    classes: usize,
    proj: DMatrix<f64>,
    head: DMatrix<f64>,
}

impl ToyFeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let (side, dim, classes) = (16, 64, 10);
        let input = side * side * CHANNELS;
        let mut rng = SeededRng::new(seed);
        let s1 = (1.0 / input as f64).sqrt() * 2.0;
        let proj = DMatrix::from_fn(dim, input, |_, _| rng.normal() * s1);
        let s2 = (1.0 / dim as f64).sqrt() * 3.0;
        let head = DMatrix::from_fn(classes, dim, |_, _| rng.normal() * s2);
        Self {
            seed,
            side,
            dim,
            classes,
            proj,
            head,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.dim
    }

    pub fn clip_feature_dim(&self) -> usize {
        2 * self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

impl FeatureExtractor for ToyFeatureExtractor {
    fn id(&self) -> String {
        format!(
            "toy-features(seed={},side={},dim={})",
            self.seed, self.side, self.dim
        )
    }

    fn input_side(&self) -> usize {
        self.side
    }

    fn frame_features(&self, frame: &[f32]) -> Vec<f64> {
        let x = DVector::from_iterator(frame.len(), frame.iter().map(|&v| f64::from(v)));
        (&self.proj * x).map(f64::tanh).as_slice().to_vec()
    }

    fn clip_features(&self, clip: &VideoClip) -> Vec<f64> {
        let feats: Vec<Vec<f64>> = (0..clip.frames)
            .map(|f| self.frame_features(clip.frame(f)))
            .collect();
        let mut out = vec![0.0; 2 * self.dim];
        for f in &feats {
            for (o, v) in out.iter_mut().zip(f) {
                *o += v / feats.len() as f64;
            }
        }
        if feats.len() > 1 {
            for w in feats.windows(2) {
                for i in 0..self.dim {
                    out[self.dim + i] += (w[1][i] - w[0][i]).abs() / (feats.len() - 1) as f64;
                }
            }
        }
        out
    }

    fn class_probs(&self, frame: &[f32]) -> Vec<f64> {
        let f = DVector::from_vec(self.frame_features(frame));
        let logits = &self.head * f;
        let max = logits.max();
        let e = logits.map(|l| (l - max).exp());
        let sum = e.sum();
        (e / sum).as_slice().to_vec()
    }
}

/// Brings a clip to the extractor's resolution.
pub fn fit_to_extractor(clip: &VideoClip, side: usize) -> Result<VideoClip> {
    if clip.height == side && clip.width == side {
        return Ok(clip.clone());
    }
    let frames: Vec<Vec<f32>> = (0..clip.frames)
        .map(|f| crate::data::crop_resize(clip.frame(f), clip.height, clip.width, (side, side)))
        .collect();
    VideoClip::from_frames(&frames, side, side)
}

/// Frame (FID) and clip (FVD) statistics plus IS probabilities for a set.
#[derive(Debug, Clone)]
pub struct SetFeatures {
    pub frames: MomentAccumulator,
    pub clips: MomentAccumulator,
    pub probs: Vec<Vec<f64>>,
}

pub fn extract_set(
    extractor: &dyn FeatureExtractor,
    clips: &[VideoClip],
    frame_dim: usize,
    clip_dim: usize,
) -> Result<SetFeatures> {
    let mut frames = MomentAccumulator::new(frame_dim);
    let mut clip_acc = MomentAccumulator::new(clip_dim);
    let mut probs = Vec::new();
    for c in clips {
        let c = fit_to_extractor(c, extractor.input_side())?;
        for f in 0..c.frames {
            frames.push(&extractor.frame_features(c.frame(f)))?;
            probs.push(extractor.class_probs(c.frame(f)));
        }
        clip_acc.push(&extractor.clip_features(&c))?;
    }
    Ok(SetFeatures {
        frames,
        clips: clip_acc,
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mu: &[f64], cov: &[f64]) -> FeatureStats {
        let d = mu.len();
        FeatureStats {
            n: 10,
            mu: DVector::from_column_slice(mu),
            cov: DMatrix::from_row_slice(d, d, cov),
        }
    }

    #[test]
    fn two_point_gaussian() {
        let s = fit_gaussian(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(s.mu.as_slice(), &[1.0, 1.0]);
        assert_eq!(s.cov.as_slice(), &[2.0, 2.0, 2.0, 2.0]);
        let same = fit_gaussian(&vec![vec![3.0, 1.0]; 5]).unwrap();
        assert!(same.cov.iter().all(|&v| v == 0.0));
        assert!(fit_gaussian(&[vec![1.0]]).is_err());
    }

    #[test]
    fn merge_equals_single_pass() {
        let mut rng = SeededRng::new(4);
        let xs: Vec<Vec<f64>> = (0..50).map(|_| rng.normal_vec_f64(3)).collect();
        let whole = fit_gaussian(&xs).unwrap();
        let mut a = MomentAccumulator::new(3);
        let mut b = MomentAccumulator::new(3);
        for (i, x) in xs.iter().enumerate() {
            if i < 17 {
                a.push(x).unwrap()
            } else {
                b.push(x).unwrap()
            }
        }
        a.merge(&b).unwrap();
        let merged = a.finish().unwrap();
        assert!((merged.mu - whole.mu).norm() < 1e-12);
        assert!((merged.cov - whole.cov).norm() < 1e-12);
    }

    #[test]
    fn frechet_closed_forms() {
        let a = stats(&[1.0, -2.0], &[2.0, 0.3, 0.3, 1.0]);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        let b = stats(&[4.0, 2.0], &[2.0, 0.3, 0.3, 1.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 25.0).abs() < 1e-8);
        let s1 = stats(&[0.0], &[1.0]);
        let s2 = stats(&[0.0], &[4.0]);
        assert!((frechet_distance(&s1, &s2).unwrap() - 1.0).abs() < 1e-12);
        assert!(frechet_distance(&s1, &a).is_err());
    }

    #[test]
    fn inception_extremes_and_hand_value() {
        let uniform = vec![vec![0.25; 4]; 8];
        assert!((inception_score(&uniform, 1).unwrap().0 - 1.0).abs() < 1e-12);
        let onehot: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..5).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        assert!((inception_score(&onehot, 1).unwrap().0 - 5.0).abs() < 1e-12);
        // marginal [0.5, 0.5]; each row has KL = 0.9 ln 1.8 + 0.1 ln 0.2
        let kl = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        let (is, sd) = inception_score(&[vec![0.9, 0.1], vec![0.1, 0.9]], 1).unwrap();
        assert!((is - kl.exp()).abs() < 1e-12);
        assert_eq!(sd, 0.0);
        assert!(inception_score(&[vec![0.5, 0.6]], 1).is_err());
    }

    #[test]
    fn window_protocol() {
        let mut rng = SeededRng::new(0);
        let w = sample_eval_clips(&[16], 3, 16, &mut rng).unwrap();
        assert_eq!(w, vec![ClipWindow { video: 0, start: 0 }; 3]);
        let w = sample_eval_clips(&[20, 5], 200, 16, &mut rng).unwrap();
        assert!(w.iter().all(|c| c.video == 0 && c.start <= 4));
        assert!(sample_eval_clips(&[3, 4], 2, 16, &mut rng).is_err());
        let a = sample_eval_clips(&[30, 40], 50, 16, &mut SeededRng::new(9)).unwrap();
        assert_eq!(
            a,
            sample_eval_clips(&[30, 40], 50, 16, &mut SeededRng::new(9)).unwrap()
        );
        assert_eq!(effective_clip_len(&[8, 6], 16).unwrap(), 8);
    }

    #[test]
    fn toy_extractor_is_deterministic() {
        let x = ToyFeatureExtractor::new(1);
        let clip = fit_to_extractor(&crate::data::synth_clip(2, 3, 32, 32), 16).unwrap();
        assert_eq!(
            x.clip_features(&clip),
            ToyFeatureExtractor::new(1).clip_features(&clip)
        );
        let p = x.class_probs(clip.frame(0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let other = fit_to_extractor(&crate::data::synth_clip(3, 1, 32, 32), 16).unwrap();
        let d = x
            .frame_features(clip.frame(0))
            .iter()
            .zip(x.frame_features(other.frame(0)))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d > 1e-6);
    }
}
