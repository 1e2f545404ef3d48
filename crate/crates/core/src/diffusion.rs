//! Variance-preserving DDPM: noise schedules, forward corruption, the
//! ε-prediction training loss and the ancestral reverse sampler.
//!
//! Schedule coefficients use the marginal parameterisation
//! `q(x_t | x_0) = N(alpha_t x_0, sigma_t^2 I)`, so `alpha_t` is the square
//! root of the cumulative product of `1 - beta_s`. All schedule arithmetic is
//! done in f64; tensors are scaled with `affine`, which keeps their dtype.

use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Reference step count at which the default linear betas (1e-4 → 0.02) apply.
pub const REFERENCE_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Betas linearly spaced from `start` to `end` inclusive.
    LinearBeta { start: f64, end: f64 },
    /// Squared-cosine cumulative schedule with offset `s`.
    Cosine { s: f64 },
}

impl ScheduleKind {
    /// Linear betas 1e-4 → 0.02 at 1000 steps, rescaled by `1000 / steps`
    /// so that short chains still end close to pure noise.
    pub fn linear_default(steps: usize) -> Self {
        let scale = REFERENCE_STEPS as f64 / steps.max(1) as f64;
        ScheduleKind::LinearBeta {
            start: (1e-4 * scale).min(0.999),
            end: (0.02 * scale).min(0.999),
        }
    }

    pub fn cosine_default() -> Self {
        ScheduleKind::Cosine { s: 0.008 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::LinearBeta { .. } => "linear-beta",
            ScheduleKind::Cosine { .. } => "cosine",
        }
    }
}

/// Schedule family names accepted in configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleFamily {
    LinearBeta,
    Cosine,
}

impl FromStr for ScheduleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-beta" | "linear" => Ok(ScheduleFamily::LinearBeta),
            "cosine" => Ok(ScheduleFamily::Cosine),
            other => Err(Error::config(format!(
                "unknown schedule kind `{other}` (expected linear-beta or cosine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    kind: ScheduleKind,
    /// `betas[t]` for t in 1..=T; `betas[0]` is 0.
    betas: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("diffusion step count must be at least 1"));
        }
        let mut betas = vec![0.0; steps + 1];
        match kind {
            ScheduleKind::LinearBeta { start, end } => {
                if !(start > 0.0 && end < 1.0 && start <= end) {
                    return Err(Error::config(format!(
                        "linear betas need 0 < start <= end < 1, got {start}..{end}"
                    )));
                }
                for (t, b) in betas.iter_mut().enumerate().skip(1) {
                    *b = if steps == 1 {
                        start
                    } else {
                        start + (end - start) * (t - 1) as f64 / (steps - 1) as f64
                    };
                }
            }
            ScheduleKind::Cosine { s } => {
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(Error::config(format!(
                        "cosine offset must be >= 0, got {s}"
                    )));
                }
                let f = |t: usize| {
                    let x = (t as f64 / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                for (t, b) in betas.iter_mut().enumerate().skip(1) {
                    *b = (1.0 - f(t) / f(t - 1)).clamp(1e-8, 0.999);
                }
            }
        }

        let mut alpha = Vec::with_capacity(steps + 1);
        let mut sigma = Vec::with_capacity(steps + 1);
        let mut alpha_bar = 1.0f64;
        for (t, beta) in betas.iter().enumerate() {
            if t > 0 {
                alpha_bar *= 1.0 - beta;
            }
            alpha.push(alpha_bar.sqrt());
            sigma.push((1.0 - alpha_bar).sqrt());
        }
        alpha[0] = 1.0;
        sigma[0] = 0.0;
        Ok(Self {
            steps,
            kind,
            betas,
            alpha,
            sigma,
        })
    }

    /// Builds a schedule from a family name with that family's defaults.
    pub fn build(steps: usize, family: ScheduleFamily) -> Result<Self> {
        let kind = match family {
            ScheduleFamily::LinearBeta => ScheduleKind::linear_default(steps),
            ScheduleFamily::Cosine => ScheduleKind::cosine_default(),
        };
        Self::new(steps, kind)
    }

    /// Rebuilds a schedule from stored coefficient arrays (checkpoint load).
    pub fn from_arrays(kind: ScheduleKind, alpha: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if alpha.len() != sigma.len() || alpha.len() < 2 {
            return Err(Error::data("schedule arrays must have equal length >= 2"));
        }
        let steps = alpha.len() - 1;
        let mut betas = vec![0.0; steps + 1];
        for t in 1..=steps {
            betas[t] = 1.0 - (alpha[t] * alpha[t]) / (alpha[t - 1] * alpha[t - 1]);
        }
        Ok(Self {
            steps,
            kind,
            betas,
            alpha,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps {
            return Err(Error::contract(format!(
                "timestep {t} outside {min}..={}",
                self.steps
            )));
        }
        Ok(())
    }

    /// Posterior variance of `x_{t-1}` given `x_t` and `x_0`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let s2 = self.sigma[t] * self.sigma[t];
        if s2 == 0.0 {
            return 0.0;
        }
        self.betas[t] * self.sigma[t - 1] * self.sigma[t - 1] / s2
    }
}

fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat_n(1, like.rank() - 1));
    let v: Vec<f64> = values.to_vec();
    Ok(Tensor::from_vec(v, shape, like.device())?.to_dtype(like.dtype())?)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::contract(format!(
            "{what}: shape {:?} does not match {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `alpha_t * x0 + sigma_t * eps` for a single timestep.
pub fn forward_marginal(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape(x0, eps, "forward_marginal")?;
    schedule.check_t(t, 0)?;
    Ok((x0.affine(schedule.alpha(t), 0.0)? + eps.affine(schedule.sigma(t), 0.0)?)?)
}

/// Batched corruption with one timestep per leading-axis sample.
pub fn forward_marginal_batch(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape(x0, eps, "forward_marginal")?;
    if x0.dim(0)? != ts.len() {
        return Err(Error::contract("one timestep per batch entry required"));
    }
    for &t in ts {
        schedule.check_t(t, 0)?;
    }
    let a: Vec<f64> = ts.iter().map(|&t| schedule.alpha(t)).collect();
    let s: Vec<f64> = ts.iter().map(|&t| schedule.sigma(t)).collect();
    let a = per_sample(&a, x0)?;
    let s = per_sample(&s, x0)?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// Uniform timesteps on `1..=steps`.
pub fn sample_timesteps(
    batch_size: usize,
    steps: usize,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    if batch_size == 0 || steps == 0 {
        return Err(Error::contract("batch size and step count must be >= 1"));
    }
    Ok((0..batch_size)
        .map(|_| rng.int_inclusive(1, steps))
        .collect())
}

/// Loss weighting `w(t)`; the training objective uses the constant 1.
pub fn unit_weight(_t: usize) -> f64 {
    1.0
}

/// Weighted ε-prediction loss: per-sample mean squared error times `w(t)`,
/// averaged over the batch. Differentiable in `eps_pred`.
pub fn elbo_loss(
    eps_pred: &Tensor,
    eps: &Tensor,
    ts: &[usize],
    weight: impl Fn(usize) -> f64,
) -> Result<Tensor> {
    same_shape(eps_pred, eps, "elbo_loss")?;
    let b = eps.dim(0)?;
    if ts.len() != b {
        return Err(Error::contract("one timestep per batch entry required"));
    }
    let per = (eps_pred - eps)?.sqr()?.flatten_from(1)?.mean(1)?;
    let w: Vec<f64> = ts.iter().map(|&t| weight(t)).collect();
    let w = Tensor::from_vec(w, b, eps.device())?.to_dtype(eps.dtype())?;
    let loss = (per * w)?.mean_all()?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::numeric(format!("elbo loss is {value}")));
    }
    Ok(loss)
}

/// One ancestral DDPM step from `x_t` to `x_{t-1}` using an ε estimate:
/// posterior mean `(x_t - beta_t / sigma_t * eps) / sqrt(1 - beta_t)` plus
/// the posterior standard deviation times `z`.
pub fn reverse_step(
    xt: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    z: &Tensor,
) -> Result<Tensor> {
    schedule.check_t(t, 1)?;
    same_shape(xt, eps_pred, "reverse_step")?;
    same_shape(xt, z, "reverse_step noise")?;
    let beta = schedule.beta(t);
    let inv_sqrt_keep = 1.0 / (1.0 - beta).sqrt();
    let eps_coef = beta / schedule.sigma(t);
    let mean =
        (xt.affine(inv_sqrt_keep, 0.0)? - eps_pred.affine(eps_coef * inv_sqrt_keep, 0.0)?)?;
    let std = schedule.posterior_variance(t).sqrt();
    if std == 0.0 {
        return Ok(mean);
    }
    Ok((mean + z.affine(std, 0.0)?)?)
}

/// The noise estimator `eps_theta(x_t, t)` driven by the sampler.
pub trait NoiseEstimator {
    fn predict_noise(&self, xt: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> NoiseEstimator for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict_noise(&self, xt: &Tensor, t: usize) -> Result<Tensor> {
        self(xt, t)
    }
}

/// Full reverse chain from `x_T ~ N(0, I)`; noise is drawn from a generator
/// seeded with `seed`, so the output is a deterministic function of it.
pub fn sample(
    model: &dyn NoiseEstimator,
    shape: &[usize],
    schedule: &NoiseSchedule,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut rng = SeededRng::new(seed);
    let numel: usize = shape.iter().product();
    let mut x = Tensor::from_vec(rng.normal_vec(numel), shape, device)?.to_dtype(dtype)?;
    for t in (1..=schedule.steps()).rev() {
        // no gradients flow through sampling; dropping the graph keeps memory flat
        let eps = model.predict_noise(&x, t)?.detach();
        if eps.dims() != shape {
            return Err(Error::contract(format!(
                "noise estimator returned shape {:?} for input {:?}",
                eps.dims(),
                shape
            )));
        }
        let z = if t > 1 {
            Tensor::from_vec(rng.normal_vec(numel), shape, device)?.to_dtype(dtype)?
        } else {
            x.zeros_like()?
        };
        x = reverse_step(&x, &eps, t, schedule, &z)?.detach();
    }
    Ok(x)
}
