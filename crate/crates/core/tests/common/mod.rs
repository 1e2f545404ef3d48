#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use vidiff::backbone::{Backbone, BackboneConfig, InitScheme};
use vidiff::data::synth_clip;
use vidiff::diffusion::{
    elbo_loss, forward_marginal_batch, unit_weight, NoiseSchedule, ScheduleFamily,
};
use vidiff::params::ParamStore;
use vidiff::prior::{pearson_corr_rows, MapStack, PriorGuidance, PriorProvider, ToyPrior};
use vidiff::rng::SeededRng;

/// One probed parameter entry.
#[derive(Debug, Clone)]
pub struct GradProbe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-8);
        (self.analytic - self.numeric).abs() / scale
    }
}

pub const GRAD_ALPHA: f64 = 0.5;

/// Depth-2, width-16 model in f64 with every weight random, four prior levels
/// on its single spatial block, and a fixed batch of two clips.
pub struct GradSetup {
    pub store: ParamStore,
    pub model: Backbone,
    pub guidance: PriorGuidance,
    pub schedule: NoiseSchedule,
    pub x0: Tensor,
    pub eps: Tensor,
    pub ts: Vec<usize>,
    pub maps: Vec<MapStack>,
}

impl GradSetup {
    pub fn new(seed: u64) -> Self {
        let cfg = BackboneConfig {
            depth: 2,
            dim: 16,
            heads: 2,
            patch: 2,
            time_embed_dim: 16,
            mlp_ratio: 4,
            frames: 2,
            latent_height: 8,
            latent_width: 8,
            latent_channels: 3,
        };
        let dev = Device::Cpu;
        let store = ParamStore::new(seed, DType::F64, &dev);
        let model = Backbone::new(&cfg, &store, InitScheme::random()).unwrap();
        let guidance = PriorGuidance::new(&store.pp("prior"), 4, vec![0; 4], 1).unwrap();
        let prior = ToyPrior::new(7, 16, 4).unwrap();
        let mut maps: Vec<MapStack> = Vec::new();
        for b in 0..2 {
            for (i, m) in prior
                .attention_maps(&synth_clip(seed * 10 + b, 2, 16, 16))
                .unwrap()
                .into_iter()
                .enumerate()
            {
                match maps.get_mut(i) {
                    Some(acc) => {
                        acc.count += m.count;
                        acc.data.extend(m.data);
                    }
                    None => maps.push(m),
                }
            }
        }
        let mut rng = SeededRng::new(seed ^ 0xfeed);
        let shape = cfg.latent_shape(2, 2);
        let n: usize = shape.iter().product();
        let x0 = Tensor::from_vec(rng.normal_vec_f64(n), &shape, &dev).unwrap();
        let eps = Tensor::from_vec(rng.normal_vec_f64(n), &shape, &dev).unwrap();
        let schedule = NoiseSchedule::build(10, ScheduleFamily::LinearBeta).unwrap();
        Self {
            store,
            model,
            guidance,
            schedule,
            x0,
            eps,
            ts: vec![3, 8],
            maps,
        }
    }

    /// `elbo + alpha * prior` as a differentiable scalar.
    pub fn total_loss(&self) -> Tensor {
        let xt = forward_marginal_batch(&self.x0, &self.ts, &self.eps, &self.schedule).unwrap();
        let (pred, rec) = self.model.predict_noise(&xt, &self.ts, true).unwrap();
        let elbo = elbo_loss(&pred, &self.eps, &self.ts, unit_weight).unwrap();
        let prior = self.guidance.prior_loss(&rec, &self.maps).unwrap();
        (elbo + (prior.loss * GRAD_ALPHA).unwrap()).unwrap()
    }

    fn value(&self) -> f64 {
        self.total_loss().to_scalar::<f64>().unwrap()
    }

    fn nudge(&self, name: &str, index: usize, delta: f64) {
        let var = self.store.var(name).unwrap();
        let mut v = var
            .as_tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        v[index] += delta;
        var.set(&Tensor::from_vec(v, var.as_tensor().dims(), &Device::Cpu).unwrap())
            .unwrap();
    }

    /// Backprop gradients against central differences at `count` random
    /// entries, two of them in the prior adapters.
    pub fn probe(&self, count: usize, seed: u64) -> Vec<GradProbe> {
        let grads = self.total_loss().backward().unwrap();
        let vars = self.store.named_vars();
        let (adapters, backbone): (Vec<_>, Vec<_>) =
            vars.iter().partition(|(n, _)| n.starts_with("prior."));
        let mut rng = SeededRng::new(seed);
        let h = 1e-5;
        (0..count)
            .map(|k| {
                let pool = if k < 2 { &adapters } else { &backbone };
                let (name, var) = pool[rng.index(pool.len())];
                let index = rng.index(var.as_tensor().elem_count());
                let g = grads
                    .get(var.as_tensor())
                    .unwrap()
                    .flatten_all()
                    .unwrap()
                    .to_vec1::<f64>()
                    .unwrap()[index];
                self.nudge(name, index, h);
                let up = self.value();
                self.nudge(name, index, -2.0 * h);
                let down = self.value();
                self.nudge(name, index, h);
                GradProbe {
                    name: name.clone(),
                    index,
                    analytic: g,
                    numeric: (up - down) / (2.0 * h),
                }
            })
            .collect()
    }
}

/// Plain gradient descent on an 8×8 student map toward a fixed target; returns
/// the step at which correlation first reaches 0.99.
pub fn descend_to_correlation(seed: u64, max_steps: usize) -> Option<usize> {
    let mut rng = SeededRng::new(seed);
    let target = Tensor::from_vec(rng.normal_vec_f64(64), (1, 64), &Device::Cpu).unwrap();
    let student = Var::from_vec(rng.normal_vec_f64(64), (1, 64), &Device::Cpu).unwrap();
    let lr = 2.0;
    for step in 0..=max_steps {
        let (c, _) = pearson_corr_rows(student.as_tensor(), &target).unwrap();
        let corr = c.to_vec1::<f64>().unwrap()[0];
        if corr >= 0.99 {
            return Some(step);
        }
        let loss = c.affine(-1.0, 1.0).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        let grad = g.get(student.as_tensor()).unwrap();
        student
            .set(&(student.as_tensor() - (grad * lr).unwrap()).unwrap())
            .unwrap();
    }
    None
}
