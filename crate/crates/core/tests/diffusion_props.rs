use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use vidiff::diffusion::{
    forward_marginal, reverse_step, sample, NoiseSchedule, ScheduleFamily, ScheduleKind,
};
use vidiff::rng::SeededRng;

fn schedules() -> Vec<NoiseSchedule> {
    let mut out = Vec::new();
    for steps in [1, 2, 10, 50, 1000] {
        out.push(NoiseSchedule::build(steps, ScheduleFamily::LinearBeta).unwrap());
        out.push(NoiseSchedule::build(steps, ScheduleFamily::Cosine).unwrap());
    }
    out
}

#[test]
fn variance_preserving_everywhere() {
    for s in schedules() {
        for t in 0..=s.steps() {
            let (a, g) = (s.alpha(t), s.sigma(t));
            assert!((a * a + g * g - 1.0).abs() < 1e-6, "t={t} of {}", s.steps());
        }
    }
}

#[test]
fn alpha_strictly_decreasing_sigma_increasing() {
    for s in schedules() {
        for t in 1..=s.steps() {
            assert!(s.alpha(t) < s.alpha(t - 1));
            assert!(s.sigma(t) > s.sigma(t - 1));
        }
    }
}

#[test]
fn boundary_values() {
    for s in schedules() {
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.sigma(0), 0.0);
        if s.steps() >= 50 {
            assert!(
                s.alpha(s.steps()) < 0.05,
                "{} steps end at alpha {}",
                s.steps(),
                s.alpha(s.steps())
            );
        }
    }
}

#[test]
fn oracle_chain_recovers_x0() {
    let s = NoiseSchedule::build(10, ScheduleFamily::LinearBeta).unwrap();
    let mut rng = SeededRng::new(3);
    let shape = [2, 3, 4, 4, 3];
    let n: usize = shape.iter().product();
    let x0 = Tensor::from_vec(rng.normal_vec_f64(n), &shape, &Device::Cpu).unwrap();
    let eps = Tensor::from_vec(rng.normal_vec_f64(n), &shape, &Device::Cpu).unwrap();
    let mut x = forward_marginal(&x0, 10, &eps, &s).unwrap();
    let z = x.zeros_like().unwrap();
    for t in (1..=10).rev() {
        // the noise that maps x0 to the current x_t exactly
        let oracle = ((&x - x0.affine(s.alpha(t), 0.0).unwrap()).unwrap() / s.sigma(t)).unwrap();
        x = reverse_step(&x, &oracle, t, &s, &z).unwrap();
    }
    let err = (x - &x0)
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    assert!(err < 1e-4, "max abs error {err}");
}

#[test]
fn sampler_is_seed_deterministic() {
    let s = NoiseSchedule::build(8, ScheduleFamily::Cosine).unwrap();
    let model = |x: &Tensor, _t: usize| -> vidiff::Result<Tensor> { Ok(x.affine(0.5, 0.0)?) };
    let shape = [1, 2, 2, 2, 3];
    let a = sample(&model, &shape, &s, 11, DType::F64, &Device::Cpu).unwrap();
    let b = sample(&model, &shape, &s, 11, DType::F64, &Device::Cpu).unwrap();
    let c = sample(&model, &shape, &s, 12, DType::F64, &Device::Cpu).unwrap();
    assert_eq!(
        a.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
        b.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    );
    assert_ne!(
        a.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
        c.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_schedules_preserve_variance(steps in 1usize..400, start in 1e-5f64..1e-2, span in 0.0f64..0.2) {
        let s = NoiseSchedule::new(steps, ScheduleKind::LinearBeta { start, end: start + span }).unwrap();
        for t in 0..=steps {
            prop_assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-6);
            if t > 0 {
                prop_assert!(s.alpha(t) < s.alpha(t - 1));
            }
        }
    }

    #[test]
    fn forward_marginal_moments(t in 1usize..50, seed in 0u64..1000) {
        let s = NoiseSchedule::build(50, ScheduleFamily::LinearBeta).unwrap();
        let mut rng = SeededRng::new(seed);
        let n = 20_000;
        let x0 = Tensor::from_vec(vec![0.7f64; n], n, &Device::Cpu).unwrap();
        let eps = Tensor::from_vec(rng.normal_vec_f64(n), n, &Device::Cpu).unwrap();
        let xt = forward_marginal(&x0, t, &eps, &s).unwrap().to_vec1::<f64>().unwrap();
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assert!((mean - 0.7 * s.alpha(t)).abs() < 5.0 * s.sigma(t) / (n as f64).sqrt());
        prop_assert!((var / s.sigma(t).powi(2) - 1.0).abs() < 0.06);
    }
}
