use cife_core::backbone::{Backbone, LATENT_SHAPE};
use cife_core::diffusion::*;
use cife_core::Result;
use cife_tensor::{NoiseRng, Tensor};
use proptest::prelude::*;

fn latent(seed: u64, n: usize) -> Tensor<f32> {
    let mut shape = vec![n];
    shape.extend(LATENT_SHAPE);
    NoiseRng::new(seed, "test.latent").normal_tensor(shape)
}

/// Returns the exact noise that maps a known `x0` to the current `x_t`.
struct PerfectPredictor {
    x0: Tensor<f32>,
    sched: NoiseSchedule,
}

impl NoisePredictor for PerfectPredictor {
    fn predict(&self, x_t: &Tensor<f32>, ts: &[usize], _cond: &Tensor<f32>) -> Result<Tensor<f32>> {
        let per = x_t.numel() / ts.len();
        let mut out = Vec::with_capacity(x_t.numel());
        for (i, &t) in ts.iter().enumerate() {
            let ab = self.sched.alpha_bar(t)?;
            for k in i * per..(i + 1) * per {
                let (x, x0) = (x_t.data()[k] as f64, self.x0.data()[k] as f64);
                out.push(((x - ab.sqrt() * x0) / (1.0 - ab).sqrt()) as f32);
            }
        }
        Ok(Tensor::new(x_t.shape().to_vec(), out)?)
    }
}

#[test]
fn schedule_tables() {
    let s = NoiseSchedule::new(1, 0.1, 0.5).unwrap();
    assert_eq!(s.len(), 1);
    assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);

    // Independent product in a different accumulation order.
    let s = NoiseSchedule::new(1000, 1e-4, 0.02).unwrap();
    let log_sum: f64 = (0..1000)
        .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
        .sum();
    let last = *s.alpha_bars().last().unwrap();
    assert!((last - log_sum.exp()).abs() < 1e-12);
    assert!((last - 4.0e-5).abs() < 0.1e-5, "{last}");

    let d = NoiseSchedule::default();
    assert_eq!(d.len(), 200);
    assert_eq!(d.betas().len(), 200);
    assert!(d.betas().windows(2).all(|w| w[0] < w[1]));
    assert!(d.alpha_bars().windows(2).all(|w| w[0] > w[1]));
    assert!(d.betas().iter().all(|&b| b > 0.0 && b < 1.0));
    assert!(d.alpha_bar(200).is_err());
    // The 1000-step range scaled by 1000/200 ends just as close to pure noise.
    assert!((d.betas()[0] - 5e-4).abs() < 1e-15 && (d.betas()[199] - 0.1).abs() < 1e-15);
    let scaled: f64 = (0..200).map(|i| (1.0 - (5e-4 + (0.1 - 5e-4) * i as f64 / 199.0)).ln()).sum();
    assert!((d.alpha_bars()[199] - scaled.exp()).abs() < 1e-12);
    assert!(d.alpha_bars()[199] < 1e-4, "{}", d.alpha_bars()[199]);
}

#[test]
fn add_noise_cases() {
    let s = NoiseSchedule::default();
    let x0 = latent(1, 1).outer(0);
    let zero = Tensor::zeros(x0.shape().to_vec());
    let xt = add_noise(&x0, &zero, 50, &s).unwrap();
    let a = s.alpha_bar(50).unwrap().sqrt() as f32;
    assert!(xt.max_abs_diff(&x0.map(|v| v * a)) < 1e-6);

    let tiny = NoiseSchedule::new(10, 1e-7, 1e-6).unwrap();
    let eps = latent(2, 1).outer(0);
    assert!(add_noise(&x0, &eps, 0, &tiny).unwrap().max_abs_diff(&x0) < 1e-3);
    assert!(add_noise(&x0, &eps, 10, &tiny).is_err());
}

#[test]
fn add_noise_round_trip() {
    let s = NoiseSchedule::default();
    for t in [0, 1, 57, 120, 199] {
        let x0: Tensor<f64> = NoiseRng::indexed(3, "x0", t as u64).normal_tensor(LATENT_SHAPE.to_vec());
        let eps: Tensor<f64> = NoiseRng::indexed(3, "eps", t as u64).normal_tensor(LATENT_SHAPE.to_vec());
        let xt = add_noise(&x0, &eps, t, &s).unwrap();
        let ab = s.alpha_bar(t).unwrap();
        let back = xt.zip_map(&eps, |x, e| (x - (1.0 - ab).sqrt() * e) / ab.sqrt()).unwrap();
        assert!(back.max_abs_diff(&x0) <= 1e-5, "t={t}");
    }
}

#[test]
fn perfect_predictor_reconstructs_latent() {
    let sched = NoiseSchedule::default();
    let x0 = latent(4, 3);
    let cond = Tensor::zeros([3, 16, 64]);
    let stub = PerfectPredictor { x0: x0.clone(), sched: sched.clone() };
    for steps in [1, 5, 20] {
        let cfg = SamplerConfig { steps, eta: 0.0, seed: 9 };
        let out = ddim_sample(&stub, &cond, &cfg, &sched, 0).unwrap();
        assert!(out.max_abs_diff(&x0) <= 1e-4, "steps={steps}: {}", out.max_abs_diff(&x0));
    }
}

#[test]
fn single_ddim_step_recovers_x0() {
    let sched = NoiseSchedule::default();
    let x0 = latent(5, 1);
    let eps = latent(6, 1);
    for t in [3, 80, 199] {
        let xt = add_noise_batch(&x0, &eps, &[t], &sched).unwrap();
        let out = ddim_step(&xt, &eps, t, None, 0.0, None, &sched).unwrap();
        assert!(out.max_abs_diff(&x0) <= 1e-5 * (1.0 / sched.alpha_bar(t).unwrap().sqrt()) as f32 * 4.0);
    }
}

#[test]
fn subsequence_spacing() {
    let s = timestep_subsequence(200, 20).unwrap();
    assert_eq!(s.len(), 20);
    assert_eq!((s[0], s[19]), (199, 0));
    let gaps: Vec<usize> = s.windows(2).map(|w| w[0] - w[1]).collect();
    let (lo, hi) = (*gaps.iter().min().unwrap(), *gaps.iter().max().unwrap());
    assert!(lo > 0 && hi - lo <= 1, "{gaps:?}");
}

#[test]
fn sampler_validation() {
    let sched = NoiseSchedule::default();
    assert!(SamplerConfig { steps: 201, ..Default::default() }.validate(&sched).is_err());
    assert!(SamplerConfig { eta: -1.0, ..Default::default() }.validate(&sched).is_err());
    assert!(SamplerConfig { steps: 200, ..Default::default() }.validate(&sched).is_ok());
}

#[test]
fn ddim_determinism_and_seed_dependence() {
    let bb = Backbone::with_defaults(3);
    let sched = NoiseSchedule::default();
    let cond = bb.text_encode(&["a small sprite", "a large sprite"]).unwrap();
    let cfg = SamplerConfig { steps: 4, eta: 0.0, seed: 1 };
    let a = ddim_sample(&bb, &cond, &cfg, &sched, 0).unwrap();
    let b = ddim_sample(&bb, &cond, &cfg, &sched, 0).unwrap();
    assert_eq!(a, b);
    let c = ddim_sample(&bb, &cond, &SamplerConfig { seed: 2, ..cfg }, &sched, 0).unwrap();
    assert!(a.max_abs_diff(&c) > 1e-3);
    // Splitting a batch does not change any sample.
    let second = ddim_sample(&bb, &cond.outer(1).reshape([1, 16, 64]).unwrap(), &cfg, &sched, 1).unwrap();
    assert_eq!(second.outer(0), a.outer(1));
    // eta > 0 is stochastic but still reproducible.
    let s1 = ddim_sample(&bb, &cond, &SamplerConfig { eta: 1.0, ..cfg }, &sched, 0).unwrap();
    let s2 = ddim_sample(&bb, &cond, &SamplerConfig { eta: 1.0, ..cfg }, &sched, 0).unwrap();
    assert_eq!(s1, s2);
    assert!(s1.max_abs_diff(&a) > 1e-4);
}

#[test]
fn loss_at_initialization_is_near_one() {
    let bb = Backbone::with_defaults(7);
    let sched = NoiseSchedule::default();
    let cond = bb.text_encode(&["a sprite"]).unwrap().outer(0);
    let mut total = 0.0;
    for i in 0..8u64 {
        let x0 = latent(10 + i, 1).outer(0);
        let l = diffusion_loss(&bb, &x0, &cond, (i as usize * 25) % 200, i, &sched).unwrap();
        assert!(l >= 0.0);
        total += l;
    }
    let mean = total / 8.0;
    assert!((mean - 1.0).abs() < 0.25, "{mean}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn schedules_are_monotone(t in 1usize..400, a in 1e-5f64..0.01, span in 1e-4f64..0.5) {
        let b = (a + span).min(0.999);
        let s = NoiseSchedule::new(t, a, b).unwrap();
        prop_assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
        prop_assert!(s.alpha_bars().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn round_trip_any_step(t in 0usize..200, seed in 0u64..1000) {
        let s = NoiseSchedule::default();
        let x0: Tensor<f64> = NoiseRng::new(seed, "x0").normal_tensor(vec![16]);
        let eps: Tensor<f64> = NoiseRng::new(seed, "eps").normal_tensor(vec![16]);
        let xt = add_noise(&x0, &eps, t, &s).unwrap();
        let ab = s.alpha_bar(t).unwrap();
        let back = xt.zip_map(&eps, |x, e| (x - (1.0 - ab).sqrt() * e) / ab.sqrt()).unwrap();
        prop_assert!(back.max_abs_diff(&x0) <= 1e-5);
    }
}
