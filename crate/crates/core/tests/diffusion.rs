use ndgrad::Grid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use smmf_core::diffusion::{
    cfg_eps, ddim_invert, ddim_reverse_step, ddim_sample, ddim_step, make_schedule, q_sample, sample, EpsModel,
    ScheduleKind,
};
use smmf_core::guidance::seeded_noise;
use smmf_core::{Condition, Denoiser, DenoiserConfig, Result};

fn sched() -> smmf_core::NoiseSchedule {
    make_schedule(1000, ScheduleKind::Linear).unwrap()
}

fn noise(shape: &[usize], seed: u64) -> Grid<f64> {
    seeded_noise(shape, seed).unwrap()
}

fn max_abs_diff(a: &Grid<f64>, b: &Grid<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Zero;

impl EpsModel<f64> for Zero {
    fn predict_eps(&self, x_t: &Grid<f64>, _t: usize, _c: Condition) -> Result<Grid<f64>> {
        Ok(x_t.zeros_like())
    }
}

/// Predicts a fixed fraction of the input, differently per condition.
struct Linear;

impl EpsModel<f64> for Linear {
    fn predict_eps(&self, x_t: &Grid<f64>, t: usize, c: Condition) -> Result<Grid<f64>> {
        let k = match c {
            Condition::Null => 0.1,
            Condition::Class(i) => 0.2 + 0.05 * i as f64,
        };
        Ok(x_t.map(|v| k * v * (t as f64 / 1000.0)))
    }
}

#[test]
fn alphabar_is_strictly_decreasing_and_matches_product_oracle() {
    let s = sched();
    for t in 1..=1000 {
        assert!(s.alphabar(t) < s.alphabar(t - 1));
    }
    let mut prod = 1.0f64;
    for t in 1..=1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
        prod *= 1.0 - beta;
    }
    assert!((s.alphabar(1000) - prod).abs() < 1e-12);
    assert_eq!(s.alphabar(1), 1.0 - 1e-4);
}

#[test]
fn q_sample_cases() {
    let s = sched();
    let x0 = noise(&[2, 3, 3, 2], 1);
    let zero = x0.zeros_like();
    let t = 400;
    let x = q_sample(&s, &x0, t, &zero).unwrap();
    let want = x0.map(|v| s.alphabar(t).sqrt() * v);
    assert!(max_abs_diff(&x, &want) < 1e-15);

    let eps = noise(x0.shape(), 2);
    let x1 = q_sample(&s, &x0, 1, &eps).unwrap();
    assert!(max_abs_diff(&x1, &x0) < 0.05);
}

#[test]
fn q_sample_variance_from_zero_signal() {
    let s = sched();
    let t = 300;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 10_000;
    let eps = Grid::from_fn(&[n, 1, 1, 1], |_| StandardNormal.sample(&mut rng)).unwrap();
    let x = q_sample(&s, &Grid::<f64>::zeros(&[n, 1, 1, 1]).unwrap(), t, &eps).unwrap();
    let mean = x.mean();
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let want = 1.0 - s.alphabar(t);
    assert!((var - want).abs() < 0.03 * want, "var {var} want {want}");
}

#[test]
fn ddim_step_closed_forms() {
    let s = sched();
    let x = noise(&[2, 4, 4, 3], 3);
    let zero = x.zeros_like();
    let (t, tp) = (500, 480);
    let out = ddim_step(&s, &x, &zero, t, tp).unwrap();
    let k = s.alphabar(tp).sqrt() / s.alphabar(t).sqrt();
    assert!(max_abs_diff(&out, &x.map(|v| k * v)) < 1e-10);

    // exact noise recovers the clean signal
    let x0 = noise(x.shape(), 4);
    let eps = noise(x.shape(), 5);
    let xt = q_sample(&s, &x0, 700, &eps).unwrap();
    let back = ddim_step(&s, &xt, &eps, 700, 0).unwrap();
    assert!(max_abs_diff(&back, &x0) < 1e-10);

    // the reverse step undoes the step for the same eps
    let down = ddim_step(&s, &xt, &eps, 700, 650).unwrap();
    let up = ddim_reverse_step(&s, &down, &eps, 650, 700).unwrap();
    assert!(max_abs_diff(&up, &xt) < 1e-10);
}

#[test]
fn cfg_is_linear_in_scale() {
    let c = noise(&[2, 3, 3, 2], 6);
    let u = noise(&[2, 3, 3, 2], 7);
    let (s1, s2) = (2.5, 7.5);
    let a = cfg_eps(&c, &u, s1).unwrap();
    let b = cfg_eps(&c, &u, s2).unwrap();
    let z = cfg_eps(&c, &u, 0.0).unwrap();
    let sum = cfg_eps(&c, &u, s1 + s2).unwrap();
    for i in 0..c.len() {
        let lhs = a.data()[i] + b.data()[i] - z.data()[i];
        assert!((lhs - sum.data()[i]).abs() < 1e-12);
    }
    assert_eq!(cfg_eps(&c, &u, 1.0).unwrap(), c);
    assert_eq!(cfg_eps(&c, &u, 0.0).unwrap(), u);
}

#[test]
fn inversion_with_zero_model_scales_the_signal() {
    let s = sched();
    let x0 = noise(&[2, 4, 4, 3], 8);
    let traj = ddim_invert(&Zero, &s, &x0, Condition::Null, 20).unwrap();
    assert_eq!(traj.len(), 20);
    for (t, x) in traj.steps.iter().zip(&traj.latents) {
        let want = x0.map(|v| s.alphabar(*t).sqrt() * v);
        assert!(max_abs_diff(x, &want) < 1e-10, "t = {t}");
    }
}

#[test]
fn recording_does_not_change_samples() {
    let s = sched();
    let x = noise(&[2, 4, 4, 3], 10);
    let grid = s.step_grid(25).unwrap();
    let (a, trace) = ddim_sample(&Linear, &s, &x, &grid, Condition::Class(1), 10.0, true).unwrap();
    let (b, none) = ddim_sample(&Linear, &s, &x, &grid, Condition::Class(1), 10.0, false).unwrap();
    assert_eq!(a, b);
    assert_eq!(trace.len(), 25);
    assert!(none.is_empty());
    assert_eq!(trace.last().unwrap(), &a);
}

#[test]
fn sampling_is_deterministic_for_a_seed() {
    let s = sched();
    let model = Denoiser::<f32>::new(DenoiserConfig::tiny(4, 8), 3).unwrap();
    let run = || {
        let x = seeded_noise::<f32>(&model.config().input_shape(), 7).unwrap();
        sample(&model, &s, &x, Condition::Class(1), 5, 10.0).unwrap()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn inversion_refuses_untrained_models() {
    let s = sched();
    let model = Denoiser::<f64>::new(DenoiserConfig::tiny(4, 8), 3).unwrap();
    let x0 = noise(&model.config().input_shape(), 1);
    assert!(ddim_invert(&model, &s, &x0, Condition::Null, 5).is_err());
}
