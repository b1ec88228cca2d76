//! Noise-prediction training with classifier-free condition dropout.

use std::collections::VecDeque;

use ndgrad::{Adam, Grid, Tape};
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, Denoiser, Depth};
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{config_err, Error, Result};
use crate::video::VideoTensor;

/// Window of the running-mean loss.
pub const LOSS_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub lr_floor: f64,
    pub cond_dropout: f64,
    pub grad_clip: f64,
    /// Decay of the weight average written to checkpoints; 0 disables it.
    pub ema_decay: f64,
    /// Random horizontal flips and time reversal of training clips.
    pub augment: bool,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 2e-3,
            warmup: 100,
            lr_floor: 0.05,
            cond_dropout: 0.1,
            grad_clip: 1.0,
            ema_decay: 0.999,
            augment: true,
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.log_every == 0 {
            return config_err("steps, batch and log_every must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err(format!("bad learning rate {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return config_err(format!("cond_dropout {} outside [0, 1]", self.cond_dropout));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return config_err(format!("ema_decay {} outside [0, 1)", self.ema_decay));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.steps - self.warmup.min(self.steps)).max(1) as f64;
        let p = ((step - self.warmup) as f64 / span).min(1.0);
        let c = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub running_mean: f64,
}

/// One training clip: latent in `[-1, 1]` and its class.
#[derive(Debug, Clone)]
pub struct Example {
    pub latent: Grid<f32>,
    pub class: usize,
}

impl Example {
    pub fn new(video: &VideoTensor, class: usize) -> Self {
        Self {
            latent: video.to_latent(),
            class,
        }
    }
}

/// Replaces the class with NULL with probability `p`.
pub fn draw_condition(rng: &mut impl Rng, class: usize, p: f64) -> Condition {
    if p > 0.0 && rng.random_bool(p) {
        Condition::Null
    } else {
        Condition::Class(class)
    }
}

fn augment(x: &Grid<f32>, flip: bool, reverse: bool) -> Grid<f32> {
    if !flip && !reverse {
        return x.clone();
    }
    let s = x.shape();
    let (f, h, w, c) = (s[0], s[1], s[2], s[3]);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for fi in 0..f {
        let sf = if reverse { f - 1 - fi } else { fi };
        for y in 0..h {
            for xi in 0..w {
                let sx = if flip { w - 1 - xi } else { xi };
                let o = ((sf * h + y) * w + sx) * c;
                out.extend_from_slice(&src[o..o + c]);
            }
        }
    }
    Grid::from_vec(s, out).expect("same shape")
}

struct Item {
    x_t: Grid<f32>,
    eps: Grid<f32>,
    t: usize,
    cond: Condition,
    weight: f32,
}

/// Loss weight of step `t`. A velocity-head model is trained on the MSE of
/// its raw output, which is the ε-MSE divided by `alphabar[t]`.
fn loss_weight(model: &Denoiser<f32>, sched: &NoiseSchedule, t: usize) -> f32 {
    match model.config().velocity_head {
        Some(_) => (1.0 / sched.alphabar(t)) as f32,
        None => 1.0,
    }
}

fn item_grads(model: &Denoiser<f32>, item: &Item) -> Result<(f64, Vec<Grid<f32>>)> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let x = tape.constant(item.x_t.clone());
    let out = model.forward_on_tape(&mut tape, &p, x, item.t, item.cond, Depth::Full)?;
    let target = tape.constant(item.eps.clone());
    let d = tape.sub(out.eps.expect("full depth"), target)?;
    let sq = tape.mul(d, d)?;
    let loss = tape.mean_over_axes(sq, &[0, 1, 2, 3])?;
    let value = tape.value(loss)?.data()[0] as f64;
    let weighted = tape.scale(loss, item.weight)?;
    let mut g = tape.backward(weighted)?;
    let grads = p
        .iter()
        .zip(&model.params.grids)
        .map(|(&v, w)| g.take(v).unwrap_or_else(|| w.zeros_like()))
        .collect();
    Ok((value, grads))
}

/// Result of [`train`]: the weights to keep (the average when enabled) and the loss log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Denoiser<f32>,
    pub log: Vec<LossRecord>,
}

/// Trains `model` in place on `data`. `on_log` sees every logged record.
pub fn train(
    mut model: Denoiser<f32>,
    sched: &NoiseSchedule,
    data: &[Example],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let shape = model.config().input_shape();
    if let Some(e) = data.iter().find(|e| e.latent.shape() != shape) {
        return Err(Error::Data(format!("training clip {:?} does not match model {shape:?}", e.latent.shape())));
    }
    if let Some(e) = data.iter().find(|e| e.class >= model.config().num_classes) {
        return Err(Error::Data(format!("class {} outside the model's range", e.class)));
    }
    if let Some(head) = model.config().velocity_head {
        if head != sched.params() {
            return config_err("velocity head and training schedule differ");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.params.grids.iter().collect::<Vec<_>>());
    let mut ema = (cfg.ema_decay > 0.0).then(|| model.params.grids.clone());
    let mut window = VecDeque::with_capacity(LOSS_WINDOW);
    let mut log = Vec::new();
    let inv_batch = 1.0 / cfg.batch as f32;
    for step in 0..cfg.steps {
        let mut items = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let ex = &data[rng.random_range(0..data.len())];
            let (flip, reverse) = if cfg.augment {
                (rng.random_bool(0.5), rng.random_bool(0.5))
            } else {
                (false, false)
            };
            let x0 = augment(&ex.latent, flip, reverse);
            let t = rng.random_range(1..=sched.steps());
            let eps = Grid::from_fn(&shape, |_| rng.sample::<f32, _>(StandardNormal))?;
            let cond = draw_condition(&mut rng, ex.class, cfg.cond_dropout);
            items.push(Item {
                x_t: q_sample(sched, &x0, t, &eps)?,
                eps,
                t,
                cond,
                weight: loss_weight(&model, sched, t),
            });
        }
        // items are independent; results come back in order so the sum is deterministic
        let results: Vec<Result<(f64, Vec<Grid<f32>>)>> = items.par_iter().map(|it| item_grads(&model, it)).collect();
        let mut loss = 0.0;
        let mut total: Vec<Grid<f32>> = Vec::new();
        for r in results {
            let (l, grads) = r?;
            loss += l / cfg.batch as f64;
            if total.is_empty() {
                total = grads;
            } else {
                for (a, b) in total.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric {
                step,
                msg: format!("training loss diverged ({loss})"),
            });
        }
        let mut sq = 0.0f64;
        for g in &mut total {
            for v in g.data_mut() {
                *v *= inv_batch;
                sq += (*v as f64) * (*v as f64);
            }
        }
        let norm = sq.sqrt();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let s = (cfg.grad_clip / norm) as f32;
            total.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
        {
            let mut params: Vec<&mut Grid<f32>> = model.params.grids.iter_mut().collect();
            let grads: Vec<Option<&Grid<f32>>> = total.iter().map(Some).collect();
            opt.step(&mut params, &grads, cfg.lr_at(step))?;
        }
        if let Some(ema) = &mut ema {
            let n = step as f64;
            let d = cfg.ema_decay.min((1.0 + n) / (10.0 + n)) as f32;
            for (e, p) in ema.iter_mut().zip(&model.params.grids) {
                e.data_mut().iter_mut().zip(p.data()).for_each(|(e, &p)| *e = d * *e + (1.0 - d) * p);
            }
        }
        model.train_steps += 1;
        if window.len() == LOSS_WINDOW {
            window.pop_front();
        }
        window.push_back(loss);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let rec = LossRecord {
                step: step + 1,
                loss,
                running_mean: window.iter().sum::<f64>() / window.len() as f64,
            };
            on_log(&rec);
            log.push(rec);
        }
    }
    if let Some(ema) = ema {
        model.params.grids = ema;
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::diffusion::{make_schedule, EpsModel, ScheduleKind};

    #[test]
    fn null_fraction_matches_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let nulls = (0..n).filter(|_| draw_condition(&mut rng, 1, 0.1) == Condition::Null).count();
        let frac = nulls as f64 / n as f64;
        assert!((frac - 0.1).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn weighted_eps_loss_is_velocity_mse() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let cfg = DenoiserConfig::tiny(2, 8);
        let model = Denoiser::<f32>::new(cfg.clone(), 4).unwrap();
        let x0 = Grid::from_fn(&cfg.input_shape(), |i| ((i * 7) % 11) as f32 / 5.0 - 1.0).unwrap();
        let eps = Grid::from_fn(&cfg.input_shape(), |i| ((i * 5) % 13) as f32 / 6.0 - 1.0).unwrap();
        for t in [1, 400, 1000] {
            let ab = s.alphabar(t);
            let x_t = q_sample(&s, &x0, t, &eps).unwrap();
            let pred = model.predict_eps(&x_t, t, Condition::Null).unwrap();
            let (mut e_mse, mut v_mse) = (0.0, 0.0);
            for i in 0..x_t.data().len() {
                let (xt, e, p, x) = (x_t.data()[i] as f64, eps.data()[i] as f64, pred.data()[i] as f64, x0.data()[i] as f64);
                let v = ab.sqrt() * e - (1.0 - ab).sqrt() * x;
                let v_pred = (p - (1.0 - ab).sqrt() * xt) / ab.sqrt();
                e_mse += (p - e).powi(2);
                v_mse += (v_pred - v).powi(2);
            }
            let w = loss_weight(&model, &s, t) as f64;
            assert!((w * e_mse / v_mse - 1.0).abs() < 1e-2, "t={t}: {} vs {v_mse}", w * e_mse);
        }
        let plain = Denoiser::<f32>::new(DenoiserConfig { velocity_head: None, ..cfg }, 4).unwrap();
        assert_eq!(loss_weight(&plain, &s, 1000), 1.0);
    }

    #[test]
    fn augment_is_an_involution() {
        let x = Grid::from_fn(&[3, 2, 4, 2], |i| i as f32).unwrap();
        let y = augment(&augment(&x, true, true), true, true);
        assert_eq!(x, y);
        assert_ne!(augment(&x, true, false), x);
    }

    #[test]
    fn lr_schedule_warms_up_and_decays() {
        let cfg = TrainConfig::default();
        assert!(cfg.lr_at(0) < cfg.lr_at(50));
        assert!((cfg.lr_at(cfg.warmup) - cfg.lr).abs() < 1e-12);
        assert!((cfg.lr_at(cfg.steps - 1) - cfg.lr * cfg.lr_floor).abs() < 1e-5);
    }

    #[test]
    fn rejects_empty_dataset_and_logs_nonnegative_loss() {
        let sched = make_schedule(100, ScheduleKind::Linear).unwrap();
        let tiny = DenoiserConfig::tiny(2, 8);
        let mismatched = Denoiser::new(tiny.clone(), 0).unwrap();
        let model = Denoiser::new(DenoiserConfig { velocity_head: Some(sched.params()), ..tiny }, 0).unwrap();
        let cfg = TrainConfig {
            steps: 5,
            batch: 2,
            log_every: 1,
            ..TrainConfig::default()
        };
        assert!(train(model.clone(), &sched, &[], &cfg, |_| {}).is_err());
        let data = vec![Example {
            latent: Grid::from_fn(&[2, 8, 8, 2], |i| (i % 3) as f32 - 1.0).unwrap(),
            class: 1,
        }];
        assert!(train(mismatched, &sched, &data, &cfg, |_| {}).is_err());
        let out = train(model, &sched, &data, &cfg, |_| {}).unwrap();
        assert_eq!(out.log.len(), 5);
        assert!(out.log.iter().all(|r| r.loss >= 0.0 && r.running_mean >= 0.0));
        assert_eq!(out.model.train_steps, 5);
    }
}
