//! Noise schedule, forward noising, deterministic DDIM sampling and inversion,
//! classifier-free guidance.

use ndgrad::{Grid, Real};
use serde::{Deserialize, Serialize};

use crate::denoiser::Condition;
use crate::error::{config_err, Error, Result};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
pub const DEFAULT_SAMPLE_STEPS: usize = 50;
pub const DEFAULT_CFG_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: DEFAULT_TRAIN_STEPS,
            kind: ScheduleKind::Linear,
            beta_start: BETA_START,
            beta_end: BETA_END,
        }
    }
}

/// `beta[t]`, `alpha[t] = 1 - beta[t]` and `alphabar[t] = prod alpha[1..=t]`
/// for `t` in `1..=T`; index 0 is the clean sample (`alphabar[0] = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphabar: Vec<f64>,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleParams {
        steps,
        kind,
        ..ScheduleParams::default()
    })
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let n = params.steps;
        if n < 2 {
            return config_err(format!("schedule needs at least 2 steps, got {n}"));
        }
        if !(0.0 < params.beta_start && params.beta_start <= params.beta_end && params.beta_end < 1.0) {
            return config_err("betas must satisfy 0 < start <= end < 1");
        }
        let mut betas = vec![0.0; n + 1];
        let mut alphabar = vec![1.0; n + 1];
        for t in 1..=n {
            let frac = (t - 1) as f64 / (n - 1) as f64;
            betas[t] = match params.kind {
                ScheduleKind::Linear => params.beta_start + frac * (params.beta_end - params.beta_start),
            };
            alphabar[t] = alphabar[t - 1] * (1.0 - betas[t]);
        }
        Ok(Self { params, betas, alphabar })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alphabar(&self, t: usize) -> f64 {
        self.alphabar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return config_err(format!("step {t} beyond schedule length {}", self.steps()));
        }
        Ok(())
    }

    /// Uniform descending sampling grid `[T, T - T/n, ..., T/n]`.
    pub fn step_grid(&self, n: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if n == 0 || !total.is_multiple_of(n) {
            return config_err(format!("{n} steps do not divide the {total}-step schedule uniformly"));
        }
        let stride = total / n;
        Ok((1..=n).rev().map(|i| i * stride).collect())
    }
}

fn same_shape<T: Real>(a: &Grid<T>, b: &Grid<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Data(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample<T: Real>(sched: &NoiseSchedule, x0: &Grid<T>, t: usize, eps: &Grid<T>) -> Result<Grid<T>> {
    sched.check_t(t)?;
    same_shape(x0, eps, "q_sample")?;
    let ab = sched.alphabar(t);
    let (a, b) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));
    Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
}

/// Moves `x` from noise level `ab_from` to `ab_to` along the deterministic
/// DDIM path implied by `eps`.
fn ddim_transfer<T: Real>(x: &Grid<T>, eps: &Grid<T>, ab_from: f64, ab_to: f64) -> Result<Grid<T>> {
    same_shape(x, eps, "ddim")?;
    let (sa, sb) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (ta, tb) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    Ok(x.zip_map(eps, |xv, ev| {
        let (xv, ev) = (xv.as_f64(), ev.as_f64());
        let x0 = (xv - sb * ev) / sa;
        T::from_f64(ta * x0 + tb * ev)
    })?)
}

/// Deterministic DDIM update from `t` down to `t_prev` (`t_prev = 0` is the clean sample).
pub fn ddim_step<T: Real>(
    sched: &NoiseSchedule,
    x_t: &Grid<T>,
    eps: &Grid<T>,
    t: usize,
    t_prev: usize,
) -> Result<Grid<T>> {
    sched.check_t(t)?;
    if t_prev >= t {
        return config_err(format!("ddim step needs t_prev < t, got {t_prev} >= {t}"));
    }
    ddim_transfer(x_t, eps, sched.alphabar(t), sched.alphabar(t_prev))
}

/// Algebraic inverse of [`ddim_step`]: from `t_prev` back up to `t` with the same `eps`.
pub fn ddim_reverse_step<T: Real>(
    sched: &NoiseSchedule,
    x_prev: &Grid<T>,
    eps: &Grid<T>,
    t_prev: usize,
    t: usize,
) -> Result<Grid<T>> {
    sched.check_t(t)?;
    if t_prev >= t {
        return config_err(format!("reverse ddim step needs t_prev < t, got {t_prev} >= {t}"));
    }
    ddim_transfer(x_prev, eps, sched.alphabar(t_prev), sched.alphabar(t))
}

/// `eps_uncond + scale * (eps_cond - eps_uncond)`, written as
/// `(1 - scale) * eps_uncond + scale * eps_cond` so scales 0 and 1 are exact.
pub fn cfg_eps<T: Real>(eps_cond: &Grid<T>, eps_uncond: &Grid<T>, scale: f64) -> Result<Grid<T>> {
    let (s, r) = (T::from_f64(scale), T::from_f64(1.0 - scale));
    Ok(eps_cond.zip_map(eps_uncond, |c, u| r * u + s * c)?)
}

/// Anything that predicts the noise in `x_t`.
pub trait EpsModel<T: Real> {
    fn predict_eps(&self, x_t: &Grid<T>, t: usize, cond: Condition) -> Result<Grid<T>>;

    /// Whether the model holds trained weights. Inversion refuses untrained models.
    fn is_trained(&self) -> bool {
        true
    }
}

/// Guided noise prediction; `scale == 1` skips the unconditional branch.
pub fn guided_eps<T: Real, M: EpsModel<T> + ?Sized>(
    model: &M,
    x_t: &Grid<T>,
    t: usize,
    cond: Condition,
    scale: f64,
) -> Result<Grid<T>> {
    let eps_c = model.predict_eps(x_t, t, cond)?;
    if scale == 1.0 || cond == Condition::Null {
        return Ok(eps_c);
    }
    let eps_u = model.predict_eps(x_t, t, Condition::Null)?;
    cfg_eps(&eps_c, &eps_u, scale)
}

/// Inverted latents `x_t` keyed by step, ascending in `t`.
#[derive(Debug, Clone)]
pub struct LatentTrajectory<T> {
    pub steps: Vec<usize>,
    pub latents: Vec<Grid<T>>,
}

impl<T: Real> LatentTrajectory<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn at(&self, t: usize) -> Option<&Grid<T>> {
        self.steps.binary_search(&t).ok().map(|i| &self.latents[i])
    }

    /// The most noised latent `x_T`.
    pub fn last(&self) -> Option<&Grid<T>> {
        self.latents.last()
    }
}

pub(crate) fn check_finite<T: Real>(x: &Grid<T>, step: usize, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            step,
            msg: format!("non-finite values in {what}"),
        })
    }
}

/// DDIM inversion with guidance scale 1: walks the uniform `n_steps` grid
/// upwards from `x0`, recording every latent. The noise for the move
/// `t_cur -> t_next` is predicted at `(x_{t_cur}, t_next)`.
pub fn ddim_invert<T: Real, M: EpsModel<T> + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    x0: &Grid<T>,
    cond: Condition,
    n_steps: usize,
) -> Result<LatentTrajectory<T>> {
    if !model.is_trained() {
        return config_err("inversion needs a trained denoiser checkpoint");
    }
    let mut grid = sched.step_grid(n_steps)?;
    grid.reverse();
    let mut x = x0.clone();
    let mut t_cur = 0;
    let mut latents = Vec::with_capacity(n_steps);
    for (i, &t_next) in grid.iter().enumerate() {
        let eps = model.predict_eps(&x, t_next, cond)?;
        x = ddim_reverse_step(sched, &x, &eps, t_cur, t_next)?;
        check_finite(&x, i, "inversion latent")?;
        latents.push(x.clone());
        t_cur = t_next;
    }
    Ok(LatentTrajectory { steps: grid, latents })
}

/// Deterministic DDIM sampling from `x_start` at `grid[0]` down to the clean sample.
/// When `record` is set the latent after every step is returned alongside.
pub fn ddim_sample<T: Real, M: EpsModel<T> + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    x_start: &Grid<T>,
    grid: &[usize],
    cond: Condition,
    scale: f64,
    record: bool,
) -> Result<(Grid<T>, Vec<Grid<T>>)> {
    let mut x = x_start.clone();
    let mut trace = Vec::new();
    for (i, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(i + 1).copied().unwrap_or(0);
        let eps = guided_eps(model, &x, t, cond, scale)?;
        x = ddim_step(sched, &x, &eps, t, t_prev)?;
        check_finite(&x, i, "sampling latent")?;
        if record {
            trace.push(x.clone());
        }
    }
    Ok((x, trace))
}

/// Samples from `x_T` with `n_steps` uniform DDIM steps and decodes to pixels.
pub fn sample<T: Real, M: EpsModel<T> + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    x_t: &Grid<T>,
    cond: Condition,
    n_steps: usize,
    scale: f64,
) -> Result<crate::VideoTensor> {
    let grid = sched.step_grid(n_steps)?;
    let (x0, _) = ddim_sample(model, sched, x_t, &grid, cond, scale, false)?;
    crate::VideoTensor::from_latent(&x0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_basics() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alphabar(1), 1.0 - 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        for t in 1..=1000 {
            assert!(s.alphabar(t) < s.alphabar(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
        assert!(make_schedule(1, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn step_grid_is_uniform_and_descending() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let g = s.step_grid(50).unwrap();
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 1000);
        assert_eq!(*g.last().unwrap(), 20);
        assert!(s.step_grid(30).is_err());
        assert_eq!(s.step_grid(1000).unwrap().last(), Some(&1));
    }

    #[test]
    fn ddim_step_rejects_wrong_order() {
        let s = make_schedule(10, ScheduleKind::Linear).unwrap();
        let x = Grid::<f64>::zeros(&[2]).unwrap();
        assert!(ddim_step(&s, &x, &x, 3, 3).is_err());
        assert!(ddim_step(&s, &x, &x, 3, 5).is_err());
    }

    #[test]
    fn cfg_hand_cases() {
        let c = Grid::full(&[3], 1.0f64).unwrap();
        let u = Grid::zeros(&[3]).unwrap();
        assert_eq!(cfg_eps(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_eps(&c, &u, 0.0).unwrap(), u);
        assert!(cfg_eps(&c, &u, 10.0).unwrap().data().iter().all(|&v| v == 10.0));
    }
}
