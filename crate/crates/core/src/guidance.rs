//! Spatial-marginal-mean descriptors, guidance losses, low-frequency
//! initialization and the guided generation loops.

use ndgrad::{Adam, Grid, Real, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, Denoiser, Depth, SpaceTimeFeature};
use crate::diffusion::{check_finite, ddim_invert, ddim_sample, ddim_step, guided_eps, q_sample, NoiseSchedule};
use crate::error::{config_err, Error, Result};
use crate::video::VideoTensor;

/// Per-frame spatial mean of a tapped feature, `[F, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmmDescriptor<T> {
    pub values: Grid<T>,
    pub step: usize,
}

/// `[F, F, D]` differences with entry `(i, j)` equal to `phi_i - phi_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseDiff<T> {
    pub values: Grid<T>,
}

fn shape_mismatch<T>(what: &str, a: &[usize], b: &[usize]) -> Result<T> {
    Err(Error::Data(format!("{what}: shapes {a:?} and {b:?} differ")))
}

/// Mean over the two spatial axes of a `[F, M, N, D]` grid.
pub fn spatial_mean<T: Real>(f: &Grid<T>) -> Result<Grid<T>> {
    let &[frames, m, n, d] = f.shape() else {
        return Err(Error::Data(format!("feature must be [F, M, N, D], got {:?}", f.shape())));
    };
    let mut out = vec![T::zero(); frames * d];
    let src = f.data();
    for fi in 0..frames {
        let acc = &mut out[fi * d..(fi + 1) * d];
        for px in src[fi * m * n * d..(fi + 1) * m * n * d].chunks_exact(d) {
            acc.iter_mut().zip(px).for_each(|(a, &v)| *a += v);
        }
        let inv = T::one() / T::from_usize(m * n);
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    Ok(Grid::from_vec(&[frames, d], out)?)
}

pub fn smm<T: Real>(f: &SpaceTimeFeature<T>) -> Result<SmmDescriptor<T>> {
    Ok(SmmDescriptor {
        values: spatial_mean(&f.values)?,
        step: f.step,
    })
}

pub fn pairwise_diffs<T: Real>(phi: &SmmDescriptor<T>) -> Result<PairwiseDiff<T>> {
    let &[frames, d] = phi.values.shape() else {
        return Err(Error::Data(format!("descriptor must be [F, D], got {:?}", phi.values.shape())));
    };
    if frames < 2 {
        return Err(Error::Data(format!("pairwise differences need at least 2 frames, got {frames}")));
    }
    let v = phi.values.data();
    let mut out = Vec::with_capacity(frames * frames * d);
    for i in 0..frames {
        for j in 0..frames {
            out.extend((0..d).map(|k| v[i * d + k] - v[j * d + k]));
        }
    }
    Ok(PairwiseDiff {
        values: Grid::from_vec(&[frames, frames, d], out)?,
    })
}

fn sq_dist<T: Real>(a: &Grid<T>, b: &Grid<T>, what: &str) -> Result<f64> {
    if a.shape() != b.shape() {
        return shape_mismatch(what, a.shape(), b.shape());
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum())
}

/// Sum over ordered frame pairs of the squared difference between source and
/// generated pairwise SMM differences.
pub fn smm_diff_loss<T: Real>(src: &PairwiseDiff<T>, gen: &PairwiseDiff<T>) -> Result<f64> {
    sq_dist(&src.values, &gen.values, "smm_diff_loss")
}

/// Squared distance between two features (or two descriptors).
pub fn feature_recon_loss<T: Real>(src: &Grid<T>, gen: &Grid<T>) -> Result<f64> {
    sq_dist(src, gen, "feature_recon_loss")
}

fn check_factor(shape: &[usize], xi: usize) -> Result<()> {
    let &[_, h, w, _] = shape else {
        return Err(Error::Data(format!("expected [F, H, W, C], got {shape:?}")));
    };
    if xi == 0 || h % xi != 0 || w % xi != 0 {
        return config_err(format!("LF factor {xi} does not divide {h}x{w}"));
    }
    Ok(())
}

/// Average-pool every frame by `xi`, then nearest-upsample back.
///
/// Block means are accumulated as offsets from the block's first element, so
/// a constant block maps to itself exactly and the filter is idempotent.
pub fn lf_filter<T: Real>(x: &Grid<T>, xi: usize) -> Result<Grid<T>> {
    check_factor(x.shape(), xi)?;
    if xi == 1 {
        return Ok(x.clone());
    }
    let &[frames, h, w, c] = x.shape() else { unreachable!() };
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    let inv = T::one() / T::from_usize(xi * xi);
    let idx = |f: usize, y: usize, xx: usize| ((f * h + y) * w + xx) * c;
    let mut acc = vec![T::zero(); c];
    for f in 0..frames {
        for by in (0..h).step_by(xi) {
            for bx in (0..w).step_by(xi) {
                let first = &src[idx(f, by, bx)..][..c];
                acc.iter_mut().for_each(|a| *a = T::zero());
                for y in by..by + xi {
                    for xx in bx..bx + xi {
                        let px = &src[idx(f, y, xx)..][..c];
                        for ((a, &v), &v0) in acc.iter_mut().zip(px).zip(first) {
                            *a += v - v0;
                        }
                    }
                }
                for y in by..by + xi {
                    for xx in bx..bx + xi {
                        let o = idx(f, y, xx);
                        for ch in 0..c {
                            out[o + ch] = first[ch] + acc[ch] * inv;
                        }
                    }
                }
            }
        }
    }
    Ok(Grid::from_vec(x.shape(), out)?)
}

/// `LF(x_T) + (eps0 - LF(eps0))`: low band from the inverted noise, high band fresh.
pub fn low_freq_init<T: Real>(x_t: &Grid<T>, eps0: &Grid<T>, xi: usize) -> Result<Grid<T>> {
    if x_t.shape() != eps0.shape() {
        return shape_mismatch("low_freq_init", x_t.shape(), eps0.shape());
    }
    let lx = lf_filter(x_t, xi)?;
    let le = lf_filter(eps0, xi)?;
    let high = eps0.zip_map(&le, |e, l| e - l)?;
    Ok(lx.zip_map(&high, |a, b| a + b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    PairwiseSmm,
    SmmRecon,
    FullFeatureRecon,
}

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pairwise_smm" => Some(Self::PairwiseSmm),
            "smm_recon" => Some(Self::SmmRecon),
            "full_feature_recon" => Some(Self::FullFeatureRecon),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::PairwiseSmm => "pairwise_smm",
            Self::SmmRecon => "smm_recon",
            Self::FullFeatureRecon => "full_feature_recon",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant(f64),
    /// Linear decay from the first value to the second over the optimization steps.
    Linear(f64, f64),
}

impl LrSchedule {
    pub fn at(self, k: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::Linear(a, b) => {
                if steps <= 1 {
                    a
                } else {
                    a + (b - a) * k as f64 / (steps - 1) as f64
                }
            }
        }
    }
}

/// Which prompt conditions a feature extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptChoice {
    Null,
    /// The prompt of the branch (target prompt when generating, source class when inverting).
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub xi: usize,
    pub n_denoise_steps: usize,
    pub guidance_window: usize,
    pub opt_steps: usize,
    pub lr: LrSchedule,
    pub cfg_scale: f64,
    pub tap: String,
    pub loss: LossKind,
    pub inversion_steps: usize,
    /// Low-frequency initialization from the inverted noise; fresh noise otherwise.
    pub lf_init: bool,
    /// Prompt used for generated-branch features during the inner optimization.
    pub gen_features: PromptChoice,
    /// Prompt used for DDIM inversion of the source.
    pub inversion_prompt: PromptChoice,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            xi: 4,
            n_denoise_steps: 50,
            guidance_window: 20,
            opt_steps: 30,
            lr: LrSchedule::Constant(0.01),
            cfg_scale: 10.0,
            tap: crate::denoiser::TAP_LAYER.into(),
            loss: LossKind::PairwiseSmm,
            inversion_steps: 1000,
            lf_init: true,
            gen_features: PromptChoice::Prompt,
            inversion_prompt: PromptChoice::Null,
        }
    }
}

impl GuidanceConfig {
    /// Shorter inner optimization with a decaying learning rate.
    pub fn decay_preset() -> Self {
        Self {
            opt_steps: 10,
            lr: LrSchedule::Linear(0.005, 0.002),
            ..Self::default()
        }
    }

    /// Reconstruction guidance at every denoising step, starting from fresh noise.
    pub fn feature_inversion_preset(loss: LossKind) -> Self {
        Self {
            guidance_window: 50,
            loss,
            inversion_steps: 50,
            lf_init: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, model: &Denoiser<impl Real>, sched: &NoiseSchedule) -> Result<()> {
        let c = model.config();
        if self.guidance_window > self.n_denoise_steps {
            return config_err(format!(
                "guidance window {} exceeds {} denoising steps",
                self.guidance_window, self.n_denoise_steps
            ));
        }
        if self.xi == 0 || !c.height.is_multiple_of(self.xi) || !c.width.is_multiple_of(self.xi) {
            return config_err(format!("LF factor {} does not divide {}x{}", self.xi, c.height, c.width));
        }
        if self.tap != crate::denoiser::TAP_LAYER {
            return config_err(format!("unknown feature tap {:?}", self.tap));
        }
        if !(self.cfg_scale.is_finite()) {
            return config_err("cfg scale must be finite");
        }
        let lr_ok = match self.lr {
            LrSchedule::Constant(a) => a >= 0.0,
            LrSchedule::Linear(a, b) => a >= 0.0 && b >= 0.0,
        };
        if !lr_ok {
            return config_err("learning rates must be nonnegative");
        }
        sched.step_grid(self.n_denoise_steps)?;
        sched.step_grid(self.inversion_steps)?;
        let (n, m) = (self.n_denoise_steps, self.inversion_steps);
        if m % n != 0 {
            return config_err(format!(
                "sampling grid of {n} steps is not contained in the {m}-step inversion grid"
            ));
        }
        Ok(())
    }
}

/// Per-step guidance target recorded from the source trajectory.
#[derive(Debug, Clone)]
pub struct StepTarget<T> {
    pub t: usize,
    pub features: Grid<T>,
    pub smm: Grid<T>,
    pub pairwise: Grid<T>,
}

/// Everything taken from the source video: its trajectory end point and per-step targets.
#[derive(Debug, Clone)]
pub struct SourceGuide<T> {
    pub x_t: Grid<T>,
    pub targets: Vec<StepTarget<T>>,
    pub source: Grid<T>,
}

impl<T: Real> SourceGuide<T> {
    pub fn target_at(&self, t: usize) -> Option<&StepTarget<T>> {
        self.targets.iter().find(|s| s.t == t)
    }
}

fn target_from_feature<T: Real>(t: usize, features: Grid<T>) -> Result<StepTarget<T>> {
    let smm = spatial_mean(&features)?;
    let pairwise = pairwise_diffs(&SmmDescriptor { values: smm.clone(), step: t })?.values;
    Ok(StepTarget {
        t,
        features,
        smm,
        pairwise,
    })
}

/// Inverts `video` and records targets at the first `guidance_window` steps
/// of the sampling grid. Source features always use the NULL condition.
pub fn prepare_source<T: Real>(
    model: &Denoiser<T>,
    sched: &NoiseSchedule,
    video: &VideoTensor,
    source_class: Option<usize>,
    cfg: &GuidanceConfig,
) -> Result<SourceGuide<T>> {
    cfg.validate(model, sched)?;
    let x0: Grid<T> = video.to_latent();
    if x0.shape() != model.config().input_shape() {
        return Err(Error::Data(format!(
            "video {:?} does not match the model input {:?}",
            x0.shape(),
            model.config().input_shape()
        )));
    }
    let inv_cond = match (cfg.inversion_prompt, source_class) {
        (PromptChoice::Prompt, Some(k)) => Condition::Class(k),
        (PromptChoice::Prompt, None) => return config_err("inversion with the source prompt needs a source class"),
        (PromptChoice::Null, _) => Condition::Null,
    };
    let traj = ddim_invert(model, sched, &x0, inv_cond, cfg.inversion_steps)?;
    let grid = sched.step_grid(cfg.n_denoise_steps)?;
    let mut targets = Vec::with_capacity(cfg.guidance_window);
    for &t in grid.iter().take(cfg.guidance_window) {
        let x = traj
            .at(t)
            .ok_or_else(|| Error::Config(format!("inversion trajectory has no latent at step {t}")))?;
        let f = model.features(x, t, Condition::Null)?;
        targets.push(target_from_feature(t, f.values)?);
    }
    Ok(SourceGuide {
        x_t: traj.last().expect("nonempty trajectory").clone(),
        targets,
        source: x0,
    })
}

/// Reconstruction targets for feature inversion, taken from the NULL-prompt
/// DDIM trajectory of `video`.
pub fn inversion_targets<T: Real>(
    model: &Denoiser<T>,
    sched: &NoiseSchedule,
    video: &VideoTensor,
    cfg: &GuidanceConfig,
) -> Result<Vec<StepTarget<T>>> {
    Ok(prepare_source(model, sched, video, None, cfg)?.targets)
}

/// Guidance objective on the tape for the generated latent `x`.
fn guidance_loss<T: Real>(
    model: &Denoiser<T>,
    tape: &mut Tape<T>,
    p: &[Var],
    x: Var,
    t: usize,
    cond: Condition,
    kind: LossKind,
    target: &StepTarget<T>,
) -> Result<Var> {
    let out = model.forward_on_tape(tape, p, x, t, cond, Depth::Tap)?;
    let (gen, want) = match kind {
        LossKind::FullFeatureRecon => (out.features, &target.features),
        LossKind::SmmRecon => (tape.mean_over_axes(out.features, &[1, 2])?, &target.smm),
        LossKind::PairwiseSmm => {
            let phi = tape.mean_over_axes(out.features, &[1, 2])?;
            (tape.pairwise_diff(phi)?, &target.pairwise)
        }
    };
    if tape.shape(gen)? != want.shape() {
        return shape_mismatch("guidance target", tape.shape(gen)?, want.shape());
    }
    let want = tape.constant(want.clone());
    let d = tape.sub(gen, want)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.sum(sq)?)
}

/// Loss value and gradient with respect to the latent.
pub fn loss_and_grad<T: Real>(
    model: &Denoiser<T>,
    x: &Grid<T>,
    t: usize,
    cond: Condition,
    kind: LossKind,
    target: &StepTarget<T>,
) -> Result<(f64, Grid<T>)> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let xv = tape.leaf(x.clone(), true);
    let loss = guidance_loss(model, &mut tape, &p, xv, t, cond, kind, target)?;
    let value = tape.value(loss)?.data()[0].as_f64();
    let mut g = tape.backward(loss)?;
    let grad = g.take(xv).unwrap_or_else(|| x.zeros_like());
    Ok((value, grad))
}

/// Loss value only.
pub fn loss_value<T: Real>(
    model: &Denoiser<T>,
    x: &Grid<T>,
    t: usize,
    cond: Condition,
    kind: LossKind,
    target: &StepTarget<T>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let loss = guidance_loss(model, &mut tape, &p, xv, t, cond, kind, target)?;
    Ok(tape.value(loss)?.data()[0].as_f64())
}

/// Objective before and after the inner optimization at one denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub index: usize,
    pub t: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone)]
pub struct GuidedOutcome {
    pub video: VideoTensor,
    pub losses: Vec<StepLoss>,
}

/// Runs the inner Adam optimization on `x` at step `t`.
fn optimize_latent<T: Real>(
    model: &Denoiser<T>,
    x: &mut Grid<T>,
    t: usize,
    index: usize,
    cond: Condition,
    cfg: &GuidanceConfig,
    target: &StepTarget<T>,
) -> Result<StepLoss> {
    let mut opt = Adam::new(&[&*x]);
    let mut before = f64::NAN;
    for k in 0..cfg.opt_steps {
        let (value, grad) = loss_and_grad(model, x, t, cond, cfg.loss, target)?;
        if !value.is_finite() || !grad.is_finite() {
            return Err(Error::Numeric {
                step: index,
                msg: format!("guidance loss or gradient not finite at optimization step {k}"),
            });
        }
        if k == 0 {
            before = value;
        }
        opt.step(&mut [x], &[Some(&grad)], cfg.lr.at(k, cfg.opt_steps))?;
    }
    check_finite(x, index, "guided latent")?;
    let after = loss_value(model, x, t, cond, cfg.loss, target)?;
    Ok(StepLoss {
        index,
        t,
        before: if before.is_nan() { after } else { before },
        after,
    })
}

/// Guided DDIM sampling from `x_start`: optimization within the window, then a
/// classifier-free denoising step with `prompt`.
pub fn guided_sample<T: Real>(
    model: &Denoiser<T>,
    sched: &NoiseSchedule,
    x_start: Grid<T>,
    targets: &[StepTarget<T>],
    prompt: Condition,
    cfg: &GuidanceConfig,
) -> Result<GuidedOutcome> {
    let grid = sched.step_grid(cfg.n_denoise_steps)?;
    let feat_cond = match cfg.gen_features {
        PromptChoice::Prompt => prompt,
        PromptChoice::Null => Condition::Null,
    };
    let mut x = x_start;
    let mut losses = Vec::new();
    for (i, &t) in grid.iter().enumerate() {
        if i < cfg.guidance_window && cfg.opt_steps > 0 {
            let target = targets.iter().find(|s| s.t == t).ok_or_else(|| {
                Error::Config(format!("no guidance target recorded for step {t}; step grids differ"))
            })?;
            losses.push(optimize_latent(model, &mut x, t, i, feat_cond, cfg, target)?);
        }
        let t_prev = grid.get(i + 1).copied().unwrap_or(0);
        let eps = guided_eps(model, &x, t, prompt, cfg.cfg_scale)?;
        x = ddim_step(sched, &x, &eps, t, t_prev)?;
        check_finite(&x, i, "sampling latent")?;
    }
    Ok(GuidedOutcome {
        video: VideoTensor::from_latent(&x)?,
        losses,
    })
}

/// Unit Gaussian noise of the model's input shape.
pub fn seeded_noise<T: Real>(shape: &[usize], seed: u64) -> Result<Grid<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Grid::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::from_f64(v)
    })?)
}

/// Eq.-1 style feature inversion: reconstruct targets from seed noise.
pub fn feature_inversion<T: Real>(
    model: &Denoiser<T>,
    sched: &NoiseSchedule,
    targets: &[StepTarget<T>],
    prompt: Condition,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<GuidedOutcome> {
    cfg.validate(model, sched)?;
    let grid = sched.step_grid(cfg.n_denoise_steps)?;
    for &t in grid.iter().take(cfg.guidance_window) {
        if !targets.iter().any(|s| s.t == t) {
            return config_err(format!("targets lack step {t} of the sampling grid"));
        }
    }
    let x = seeded_noise(&model.config().input_shape(), seed)?;
    guided_sample(model, sched, x, targets, prompt, cfg)
}

/// Starting latent for generation: low-frequency initialization or fresh noise.
pub fn initial_latent<T: Real>(source: &SourceGuide<T>, cfg: &GuidanceConfig, seed: u64) -> Result<Grid<T>> {
    let eps0 = seeded_noise(source.x_t.shape(), seed)?;
    if cfg.lf_init {
        low_freq_init(&source.x_t, &eps0, cfg.xi)
    } else {
        Ok(eps0)
    }
}

/// Motion-guided generation from a prepared source.
pub fn transfer_from_source<T: Real>(
    model: &Denoiser<T>,
    sched: &NoiseSchedule,
    source: &SourceGuide<T>,
    prompt: Condition,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<GuidedOutcome> {
    cfg.validate(model, sched)?;
    let x = initial_latent(source, cfg, seed)?;
    guided_sample(model, sched, x, &source.targets, prompt, cfg)
}

/// Inverts `video`, then generates under `prompt` while matching its motion.
pub fn motion_transfer<T: Real>(
    model: &Denoiser<T>,
    sched: &NoiseSchedule,
    video: &VideoTensor,
    source_class: Option<usize>,
    prompt: Condition,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<GuidedOutcome> {
    let source = prepare_source(model, sched, video, source_class, cfg)?;
    transfer_from_source(model, sched, &source, prompt, cfg, seed)
}

/// Unguided baseline: noise the source to `strength * T` and denoise with `prompt`.
pub fn sdedit<T: Real>(
    model: &Denoiser<T>,
    sched: &NoiseSchedule,
    video: &VideoTensor,
    prompt: Condition,
    strength: f64,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<VideoTensor> {
    if !(0.0..=1.0).contains(&strength) {
        return config_err(format!("strength {strength} outside [0, 1]"));
    }
    let grid = sched.step_grid(cfg.n_denoise_steps)?;
    let skip = ((1.0 - strength) * cfg.n_denoise_steps as f64).floor() as usize;
    if skip >= grid.len() {
        return Ok(video.clone());
    }
    let x0: Grid<T> = video.to_latent();
    let eps = seeded_noise(x0.shape(), seed)?;
    let x = q_sample(sched, &x0, grid[skip], &eps)?;
    let (out, _) = ddim_sample(model, sched, &x, &grid[skip..], prompt, cfg.cfg_scale, false)?;
    VideoTensor::from_latent(&out)
}

/// Ablation variants of the guided generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    RandomInit,
    NoOpt,
    FullFeature,
    Sdedit,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::RandomInit,
        Variant::NoOpt,
        Variant::FullFeature,
        Variant::Sdedit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::RandomInit => "random_init",
            Variant::NoOpt => "no_opt",
            Variant::FullFeature => "full_feature",
            Variant::Sdedit => "sdedit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// The guidance configuration this variant runs with.
    pub fn config(self, base: &GuidanceConfig) -> GuidanceConfig {
        let mut c = base.clone();
        match self {
            Variant::Full | Variant::Sdedit => {}
            Variant::RandomInit => c.lf_init = false,
            Variant::NoOpt => c.opt_steps = 0,
            Variant::FullFeature => c.loss = LossKind::FullFeatureRecon,
        }
        c
    }
}

pub const DEFAULT_SDEDIT_STRENGTH: f64 = 0.75;

/// Runs one ablation variant on a prepared source.
pub fn run_variant<T: Real>(
    model: &Denoiser<T>,
    sched: &NoiseSchedule,
    source_video: &VideoTensor,
    source: &SourceGuide<T>,
    prompt: Condition,
    variant: Variant,
    base: &GuidanceConfig,
    seed: u64,
) -> Result<VideoTensor> {
    let cfg = variant.config(base);
    match variant {
        Variant::Sdedit => sdedit(model, sched, source_video, prompt, DEFAULT_SDEDIT_STRENGTH, &cfg, seed),
        _ => Ok(transfer_from_source(model, sched, source, prompt, &cfg, seed)?.video),
    }
}
