//! Class-conditioned space-time UNet noise predictor.
//!
//! Layout for the default two-stage configuration (`w0 = base`, `w1 = 2 base`):
//!
//! ```text
//! x ++ xy-coords -> conv_in(w0)
//! enc0 @H    : res(w0 -> w0) + temporal           (skip s0)   avg-pool
//! enc1 @H/2  : res(w0 -> w1) + temporal           (skip s1)   avg-pool
//! mid  @H/4  : res(w1 -> w1) + temporal + attention
//! dec0 @H/4  : res(w1 -> w1) + temporal + attention           upsample
//! dec1 @H/2  : res(s1 ++ h -> w1) + temporal                  upsample  <- feature tap
//! dec2 @H    : res(s0 ++ h -> w0) + temporal
//! out        : norm, silu, conv(w0 -> C)
//! ```
//!
//! With the velocity head (on by default) the output conv predicts `v = sqrt(ab) eps - sqrt(1 - ab) x0`
//! and the model returns `eps = sqrt(ab) v + sqrt(1 - ab) x_t`. The ε-output
//! then passes `x_t` through exactly at high noise, where a plain ε-head would
//! have to reproduce its input to within `sqrt(ab)` to carry any signal.
//!
//! Spatial layers act on each frame independently; temporal layers mix frames
//! at each spatial location. Every residual block receives the sum of a
//! sinusoidal timestep embedding and the class embedding.

use ndgrad::{Grid, Real, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{EpsModel, NoiseSchedule, ScheduleParams};
use crate::error::{config_err, Error, Result};

/// Prompt stand-in: a shape class or the reserved unconditional entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Null,
}

impl Condition {
    pub fn parse(s: &str) -> Option<Self> {
        if s.eq_ignore_ascii_case("null") || s.is_empty() {
            return Some(Condition::Null);
        }
        if let Ok(i) = s.parse::<usize>() {
            return Some(Condition::Class(i));
        }
        crate::synthvid::ShapeKind::parse(s).map(|k| Condition::Class(k.class_id()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub base_width: usize,
    /// Width multiplier per encoder level; its length is the number of down stages.
    pub channel_mult: Vec<usize>,
    /// Temporal attention per resolution level, `stages + 1` entries (last = coarsest).
    pub attention: Vec<bool>,
    pub num_classes: usize,
    pub time_dim: usize,
    pub norm_groups: usize,
    /// Appends normalized x/y coordinate channels to the input.
    pub coord_channels: bool,
    /// Decoder block whose upsampler output is exposed as the feature tap.
    pub tap_block: usize,
    /// Low-frequency factor the spatial size must be divisible by.
    pub lf_factor: usize,
    /// Schedule of the velocity head; `None` reads the output conv as ε directly.
    #[serde(default)]
    pub velocity_head: Option<ScheduleParams>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            channels: 3,
            base_width: 16,
            channel_mult: vec![1, 2],
            attention: vec![false, false, true],
            num_classes: 3,
            time_dim: 64,
            norm_groups: 4,
            coord_channels: true,
            tap_block: 1,
            lf_factor: 4,
            velocity_head: Some(ScheduleParams::default()),
        }
    }
}

impl DenoiserConfig {
    pub fn stages(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s == 0 {
            return config_err("need at least one down stage");
        }
        let div = 1usize << s;
        if !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) {
            return config_err(format!("spatial size {}x{} not divisible by 2^{s}", self.height, self.width));
        }
        if self.lf_factor == 0 || !self.height.is_multiple_of(self.lf_factor) || !self.width.is_multiple_of(self.lf_factor) {
            return config_err(format!("spatial size not divisible by LF factor {}", self.lf_factor));
        }
        if self.num_classes < 2 {
            return config_err("need at least two classes");
        }
        if self.attention.len() != s + 1 {
            return config_err(format!("attention flags need {} entries", s + 1));
        }
        if self.tap_block >= s {
            return config_err(format!("tap block {} has no upsampler (only {s} do)", self.tap_block));
        }
        if !self.time_dim.is_multiple_of(2) || self.frames == 0 || self.channels == 0 {
            return config_err("time_dim must be even and extents positive");
        }
        for w in self.widths() {
            if w % self.norm_groups != 0 {
                return config_err(format!("{} groups do not divide width {w}", self.norm_groups));
            }
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        self.channel_mult.iter().map(|m| m * self.base_width).collect()
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    /// `(height, width, channels)` of the tapped feature.
    pub fn tap_shape(&self) -> [usize; 3] {
        let level = self.stages() - self.tap_block - 1;
        let w = self.widths();
        [self.height >> level, self.width >> level, w[level + 1]]
    }

    /// The smallest configuration that still exercises every layer kind.
    pub fn tiny(frames: usize, size: usize) -> Self {
        Self {
            frames,
            height: size,
            width: size,
            channels: 2,
            base_width: 4,
            channel_mult: vec![1, 2],
            attention: vec![false, false, true],
            num_classes: 2,
            time_dim: 8,
            norm_groups: 2,
            coord_channels: true,
            tap_block: 1,
            lf_factor: 2,
            velocity_head: Some(ScheduleParams::default()),
        }
    }
}

/// Named, ordered parameter grids.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub grids: Vec<Grid<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.grids.iter().map(|g| g.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            grids: self.grids.iter().map(|g| g.cast()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Fan(usize),
    Zeros,
    Ones,
}

struct Builder<'a, T> {
    params: ParamSet<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let grid = match init {
            Init::Zeros => Grid::zeros(shape),
            Init::Ones => Grid::full(shape, T::one()),
            Init::Fan(fan_in) => {
                let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("finite std");
                let rng = &mut *self.rng;
                Grid::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
            }
        }
        .expect("layer shapes are positive");
        self.params.names.push(name);
        self.params.grids.push(grid);
        self.params.grids.len() - 1
    }
}

#[derive(Debug, Clone)]
struct Conv {
    w: usize,
    b: usize,
}

impl Conv {
    fn new<T: Real>(b: &mut Builder<T>, name: &str, k: usize, cin: usize, cout: usize, init: Init) -> Self {
        let init = match init {
            Init::Fan(_) => Init::Fan(k * k * cin),
            other => other,
        };
        Self {
            w: b.add(format!("{name}.weight"), &[k, k, cin, cout], init),
            b: b.add(format!("{name}.bias"), &[cout], Init::Zeros),
        }
    }

    fn apply<T: Real>(&self, t: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        Ok(t.conv2d(x, p[self.w], p[self.b])?)
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn new<T: Real>(b: &mut Builder<T>, name: &str, din: usize, dout: usize) -> Self {
        Self {
            w: b.add(format!("{name}.weight"), &[din, dout], Init::Fan(din)),
            b: b.add(format!("{name}.bias"), &[dout], Init::Zeros),
        }
    }

    fn apply<T: Real>(&self, t: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        Ok(t.linear(x, p[self.w], Some(p[self.b]))?)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

impl Norm {
    fn new<T: Real>(b: &mut Builder<T>, name: &str, c: usize, groups: usize) -> Self {
        Self {
            gamma: b.add(format!("{name}.gamma"), &[c], Init::Ones),
            beta: b.add(format!("{name}.beta"), &[c], Init::Zeros),
            groups,
        }
    }

    fn apply<T: Real>(&self, t: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        Ok(t.group_norm(x, p[self.gamma], p[self.beta], self.groups)?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
    cout: usize,
}

impl ResBlock {
    fn new<T: Real>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, cfg: &DenoiserConfig) -> Self {
        Self {
            norm1: Norm::new(b, &format!("{name}.norm1"), cin, cfg.norm_groups),
            conv1: Conv::new(b, &format!("{name}.conv1"), 3, cin, cout, Init::Fan(0)),
            time: Linear::new(b, &format!("{name}.time"), cfg.time_dim, cout),
            norm2: Norm::new(b, &format!("{name}.norm2"), cout, cfg.norm_groups),
            conv2: Conv::new(b, &format!("{name}.conv2"), 3, cout, cout, Init::Fan(0)),
            skip: (cin != cout).then(|| Conv::new(b, &format!("{name}.skip"), 1, cin, cout, Init::Fan(0))),
            cout,
        }
    }

    fn apply<T: Real>(&self, t: &mut Tape<T>, p: &[Var], x: Var, emb: Var) -> Result<Var> {
        let h = self.norm1.apply(t, p, x)?;
        let h = t.silu(h)?;
        let h = self.conv1.apply(t, p, h)?;
        let te = self.time.apply(t, p, emb)?;
        let te = t.reshape(te, &[self.cout])?;
        let h = t.add_bias(h, te)?;
        let h = self.norm2.apply(t, p, h)?;
        let h = t.silu(h)?;
        let h = self.conv2.apply(t, p, h)?;
        let s = match &self.skip {
            Some(c) => c.apply(t, p, x)?,
            None => x,
        };
        Ok(t.add(h, s)?)
    }
}

#[derive(Debug, Clone)]
struct TemporalBlock {
    norm: Norm,
    w: usize,
}

impl TemporalBlock {
    fn new<T: Real>(b: &mut Builder<T>, name: &str, c: usize, groups: usize) -> Self {
        Self {
            norm: Norm::new(b, &format!("{name}.norm"), c, groups),
            w: b.add(format!("{name}.weight"), &[3, c, c], Init::Fan(3 * c)),
        }
    }

    fn apply<T: Real>(&self, t: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.norm.apply(t, p, x)?;
        let h = t.silu(h)?;
        let h = t.temporal_conv(h, p[self.w])?;
        Ok(t.add(x, h)?)
    }
}

#[derive(Debug, Clone)]
struct AttnBlock {
    norm: Norm,
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

impl AttnBlock {
    fn new<T: Real>(b: &mut Builder<T>, name: &str, c: usize, groups: usize) -> Self {
        Self {
            norm: Norm::new(b, &format!("{name}.norm"), c, groups),
            q: b.add(format!("{name}.q"), &[c, c], Init::Fan(c)),
            k: b.add(format!("{name}.k"), &[c, c], Init::Fan(c)),
            v: b.add(format!("{name}.v"), &[c, c], Init::Fan(c)),
            o: b.add(format!("{name}.o"), &[c, c], Init::Fan(c)),
        }
    }

    fn apply<T: Real>(&self, t: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.norm.apply(t, p, x)?;
        let h = t.temporal_self_attention(h, p[self.q], p[self.k], p[self.v], p[self.o])?;
        Ok(t.add(x, h)?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    res: ResBlock,
    temporal: TemporalBlock,
    attn: Option<AttnBlock>,
}

impl Level {
    fn new<T: Real>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, attn: bool, cfg: &DenoiserConfig) -> Self {
        Self {
            res: ResBlock::new(b, &format!("{name}.res"), cin, cout, cfg),
            temporal: TemporalBlock::new(b, &format!("{name}.temporal"), cout, cfg.norm_groups),
            attn: attn.then(|| AttnBlock::new(b, &format!("{name}.attn"), cout, cfg.norm_groups)),
        }
    }

    fn apply<T: Real>(&self, t: &mut Tape<T>, p: &[Var], x: Var, emb: Var) -> Result<Var> {
        let h = self.res.apply(t, p, x, emb)?;
        let h = self.temporal.apply(t, p, h)?;
        match &self.attn {
            Some(a) => a.apply(t, p, h),
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    conv_in: Conv,
    time1: Linear,
    time2: Linear,
    class_table: usize,
    encoder: Vec<Level>,
    mid: Level,
    decoder: Vec<Level>,
    upsamplers: Vec<Conv>,
    out_norm: Norm,
    out_conv: Conv,
}

/// Which part of the network to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    /// Stop right after the feature tap.
    Tap,
    Full,
}

/// Handles produced by [`Denoiser::forward_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub eps: Option<Var>,
    pub features: Var,
}

/// Tapped activation `F x M x N x D` at diffusion step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeFeature<T> {
    pub values: Grid<T>,
    pub layer: String,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    config: DenoiserConfig,
    pub params: ParamSet<T>,
    layout: Layout,
    head: Option<NoiseSchedule>,
    /// Optimizer steps the weights have seen (0 = freshly initialized).
    pub train_steps: u64,
}

pub const TAP_LAYER: &str = "decoder.1.upsample";

impl<T: Real> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let head = config.velocity_head.map(NoiseSchedule::new).transpose()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamSet {
                names: Vec::new(),
                grids: Vec::new(),
            },
            rng: &mut rng,
        };
        let cfg = &config;
        let widths = cfg.widths();
        let s = cfg.stages();
        let g = cfg.norm_groups;
        let e = cfg.time_dim;
        let cin = cfg.channels + if cfg.coord_channels { 2 } else { 0 };
        let conv_in = Conv::new(&mut b, "conv_in", 3, cin, widths[0], Init::Fan(0));
        let time1 = Linear::new(&mut b, "time.fc1", e, e);
        let time2 = Linear::new(&mut b, "time.fc2", e, e);
        let class_table = b.add("class_embedding".into(), &[cfg.num_classes + 1, e], Init::Fan(1));
        let mut encoder = Vec::with_capacity(s);
        let mut prev = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            encoder.push(Level::new(&mut b, &format!("encoder.{l}"), prev, w, cfg.attention[l], cfg));
            prev = w;
        }
        let mid = Level::new(&mut b, "mid", prev, prev, cfg.attention[s], cfg);
        let mut decoder = Vec::with_capacity(s + 1);
        let mut upsamplers = Vec::with_capacity(s);
        for d in 0..=s {
            let level = s - d;
            let out_w = if level == s { prev } else { widths[level] };
            let in_w = if d == 0 { prev } else { prev + widths[level] };
            decoder.push(Level::new(&mut b, &format!("decoder.{d}"), in_w, out_w, cfg.attention[level], cfg));
            if d < s {
                upsamplers.push(Conv::new(&mut b, &format!("decoder.{d}.upsample"), 3, out_w, out_w, Init::Fan(0)));
            }
            prev = out_w;
        }
        let out_norm = Norm::new(&mut b, "out.norm", prev, g);
        let out_conv = Conv::new(&mut b, "out.conv", 3, prev, cfg.channels, Init::Fan(0));
        let params = b.params;
        Ok(Self {
            config,
            params,
            layout: Layout {
                conv_in,
                time1,
                time2,
                class_table,
                encoder,
                mid,
                decoder,
                upsamplers,
                out_norm,
                out_conv,
            },
            head,
            train_steps: 0,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: DenoiserConfig, params: ParamSet<T>, train_steps: u64) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.names != model.params.names {
            return Err(Error::Format("parameter names do not match the model layout".into()));
        }
        for (i, (a, b)) in params.grids.iter().zip(&model.params.grids).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    params.names[i],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        model.params = params;
        model.train_steps = train_steps;
        Ok(model)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            head: self.head.clone(),
            train_steps: self.train_steps,
        }
    }

    /// Places every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params.grids.iter().map(|g| tape.leaf(g.clone(), requires_grad)).collect()
    }

    fn coords(&self) -> Grid<T> {
        let c = &self.config;
        let (h, w) = (c.height, c.width);
        let mut data = Vec::with_capacity(c.frames * h * w * 2);
        for _ in 0..c.frames {
            for y in 0..h {
                for x in 0..w {
                    data.push(T::from_f64((x as f64 + 0.5) / w as f64 * 2.0 - 1.0));
                    data.push(T::from_f64((y as f64 + 0.5) / h as f64 * 2.0 - 1.0));
                }
            }
        }
        Grid::from_vec(&[c.frames, h, w, 2], data).expect("config validated")
    }

    fn embedding(&self, tape: &mut Tape<T>, p: &[Var], t: usize, cond: Condition) -> Result<Var> {
        let e = self.config.time_dim;
        let half = e / 2;
        let mut sinus = Vec::with_capacity(e);
        let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
        sinus.extend(freqs.iter().map(|f| T::from_f64((t as f64 * f).sin())));
        sinus.extend(freqs.iter().map(|f| T::from_f64((t as f64 * f).cos())));
        let sinus = tape.constant(Grid::from_vec(&[1, e], sinus)?);
        let l = &self.layout;
        let h = l.time1.apply(tape, p, sinus)?;
        let h = tape.silu(h)?;
        let h = l.time2.apply(tape, p, h)?;
        let row = match cond {
            Condition::Class(k) => k,
            Condition::Null => self.config.num_classes,
        };
        let class = tape.embed_row(p[l.class_table], row)?;
        let class = tape.reshape(class, &[1, e])?;
        let emb = tape.add(h, class)?;
        Ok(tape.silu(emb)?)
    }

    fn check_inputs(&self, x_shape: &[usize], t: usize, cond: Condition) -> Result<()> {
        if x_shape != self.config.input_shape() {
            return Err(Error::Data(format!(
                "input shape {x_shape:?} does not match model {:?}",
                self.config.input_shape()
            )));
        }
        if t == 0 {
            return config_err("diffusion step must be >= 1");
        }
        if let Some(h) = &self.head {
            if t > h.steps() {
                return config_err(format!("diffusion step {t} beyond the model's {} steps", h.steps()));
            }
        }
        if let Condition::Class(k) = cond {
            if k >= self.config.num_classes {
                return config_err(format!("class {k} out of range (model has {})", self.config.num_classes));
            }
        }
        Ok(())
    }

    /// Records the network on `tape` for input `x`, using bound parameters `p`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        t: usize,
        cond: Condition,
        depth: Depth,
    ) -> Result<ForwardVars> {
        self.check_inputs(tape.shape(x)?, t, cond)?;
        let l = &self.layout;
        let emb = self.embedding(tape, p, t, cond)?;
        let input = if self.config.coord_channels {
            let xy = tape.constant(self.coords());
            tape.concat_channels(x, xy)?
        } else {
            x
        };
        let mut h = l.conv_in.apply(tape, p, input)?;
        let mut skips = Vec::with_capacity(l.encoder.len());
        for level in &l.encoder {
            h = level.apply(tape, p, h, emb)?;
            skips.push(h);
            h = tape.avg_pool(h, 2)?;
        }
        h = l.mid.apply(tape, p, h, emb)?;
        let mut features = None;
        for (d, level) in l.decoder.iter().enumerate() {
            if d > 0 {
                let skip = skips.pop().expect("one skip per upsampled level");
                h = tape.concat_channels(skip, h)?;
            }
            h = level.apply(tape, p, h, emb)?;
            if let Some(up) = l.upsamplers.get(d) {
                h = tape.upsample_nearest(h, 2)?;
                h = up.apply(tape, p, h)?;
                if d == self.config.tap_block {
                    features = Some(h);
                    if depth == Depth::Tap {
                        return Ok(ForwardVars { eps: None, features: h });
                    }
                }
            }
        }
        let h = l.out_norm.apply(tape, p, h)?;
        let h = tape.silu(h)?;
        let mut eps = l.out_conv.apply(tape, p, h)?;
        if let Some(sched) = &self.head {
            let ab = sched.alphabar(t);
            let v = tape.scale(eps, T::from_f64(ab.sqrt()))?;
            let skip = tape.scale(x, T::from_f64((1.0 - ab).sqrt()))?;
            eps = tape.add(v, skip)?;
        }
        Ok(ForwardVars {
            eps: Some(eps),
            features: features.expect("tap block validated"),
        })
    }

    /// Noise prediction and tapped feature for `x_t`.
    pub fn forward(&self, x_t: &Grid<T>, t: usize, cond: Condition) -> Result<(Grid<T>, SpaceTimeFeature<T>)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let out = self.forward_on_tape(&mut tape, &p, x, t, cond, Depth::Full)?;
        let eps = tape.value(out.eps.expect("full depth"))?.clone();
        let features = SpaceTimeFeature {
            values: tape.value(out.features)?.clone(),
            layer: TAP_LAYER.into(),
            step: t,
        };
        Ok((eps, features))
    }

    /// Tapped feature only; skips the layers after the tap.
    pub fn features(&self, x_t: &Grid<T>, t: usize, cond: Condition) -> Result<SpaceTimeFeature<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let out = self.forward_on_tape(&mut tape, &p, x, t, cond, Depth::Tap)?;
        Ok(SpaceTimeFeature {
            values: tape.value(out.features)?.clone(),
            layer: TAP_LAYER.into(),
            step: t,
        })
    }

    /// Zeroes every parameter.
    pub fn zero_weights(&mut self) {
        for g in &mut self.params.grids {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.names.iter().position(|n| n == name)
    }
}

impl<T: Real> EpsModel<T> for Denoiser<T> {
    fn predict_eps(&self, x_t: &Grid<T>, t: usize, cond: Condition) -> Result<Grid<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let out = self.forward_on_tape(&mut tape, &p, x, t, cond, Depth::Full)?;
        Ok(tape.value(out.eps.expect("full depth"))?.clone())
    }

    fn is_trained(&self) -> bool {
        self.train_steps > 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_near_target_size() {
        let m = Denoiser::<f32>::new(DenoiserConfig::default(), 0).unwrap();
        let n = m.params.numel();
        assert!((100_000..300_000).contains(&n), "{n} parameters");
        assert_eq!(DenoiserConfig::default().tap_shape(), [32, 32, 32]);
    }

    #[test]
    fn config_validation() {
        let mut c = DenoiserConfig::default();
        c.height = 30;
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::default();
        c.num_classes = 1;
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::default();
        c.lf_factor = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn condition_parsing() {
        assert_eq!(Condition::parse("circle"), Some(Condition::Class(1)));
        assert_eq!(Condition::parse("null"), Some(Condition::Null));
        assert_eq!(Condition::parse("2"), Some(Condition::Class(2)));
        assert_eq!(Condition::parse("hexagon"), None);
    }
}
