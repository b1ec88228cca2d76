use ndgrad::{softmax_rows, Adam, Grid, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::ParamSet;
use crate::error::{config_err, Error, Result};
use crate::video::VideoTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub width: usize,
    pub steps: usize,
    /// Frames per optimization step.
    pub batch: usize,
    pub lr: f64,
    /// Largest standard deviation of the Gaussian noise added to training frames.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            channels: 3,
            width: 8,
            steps: 1500,
            batch: 32,
            lr: 3e-3,
            noise: 0.15,
            seed: 0,
        }
    }
}

/// Small per-frame convolutional shape classifier.
#[derive(Debug, Clone)]
pub struct Probe {
    pub config: ProbeConfig,
    pub params: ParamSet<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeTrainLog {
    pub losses: Vec<f64>,
}

impl Probe {
    pub fn new(config: ProbeConfig) -> Result<Self> {
        if config.num_classes < 2 || config.width == 0 || config.channels == 0 {
            return config_err("probe needs at least two classes and positive widths");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (c, w, k) = (config.channels, config.width, config.num_classes);
        let layers: [(&str, Vec<usize>, usize); 8] = [
            ("conv1.weight", vec![3, 3, c, w], 9 * c),
            ("conv1.bias", vec![w], 0),
            ("conv2.weight", vec![3, 3, w, 2 * w], 9 * w),
            ("conv2.bias", vec![2 * w], 0),
            ("conv3.weight", vec![3, 3, 2 * w, 2 * w], 18 * w),
            ("conv3.bias", vec![2 * w], 0),
            ("head.weight", vec![2 * w, k], 2 * w),
            ("head.bias", vec![k], 0),
        ];
        let mut params = ParamSet {
            names: Vec::new(),
            grids: Vec::new(),
        };
        for (name, shape, fan_in) in layers {
            let g = if fan_in == 0 {
                Grid::zeros(&shape)?
            } else {
                let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                Grid::from_fn(&shape, |_| n.sample(&mut rng) as f32)?
            };
            params.names.push(name.into());
            params.grids.push(g);
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a probe from stored parameters, checking the layout.
    pub fn from_params(config: ProbeConfig, params: ParamSet<f32>) -> Result<Self> {
        let fresh = Self::new(config)?;
        let same = fresh.params.names == params.names
            && fresh.params.grids.iter().zip(&params.grids).all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::Format("probe parameters do not match its configuration".into()));
        }
        Ok(Self {
            config: fresh.config,
            params,
        })
    }

    fn logits(&self, tape: &mut Tape<f32>, p: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, pool) in [(0, true), (2, true), (4, false)] {
            h = tape.conv2d(h, p[i], p[i + 1])?;
            h = tape.silu(h)?;
            if pool {
                h = tape.avg_pool(h, 2)?;
            }
        }
        let h = tape.mean_over_axes(h, &[1, 2])?;
        Ok(tape.linear(h, p[6], Some(p[7]))?)
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        let &[_, h, w, c] = shape else {
            return Err(Error::Data(format!("probe input must be [F, H, W, C], got {shape:?}")));
        };
        if c != self.config.channels || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Data(format!("probe cannot read frames of shape {shape:?}")));
        }
        Ok(())
    }

    /// Class probabilities of every frame.
    pub fn frame_probs(&self, video: &VideoTensor) -> Result<Vec<Vec<f64>>> {
        let x = Grid::from_vec(&video.dims().shape(), video.data().to_vec())?;
        self.check(x.shape())?;
        let mut tape = Tape::new();
        let p: Vec<Var> = self.params.grids.iter().map(|g| tape.constant(g.clone())).collect();
        let xv = tape.constant(x);
        let l = self.logits(&mut tape, &p, xv)?;
        let k = self.config.num_classes;
        let probs = softmax_rows(tape.value(l)?.data(), k);
        Ok(probs.chunks_exact(k).map(|r| r.iter().map(|&v| v as f64).collect()).collect())
    }

    /// Frame-averaged class probabilities.
    pub fn predict(&self, video: &VideoTensor) -> Result<Vec<f64>> {
        let frames = self.frame_probs(video)?;
        let k = self.config.num_classes;
        let mut out = vec![0.0; k];
        for f in &frames {
            out.iter_mut().zip(f).for_each(|(a, b)| *a += b);
        }
        out.iter_mut().for_each(|a| *a /= frames.len() as f64);
        Ok(out)
    }

    pub fn argmax(&self, video: &VideoTensor) -> Result<usize> {
        let p = self.predict(video)?;
        Ok(p.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0)
    }
}

/// Mean over frames of the probe's probability for `class`.
pub fn edit_fidelity(probe: &Probe, video: &VideoTensor, class: usize) -> Result<f64> {
    if class >= probe.config.num_classes {
        return config_err(format!("class {class} outside the probe's range"));
    }
    Ok(probe.predict(video)?[class])
}

/// Trains a probe on labelled videos with channel shuffles and additive
/// noise, so that it keys on shape rather than colour.
pub fn train_probe(videos: &[(VideoTensor, usize)], config: ProbeConfig) -> Result<(Probe, ProbeTrainLog)> {
    if videos.is_empty() {
        return Err(Error::Data("probe training set is empty".into()));
    }
    let mut probe = Probe::new(config)?;
    let cfg = probe.config.clone();
    let d = videos[0].0.dims();
    if videos.iter().any(|(v, k)| v.dims() != d || *k >= cfg.num_classes) {
        return Err(Error::Data("probe videos must share dimensions and have valid labels".into()));
    }
    probe.check(&d.shape())?;
    let (h, w, c) = (d.height, d.width, d.channels);
    let frame_len = h * w * c;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0070_726f_6265);
    let mut opt = Adam::new(&probe.params.grids.iter().collect::<Vec<_>>());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut data = Vec::with_capacity(cfg.batch * frame_len);
        let mut labels = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let (v, k) = &videos[rng.random_range(0..videos.len())];
            let f = rng.random_range(0..d.frames);
            let mut perm: Vec<usize> = (0..c).collect();
            for i in (1..c).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let sigma = rng.random_range(0.0..=cfg.noise);
            for px in v.frame(f).chunks_exact(c) {
                for &src in &perm {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    data.push(px[src] + (sigma * n) as f32);
                }
            }
            labels.push(*k);
        }
        let mut tape = Tape::new();
        let p: Vec<Var> = probe.params.grids.iter().map(|g| tape.leaf(g.clone(), true)).collect();
        let x = tape.constant(Grid::from_vec(&[cfg.batch, h, w, c], data)?);
        let logits = probe.logits(&mut tape, &p, x)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        let value = tape.value(loss)?.data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Numeric {
                step,
                msg: "probe loss diverged".into(),
            });
        }
        losses.push(value);
        let mut g = tape.backward(loss)?;
        let grads: Vec<Option<Grid<f32>>> = p.iter().map(|&v| g.take(v)).collect();
        let grad_refs: Vec<Option<&Grid<f32>>> = grads.iter().map(|g| g.as_ref()).collect();
        let mut params: Vec<&mut Grid<f32>> = probe.params.grids.iter_mut().collect();
        opt.step(&mut params, &grad_refs, cfg.lr)?;
    }
    Ok((probe, ProbeTrainLog { losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::VideoDims;

    #[test]
    fn frame_probabilities_are_normalized() {
        let probe = Probe::new(ProbeConfig::default()).unwrap();
        let dims = VideoDims {
            frames: 2,
            height: 8,
            width: 8,
            channels: 3,
        };
        let v = VideoTensor::new(dims, (0..dims.len()).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        for f in probe.frame_probs(&v).unwrap() {
            assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(edit_fidelity(&probe, &v, 3).is_err());
    }
}
