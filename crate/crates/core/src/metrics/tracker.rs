use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthvid::TrackletSet;
use crate::video::VideoTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Seeding {
    /// Foreground pixels of the first frame, strongest corners first.
    Foreground,
    /// Uniformly drawn pixels anywhere in the first frame.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub n_points: usize,
    /// Odd patch side.
    pub patch: usize,
    /// Search radius in pixels.
    pub radius: usize,
    pub seeding: Seeding,
    /// Colour distance from the background above which a pixel is foreground.
    pub fg_threshold: f32,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            n_points: 16,
            patch: 5,
            radius: 3,
            seeding: Seeding::Foreground,
            fg_threshold: 0.2,
            seed: 0,
        }
    }
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

/// Foreground of frame `f`: pixels far (max channel difference) from the
/// per-channel median colour of the frame border.
pub fn foreground_mask(video: &VideoTensor, f: usize, threshold: f32) -> Vec<bool> {
    let d = video.dims();
    let (h, w, c) = (d.height, d.width, d.channels);
    let frame = video.frame(f);
    let border: Vec<usize> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| y == 0 || x == 0 || y == h - 1 || x == w - 1)
        .map(|(y, x)| (y * w + x) * c)
        .collect();
    let bg: Vec<f32> = (0..c).map(|ch| median(border.iter().map(|&o| frame[o + ch]).collect())).collect();
    frame
        .chunks_exact(c)
        .map(|px| px.iter().zip(&bg).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max) > threshold)
        .collect()
}

fn gray(video: &VideoTensor, f: usize) -> Vec<f32> {
    let c = video.dims().channels;
    video.frame(f).chunks_exact(c).map(|px| px.iter().sum::<f32>() / c as f32).collect()
}

/// Smaller eigenvalue of the 3x3-window structure tensor at every pixel.
fn cornerness(img: &[f32], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| img[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize] as f64;
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            gx[y as usize * w + x as usize] = 0.5 * (at(y, x + 1) - at(y, x - 1));
            gy[y as usize * w + x as usize] = 0.5 * (at(y + 1, x) - at(y - 1, x));
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = ((y + dy).clamp(0, h as isize - 1), (x + dx).clamp(0, w as isize - 1));
                    let i = yy as usize * w + xx as usize;
                    a += gx[i] * gx[i];
                    b += gx[i] * gy[i];
                    c += gy[i] * gy[i];
                }
            }
            let tr = 0.5 * (a + c);
            let det = a * c - b * b;
            out[y as usize * w + x as usize] = tr - (tr * tr - det).max(0.0).sqrt();
        }
    }
    out
}

fn seeds(video: &VideoTensor, cfg: &TrackerConfig) -> Result<Vec<(usize, usize)>> {
    let d = video.dims();
    let (h, w) = (d.height, d.width);
    match cfg.seeding {
        Seeding::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let n = cfg.n_points.min(h * w);
            let mut idx = sample(&mut rng, h * w, n).into_vec();
            idx.sort_unstable();
            Ok(idx.into_iter().map(|i| (i / w, i % w)).collect())
        }
        Seeding::Foreground => {
            let mask = foreground_mask(video, 0, cfg.fg_threshold);
            let mut fg: Vec<usize> = (0..h * w).filter(|&i| mask[i]).collect();
            if fg.is_empty() {
                return Err(Error::Data("no foreground found in the first frame".into()));
            }
            let score = cornerness(&gray(video, 0), h, w);
            // strongest corners first, row-major among equals
            fg.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
            fg.truncate(cfg.n_points);
            Ok(fg.into_iter().map(|i| (i / w, i % w)).collect())
        }
    }
}

/// Tracks seed points by exhaustive patch search around the previous
/// position, comparing against the first frame's patch. Positions are pixel
/// centres.
pub fn track_block_matching(video: &VideoTensor, cfg: &TrackerConfig) -> Result<TrackletSet> {
    if cfg.patch.is_multiple_of(2) || cfg.n_points == 0 {
        return Err(Error::Config("patch side must be odd and n_points positive".into()));
    }
    let d = video.dims();
    let (frames, h, w, c) = (d.frames, d.height, d.width, d.channels);
    let half = (cfg.patch / 2) as isize;
    let r = cfg.radius as isize;
    let px = |f: usize, y: isize, x: isize| {
        let (y, x) = (y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize);
        &video.frame(f)[(y * w + x) * c..][..c]
    };
    // search order: smallest displacement first, then row-major
    let mut offsets: Vec<(isize, isize)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect();
    offsets.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));

    let mut tracks = Vec::new();
    for (sy, sx) in seeds(video, cfg)? {
        let (sy, sx) = (sy as isize, sx as isize);
        let template: Vec<f32> = (-half..=half)
            .flat_map(|dy| (-half..=half).map(move |dx| (dy, dx)))
            .flat_map(|(dy, dx)| px(0, sy + dy, sx + dx).to_vec())
            .collect();
        let (mut y, mut x) = (sy, sx);
        let mut track = vec![[x as f64 + 0.5, y as f64 + 0.5]];
        for f in 1..frames {
            let mut best = (f64::INFINITY, y, x);
            for &(oy, ox) in &offsets {
                let (cy, cx) = (y + oy, x + ox);
                if cy < 0 || cx < 0 || cy >= h as isize || cx >= w as isize {
                    continue;
                }
                let mut ssd = 0.0f64;
                let mut k = 0;
                for dy in -half..=half {
                    for dx in -half..=half {
                        for &v in px(f, cy + dy, cx + dx) {
                            let e = (v - template[k]) as f64;
                            ssd += e * e;
                            k += 1;
                        }
                    }
                }
                if ssd < best.0 {
                    best = (ssd, cy, cx);
                }
            }
            (y, x) = (best.1, best.2);
            track.push([x as f64 + 0.5, y as f64 + 0.5]);
        }
        tracks.push(track);
    }
    TrackletSet::new(frames, tracks)
}

/// Tracker used for scoring: foreground seeding as configured, falling back
/// to uniform seeds when the first frame has no separable foreground (a
/// blank generation then scores as motionless rather than failing).
pub fn track_with_fallback(video: &VideoTensor, cfg: &TrackerConfig) -> Result<(TrackletSet, Seeding)> {
    match track_block_matching(video, cfg) {
        Ok(t) => Ok((t, cfg.seeding)),
        Err(Error::Data(_)) if cfg.seeding == Seeding::Foreground => {
            let uniform = TrackerConfig {
                seeding: Seeding::Uniform,
                ..cfg.clone()
            };
            Ok((track_block_matching(video, &uniform)?, Seeding::Uniform))
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthvid::{generate_video, Motion, SceneSpec, ShapeKind};

    fn scene(motion: Motion) -> SceneSpec {
        SceneSpec {
            shape: ShapeKind::Square,
            motion,
            size: 5.0,
            start: (12.0, 12.0),
            foreground: [0.9, 0.3, 0.2],
            background: [0.05, 0.05, 0.08],
            vertical_gradient: false,
            frames: 8,
            height: 32,
            width: 32,
            seed: 1,
        }
    }

    #[test]
    fn static_video_gives_zero_displacement() {
        let (v, _, _) = generate_video(&scene(Motion::Linear { vx: 0.0, vy: 0.0 })).unwrap();
        let t = track_block_matching(&v, &TrackerConfig::default()).unwrap();
        assert_eq!(t.len(), 16);
        for tr in &t.tracks {
            assert!(tr.iter().all(|p| p == &tr[0]));
        }
    }

    #[test]
    fn integer_motion_is_tracked_exactly() {
        let (v, _, _) = generate_video(&scene(Motion::Linear { vx: 2.0, vy: 1.0 })).unwrap();
        let t = track_block_matching(&v, &TrackerConfig::default()).unwrap();
        for tr in &t.tracks {
            for w in tr.windows(2) {
                assert_eq!([w[1][0] - w[0][0], w[1][1] - w[0][1]], [2.0, 1.0]);
            }
        }
    }

    #[test]
    fn blank_video_has_no_foreground() {
        let dims = crate::video::VideoDims {
            frames: 2,
            height: 8,
            width: 8,
            channels: 3,
        };
        let v = VideoTensor::new(dims, vec![0.2; dims.len()]).unwrap();
        assert!(track_block_matching(&v, &TrackerConfig::default()).is_err());
        let cfg = TrackerConfig {
            seeding: Seeding::Uniform,
            n_points: 5,
            ..TrackerConfig::default()
        };
        assert_eq!(track_block_matching(&v, &cfg).unwrap().len(), 5);
        let (t, used) = track_with_fallback(&v, &TrackerConfig::default()).unwrap();
        assert_eq!((t.len(), used), (16, Seeding::Uniform));
    }
}
