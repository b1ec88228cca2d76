//! Procedural moving-shape videos with exact point tracklets.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::video::{VideoDims, VideoTensor};

/// Points tracked per generated video.
pub const GT_TRACKLETS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    /// Class id used for conditioning and by the probe.
    pub fn class_id(self) -> usize {
        self as usize
    }

    pub fn from_class_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// radius `r`, at least `margin` pixels from its boundary.
    pub fn contains(self, dx: f64, dy: f64, r: f64, margin: f64) -> bool {
        match self {
            ShapeKind::Square => dx.abs() <= r - margin && dy.abs() <= r - margin,
            ShapeKind::Circle => (dx * dx + dy * dy).sqrt() <= r - margin,
            ShapeKind::Triangle => {
                // upward equilateral triangle inscribed in the circle of radius r;
                // each edge at distance r/2 from the centre along its outward normal
                let s3 = 3f64.sqrt() / 2.0;
                let normals = [(0.0, 1.0), (s3, -0.5), (-s3, -0.5)];
                normals.iter().all(|&(nx, ny)| dx * nx + dy * ny <= r / 2.0 - margin)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    Linear,
    Sinusoidal,
    Circular,
}

impl MotionKind {
    pub const ALL: [MotionKind; 3] = [MotionKind::Linear, MotionKind::Sinusoidal, MotionKind::Circular];

    pub fn name(self) -> &'static str {
        match self {
            MotionKind::Linear => "linear",
            MotionKind::Sinusoidal => "sinusoidal",
            MotionKind::Circular => "circular",
        }
    }
}

/// Centre trajectory of the shape, in pixels per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Motion {
    Linear { vx: f64, vy: f64 },
    /// Constant horizontal drift with a vertical sine wave.
    Sinusoidal { vx: f64, amplitude: f64, period: f64 },
    /// Orbit of radius `radius` starting at angle `phase`, advancing `omega` rad/frame.
    Circular { radius: f64, omega: f64, phase: f64 },
}

impl Motion {
    pub fn kind(&self) -> MotionKind {
        match self {
            Motion::Linear { .. } => MotionKind::Linear,
            Motion::Sinusoidal { .. } => MotionKind::Sinusoidal,
            Motion::Circular { .. } => MotionKind::Circular,
        }
    }

    /// Displacement of the centre at frame `f` relative to frame 0.
    pub fn offset(&self, f: usize) -> (f64, f64) {
        let t = f as f64;
        match *self {
            Motion::Linear { vx, vy } => (vx * t, vy * t),
            Motion::Sinusoidal { vx, amplitude, period } => (vx * t, amplitude * (2.0 * PI * t / period).sin()),
            Motion::Circular { radius, omega, phase } => (
                radius * ((omega * t + phase).cos() - phase.cos()),
                radius * ((omega * t + phase).sin() - phase.sin()),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    pub motion: Motion,
    /// Circumradius (half side for squares), pixels.
    pub size: f64,
    /// Centre at frame 0, pixel coordinates (x right, y down).
    pub start: (f64, f64),
    pub foreground: [f32; 3],
    pub background: [f32; 3],
    /// Darkens the background linearly towards the bottom row.
    pub vertical_gradient: bool,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

/// Per-point trajectories in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackletSet {
    pub frames: usize,
    pub tracks: Vec<Vec<[f64; 2]>>,
}

impl TrackletSet {
    pub fn new(frames: usize, tracks: Vec<Vec<[f64; 2]>>) -> Result<Self> {
        if let Some(t) = tracks.iter().find(|t| t.len() != frames) {
            return Err(Error::Data(format!("tracklet has {} points, expected {frames}", t.len())));
        }
        Ok(Self { frames, tracks })
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }
}

const BACKGROUNDS: [[f32; 3]; 3] = [[0.05, 0.05, 0.08], [0.15, 0.12, 0.10], [0.08, 0.15, 0.20]];
const FOREGROUNDS: [[f32; 3]; 4] = [[0.95, 0.25, 0.20], [0.25, 0.90, 0.35], [0.30, 0.45, 0.98], [0.98, 0.90, 0.25]];

pub const MIN_SIZE: f64 = 4.0;

impl SceneSpec {
    /// Draws a random scene of the given shape and motion family that stays
    /// inside the frame.
    pub fn random(shape: ShapeKind, motion: MotionKind, frames: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = rng.random_range(5.0..7.0f64).min((height.min(width) as f64) / 4.0);
        let span = frames.saturating_sub(1).max(1) as f64;
        let sign = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let motion = match motion {
            MotionKind::Linear => {
                let speed = rng.random_range(1.0..2.0);
                let ang = rng.random_range(0.0..2.0 * PI);
                Motion::Linear {
                    vx: speed * ang.cos(),
                    vy: speed * ang.sin(),
                }
            }
            MotionKind::Sinusoidal => Motion::Sinusoidal {
                vx: sign(&mut rng) * rng.random_range(0.8..1.6),
                amplitude: rng.random_range(2.0..3.2),
                period: span,
            },
            MotionKind::Circular => Motion::Circular {
                radius: rng.random_range(2.5..4.0),
                omega: sign(&mut rng) * 2.0 * PI / span * rng.random_range(0.5..0.75),
                phase: rng.random_range(0.0..2.0 * PI),
            },
        };
        // bounding box of the centre path relative to the start
        let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for f in 0..frames {
            let (dx, dy) = motion.offset(f);
            lo_x = lo_x.min(dx);
            hi_x = hi_x.max(dx);
            lo_y = lo_y.min(dy);
            hi_y = hi_y.max(dy);
        }
        let margin = size + 1.0;
        let pick = |rng: &mut ChaCha8Rng, lo: f64, hi: f64, extent: usize| {
            let (a, b) = (margin - lo, extent as f64 - margin - hi);
            if a < b {
                rng.random_range(a..b)
            } else {
                (a + b) / 2.0
            }
        };
        let start = (pick(&mut rng, lo_x, hi_x, width), pick(&mut rng, lo_y, hi_y, height));
        Self {
            shape,
            motion,
            size,
            start,
            foreground: FOREGROUNDS[rng.random_range(0..FOREGROUNDS.len())],
            background: BACKGROUNDS[rng.random_range(0..BACKGROUNDS.len())],
            vertical_gradient: false,
            frames,
            height,
            width,
            seed,
        }
    }

    pub fn center(&self, f: usize) -> (f64, f64) {
        let (dx, dy) = self.motion.offset(f);
        (self.start.0 + dx, self.start.1 + dy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Data("scene extents must be positive".into()));
        }
        if self.size < MIN_SIZE {
            return Err(Error::Data(format!("shape size {} below {MIN_SIZE}", self.size)));
        }
        for f in 0..self.frames {
            let (cx, cy) = self.center(f);
            let r = self.size;
            if cx - r < 0.0 || cy - r < 0.0 || cx + r > self.width as f64 || cy + r > self.height as f64 {
                return Err(Error::Data(format!(
                    "shape leaves the frame at frame {f} (centre {cx:.2}, {cy:.2})"
                )));
            }
        }
        Ok(())
    }

    /// Whether pixel `(x, y)` is foreground at frame `f` (tested at the pixel centre).
    pub fn covers(&self, f: usize, x: usize, y: usize) -> bool {
        let (cx, cy) = self.center(f);
        self.shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, self.size, 0.0)
    }
}

/// Renders a scene with hard edges and its ground-truth tracklets.
pub fn generate_video(spec: &SceneSpec) -> Result<(VideoTensor, TrackletSet, usize)> {
    spec.validate()?;
    let dims = VideoDims {
        frames: spec.frames,
        height: spec.height,
        width: spec.width,
        channels: 3,
    };
    let mut data = Vec::with_capacity(dims.len());
    for f in 0..spec.frames {
        for y in 0..spec.height {
            let shade = if spec.vertical_gradient {
                1.0 - 0.5 * y as f32 / spec.height as f32
            } else {
                1.0
            };
            for x in 0..spec.width {
                if spec.covers(f, x, y) {
                    data.extend_from_slice(&spec.foreground);
                } else {
                    data.extend(spec.background.iter().map(|c| c * shade));
                }
            }
        }
    }
    let video = VideoTensor::new(dims, data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7472_6163_6b73);
    let r = spec.size;
    let mut offsets = Vec::with_capacity(GT_TRACKLETS);
    while offsets.len() < GT_TRACKLETS {
        // offsets on a 1/64 px lattice keep position arithmetic exact
        let q = |v: f64| (v * 64.0).round() / 64.0;
        let (dx, dy) = (q(rng.random_range(-r..r)), q(rng.random_range(-r..r)));
        if spec.shape.contains(dx, dy, r, 1.0) {
            offsets.push((dx, dy));
        }
    }
    let tracks = offsets
        .iter()
        .map(|&(ox, oy)| {
            (0..spec.frames)
                .map(|f| {
                    let (cx, cy) = spec.center(f);
                    [cx + ox, cy + oy]
                })
                .collect()
        })
        .collect();
    Ok((video, TrackletSet::new(spec.frames, tracks)?, spec.shape.class_id()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: usize,
    pub video: String,
    pub tracks: String,
    pub class: usize,
    pub shape: ShapeKind,
    pub motion: MotionKind,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    pub n_videos: usize,
    /// Relative weight per shape; normalized internally.
    pub class_mix: BTreeMap<ShapeKind, f64>,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Every `val_every`-th video goes to the validation split (0 disables it).
    pub val_every: usize,
    pub force: bool,
}

impl DatasetOptions {
    pub fn new(n_videos: usize, seed: u64) -> Self {
        Self {
            n_videos,
            class_mix: ShapeKind::ALL.iter().map(|&k| (k, 1.0)).collect(),
            seed,
            frames: 8,
            height: 32,
            width: 32,
            val_every: 10,
            force: false,
        }
    }
}

/// Largest-remainder allocation of `n` items over the mix, ties broken by class order.
pub fn allocate_classes(n: usize, mix: &BTreeMap<ShapeKind, f64>) -> Result<BTreeMap<ShapeKind, usize>> {
    let total: f64 = mix.values().sum();
    if mix.is_empty() || mix.values().any(|&w| w < 0.0 || !w.is_finite()) || total <= 0.0 {
        return Err(Error::Config("class mix needs nonnegative weights with positive sum".into()));
    }
    let mut counts: BTreeMap<ShapeKind, usize> = BTreeMap::new();
    let mut rema = Vec::new();
    for (&k, &w) in mix {
        let exact = n as f64 * w / total;
        counts.insert(k, exact.floor() as usize);
        rema.push((exact - exact.floor(), k));
    }
    let mut left = n - counts.values().sum::<usize>();
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, k) in rema {
        if left == 0 {
            break;
        }
        *counts.get_mut(&k).expect("present") += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Scene for dataset entry `id`; motion families cycle with the id.
pub fn dataset_scene(opts: &DatasetOptions, id: usize, shape: ShapeKind) -> SceneSpec {
    let seed = opts.seed.wrapping_mul(1_000_003).wrapping_add(id as u64);
    let motion = MotionKind::ALL[id % MotionKind::ALL.len()];
    SceneSpec::random(shape, motion, opts.frames, opts.height, opts.width, seed)
}

/// Class of every dataset entry, in id order.
pub fn dataset_classes(opts: &DatasetOptions) -> Result<Vec<ShapeKind>> {
    if opts.n_videos == 0 {
        return Err(Error::Config("dataset needs at least one video".into()));
    }
    let counts = allocate_classes(opts.n_videos, &opts.class_mix)?;
    let mut classes: Vec<ShapeKind> = counts.iter().flat_map(|(&k, &c)| std::iter::repeat_n(k, c)).collect();
    // deterministic interleave so splits see every class
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x0063_6c61_7373);
    for i in (1..classes.len()).rev() {
        let j = rng.random_range(0..=i);
        classes.swap(i, j);
    }
    Ok(classes)
}

/// Generates the dataset in memory.
pub fn generate_dataset(opts: &DatasetOptions) -> Result<Vec<(ManifestRow, VideoTensor, TrackletSet)>> {
    let classes = dataset_classes(opts)?;
    classes
        .iter()
        .enumerate()
        .map(|(id, &shape)| {
            let spec = dataset_scene(opts, id, shape);
            let (video, tracks, class) = generate_video(&spec)?;
            let split = if opts.val_every > 0 && id % opts.val_every == opts.val_every - 1 {
                Split::Val
            } else {
                Split::Train
            };
            let row = ManifestRow {
                id,
                video: format!("videos/{id:04}.vten"),
                tracks: format!("tracks/{id:04}.json"),
                class,
                shape,
                motion: spec.motion.kind(),
                split,
                seed: spec.seed,
            };
            Ok((row, video, tracks))
        })
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes videos, tracklets and a line-delimited JSON manifest under `dir`.
pub fn build_dataset(opts: &DatasetOptions, dir: &Path) -> Result<Vec<ManifestRow>> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !opts.force {
        return Err(Error::Config(format!(
            "output directory {} is not empty (use force to overwrite)",
            dir.display()
        )));
    }
    let entries = generate_dataset(opts)?;
    fs::create_dir_all(dir.join("videos"))?;
    fs::create_dir_all(dir.join("tracks"))?;
    let mut manifest = String::new();
    for (row, video, tracks) in &entries {
        io::write_vten(&dir.join(&row.video), video)?;
        io::write_tracklets(&dir.join(&row.tracks), tracks)?;
        manifest.push_str(&serde_json::to_string(row)?);
        manifest.push('\n');
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(entries.into_iter().map(|(r, _, _)| r).collect())
}

pub struct DatasetEntry {
    pub row: ManifestRow,
    pub video: VideoTensor,
    pub tracks: TrackletSet,
}

pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetEntry>> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let row: ManifestRow = serde_json::from_str(line)?;
            let video = io::read_vten(&dir.join(&row.video))?;
            let tracks = io::read_tracklets(&dir.join(&row.tracks))?;
            Ok(DatasetEntry { row, video, tracks })
        })
        .collect()
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_spec(vx: f64, vy: f64) -> SceneSpec {
        SceneSpec {
            shape: ShapeKind::Square,
            motion: Motion::Linear { vx, vy },
            size: 5.0,
            start: (8.0, 8.0),
            foreground: FOREGROUNDS[0],
            background: BACKGROUNDS[0],
            vertical_gradient: false,
            frames: 8,
            height: 32,
            width: 32,
            seed: 3,
        }
    }

    #[test]
    fn same_spec_is_bit_identical() {
        let spec = SceneSpec::random(ShapeKind::Triangle, MotionKind::Circular, 8, 32, 32, 42);
        let (a, ta, _) = generate_video(&spec).unwrap();
        let (b, tb, _) = generate_video(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn zero_speed_gives_zero_displacement() {
        let (_, tracks, _) = generate_video(&linear_spec(0.0, 0.0)).unwrap();
        for t in &tracks.tracks {
            assert!(t.iter().all(|p| p == &t[0]));
        }
    }

    #[test]
    fn linear_motion_displacement_is_exact() {
        let (_, tracks, _) = generate_video(&linear_spec(2.0, 1.0)).unwrap();
        assert_eq!(tracks.len(), GT_TRACKLETS);
        for t in &tracks.tracks {
            for w in t.windows(2) {
                assert_eq!([w[1][0] - w[0][0], w[1][1] - w[0][1]], [2.0, 1.0]);
            }
        }
    }

    #[test]
    fn motion_leaving_frame_is_rejected() {
        let err = generate_video(&linear_spec(4.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn tracklets_lie_inside_rendered_mask() {
        for (i, &shape) in ShapeKind::ALL.iter().enumerate() {
            for &motion in &MotionKind::ALL {
                for seed in 0..5u64 {
                    let spec = SceneSpec::random(shape, motion, 8, 32, 32, seed * 10 + i as u64);
                    let (video, tracks, class) = generate_video(&spec).unwrap();
                    assert_eq!(class, shape.class_id());
                    for t in &tracks.tracks {
                        for (f, p) in t.iter().enumerate() {
                            let (x, y) = (p[0].floor() as usize, p[1].floor() as usize);
                            assert!(spec.covers(f, x, y), "{shape:?} {motion:?} seed {seed} frame {f}");
                            assert_eq!(video.pixel(f, y, x), &spec.foreground);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rendering_is_two_colour() {
        let spec = SceneSpec::random(ShapeKind::Circle, MotionKind::Sinusoidal, 8, 32, 32, 5);
        let (video, _, _) = generate_video(&spec).unwrap();
        for px in video.data().chunks(3) {
            assert!(px == spec.foreground || px == spec.background);
        }
    }

    #[test]
    fn allocation_is_exact_for_even_mix() {
        let mix: BTreeMap<_, _> = [(ShapeKind::Square, 0.5), (ShapeKind::Circle, 0.5)].into_iter().collect();
        let counts = allocate_classes(200, &mix).unwrap();
        assert_eq!(counts[&ShapeKind::Square], 100);
        assert_eq!(counts[&ShapeKind::Circle], 100);
        let thirds: BTreeMap<_, _> = ShapeKind::ALL.iter().map(|&k| (k, 1.0)).collect();
        let c = allocate_classes(10, &thirds).unwrap();
        assert_eq!(c.values().sum::<usize>(), 10);
        assert_eq!(c[&ShapeKind::Square], 4);
    }
}
