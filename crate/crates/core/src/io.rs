//! On-disk formats: `.vten` videos, tracklet JSON and `SMMF` checkpoints.
//!
//! Binary formats are little-endian and start with a 4-byte magic followed by
//! a `u32` version.

use std::fs;
use std::path::Path;

use ndgrad::Grid;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig, ParamSet};
use crate::diffusion::{ScheduleKind, ScheduleParams};
use crate::error::{Error, Result};
use crate::metrics::{Probe, ProbeConfig};
use crate::synthvid::TrackletSet;
use crate::video::{VideoDims, VideoTensor};

pub const VTEN_MAGIC: &[u8; 4] = b"VTEN";
pub const VTEN_VERSION: u32 = 1;
pub const CKPT_MAGIC: &[u8; 4] = b"SMMF";
pub const CKPT_VERSION: u32 = 1;
pub const PROBE_MAGIC: &[u8; 4] = b"SMMP";
pub const PROBE_VERSION: u32 = 1;

/// Slack allowed on stored pixel values before a file is rejected.
pub const RANGE_TOLERANCE: f32 = 1e-6;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return format_err(format!("{}: truncated at byte {}", self.what, self.pos));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{}: size overflow", self.what)))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let m = self.take(4)?;
        if m != magic {
            return format_err(format!("{}: bad magic {:?}", self.what, String::from_utf8_lossy(m)));
        }
        let v = self.u32()?;
        if v != version {
            return format_err(format!("{}: unsupported version {v}", self.what));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return format_err(format!(
                "{}: {} trailing bytes after payload",
                self.what,
                self.buf.len() - self.pos
            ));
        }
        Ok(())
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_vten(video: &VideoTensor) -> Result<Vec<u8>> {
    let d = video.dims();
    let mut out = Vec::with_capacity(24 + 4 * d.len());
    out.extend_from_slice(VTEN_MAGIC);
    out.extend_from_slice(&VTEN_VERSION.to_le_bytes());
    for e in d.shape() {
        push_u32(&mut out, e)?;
    }
    push_f32s(&mut out, video.data());
    Ok(out)
}

pub fn decode_vten(buf: &[u8]) -> Result<VideoTensor> {
    let mut r = Reader::new(buf, "vten");
    r.header(VTEN_MAGIC, VTEN_VERSION)?;
    let mut ext = [0usize; 4];
    for e in &mut ext {
        *e = r.u32()? as usize;
    }
    let dims = VideoDims {
        frames: ext[0],
        height: ext[1],
        width: ext[2],
        channels: ext[3],
    };
    if ext.contains(&0) {
        return format_err(format!("vten: zero extent in {ext:?}"));
    }
    let n = ext.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
    let Some(n) = n else {
        return format_err("vten: header size overflow");
    };
    let expected = n.checked_mul(4).and_then(|b| b.checked_add(r.pos));
    if expected != Some(buf.len()) {
        return format_err(format!(
            "vten: header declares {n} values but payload has {} bytes",
            buf.len() - r.pos
        ));
    }
    let mut data = r.f32s(n)?;
    for v in &mut data {
        if !(-RANGE_TOLERANCE..=1.0 + RANGE_TOLERANCE).contains(v) {
            return format_err(format!("vten: value {v} outside [0, 1]"));
        }
        *v = v.clamp(0.0, 1.0);
    }
    VideoTensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub const LATENT_MAGIC: &[u8; 4] = b"LTEN";
pub const LATENT_VERSION: u32 = 1;

/// Unbounded `[F, H, W, C]` latent, same layout as `.vten` without the range check.
pub fn encode_latent(x: &Grid<f32>) -> Result<Vec<u8>> {
    let &[f, h, w, c] = x.shape() else {
        return format_err(format!("latent must be [F, H, W, C], got {:?}", x.shape()));
    };
    let mut out = Vec::with_capacity(24 + 4 * x.len());
    out.extend_from_slice(LATENT_MAGIC);
    out.extend_from_slice(&LATENT_VERSION.to_le_bytes());
    for e in [f, h, w, c] {
        push_u32(&mut out, e)?;
    }
    push_f32s(&mut out, x.data());
    Ok(out)
}

pub fn decode_latent(buf: &[u8]) -> Result<Grid<f32>> {
    let mut r = Reader::new(buf, "latent");
    r.header(LATENT_MAGIC, LATENT_VERSION)?;
    let mut shape = [0usize; 4];
    for e in &mut shape {
        *e = r.u32()? as usize;
    }
    let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
    let n = n.ok_or_else(|| Error::Format("latent: header size overflow".into()))?;
    let data = r.f32s(n)?;
    r.finish()?;
    Grid::from_vec(&shape, data).map_err(|e| Error::Format(format!("latent: {e}")))
}

pub fn write_vten(path: &Path, video: &VideoTensor) -> Result<()> {
    fs::write(path, encode_vten(video)?)?;
    Ok(())
}

pub fn read_vten(path: &Path) -> Result<VideoTensor> {
    decode_vten(&fs::read(path)?)
}

pub fn write_tracklets(path: &Path, tracks: &TrackletSet) -> Result<()> {
    fs::write(path, serde_json::to_string(tracks)?)?;
    Ok(())
}

pub fn read_tracklets(path: &Path) -> Result<TrackletSet> {
    let set: TrackletSet = serde_json::from_slice(&fs::read(path)?)?;
    if set.frames == 0 {
        return format_err("tracklets: zero frames");
    }
    TrackletSet::new(set.frames, set.tracks).map_err(|e| Error::Format(e.to_string()))
}

/// Named parameter blobs: count, then per entry name, rank, extents and data.
fn push_params(out: &mut Vec<u8>, params: &ParamSet<f32>) -> Result<()> {
    push_u32(out, params.len())?;
    for (name, grid) in params.names.iter().zip(&params.grids) {
        push_u32(out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        push_u32(out, grid.rank())?;
        for &e in grid.shape() {
            push_u32(out, e)?;
        }
        push_f32s(out, grid.data());
    }
    Ok(())
}

fn read_params(r: &mut Reader) -> Result<ParamSet<f32>> {
    let count = r.u32()? as usize;
    let mut names = Vec::new();
    let mut grids = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format(format!("{}: parameter name is not UTF-8", r.what)))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > ndgrad::MAX_RANK {
            return format_err(format!("{}: {name} has rank {rank}", r.what));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let n = n.ok_or_else(|| Error::Format(format!("{}: {name} size overflow", r.what)))?;
        let data = r.f32s(n)?;
        let grid = Grid::from_vec(&shape, data).map_err(|e| Error::Format(format!("{}: {name}: {e}", r.what)))?;
        names.push(name);
        grids.push(grid);
    }
    Ok(ParamSet { names, grids })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    model: DenoiserConfig,
    train_steps: u64,
}

/// Trained network plus the schedule it was trained under.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Denoiser<f32>,
    pub schedule: ScheduleParams,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let m = &ckpt.model;
    let mut out = Vec::with_capacity(4 * m.params.numel() + 4096);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&CheckpointMeta {
        model: m.config().clone(),
        train_steps: m.train_steps,
    })?;
    push_u32(&mut out, meta.len())?;
    out.extend_from_slice(&meta);
    push_params(&mut out, &m.params)?;
    let s = &ckpt.schedule;
    push_u32(&mut out, s.steps)?;
    let kind: u32 = match s.kind {
        ScheduleKind::Linear => 0,
    };
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&s.beta_start.to_le_bytes());
    out.extend_from_slice(&s.beta_end.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(buf, "checkpoint");
    r.header(CKPT_MAGIC, CKPT_VERSION)?;
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let params = read_params(&mut r)?;
    let steps = r.u32()? as usize;
    let kind = match r.u32()? {
        0 => ScheduleKind::Linear,
        k => return format_err(format!("checkpoint: unknown schedule kind {k}")),
    };
    let schedule = ScheduleParams {
        steps,
        kind,
        beta_start: r.f64()?,
        beta_end: r.f64()?,
    };
    r.finish()?;
    if meta.model.velocity_head.is_some_and(|h| h != schedule) {
        return format_err("checkpoint: velocity head and schedule differ");
    }
    let model = Denoiser::from_params(meta.model, params, meta.train_steps)?;
    Ok(Checkpoint { model, schedule })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn encode_probe(probe: &Probe) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(4 * probe.params.numel() + 1024);
    out.extend_from_slice(PROBE_MAGIC);
    out.extend_from_slice(&PROBE_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&probe.config)?;
    push_u32(&mut out, meta.len())?;
    out.extend_from_slice(&meta);
    push_params(&mut out, &probe.params)?;
    Ok(out)
}

pub fn decode_probe(buf: &[u8]) -> Result<Probe> {
    let mut r = Reader::new(buf, "probe");
    r.header(PROBE_MAGIC, PROBE_VERSION)?;
    let meta_len = r.u32()? as usize;
    let config: ProbeConfig = serde_json::from_slice(r.take(meta_len)?)?;
    let params = read_params(&mut r)?;
    r.finish()?;
    Probe::from_params(config, params)
}

pub fn write_probe(path: &Path, probe: &Probe) -> Result<()> {
    fs::write(path, encode_probe(probe)?)?;
    Ok(())
}

pub fn read_probe(path: &Path) -> Result<Probe> {
    decode_probe(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video() -> VideoTensor {
        let dims = VideoDims {
            frames: 2,
            height: 3,
            width: 2,
            channels: 1,
        };
        VideoTensor::new(dims, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap()
    }

    #[test]
    fn vten_round_trip_and_rejections() {
        let v = video();
        let bytes = encode_vten(&v).unwrap();
        assert_eq!(decode_vten(&bytes).unwrap(), v);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_vten(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_vten(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_vten(&extra), Err(Error::Format(_))));

        let mut out_of_range = bytes.clone();
        let last = out_of_range.len() - 4;
        out_of_range[last..].copy_from_slice(&1.01f32.to_le_bytes());
        assert!(matches!(decode_vten(&out_of_range), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Denoiser::<f32>::new(DenoiserConfig::tiny(2, 8), 3).unwrap();
        let ckpt = Checkpoint {
            model,
            schedule: ScheduleParams::default(),
        };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.model.params, ckpt.model.params);
        assert_eq!(back.schedule, ckpt.schedule);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }
}
