//! PNG frames and animated GIFs for inspecting videos.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use smmf_core::VideoTensor;

/// RGB bytes of frame `f`, nearest-neighbour upscaled by `scale`.
fn frame_rgb(video: &VideoTensor, f: usize, scale: usize) -> Vec<u8> {
    let d = video.dims();
    let (h, w, c) = (d.height, d.width, d.channels);
    let frame = video.frame(f);
    let mut out = Vec::with_capacity(h * w * scale * scale * 3);
    for y in 0..h * scale {
        for x in 0..w * scale {
            let px = &frame[((y / scale) * w + x / scale) * c..][..c];
            for ch in 0..3 {
                // grey videos repeat their single channel
                let v = px[ch.min(c - 1)];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn write_png_frames(video: &VideoTensor, dir: &Path, scale: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let d = video.dims();
    let mut paths = Vec::new();
    for f in 0..d.frames {
        let path = dir.join(format!("frame_{f:03}.png"));
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), (d.width * scale) as u32, (d.height * scale) as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&frame_rgb(video, f, scale))?;
        writer.finish()?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn write_gif(video: &VideoTensor, path: &Path, scale: usize, fps: usize) -> Result<()> {
    let d = video.dims();
    let (w, h) = ((d.width * scale) as u16, (d.height * scale) as u16);
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = gif::Encoder::new(BufWriter::new(file), w, h, &[])?;
    enc.set_repeat(gif::Repeat::Infinite)?;
    let delay = (100 / fps.max(1)) as u16;
    for f in 0..d.frames {
        let mut frame = gif::Frame::from_rgb_speed(w, h, &frame_rgb(video, f, scale), 10);
        frame.delay = delay;
        enc.write_frame(&frame)?;
    }
    Ok(())
}

/// Writes `frames/` PNGs and `video.gif` under `dir`.
pub fn render(video: &VideoTensor, dir: &Path, scale: usize, fps: usize) -> Result<Vec<PathBuf>> {
    if scale == 0 {
        return Err(smmf_core::Error::Config("scale must be positive".into()).into());
    }
    let mut paths = write_png_frames(video, &dir.join("frames"), scale)?;
    let gif = dir.join("video.gif");
    write_gif(video, &gif, scale, fps)?;
    paths.push(gif);
    Ok(paths)
}
