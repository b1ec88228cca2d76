//! Spatial nearest-neighbour upsampling and average pooling on `[F,H,W,C]`.

use crate::error::{shape_err, Result};
use crate::{Grid, Real};

fn dims4<T: Real>(x: &Grid<T>, what: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [f, h, w, c] => Ok([f, h, w, c]),
        ref s => shape_err(format!("{what} expects [F,H,W,C], got {s:?}")),
    }
}

pub(crate) fn upsample<T: Real>(x: &Grid<T>, r: usize) -> Result<Grid<T>> {
    let [f, h, w, c] = dims4(x, "upsample")?;
    if r == 0 {
        return shape_err("upsample factor must be >= 1");
    }
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); f * oh * ow * c];
    for fi in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = &x.data()[((fi * h + oy / r) * w + ox / r) * c..][..c];
                out[((fi * oh + oy) * ow + ox) * c..][..c].copy_from_slice(src);
            }
        }
    }
    Ok(Grid::from_parts(vec![f, oh, ow, c], out))
}

pub(crate) fn upsample_backward<T: Real>(x: &Grid<T>, r: usize, gout: &Grid<T>) -> Grid<T> {
    let [f, h, w, c] = dims4(x, "upsample").expect("validated in forward");
    let (oh, ow) = (h * r, w * r);
    let mut gx = x.zeros_like();
    for fi in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = &gout.data()[((fi * oh + oy) * ow + ox) * c..][..c];
                let dst = &mut gx.data_mut()[((fi * h + oy / r) * w + ox / r) * c..][..c];
                for (a, &b) in dst.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
    gx
}

pub(crate) fn avg_pool<T: Real>(x: &Grid<T>, r: usize) -> Result<Grid<T>> {
    let [f, h, w, c] = dims4(x, "avg_pool")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return shape_err(format!("pool factor {r} must divide spatial size {h}x{w}"));
    }
    let (oh, ow) = (h / r, w / r);
    let inv = T::one() / T::from_usize(r * r);
    let mut out = vec![T::zero(); f * oh * ow * c];
    for fi in 0..f {
        for y in 0..h {
            for xpos in 0..w {
                let src = &x.data()[((fi * h + y) * w + xpos) * c..][..c];
                let dst = &mut out[((fi * oh + y / r) * ow + xpos / r) * c..][..c];
                for (a, &b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Grid::from_parts(vec![f, oh, ow, c], out))
}

pub(crate) fn avg_pool_backward<T: Real>(x: &Grid<T>, r: usize, gout: &Grid<T>) -> Grid<T> {
    let [f, h, w, c] = dims4(x, "avg_pool").expect("validated in forward");
    let (oh, ow) = (h / r, w / r);
    let inv = T::one() / T::from_usize(r * r);
    let mut gx = x.zeros_like();
    for fi in 0..f {
        for y in 0..h {
            for xpos in 0..w {
                let g = &gout.data()[((fi * oh + y / r) * ow + xpos / r) * c..][..c];
                let dst = &mut gx.data_mut()[((fi * h + y) * w + xpos) * c..][..c];
                for (a, &b) in dst.iter_mut().zip(g) {
                    *a = b * inv;
                }
            }
        }
    }
    gx
}
