//! Group normalization with each leading-axis slice (a frame) normalized on its own.

use crate::error::{shape_err, Result};
use crate::{Grid, Real};

pub const GN_EPS: f64 = 1e-5;

pub(crate) struct GnSaved<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

fn dims<T: Real>(x: &Grid<T>, gamma: &Grid<T>, beta: &Grid<T>, groups: usize) -> Result<(usize, usize, usize)> {
    let xs = x.shape();
    if xs.len() < 2 {
        return shape_err(format!("group norm needs rank >= 2, got {xs:?}"));
    }
    let c = xs[xs.len() - 1];
    if groups == 0 || !c.is_multiple_of(groups) {
        return shape_err(format!("{groups} groups do not divide {c} channels"));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(format!("group norm affine params must be [{c}]"));
    }
    let f = xs[0];
    Ok((f, x.len() / (f * c), c))
}

pub(crate) fn forward<T: Real>(
    x: &Grid<T>,
    gamma: &Grid<T>,
    beta: &Grid<T>,
    groups: usize,
) -> Result<(Grid<T>, GnSaved<T>)> {
    let (f, s, c) = dims(x, gamma, beta, groups)?;
    let cg = c / groups;
    let n = T::from_usize(s * cg);
    let eps = T::from_f64(GN_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(f * groups);
    let mut rstd = Vec::with_capacity(f * groups);
    let (gd, bd) = (gamma.data(), beta.data());
    for fi in 0..f {
        let xf = &x.data()[fi * s * c..][..s * c];
        let of = &mut out[fi * s * c..][..s * c];
        for g in 0..groups {
            let mut sum = T::zero();
            for p in 0..s {
                for &v in &xf[p * c + g * cg..][..cg] {
                    sum += v;
                }
            }
            let m = sum / n;
            let mut var = T::zero();
            for p in 0..s {
                for &v in &xf[p * c + g * cg..][..cg] {
                    var += (v - m) * (v - m);
                }
            }
            let r = T::one() / (var / n + eps).sqrt();
            for p in 0..s {
                for ci in g * cg..(g + 1) * cg {
                    of[p * c + ci] = (xf[p * c + ci] - m) * r * gd[ci] + bd[ci];
                }
            }
            mean.push(m);
            rstd.push(r);
        }
    }
    Ok((Grid::from_parts(x.shape().to_vec(), out), GnSaved { mean, rstd }))
}

pub(crate) type GnGrads<T> = (Option<Grid<T>>, Option<Grid<T>>, Option<Grid<T>>);

pub(crate) fn backward<T: Real>(
    x: &Grid<T>,
    gamma: &Grid<T>,
    beta: &Grid<T>,
    groups: usize,
    saved: &GnSaved<T>,
    gout: &Grid<T>,
    need: [bool; 3],
) -> GnGrads<T> {
    let (f, s, c) = dims(x, gamma, beta, groups).expect("validated in forward");
    let cg = c / groups;
    let n = T::from_usize(s * cg);
    let gd = gamma.data();
    let mut gx = need[0].then(|| x.zeros_like());
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for fi in 0..f {
        let xf = &x.data()[fi * s * c..][..s * c];
        let gf = &gout.data()[fi * s * c..][..s * c];
        for g in 0..groups {
            let m = saved.mean[fi * groups + g];
            let r = saved.rstd[fi * groups + g];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for p in 0..s {
                for ci in g * cg..(g + 1) * cg {
                    let xhat = (xf[p * c + ci] - m) * r;
                    let dy = gf[p * c + ci];
                    ggamma[ci] += dy * xhat;
                    gbeta[ci] += dy;
                    let dxhat = dy * gd[ci];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            if let Some(gx) = gx.as_mut() {
                let gxf = &mut gx.data_mut()[fi * s * c..][..s * c];
                let (a, b) = (sum_dxhat / n, sum_dxhat_xhat / n);
                for p in 0..s {
                    for ci in g * cg..(g + 1) * cg {
                        let xhat = (xf[p * c + ci] - m) * r;
                        let dxhat = gf[p * c + ci] * gd[ci];
                        gxf[p * c + ci] = r * (dxhat - a - xhat * b);
                    }
                }
            }
        }
    }
    (
        gx,
        need[1].then(|| Grid::from_parts(vec![c], ggamma)),
        need[2].then(|| Grid::from_parts(vec![c], gbeta)),
    )
}
