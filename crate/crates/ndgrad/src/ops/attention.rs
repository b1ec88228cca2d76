//! Single-head self-attention along the leading (frame) axis, evaluated
//! independently at every spatial location.

use crate::error::{shape_err, Result};
use crate::{Grid, Real};

fn dims<T: Real>(q: &Grid<T>, k: &Grid<T>, v: &Grid<T>) -> Result<(usize, usize, usize)> {
    let qs = q.shape();
    if qs.len() != 4 || k.shape() != qs || v.shape() != qs {
        return shape_err(format!(
            "attention q/k/v must share an [F,H,W,C] shape, got {:?} {:?} {:?}",
            qs,
            k.shape(),
            v.shape()
        ));
    }
    Ok((qs[0], qs[1] * qs[2], qs[3]))
}

/// Returns the attended values and the softmax weights `[S, F, F]`.
pub(crate) fn forward<T: Real>(q: &Grid<T>, k: &Grid<T>, v: &Grid<T>) -> Result<(Grid<T>, Vec<T>)> {
    let (f, s, c) = dims(q, k, v)?;
    let scale = T::one() / T::from_usize(c).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut probs = vec![T::zero(); s * f * f];
    let mut out = vec![T::zero(); q.len()];
    for p in 0..s {
        let pr = &mut probs[p * f * f..][..f * f];
        for i in 0..f {
            let qi = &qd[(i * s + p) * c..][..c];
            let row = &mut pr[i * f..][..f];
            let mut max = T::neg_infinity();
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &kd[(j * s + p) * c..][..c];
                let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                *r = dot * scale;
                max = max.max(*r);
            }
            let mut z = T::zero();
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                z += *r;
            }
            for r in row.iter_mut() {
                *r /= z;
            }
            let oi = &mut out[(i * s + p) * c..][..c];
            for (j, &w) in row.iter().enumerate() {
                let vj = &vd[(j * s + p) * c..][..c];
                for (o, &vv) in oi.iter_mut().zip(vj) {
                    *o += w * vv;
                }
            }
        }
    }
    Ok((Grid::from_parts(q.shape().to_vec(), out), probs))
}

pub(crate) type AttnGrads<T> = (Option<Grid<T>>, Option<Grid<T>>, Option<Grid<T>>);

pub(crate) fn backward<T: Real>(
    q: &Grid<T>,
    k: &Grid<T>,
    v: &Grid<T>,
    probs: &[T],
    gout: &Grid<T>,
    need: [bool; 3],
) -> AttnGrads<T> {
    let (f, s, c) = dims(q, k, v).expect("validated in forward");
    let scale = T::one() / T::from_usize(c).sqrt();
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), gout.data());
    let mut gq = q.zeros_like();
    let mut gk = k.zeros_like();
    let mut gv = v.zeros_like();
    let mut dscore = vec![T::zero(); f];
    for p in 0..s {
        let pr = &probs[p * f * f..][..f * f];
        for i in 0..f {
            let goi = &gd[(i * s + p) * c..][..c];
            let row = &pr[i * f..][..f];
            // dP_ij = dO_i . v_j ; dS_ij = P_ij (dP_ij - sum_j P_ij dP_ij)
            let mut weighted = T::zero();
            for j in 0..f {
                let vj = &vd[(j * s + p) * c..][..c];
                let dp: T = goi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                dscore[j] = dp;
                weighted += row[j] * dp;
            }
            for j in 0..f {
                dscore[j] = row[j] * (dscore[j] - weighted) * scale;
            }
            if need[2] {
                for j in 0..f {
                    let gvj = &mut gv.data_mut()[(j * s + p) * c..][..c];
                    for (a, &b) in gvj.iter_mut().zip(goi) {
                        *a += row[j] * b;
                    }
                }
            }
            if need[0] {
                let gqi = &mut gq.data_mut()[(i * s + p) * c..][..c];
                for j in 0..f {
                    let kj = &kd[(j * s + p) * c..][..c];
                    for (a, &b) in gqi.iter_mut().zip(kj) {
                        *a += dscore[j] * b;
                    }
                }
            }
            if need[1] {
                let qi = &qd[(i * s + p) * c..][..c];
                for j in 0..f {
                    let gkj = &mut gk.data_mut()[(j * s + p) * c..][..c];
                    for (a, &b) in gkj.iter_mut().zip(qi) {
                        *a += dscore[j] * b;
                    }
                }
            }
        }
    }
    (need[0].then_some(gq), need[1].then_some(gk), need[2].then_some(gv))
}
