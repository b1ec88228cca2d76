//! Per-frame spatial convolution and frame-axis convolution, both with
//! reflect padding and stride 1.

use crate::error::{shape_err, Result};
use crate::{Grid, Real};

/// Reflect index `i` into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

fn reflect_table(n: usize, k: usize) -> Vec<usize> {
    // table[o * k + j] = source index for output o and tap j
    let p = (k / 2) as isize;
    let mut t = Vec::with_capacity(n * k);
    for o in 0..n as isize {
        for j in 0..k as isize {
            t.push(reflect(o + j - p, n));
        }
    }
    t
}

pub(crate) struct Conv2dDims {
    frames: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

pub(crate) fn conv2d_dims<T: Real>(x: &Grid<T>, w: &Grid<T>, b: &Grid<T>) -> Result<Conv2dDims> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 {
        return shape_err(format!("conv2d input must be [F,H,W,C], got {xs:?}"));
    }
    if ws.len() != 4 || ws[0] != ws[1] || ws[0] % 2 == 0 {
        return shape_err(format!("conv2d kernel must be [k,k,Cin,Cout] with odd k, got {ws:?}"));
    }
    if ws[2] != xs[3] {
        return shape_err(format!(
            "conv2d channel mismatch: input has {} channels, kernel expects {}",
            xs[3], ws[2]
        ));
    }
    if b.shape() != [ws[3]] {
        return shape_err(format!("conv2d bias must be [{}], got {:?}", ws[3], b.shape()));
    }
    Ok(Conv2dDims {
        frames: xs[0],
        h: xs[1],
        w: xs[2],
        cin: xs[3],
        cout: ws[3],
        k: ws[0],
    })
}

struct Im2Col {
    ty: Vec<usize>,
    tx: Vec<usize>,
}

impl Im2Col {
    fn new(d: &Conv2dDims) -> Self {
        Self {
            ty: reflect_table(d.h, d.k),
            tx: reflect_table(d.w, d.k),
        }
    }

    fn gather<T: Real>(&self, d: &Conv2dDims, xf: &[T], cols: &mut [T]) {
        let (k, c) = (d.k, d.cin);
        let kc = k * k * c;
        for oy in 0..d.h {
            for ox in 0..d.w {
                let row = &mut cols[(oy * d.w + ox) * kc..][..kc];
                for ky in 0..k {
                    let iy = self.ty[oy * k + ky];
                    for kx in 0..k {
                        let ix = self.tx[ox * k + kx];
                        row[(ky * k + kx) * c..][..c].copy_from_slice(&xf[(iy * d.w + ix) * c..][..c]);
                    }
                }
            }
        }
    }

    fn scatter_add<T: Real>(&self, d: &Conv2dDims, cols: &[T], gxf: &mut [T]) {
        let (k, c) = (d.k, d.cin);
        let kc = k * k * c;
        for oy in 0..d.h {
            for ox in 0..d.w {
                let row = &cols[(oy * d.w + ox) * kc..][..kc];
                for ky in 0..k {
                    let iy = self.ty[oy * k + ky];
                    for kx in 0..k {
                        let ix = self.tx[ox * k + kx];
                        let dst = &mut gxf[(iy * d.w + ix) * c..][..c];
                        for (a, &b) in dst.iter_mut().zip(&row[(ky * k + kx) * c..][..c]) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &Grid<T>, w: &Grid<T>, b: &Grid<T>) -> Result<Grid<T>> {
    let d = conv2d_dims(x, w, b)?;
    let hw = d.h * d.w;
    let kc = d.k * d.k * d.cin;
    let mut out = vec![T::zero(); d.frames * hw * d.cout];
    for row in out.chunks_exact_mut(d.cout) {
        row.copy_from_slice(b.data());
    }
    let im = Im2Col::new(&d);
    let mut cols = if d.k == 1 { Vec::new() } else { vec![T::zero(); hw * kc] };
    for f in 0..d.frames {
        let xf = &x.data()[f * hw * d.cin..][..hw * d.cin];
        let a: &[T] = if d.k == 1 {
            xf
        } else {
            im.gather(&d, xf, &mut cols);
            &cols
        };
        let of = &mut out[f * hw * d.cout..][..hw * d.cout];
        T::gemm(hw, kc, d.cout, a, false, w.data(), false, of, T::one());
    }
    Ok(Grid::from_parts(vec![d.frames, d.h, d.w, d.cout], out))
}

pub(crate) type Conv2dGrads<T> = (Option<Grid<T>>, Option<Grid<T>>, Option<Grid<T>>);

pub(crate) fn conv2d_backward<T: Real>(
    x: &Grid<T>,
    w: &Grid<T>,
    b: &Grid<T>,
    gout: &Grid<T>,
    need: [bool; 3],
) -> Conv2dGrads<T> {
    let d = conv2d_dims(x, w, b).expect("validated in forward");
    let hw = d.h * d.w;
    let kc = d.k * d.k * d.cin;
    let im = Im2Col::new(&d);
    let mut gx = need[0].then(|| x.zeros_like());
    let mut gw = need[1].then(|| w.zeros_like());
    let gb = need[2].then(|| {
        let mut s = vec![T::zero(); d.cout];
        for row in gout.data().chunks_exact(d.cout) {
            for (a, &v) in s.iter_mut().zip(row) {
                *a += v;
            }
        }
        Grid::from_parts(vec![d.cout], s)
    });
    let mut cols = vec![T::zero(); hw * kc];
    for f in 0..d.frames {
        let gf = &gout.data()[f * hw * d.cout..][..hw * d.cout];
        if let Some(gw) = gw.as_mut() {
            let xf = &x.data()[f * hw * d.cin..][..hw * d.cin];
            let a: &[T] = if d.k == 1 {
                xf
            } else {
                im.gather(&d, xf, &mut cols);
                &cols
            };
            T::gemm(kc, hw, d.cout, a, true, gf, false, gw.data_mut(), T::one());
        }
        if let Some(gx) = gx.as_mut() {
            let gxf = &mut gx.data_mut()[f * hw * d.cin..][..hw * d.cin];
            if d.k == 1 {
                T::gemm(hw, d.cout, kc, gf, false, w.data(), true, gxf, T::one());
            } else {
                T::gemm(hw, d.cout, kc, gf, false, w.data(), true, &mut cols, T::zero());
                im.scatter_add(&d, &cols, gxf);
            }
        }
    }
    (gx, gw, gb)
}

pub(crate) fn temporal_dims<T: Real>(x: &Grid<T>, w: &Grid<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 {
        return shape_err(format!("temporal conv input must be [F,H,W,C], got {xs:?}"));
    }
    if xs[0] < 1 {
        return shape_err("temporal conv needs at least one frame");
    }
    if ws.len() != 3 || ws[0] % 2 == 0 {
        return shape_err(format!("temporal kernel must be [k,C,Cout] with odd k, got {ws:?}"));
    }
    if ws[1] != xs[3] {
        return shape_err(format!(
            "temporal conv channel mismatch: input has {} channels, kernel expects {}",
            xs[3], ws[1]
        ));
    }
    Ok((xs[0], xs[1] * xs[2], xs[3], ws[2], ws[0]))
}

pub(crate) fn temporal_forward<T: Real>(x: &Grid<T>, w: &Grid<T>) -> Result<Grid<T>> {
    let (f, s, c, cout, k) = temporal_dims(x, w)?;
    let table = reflect_table(f, k);
    let mut out = vec![T::zero(); f * s * cout];
    for fo in 0..f {
        let of = &mut out[fo * s * cout..][..s * cout];
        for j in 0..k {
            let src = table[fo * k + j];
            let xf = &x.data()[src * s * c..][..s * c];
            let wj = &w.data()[j * c * cout..][..c * cout];
            T::gemm(s, c, cout, xf, false, wj, false, of, T::one());
        }
    }
    let xs = x.shape();
    Ok(Grid::from_parts(vec![xs[0], xs[1], xs[2], cout], out))
}

pub(crate) fn temporal_backward<T: Real>(
    x: &Grid<T>,
    w: &Grid<T>,
    gout: &Grid<T>,
    need: [bool; 2],
) -> (Option<Grid<T>>, Option<Grid<T>>) {
    let (f, s, c, cout, k) = temporal_dims(x, w).expect("validated in forward");
    let table = reflect_table(f, k);
    let mut gx = need[0].then(|| x.zeros_like());
    let mut gw = need[1].then(|| w.zeros_like());
    for fo in 0..f {
        let gf = &gout.data()[fo * s * cout..][..s * cout];
        for j in 0..k {
            let src = table[fo * k + j];
            if let Some(gx) = gx.as_mut() {
                let wj = &w.data()[j * c * cout..][..c * cout];
                let gxf = &mut gx.data_mut()[src * s * c..][..s * c];
                T::gemm(s, cout, c, gf, false, wj, true, gxf, T::one());
            }
            if let Some(gw) = gw.as_mut() {
                let xf = &x.data()[src * s * c..][..s * c];
                let gwj = &mut gw.data_mut()[j * c * cout..][..c * cout];
                T::gemm(c, s, cout, xf, true, gf, false, gwj, T::one());
            }
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
        assert_eq!(reflect(-1, 1), 0);
        assert_eq!(reflect(2, 2), 0);
    }
}
