use crate::error::{shape_err, Result};
use crate::{Grid, Real};

/// Maps every input flat index to its output flat index when `axes` are reduced.
pub(crate) struct Reduction {
    pub out_shape: Vec<usize>,
    in_shape: Vec<usize>,
    keep_stride: Vec<usize>,
    pub count: usize,
}

impl Reduction {
    pub fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        for (i, &a) in axes.iter().enumerate() {
            if a >= shape.len() {
                return shape_err(format!("axis {a} out of range for rank {}", shape.len()));
            }
            if axes[..i].contains(&a) {
                return shape_err(format!("axis {a} repeated"));
            }
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &e)| e)
            .collect();
        // stride in the output for each input axis (0 for reduced axes)
        let mut keep_stride = vec![0; shape.len()];
        let mut stride = 1;
        for i in (0..shape.len()).rev() {
            if !axes.contains(&i) {
                keep_stride[i] = stride;
                stride *= shape[i];
            }
        }
        Ok(Self {
            out_shape,
            in_shape: shape.to_vec(),
            keep_stride,
            count: axes.iter().map(|&a| shape[a]).product(),
        })
    }

    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let n: usize = self.in_shape.iter().product();
        let rank = self.in_shape.len();
        let mut idx = vec![0usize; rank];
        let mut out = 0usize;
        for flat in 0..n {
            f(flat, out);
            // odometer increment
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                out += self.keep_stride[ax];
                if idx[ax] < self.in_shape[ax] {
                    break;
                }
                out -= self.keep_stride[ax] * self.in_shape[ax];
                idx[ax] = 0;
            }
        }
    }
}

pub(crate) fn mean<T: Real>(x: &Grid<T>, axes: &[usize]) -> Result<(Grid<T>, Reduction)> {
    let red = Reduction::new(x.shape(), axes)?;
    let mut out = vec![T::zero(); red.out_shape.iter().product()];
    let xd = x.data();
    red.for_each(|i, o| out[o] += xd[i]);
    let inv = T::one() / T::from_usize(red.count);
    out.iter_mut().for_each(|v| *v *= inv);
    Ok((Grid::from_parts(red.out_shape.clone(), out), red))
}

pub(crate) fn mean_backward<T: Real>(x: &Grid<T>, red: &Reduction, gout: &Grid<T>) -> Grid<T> {
    let inv = T::one() / T::from_usize(red.count);
    let mut gx = x.zeros_like();
    let (gd, gxd) = (gout.data(), gx.data_mut());
    red.for_each(|i, o| gxd[i] = gd[o] * inv);
    gx
}

/// `[F, D] -> [F, F, D]` with `out[i, j] = x[i] - x[j]`.
pub(crate) fn pairwise_diff<T: Real>(x: &Grid<T>) -> Result<Grid<T>> {
    let [f, d] = *x.shape() else {
        return shape_err(format!("pairwise difference expects [F, D], got {:?}", x.shape()));
    };
    let xd = x.data();
    let mut out = Vec::with_capacity(f * f * d);
    for i in 0..f {
        for j in 0..f {
            out.extend((0..d).map(|k| xd[i * d + k] - xd[j * d + k]));
        }
    }
    Ok(Grid::from_parts(vec![f, f, d], out))
}

pub(crate) fn pairwise_diff_backward<T: Real>(x: &Grid<T>, gout: &Grid<T>) -> Grid<T> {
    let (f, d) = (x.shape()[0], x.shape()[1]);
    let mut gx = x.zeros_like();
    let (gd, gxd) = (gout.data(), gx.data_mut());
    for i in 0..f {
        for j in 0..f {
            for k in 0..d {
                let g = gd[(i * f + j) * d + k];
                gxd[i * d + k] += g;
                gxd[j * d + k] -= g;
            }
        }
    }
    gx
}
