//! Central finite differences, used as an independent oracle for the
//! reverse-mode gradients.

use crate::Grid;

/// Gradient of `f` at `x` by central differences with step `h`.
pub fn finite_difference(x: &Grid<f64>, h: f64, mut f: impl FnMut(&Grid<f64>) -> f64) -> Grid<f64> {
    let mut probe = x.clone();
    let mut grad = x.zeros_like();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest relative error `|a - b| / max(|a|, |b|, floor)` over all elements.
pub fn max_relative_error(a: &Grid<f64>, b: &Grid<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
