use crate::error::{shape_err, Result};
use crate::{Grid, Real};

/// Adaptive moment estimation over a fixed list of parameter grids.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(shapes: &[&Grid<T>]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|g| vec![T::zero(); g.len()]).collect(),
            v: shapes.iter().map(|g| vec![T::zero(); g.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. `grads[i]` pairs with `params[i]`;
    /// a `None` gradient leaves that parameter (and its moments) untouched.
    pub fn step(&mut self, params: &mut [&mut Grid<T>], grads: &[Option<&Grid<T>>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return shape_err("optimizer parameter count changed");
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.len() != p.len() || self.m[i].len() != p.len() {
                return shape_err(format!("gradient {i} does not match its parameter"));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1t * *mv + (T::one() - b1t) * gv;
                *vv = b2t * *vv + (T::one() - b2t) * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        // bias-corrected first step is lr * g / |g|
        let mut p = Grid::from_vec(&[3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let g = Grid::from_vec(&[3], vec![4.0, -0.1, 0.0]).unwrap();
        let mut opt = Adam::new(&[&p]);
        opt.step(&mut [&mut p], &[Some(&g)], 0.01).unwrap();
        let want = [0.99, -1.99, 0.5];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Grid::from_vec(&[2], vec![3.0f64, -4.0]).unwrap();
        let mut opt = Adam::new(&[&p]);
        for _ in 0..2000 {
            let g = p.map(|v| 2.0 * v);
            opt.step(&mut [&mut p], &[Some(&g)], 0.05).unwrap();
        }
        assert!(p.data().iter().all(|v| v.abs() < 1e-2));
    }
}
