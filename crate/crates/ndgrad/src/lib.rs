//! Minimal differentiable N-d array engine.
//!
//! Values live in [`Grid`]s; operations are recorded on a [`Tape`] as they run
//! and [`Tape::backward`] returns gradients for every leaf that asked for one.
//! The engine is generic over `f32` and `f64` through [`Real`].
//!
//! ```
//! use ndgrad::{Grid, Tape};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Grid::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod check;
mod error;
mod grid;
pub mod ops;
mod optim;
mod real;
mod tape;

pub use error::{GradError, Result};
pub use grid::{Grid, MAX_RANK};
pub use optim::Adam;
pub use real::Real;
pub use tape::{softmax_rows, Gradients, Tape, Var};
