//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! matrices.
//!
//! Every operation on a [`Tape`] computes its value eagerly and records how
//! to push a gradient back to its inputs. [`Tape::backward`] walks the record
//! in reverse from a scalar output. Parameters can be borrowed onto the tape
//! so a forward pass never copies weights.
//!
//! ```
//! use punchline_autograd::{Matrix, Tape};
//!
//! let w = Matrix::from_vec(2, 1, vec![0.5, -1.0]);
//! let tape = Tape::new();
//! let x = tape.constant(Matrix::from_vec(1, 2, vec![3.0, 4.0]));
//! let wv = tape.param(&w);
//! let y = tape.sum(tape.matmul(x, wv));
//! let grads = tape.backward(y);
//! assert_eq!(grads.get(wv).unwrap().data(), &[3.0, 4.0]);
//! ```

mod matrix;
mod tape;

pub mod check;

pub use matrix::Matrix;
pub use tape::{log_softmax, log_softmax_at, sigmoid, softmax_rows, Gradients, SoftmaxMask, Tape, Var};
