//! Dense rank-2 tensors with a recording tape for reverse-mode gradients.
//!
//! Operations are recorded on a [`Tape`] in execution order; a call to
//! [`Tape::backward`] sweeps the tape once in reverse and accumulates exact
//! analytic gradients into every value that requires them. Ragged
//! neighborhoods are handled with segment operations (`segment_sum`,
//! `segment_softmax`) keyed by a per-row segment id, so attention over a
//! sparse graph never materializes a padded adjacency matrix.
//!
//! ```
//! use vabs_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::row(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod error;
mod gradcheck;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, relative_error};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
