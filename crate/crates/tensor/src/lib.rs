//! Minimal dense tensor library with a reverse-mode autodiff tape.
//!
//! Everything is `f64` and single-threaded so that gradient checks run at
//! double precision and repeated runs are bit-identical.

pub mod gradcheck;
pub mod nn;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, random_projection, GradCheckOptions, GradCheckReport};
pub use tape::{sigmoid, BackwardCtx, BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
