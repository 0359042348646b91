//! A small reverse-mode differentiation engine over dense `f64` matrices.
//!
//! Values are recorded on a [`Tape`] as primitives execute; [`Tape::backward`]
//! replays them in reverse. The primitive set is deliberately narrow: linear
//! maps, elementwise arithmetic with a single row-broadcast rule, the two
//! activations, softmax, gradient reversal, masked pooling, cosine similarity,
//! temporal convolution, dropout and the two regression/classification losses.

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{finite_difference_check, finite_difference_check_entries, GradCheckReport};
pub use ops::{sigmoid, Activation, Elementwise, BCE_EPS, NORM_EPS};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
