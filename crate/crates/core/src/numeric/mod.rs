//! Tensor arithmetic, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{gradient_check, CheckOptions, CheckReport};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamStore, Tensor};

use crate::error::Result;

/// Matrix product of two 2-D tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let va = tape.constant(a.shape().to_vec(), a.data().to_vec())?;
    let vb = tape.constant(b.shape().to_vec(), b.data().to_vec())?;
    let out = tape.matmul(va, vb)?;
    Ok(tape.to_tensor(out))
}

/// Softmax along `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.shape().to_vec(), x.data().to_vec())?;
    let out = tape.softmax(v, axis)?;
    Ok(tape.to_tensor(out))
}

/// Layer normalization over the last axis.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.shape().to_vec(), x.data().to_vec())?;
    let g = tape.constant(gamma.shape().to_vec(), gamma.data().to_vec())?;
    let b = tape.constant(beta.shape().to_vec(), beta.data().to_vec())?;
    let out = tape.layer_norm(v, g, b, eps)?;
    Ok(tape.to_tensor(out))
}
