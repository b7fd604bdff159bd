//! Dense tensors, reverse-mode differentiation, and Adam — the numeric
//! substrate for the embedding network and the pointer.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::finite_diff_check;
pub use tape::{BnStats, Grads, Tape, Var};
pub use tensor::{Dtype, Scalar, Tensor};

use crate::error::Result;

/// Plain (non-recording) matrix product.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::matmul(a, b, false)
}

/// Plain 2D cross-correlation of a single `C x H x W` image.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<Tensor<T>> {
    let shape = input.shape().to_vec();
    if shape.len() != 3 {
        return Err(crate::error::Error::Dim(format!(
            "conv2d expects C x H x W input, got {shape:?}"
        )));
    }
    let x4 = input
        .clone()
        .reshaped(&[1, shape[0], shape[1], shape[2]])?;
    let (out, _) = kernels::conv2d_fwd(&x4, kernel, stride, pad, dilation)?;
    let os = out.shape().to_vec();
    out.reshaped(&[os[1], os[2], os[3]])
}

/// Plain row softmax.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let y = tape.softmax_rows(x)?;
    Ok(tape.val(y).clone())
}

/// Plain mean one-hot cross-entropy.
pub fn cross_entropy<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = tape.cross_entropy(p, target)?;
    Ok(tape.val(l).item())
}
