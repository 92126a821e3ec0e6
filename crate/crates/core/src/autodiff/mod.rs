//! Dense tensors, a define-by-run gradient tape, and the Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, WeightDecayMode};
pub use tape::{top_k_indices, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;

/// Numerically stable softmax of a vector.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}

#[cfg(test)]
mod tests;
