//! Dense tensors, reverse-mode differentiation, layers, and Adam.

mod element;
pub mod kernels;
pub mod layers;
mod optim;
mod tape;
mod tensor;

pub use element::Element;
pub use layers::{forward, LayerSpec, Mode, RunningStats};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tape::{BatchStats, Tape, Var};
pub use tensor::Tensor;

/// Mean softmax cross-entropy of `logits` (`[B, C]`) against class indices,
/// evaluated outside any tape.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> crate::Result<T> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone());
    let loss = tape.softmax_cross_entropy(z, targets)?;
    Ok(tape.value(loss).data()[0])
}
