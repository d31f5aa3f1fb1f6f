//! Binary cross-entropy over softmax probabilities.
//!
//! For a batch of `[B, 2]` probability rows with cloud-class probability
//! `p` and label `y` in {0, 1}, the loss is the mean of
//! `-(y ln p + (1 - y) ln(1 - p))`. Each term reads the probability the
//! row *stores* for the true class (rather than recomputing `1 - p`), so
//! a certain correct prediction costs exactly zero and swapping both the
//! labels and the row is a bit-exact identity. The stored value is floored
//! at `1e-12` to keep the logarithm finite. The returned gradient is taken
//! with respect to the *pre-softmax logits* (softmax and loss fused),
//! i.e. `(probs - onehot(y)) / B`.

use crate::error::{contract, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor keeping the logarithm finite on saturated wrong predictions.
pub const PROB_CLAMP: f64 = 1e-12;

/// Index of the positive (cloud / cloud-shadow) class in probability rows.
pub const POSITIVE_CLASS: usize = 1;

pub fn cross_entropy<S: Scalar>(
    probs: &Tensor<S>,
    labels: &[usize],
) -> Result<(f64, Tensor<S>)> {
    contract!(
        probs.ndim() == 2 && probs.dim(1) == 2,
        "cross-entropy expects [batch, 2] probabilities, got shape {:?}",
        probs.shape()
    );
    let b = probs.dim(0);
    contract!(
        labels.len() == b,
        "cross-entropy got {} labels for a batch of {b}",
        labels.len()
    );
    contract!(
        labels.iter().all(|&y| y < 2),
        "cross-entropy labels must be 0 or 1"
    );

    let mut grad = Tensor::zeros([b, 2])?;
    let mut sum = 0f64;
    for (bi, &y) in labels.iter().enumerate() {
        let p_true = probs.data()[bi * 2 + y].as_f64().max(PROB_CLAMP);
        sum += -p_true.ln();
        for k in 0..2 {
            let onehot = if k == y { 1.0 } else { 0.0 };
            grad.data_mut()[bi * 2 + k] =
                S::from_f64((probs.data()[bi * 2 + k].as_f64() - onehot) / b as f64);
        }
    }
    Ok((sum / b as f64, grad))
}
