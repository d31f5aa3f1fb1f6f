//! Pointwise nonlinearities: ReLU, inverted dropout and row softmax.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use super::Mode;
use crate::error::{contract, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu_forward<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let mut out = input.clone();
    out.data_mut().par_chunks_mut(1 << 14).for_each(|chunk| {
        for v in chunk {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
    });
    out
}

/// `output` is the cached forward result; the subgradient at exactly zero
/// is zero.
pub fn relu_backward<S: Scalar>(output: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    contract!(
        output.shape() == grad_out.shape(),
        "relu backward shape mismatch: {:?} vs {:?}",
        output.shape(),
        grad_out.shape()
    );
    let mut grad = grad_out.clone();
    grad.data_mut()
        .iter_mut()
        .zip(output.data())
        .for_each(|(g, &o)| {
            if o <= S::zero() {
                *g = S::zero();
            }
        });
    Ok(grad)
}

/// Inverted dropout: in train mode each element is kept with probability
/// `keep` and scaled by `1/keep`, so eval mode is the identity. The mask is
/// drawn sequentially from `rng` (a single stream, regardless of threads);
/// `None` means "identity" and is returned in eval mode and for `keep == 1`.
pub fn dropout_forward<S: Scalar>(
    input: &Tensor<S>,
    keep: f64,
    rng: &mut ChaCha20Rng,
    mode: Mode,
) -> Result<(Tensor<S>, Option<Vec<S>>)> {
    contract!(
        keep > 0.0 && keep <= 1.0,
        "dropout keep probability {keep} outside (0, 1]"
    );
    if mode == Mode::Eval || keep == 1.0 {
        return Ok((input.clone(), None));
    }
    let inv = S::from_f64(1.0 / keep);
    let mask: Vec<S> = (0..input.len())
        .map(|_| {
            if rng.gen::<f64>() < keep {
                inv
            } else {
                S::zero()
            }
        })
        .collect();
    let mut out = input.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
        *o = *o * m;
    }
    Ok((out, Some(mask)))
}

pub fn dropout_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    mask: Option<&[S]>,
) -> Result<Tensor<S>> {
    let Some(mask) = mask else {
        return Ok(grad_out.clone());
    };
    contract!(
        mask.len() == grad_out.len(),
        "dropout mask length {} != gradient length {}",
        mask.len(),
        grad_out.len()
    );
    let mut grad = grad_out.clone();
    for (g, &m) in grad.data_mut().iter_mut().zip(mask) {
        *g = *g * m;
    }
    Ok(grad)
}

/// Row-wise softmax over `[B, K]` logits, computed in f64 with the usual
/// max-shift for stability.
pub fn softmax_forward<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    contract!(
        logits.ndim() == 2,
        "softmax expects [batch, classes], got shape {:?}",
        logits.shape()
    );
    let k = logits.dim(1);
    let mut out = Tensor::zeros(logits.shape().to_vec())?;
    let mut e = vec![0f64; k];
    for (row_in, row_out) in logits.data().chunks(k).zip(out.data_mut().chunks_mut(k)) {
        let m = row_in
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0f64;
        for (ei, v) in e.iter_mut().zip(row_in) {
            *ei = (v.as_f64() - m).exp();
            sum += *ei;
        }
        for (o, &ev) in row_out.iter_mut().zip(e.iter()) {
            *o = S::from_f64(ev / sum);
        }
    }
    Ok(out)
}
