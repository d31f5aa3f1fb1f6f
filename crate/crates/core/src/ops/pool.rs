//! Global average pooling: `[B, C, H, W]` -> `[B, C]`.

use rayon::prelude::*;

use super::conv::dims4;
use crate::error::{contract, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn global_avgpool_forward<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, c, h, w) = dims4(input, "pool input")?;
    let plane = h * w;
    let mut out = Tensor::zeros([b, c])?;
    let x = input.data();
    out.data_mut()
        .par_chunks_mut(c)
        .enumerate()
        .for_each(|(bi, row)| {
            for (ci, o) in row.iter_mut().enumerate() {
                let base = (bi * c + ci) * plane;
                let mut sum = 0f64;
                for &v in &x[base..base + plane] {
                    sum += v.as_f64();
                }
                *o = S::from_f64(sum / plane as f64);
            }
        });
    Ok(out)
}

pub fn global_avgpool_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    input_shape: &[usize],
) -> Result<Tensor<S>> {
    contract!(
        input_shape.len() == 4,
        "pool input shape must have 4 axes, got {input_shape:?}"
    );
    let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    contract!(
        grad_out.shape() == [b, c],
        "pool grad_out shape {:?} != [{b}, {c}]",
        grad_out.shape()
    );
    let plane = (h * w) as f64;
    let mut grad_in = Tensor::zeros(input_shape.to_vec())?;
    let g = grad_out.data();
    grad_in
        .data_mut()
        .chunks_mut(h * w)
        .enumerate()
        .for_each(|(bc, chunk)| {
            let v = S::from_f64(g[bc].as_f64() / plane);
            chunk.fill(v);
        });
    Ok(grad_in)
}
