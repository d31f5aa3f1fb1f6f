//! Fully-connected layer: `[B, In] x [Out, In]^T + bias -> [B, Out]`.

use rayon::prelude::*;

use super::dense::dot;
use crate::error::{contract, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<(usize, usize, usize)> {
    contract!(
        input.ndim() == 2 && weights.ndim() == 2,
        "fc expects 2-axis input and weights, got {:?} and {:?}",
        input.shape(),
        weights.shape()
    );
    let (b, n_in) = (input.dim(0), input.dim(1));
    let (n_out, w_in) = (weights.dim(0), weights.dim(1));
    contract!(
        w_in == n_in,
        "fc weights expect {w_in} inputs, input has {n_in}"
    );
    contract!(
        bias.shape() == [n_out],
        "fc bias shape {:?} != [{n_out}]",
        bias.shape()
    );
    Ok((b, n_in, n_out))
}

pub fn fc_forward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (b, n_in, n_out) = check(input, weights, bias)?;
    let wf = weights.to_f64_vec();
    let bf = bias.to_f64_vec();
    let xf = input.to_f64_vec();
    let mut out = Tensor::zeros([b, n_out])?;
    out.data_mut()
        .par_chunks_mut(n_out)
        .enumerate()
        .for_each(|(bi, row)| {
            let x_row = &xf[bi * n_in..(bi + 1) * n_in];
            for (o, (wrow, &bv)) in row.iter_mut().zip(wf.chunks(n_in).zip(&bf)) {
                *o = S::from_f64(dot(x_row, wrow) + bv);
            }
        });
    Ok(out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`.
pub fn fc_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (b, n_in, n_out) = check(input, weights, bias)?;
    contract!(
        grad_out.shape() == [b, n_out],
        "fc grad_out shape {:?} != [{b}, {n_out}]",
        grad_out.shape()
    );
    let wf = weights.to_f64_vec();
    let xf = input.to_f64_vec();
    let gf = grad_out.to_f64_vec();

    // batch reductions run sequentially in sample order
    let mut gw = vec![0f64; n_out * n_in];
    let mut gb = vec![0f64; n_out];
    for bi in 0..b {
        let g_row = &gf[bi * n_out..(bi + 1) * n_out];
        let x_row = &xf[bi * n_in..(bi + 1) * n_in];
        for (o, &g) in g_row.iter().enumerate() {
            gb[o] += g;
            for (slot, &x) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x_row) {
                *slot += g * x;
            }
        }
    }

    let mut grad_in = Tensor::zeros([b, n_in])?;
    grad_in
        .data_mut()
        .par_chunks_mut(n_in)
        .enumerate()
        .for_each(|(bi, row)| {
            let g_row = &gf[bi * n_out..(bi + 1) * n_out];
            for (i, slot) in row.iter_mut().enumerate() {
                let mut acc = 0f64;
                for (o, &g) in g_row.iter().enumerate() {
                    acc += g * wf[o * n_in + i];
                }
                *slot = S::from_f64(acc);
            }
        });

    Ok((
        grad_in,
        Tensor::from_f64_slice([n_out, n_in], &gw)?,
        Tensor::from_f64_slice([n_out], &gb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn forward_matches_hand_computed_case() {
        let x = Tensor::<f64>::new([2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        let w = Tensor::<f64>::new([2, 3], vec![0.5, -1.0, 2.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::<f64>::new([2], vec![0.25, -0.5]).unwrap();
        let y = fc_forward(&x, &w, &b).unwrap();
        // row 0: (0.5 - 2 + 6) + 0.25 = 4.75 ; (1 + 2 + 3) - 0.5 = 5.5
        // row 1: (-0.5 - 0.5 + 4) + 0.25 = 3.25 ; (-1 + 0.5 + 2) - 0.5 = 1.0
        assert_eq!(y.data(), &[4.75, 5.5, 3.25, 1.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        let rnd = |rng: &mut ChaCha20Rng, shape: &[usize]| {
            let len: usize = shape.iter().product();
            Tensor::<f64>::new(
                shape.to_vec(),
                (0..len).map(|_| rng.gen::<f64>() - 0.5).collect(),
            )
            .unwrap()
        };
        let x = rnd(&mut rng, &[3, 4]);
        let w = rnd(&mut rng, &[2, 4]);
        let b = rnd(&mut rng, &[2]);
        let proj = rnd(&mut rng, &[3, 2]);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let y = fc_forward(x, w, b).unwrap();
            y.data().iter().zip(proj.data()).map(|(a, p)| a * p).sum()
        };
        let (gi, gw, gb) = fc_backward(&x, &w, &b, &proj).unwrap();
        let h = 1e-6;
        let check = |analytic: &Tensor<f64>, which: usize| {
            for idx in 0..analytic.len() {
                let (mut xp, mut wp, mut bp) = (x.clone(), w.clone(), b.clone());
                let t: &mut Tensor<f64> = [&mut xp, &mut wp, &mut bp][which];
                let orig = t.data()[idx];
                t.data_mut()[idx] = orig + h;
                let lp = loss(&xp, &wp, &bp);
                let t: &mut Tensor<f64> = [&mut xp, &mut wp, &mut bp][which];
                t.data_mut()[idx] = orig - h;
                let lm = loss(&xp, &wp, &bp);
                let fd = (lp - lm) / (2.0 * h);
                let a = analytic.data()[idx];
                assert!(
                    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-6,
                    "which={which} idx={idx}: {a} vs {fd}"
                );
            }
        };
        check(&gi, 0);
        check(&gw, 1);
        check(&gb, 2);
    }
}
