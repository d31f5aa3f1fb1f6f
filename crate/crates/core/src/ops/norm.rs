//! Per-channel batch normalization over `[B, C, H, W]`.
//!
//! Train mode normalizes by biased batch statistics and folds them into the
//! running estimates as `running = momentum * running + (1 - momentum) *
//! batch`; eval mode normalizes by the running estimates alone. Statistics
//! are accumulated per channel in f64.

use rayon::prelude::*;

use super::conv::dims4;
use crate::error::{contract, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Variance floor inside the normalizing square root.
pub const BN_EPS: f64 = 1e-5;

/// Everything the backward pass needs from a train-mode forward pass.
pub struct BnCache<S: Scalar> {
    pub xhat: Tensor<S>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

fn check_channel_vec<S: Scalar>(t: &Tensor<S>, c: usize, what: &str) -> Result<()> {
    contract!(
        t.shape() == [c],
        "{what} shape {:?} != [{c}]",
        t.shape()
    );
    Ok(())
}

/// Inference-mode forward: a per-channel affine map built from the running
/// statistics. Borrows everything immutably, so parameter sets stay
/// shareable across concurrent inference calls.
pub fn batchnorm_eval<S: Scalar>(
    input: &Tensor<S>,
    scale: &Tensor<S>,
    shift: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (_, c, h, w) = dims4(input, "batchnorm input")?;
    check_channel_vec(scale, c, "batchnorm scale")?;
    check_channel_vec(shift, c, "batchnorm shift")?;
    check_channel_vec(running_mean, c, "batchnorm running mean")?;
    check_channel_vec(running_var, c, "batchnorm running variance")?;

    let plane = h * w;
    let sample = c * plane;
    let x = input.data();

    // y = a*x + b with per-channel constants.
    let coeff: Vec<(f64, f64)> = (0..c)
        .map(|ci| {
            let rv = running_var.data()[ci].as_f64();
            let rm = running_mean.data()[ci].as_f64();
            let a = scale.data()[ci].as_f64() / (rv + BN_EPS).sqrt();
            (a, shift.data()[ci].as_f64() - rm * a)
        })
        .collect();
    let mut out = Tensor::zeros(input.shape().to_vec())?;
    out.data_mut()
        .par_chunks_mut(sample)
        .enumerate()
        .for_each(|(bi, out_b)| {
            let xb = &x[bi * sample..(bi + 1) * sample];
            for ci in 0..c {
                let (a, bb) = coeff[ci];
                for (o, &v) in out_b[ci * plane..(ci + 1) * plane]
                    .iter_mut()
                    .zip(&xb[ci * plane..(ci + 1) * plane])
                {
                    *o = S::from_f64(a * v.as_f64() + bb);
                }
            }
        });
    Ok(out)
}

/// Train-mode forward: normalizes by biased batch statistics and updates
/// `running_mean` / `running_var` in place (the one explicit in-place
/// mutation in the forward path). The batch must hold at least two samples.
pub fn batchnorm_train<S: Scalar>(
    input: &Tensor<S>,
    scale: &Tensor<S>,
    shift: &Tensor<S>,
    running_mean: &mut Tensor<S>,
    running_var: &mut Tensor<S>,
    momentum: f64,
) -> Result<(Tensor<S>, BnCache<S>)> {
    let (b, c, h, w) = dims4(input, "batchnorm input")?;
    check_channel_vec(scale, c, "batchnorm scale")?;
    check_channel_vec(shift, c, "batchnorm shift")?;
    check_channel_vec(running_mean, c, "batchnorm running mean")?;
    check_channel_vec(running_var, c, "batchnorm running variance")?;
    contract!(
        (0.0..1.0).contains(&momentum),
        "batchnorm momentum {momentum} outside [0, 1)"
    );
    contract!(
        b >= 2,
        "batchnorm in train mode needs a batch of at least 2 samples, got {b}"
    );

    let plane = h * w;
    let sample = c * plane;
    let x = input.data();

    // Two-pass biased statistics per channel, sequential within a channel
    // so the reduction order is fixed.
    let stats: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let mut sum = 0f64;
            for bi in 0..b {
                let base = bi * sample + ci * plane;
                for &v in &x[base..base + plane] {
                    sum += v.as_f64();
                }
            }
            let n = (b * plane) as f64;
            let mean = sum / n;
            let mut ss = 0f64;
            for bi in 0..b {
                let base = bi * sample + ci * plane;
                for &v in &x[base..base + plane] {
                    let d = v.as_f64() - mean;
                    ss += d * d;
                }
            }
            (mean, ss / n)
        })
        .collect();

    let inv_std: Vec<f64> = stats.iter().map(|&(_, v)| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut xhat = Tensor::zeros(input.shape().to_vec())?;
    let mut out = Tensor::zeros(input.shape().to_vec())?;
    let gamma: Vec<f64> = scale.to_f64_vec();
    let beta: Vec<f64> = shift.to_f64_vec();
    xhat.data_mut()
        .par_chunks_mut(sample)
        .zip(out.data_mut().par_chunks_mut(sample))
        .enumerate()
        .for_each(|(bi, (xh_b, out_b))| {
            let xb = &x[bi * sample..(bi + 1) * sample];
            for ci in 0..c {
                let (mean, _) = stats[ci];
                let is = inv_std[ci];
                let (g, be) = (gamma[ci], beta[ci]);
                for j in ci * plane..(ci + 1) * plane {
                    let xh = (xb[j].as_f64() - mean) * is;
                    xh_b[j] = S::from_f64(xh);
                    out_b[j] = S::from_f64(g * xh + be);
                }
            }
        });

    for ci in 0..c {
        let (mean, var) = stats[ci];
        let rm = running_mean.data()[ci].as_f64();
        let rv = running_var.data()[ci].as_f64();
        running_mean.data_mut()[ci] = S::from_f64(momentum * rm + (1.0 - momentum) * mean);
        running_var.data_mut()[ci] = S::from_f64(momentum * rv + (1.0 - momentum) * var);
    }

    let cache = BnCache {
        xhat,
        inv_std,
        batch_mean: stats.iter().map(|&(m, _)| m).collect(),
        batch_var: stats.iter().map(|&(_, v)| v).collect(),
    };
    Ok((out, cache))
}

/// Backward pass for a train-mode forward. Returns `(grad_input,
/// grad_scale, grad_shift)`.
pub fn batchnorm_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    scale: &Tensor<S>,
    cache: &BnCache<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (b, c, h, w) = dims4(grad_out, "batchnorm grad_out")?;
    contract!(
        cache.xhat.shape() == grad_out.shape(),
        "batchnorm cache shape {:?} != grad_out shape {:?}",
        cache.xhat.shape(),
        grad_out.shape()
    );
    check_channel_vec(scale, c, "batchnorm scale")?;

    let plane = h * w;
    let sample = c * plane;
    let n = (b * plane) as f64;
    let g = grad_out.data();
    let xh = cache.xhat.data();

    // Per-channel sums of g and g*xhat, fixed order within each channel.
    let sums: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let (mut s1, mut s2) = (0f64, 0f64);
            for bi in 0..b {
                let base = bi * sample + ci * plane;
                for j in base..base + plane {
                    let gv = g[j].as_f64();
                    s1 += gv;
                    s2 += gv * xh[j].as_f64();
                }
            }
            (s1, s2)
        })
        .collect();

    let grad_shift = Tensor::from_f64_slice([c], &sums.iter().map(|&(s1, _)| s1).collect::<Vec<_>>())?;
    let grad_scale = Tensor::from_f64_slice([c], &sums.iter().map(|&(_, s2)| s2).collect::<Vec<_>>())?;

    let gamma: Vec<f64> = scale.to_f64_vec();
    let mut grad_in = Tensor::zeros(grad_out.shape().to_vec())?;
    grad_in
        .data_mut()
        .par_chunks_mut(sample)
        .enumerate()
        .for_each(|(bi, gi_b)| {
            for ci in 0..c {
                let (s1, s2) = sums[ci];
                let k = gamma[ci] * cache.inv_std[ci] / n;
                for j in ci * plane..(ci + 1) * plane {
                    let gj = g[bi * sample + j].as_f64();
                    let xj = xh[bi * sample + j].as_f64();
                    gi_b[j] = S::from_f64(k * (n * gj - s1 - xj * s2));
                }
            }
        });
    Ok((grad_in, grad_scale, grad_shift))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..len).map(|_| rng.gen::<f64>() * 3.0 - 1.0).collect(),
        )
        .unwrap()
    }

    fn identity_params(c: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (
            Tensor::filled([c], 1.0).unwrap(),
            Tensor::zeros([c]).unwrap(),
            Tensor::zeros([c]).unwrap(),
            Tensor::filled([c], 1.0).unwrap(),
        )
    }

    #[test]
    fn eval_with_identity_params_is_identity_up_to_eps() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let x = random(&mut rng, &[2, 3, 4, 4]);
        let (scale, shift, rm, rv) = identity_params(3);
        let y = batchnorm_eval(&x, &scale, &shift, &rm, &rv).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            // only the epsilon term perturbs the value: 1/sqrt(1+1e-5)
            assert!((a - b).abs() <= a.abs() * 1e-4 + 1e-12);
        }
        // running stats untouched in eval mode
        assert!(rm.data().iter().all(|&v| v == 0.0));
        assert!(rv.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn train_output_has_zero_mean_unit_variance() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let x = random(&mut rng, &[4, 3, 5, 5]);
        let (scale, shift, mut rm, mut rv) = identity_params(3);
        let (y, _) = batchnorm_train(&x, &scale, &shift, &mut rm, &mut rv, 0.9).unwrap();
        let (b, c, plane) = (4, 3, 25);
        for ci in 0..c {
            let mut vals = Vec::new();
            for bi in 0..b {
                for j in 0..plane {
                    vals.push(y.data()[(bi * c + ci) * plane + j]);
                }
            }
            let n = vals.len() as f64;
            let mean: f64 = vals.iter().sum::<f64>() / n;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6, "channel {ci} mean {mean}");
            // output variance = var/(var+eps), slightly under 1
            assert!((var - 1.0).abs() < 1e-3, "channel {ci} var {var}");
        }
    }

    #[test]
    fn running_stats_match_hand_computed_ema() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let x = random(&mut rng, &[3, 2, 4, 4]);
        let scale = Tensor::filled([2], 1.0).unwrap();
        let shift = Tensor::zeros([2]).unwrap();
        let mut rm = Tensor::new([2], vec![0.25, -0.5]).unwrap();
        let mut rv = Tensor::new([2], vec![2.0, 0.75]).unwrap();
        let momentum = 0.9;

        // oracle: batch statistics from an independent direct loop
        let (b, c, plane) = (3usize, 2usize, 16usize);
        let mut expect_rm = Vec::new();
        let mut expect_rv = Vec::new();
        for ci in 0..c {
            let mut vals = Vec::new();
            for bi in 0..b {
                for j in 0..plane {
                    vals.push(x.data()[(bi * c + ci) * plane + j]);
                }
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            expect_rm.push(momentum * rm.data()[ci] + (1.0 - momentum) * mean);
            expect_rv.push(momentum * rv.data()[ci] + (1.0 - momentum) * var);
        }

        batchnorm_train(&x, &scale, &shift, &mut rm, &mut rv, momentum).unwrap();
        for ci in 0..c {
            assert!((rm.data()[ci] - expect_rm[ci]).abs() < 1e-12);
            assert!((rv.data()[ci] - expect_rv[ci]).abs() < 1e-12);
            assert!(rv.data()[ci] > 0.0);
        }
    }

    #[test]
    fn train_mode_rejects_single_sample_batch() {
        let x = Tensor::<f64>::zeros([1, 2, 3, 3]).unwrap();
        let (scale, shift, mut rm, mut rv) = identity_params(2);
        let err = batchnorm_train(&x, &scale, &shift, &mut rm, &mut rv, 0.9);
        assert!(err.is_err());
        // eval mode is fine with one sample
        assert!(batchnorm_eval(&x, &scale, &shift, &rm, &rv).is_ok());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(24);
        let x = random(&mut rng, &[3, 2, 3, 4]);
        let scale = Tensor::new([2], vec![1.3, 0.7]).unwrap();
        let shift = Tensor::new([2], vec![0.1, -0.2]).unwrap();
        let proj = random(&mut rng, &[3, 2, 3, 4]);

        let loss = |x: &Tensor<f64>, scale: &Tensor<f64>, shift: &Tensor<f64>| -> f64 {
            let (mut rm, mut rv) = (Tensor::zeros([2]).unwrap(), Tensor::filled([2], 1.0).unwrap());
            let (y, _) = batchnorm_train(x, scale, shift, &mut rm, &mut rv, 0.9).unwrap();
            y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        };

        let (mut rm, mut rv) = (Tensor::zeros([2]).unwrap(), Tensor::filled([2], 1.0).unwrap());
        let (_, cache) = batchnorm_train(&x, &scale, &shift, &mut rm, &mut rv, 0.9).unwrap();
        let (gi, gs, gb) = batchnorm_backward(&proj, &scale, &cache).unwrap();

        let h = 1e-5;
        let check = |analytic: &Tensor<f64>, which: usize| {
            for idx in 0..analytic.len() {
                let (mut xp, mut sp, mut bp) = (x.clone(), scale.clone(), shift.clone());
                let t: &mut Tensor<f64> = [&mut xp, &mut sp, &mut bp][which];
                let orig = t.data()[idx];
                t.data_mut()[idx] = orig + h;
                let lp = loss(&xp, &sp, &bp);
                let t: &mut Tensor<f64> = [&mut xp, &mut sp, &mut bp][which];
                t.data_mut()[idx] = orig - h;
                let lm = loss(&xp, &sp, &bp);
                let fd = (lp - lm) / (2.0 * h);
                let a = analytic.data()[idx];
                let denom = a.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (a - fd).abs() / denom < 1e-6,
                    "which={which} idx={idx}: analytic {a} vs fd {fd}"
                );
            }
        };
        check(&gi, 0);
        check(&gs, 1);
        check(&gb, 2);
    }
}
