//! The 6n+2-layer residual classifier: a 3×3 stem convolution, three stages
//! of n residual blocks at the configured widths (stages 2 and 3 opening
//! with stride 2), global average pooling, dropout, and a binary
//! fully-connected head with softmax. Each block is conv→norm→ReLU→
//! conv→norm, plus the shortcut, then a final ReLU; shortcuts are the
//! identity except where shape changes, which use a 1×1 projection
//! convolution followed by normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_check, contract, Error, Result};
use crate::ops::act::{dropout_backward, dropout_forward, relu_backward, relu_forward, softmax_forward};
use crate::ops::conv::{conv2d_backward, conv2d_forward, conv_out_extent};
use crate::ops::fc::{fc_backward, fc_forward};
use crate::ops::gradcheck::{check_fd, GradCheckReport};
use crate::ops::loss::cross_entropy;
use crate::ops::norm::{batchnorm_backward, batchnorm_eval, batchnorm_train, BnCache};
use crate::ops::pool::{global_avgpool_backward, global_avgpool_forward};
use crate::ops::Mode;
use crate::resnet::params::{GradSet, LayerParams, LayerPath, ParameterSet};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// Exponential-moving-average coefficient for the running batch statistics
/// (`running = momentum·running + (1−momentum)·batch`).
pub const BN_MOMENTUM: f64 = 0.9;

/// Everything needed to build the classifier. The canonical depths
/// `n ∈ {3, 5, 7, 9}` give the 20/32/44/56-layer family at widths
/// `[16, 32, 64]`; any `n ≥ 1` and any positive widths build, which the
/// finite-difference harness and the fast end-to-end suite rely on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Blocks per stage; the weighted layer count is `6n + 2`.
    pub depth_param_n: usize,
    /// Channel widths of the three stages.
    pub stage_widths: [usize; 3],
    /// Spectral bands per input patch.
    pub input_channels: usize,
    /// Side length of the square input patch; odd, so a central pixel
    /// exists.
    pub input_extent: usize,
    /// Always 2: clear vs cloud/shadow.
    pub num_classes: usize,
    /// Keep probability of the dropout between pooling and the classifier.
    pub dropout_keep: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth_param_n: 3,
            stage_widths: [16, 32, 64],
            input_channels: 7,
            input_extent: 15,
            num_classes: 2,
            dropout_keep: 0.5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        config_check!(
            (1..=99).contains(&self.depth_param_n),
            "depth parameter n = {} outside 1..=99 (canonical values are 3, 5, 7, 9)",
            self.depth_param_n
        );
        config_check!(
            self.stage_widths.iter().all(|&w| w >= 1),
            "stage widths {:?} must all be at least 1",
            self.stage_widths
        );
        config_check!(
            (1..=8).contains(&self.input_channels),
            "input channel count {} outside 1..=8",
            self.input_channels
        );
        config_check!(
            self.input_extent % 2 == 1,
            "input extent {} must be odd so a central pixel exists",
            self.input_extent
        );
        config_check!(
            self.num_classes == 2,
            "the classifier is binary; num_classes must be 2, got {}",
            self.num_classes
        );
        config_check!(
            self.dropout_keep > 0.0 && self.dropout_keep <= 1.0,
            "dropout keep probability {} outside (0, 1]",
            self.dropout_keep
        );
        Ok(())
    }

    /// Expected layer paths in forward order; the key set of any parameter
    /// set built from this configuration.
    pub fn layer_paths(&self) -> Vec<LayerPath> {
        let mut paths = vec![LayerPath::StemConv, LayerPath::StemNorm];
        for d in layout(self).0 {
            let (stage, block) = (d.stage, d.block);
            paths.push(LayerPath::BlockConv {
                stage,
                block,
                which: 0,
            });
            paths.push(LayerPath::BlockNorm {
                stage,
                block,
                which: 0,
            });
            paths.push(LayerPath::BlockConv {
                stage,
                block,
                which: 1,
            });
            paths.push(LayerPath::BlockNorm {
                stage,
                block,
                which: 1,
            });
            if d.projected {
                paths.push(LayerPath::ProjConv { stage, block });
                paths.push(LayerPath::ProjNorm { stage, block });
            }
        }
        paths.push(LayerPath::Fc);
        paths
    }
}

/// Static description of one residual block and where its entries sit in
/// the parameter list. Build, forward, and backward all walk this same
/// layout, so they cannot drift apart.
struct BlockDesc {
    stage: u8,
    block: u8,
    projected: bool,
    /// Index of the block's first entry (`conv0`).
    entry: usize,
}

/// Returns the block descriptors and the index of the `fc` entry.
fn layout(config: &NetworkConfig) -> (Vec<BlockDesc>, usize) {
    let mut blocks = Vec::with_capacity(3 * config.depth_param_n);
    let mut entry = 2; // stem.conv, stem.norm
    let mut cin = config.stage_widths[0];
    for (si, &w) in config.stage_widths.iter().enumerate() {
        for b in 0..config.depth_param_n {
            let stride = if si > 0 && b == 0 { 2 } else { 1 };
            let projected = stride != 1 || cin != w;
            blocks.push(BlockDesc {
                stage: si as u8 + 1,
                block: b as u8,
                projected,
                entry,
            });
            entry += if projected { 6 } else { 4 };
            cin = w;
        }
    }
    (blocks, entry)
}

/// One standard normal draw (Box–Muller; `u1` is kept away from zero so the
/// logarithm stays finite).
fn normal(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Scaled normal initialization for layers feeding rectifiers:
/// `std = sqrt(2 / fan_in)`.
fn he_fill<S: Scalar>(t: &mut Tensor<S>, fan_in: usize, rng: &mut ChaCha20Rng) {
    let std = (2.0 / fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = S::from_f64(normal(rng) * std);
    }
}

fn conv_entry<S: Scalar>(
    rng: &mut ChaCha20Rng,
    cout: usize,
    cin: usize,
    k: usize,
    stride: usize,
) -> Result<LayerParams<S>> {
    let mut weights = Tensor::zeros([cout, cin, k, k])?;
    he_fill(&mut weights, cin * k * k, rng);
    Ok(LayerParams::Conv { weights, stride })
}

fn norm_entry<S: Scalar>(channels: usize) -> Result<LayerParams<S>> {
    Ok(LayerParams::Norm {
        scale: Tensor::filled([channels], S::one())?,
        shift: Tensor::zeros([channels])?,
        running_mean: Tensor::zeros([channels])?,
        running_var: Tensor::filled([channels], S::one())?,
        momentum: BN_MOMENTUM,
    })
}

/// Builds a freshly initialized parameter set: scaled-normal convolution
/// and classifier weights drawn from one sequential stream seeded by
/// `seed`, unit normalization scales, zero shifts and biases. Bit-identical
/// for equal `(config, seed)`.
pub fn build<S: Scalar>(config: &NetworkConfig, seed: u64) -> Result<ParameterSet<S>> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut entries: Vec<(LayerPath, LayerParams<S>)> = Vec::new();
    let w0 = config.stage_widths[0];
    entries.push((
        LayerPath::StemConv,
        conv_entry(&mut rng, w0, config.input_channels, 3, 1)?,
    ));
    entries.push((LayerPath::StemNorm, norm_entry(w0)?));

    let mut cin = w0;
    for (si, &w) in config.stage_widths.iter().enumerate() {
        let stage = si as u8 + 1;
        for b in 0..config.depth_param_n {
            let stride = if si > 0 && b == 0 { 2 } else { 1 };
            let block = b as u8;
            entries.push((
                LayerPath::BlockConv {
                    stage,
                    block,
                    which: 0,
                },
                conv_entry(&mut rng, w, cin, 3, stride)?,
            ));
            entries.push((
                LayerPath::BlockNorm {
                    stage,
                    block,
                    which: 0,
                },
                norm_entry(w)?,
            ));
            entries.push((
                LayerPath::BlockConv {
                    stage,
                    block,
                    which: 1,
                },
                conv_entry(&mut rng, w, w, 3, 1)?,
            ));
            entries.push((
                LayerPath::BlockNorm {
                    stage,
                    block,
                    which: 1,
                },
                norm_entry(w)?,
            ));
            if stride != 1 || cin != w {
                entries.push((
                    LayerPath::ProjConv { stage, block },
                    conv_entry(&mut rng, w, cin, 1, stride)?,
                ));
                entries.push((LayerPath::ProjNorm { stage, block }, norm_entry(w)?));
            }
            cin = w;
        }
    }

    let mut fc_weights = Tensor::zeros([config.num_classes, config.stage_widths[2]])?;
    he_fill(&mut fc_weights, config.stage_widths[2], &mut rng);
    entries.push((
        LayerPath::Fc,
        LayerParams::Dense {
            weights: fc_weights,
            bias: Tensor::zeros([config.num_classes])?,
        },
    ));

    Ok(ParameterSet::from_entries(config.clone(), entries))
}

fn conv_at<'p, S: Scalar>(
    params: &'p ParameterSet<S>,
    index: usize,
    expect: LayerPath,
) -> Result<(&'p Tensor<S>, usize)> {
    match params.at(index, expect)? {
        LayerParams::Conv { weights, stride } => Ok((weights, *stride)),
        _ => Err(Error::Contract(format!("{expect} is not a convolution"))),
    }
}

fn norm_scale_at<'p, S: Scalar>(
    params: &'p ParameterSet<S>,
    index: usize,
    expect: LayerPath,
) -> Result<&'p Tensor<S>> {
    match params.at(index, expect)? {
        LayerParams::Norm { scale, .. } => Ok(scale),
        _ => Err(Error::Contract(format!("{expect} is not a normalization"))),
    }
}

fn dense_at<'p, S: Scalar>(
    params: &'p ParameterSet<S>,
    index: usize,
) -> Result<(&'p Tensor<S>, &'p Tensor<S>)> {
    match params.at(index, LayerPath::Fc)? {
        LayerParams::Dense { weights, bias } => Ok((weights, bias)),
        _ => Err(Error::Contract("fc is not a dense layer".into())),
    }
}

fn norm_eval_step<S: Scalar>(
    params: &ParameterSet<S>,
    index: usize,
    expect: LayerPath,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    match params.at(index, expect)? {
        LayerParams::Norm {
            scale,
            shift,
            running_mean,
            running_var,
            ..
        } => batchnorm_eval(x, scale, shift, running_mean, running_var),
        _ => Err(Error::Contract(format!("{expect} is not a normalization"))),
    }
}

fn norm_train_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    index: usize,
    expect: LayerPath,
    x: &Tensor<S>,
) -> Result<(Tensor<S>, BnCache<S>)> {
    match params.at_mut(index, expect)? {
        LayerParams::Norm {
            scale,
            shift,
            running_mean,
            running_var,
            momentum,
        } => batchnorm_train(x, scale, shift, running_mean, running_var, *momentum),
        _ => Err(Error::Contract(format!("{expect} is not a normalization"))),
    }
}

/// Elementwise sum for the residual join.
fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    contract!(
        a.shape() == b.shape(),
        "residual join shapes differ: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let mut out = a.clone();
    out.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(o, &v)| *o = S::from_f64(o.as_f64() + v.as_f64()));
    Ok(out)
}

fn check_input<S: Scalar>(config: &NetworkConfig, batch: &Tensor<S>) -> Result<()> {
    let e = config.input_extent;
    contract!(
        batch.ndim() == 4
            && batch.dim(1) == config.input_channels
            && batch.dim(2) == e
            && batch.dim(3) == e,
        "input batch shape {:?} does not match [*, {}, {e}, {e}]",
        batch.shape(),
        config.input_channels
    );
    Ok(())
}

struct BlockCache<S: Scalar> {
    input: Tensor<S>,
    bn0: BnCache<S>,
    relu0: Tensor<S>,
    bn1: BnCache<S>,
    proj_bn: Option<BnCache<S>>,
    out: Tensor<S>,
}

/// Activations retained by a train-mode forward for the backward pass.
pub struct TrainCache<S: Scalar> {
    version: u64,
    input: Tensor<S>,
    stem_bn: BnCache<S>,
    stem_out: Tensor<S>,
    blocks: Vec<BlockCache<S>>,
    dropout_mask: Option<Vec<S>>,
    dropped: Tensor<S>,
    probs: Tensor<S>,
}

impl<S: Scalar> TrainCache<S> {
    pub fn probs(&self) -> &Tensor<S> {
        &self.probs
    }
}

/// Train-mode forward: batch statistics drive normalization (updating the
/// running estimates in place) and dropout draws its mask from `rng`.
/// Returns the class probabilities and the activation cache for
/// [`backward`].
pub fn forward_train<S: Scalar>(
    params: &mut ParameterSet<S>,
    batch: &Tensor<S>,
    rng: &mut ChaCha20Rng,
) -> Result<(Tensor<S>, TrainCache<S>)> {
    let config = params.config().clone();
    check_input(&config, batch)?;
    let (blocks, fc_index) = layout(&config);

    let x = conv_at(params, 0, LayerPath::StemConv)
        .and_then(|(w, s)| conv2d_forward(batch, w, None, s))?;
    let (x, stem_bn) = norm_train_step(params, 1, LayerPath::StemNorm, &x)?;
    let stem_out = relu_forward(&x);

    let mut x = stem_out.clone();
    let mut caches = Vec::with_capacity(blocks.len());
    for d in &blocks {
        let (stage, block) = (d.stage, d.block);
        let input = x;
        let y = conv_at(
            params,
            d.entry,
            LayerPath::BlockConv {
                stage,
                block,
                which: 0,
            },
        )
        .and_then(|(w, s)| conv2d_forward(&input, w, None, s))?;
        let (y, bn0) = norm_train_step(
            params,
            d.entry + 1,
            LayerPath::BlockNorm {
                stage,
                block,
                which: 0,
            },
            &y,
        )?;
        let relu0 = relu_forward(&y);
        let y = conv_at(
            params,
            d.entry + 2,
            LayerPath::BlockConv {
                stage,
                block,
                which: 1,
            },
        )
        .and_then(|(w, s)| conv2d_forward(&relu0, w, None, s))?;
        let (y, bn1) = norm_train_step(
            params,
            d.entry + 3,
            LayerPath::BlockNorm {
                stage,
                block,
                which: 1,
            },
            &y,
        )?;
        let (shortcut, proj_bn) = if d.projected {
            let s = conv_at(params, d.entry + 4, LayerPath::ProjConv { stage, block })
                .and_then(|(w, st)| conv2d_forward(&input, w, None, st))?;
            let (s, bn) =
                norm_train_step(params, d.entry + 5, LayerPath::ProjNorm { stage, block }, &s)?;
            (s, Some(bn))
        } else {
            (input.clone(), None)
        };
        let out = relu_forward(&add(&y, &shortcut)?);
        caches.push(BlockCache {
            input,
            bn0,
            relu0,
            bn1,
            proj_bn,
            out: out.clone(),
        });
        x = out;
    }

    let pooled = global_avgpool_forward(&x)?;
    let (dropped, dropout_mask) = dropout_forward(&pooled, config.dropout_keep, rng, Mode::Train)?;
    let (fw, fb) = dense_at(params, fc_index)?;
    let logits = fc_forward(&dropped, fw, fb)?;
    let probs = softmax_forward(&logits)?;

    let cache = TrainCache {
        version: params.version(),
        input: batch.clone(),
        stem_bn,
        stem_out,
        blocks: caches,
        dropout_mask,
        dropped,
        probs: probs.clone(),
    };
    Ok((probs, cache))
}

/// Eval-mode forward: running statistics drive normalization, dropout is
/// the identity, nothing is mutated or cached. Safe to call concurrently
/// on a shared parameter set; bit-deterministic for a given input.
pub fn forward_eval<S: Scalar>(params: &ParameterSet<S>, batch: &Tensor<S>) -> Result<Tensor<S>> {
    forward_eval_inner(params, batch, None)
}

/// Per-sample output shapes down the network, e.g. `("stage2", [32, 8, 8])`.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

/// Eval-mode forward that also reports the shape each stage produces.
pub fn forward_eval_traced<S: Scalar>(
    params: &ParameterSet<S>,
    batch: &Tensor<S>,
) -> Result<(Tensor<S>, ShapeTrace)> {
    let mut trace = ShapeTrace::new();
    let probs = forward_eval_inner(params, batch, Some(&mut trace))?;
    Ok((probs, trace))
}

fn per_sample_shape<S: Scalar>(t: &Tensor<S>) -> Vec<usize> {
    t.shape()[1..].to_vec()
}

fn forward_eval_inner<S: Scalar>(
    params: &ParameterSet<S>,
    batch: &Tensor<S>,
    mut trace: Option<&mut ShapeTrace>,
) -> Result<Tensor<S>> {
    let config = params.config();
    check_input(config, batch)?;
    let (blocks, fc_index) = layout(config);
    if let Some(t) = trace.as_deref_mut() {
        t.push(("input".into(), per_sample_shape(batch)));
    }

    let x = conv_at(params, 0, LayerPath::StemConv)
        .and_then(|(w, s)| conv2d_forward(batch, w, None, s))?;
    let x = norm_eval_step(params, 1, LayerPath::StemNorm, &x)?;
    let mut x = relu_forward(&x);
    if let Some(t) = trace.as_deref_mut() {
        t.push(("stem".into(), per_sample_shape(&x)));
    }

    for d in &blocks {
        let (stage, block) = (d.stage, d.block);
        let input = x;
        let y = conv_at(
            params,
            d.entry,
            LayerPath::BlockConv {
                stage,
                block,
                which: 0,
            },
        )
        .and_then(|(w, s)| conv2d_forward(&input, w, None, s))?;
        let y = norm_eval_step(
            params,
            d.entry + 1,
            LayerPath::BlockNorm {
                stage,
                block,
                which: 0,
            },
            &y,
        )?;
        let y = relu_forward(&y);
        let y = conv_at(
            params,
            d.entry + 2,
            LayerPath::BlockConv {
                stage,
                block,
                which: 1,
            },
        )
        .and_then(|(w, s)| conv2d_forward(&y, w, None, s))?;
        let y = norm_eval_step(
            params,
            d.entry + 3,
            LayerPath::BlockNorm {
                stage,
                block,
                which: 1,
            },
            &y,
        )?;
        let shortcut = if d.projected {
            let s = conv_at(params, d.entry + 4, LayerPath::ProjConv { stage, block })
                .and_then(|(w, st)| conv2d_forward(&input, w, None, st))?;
            norm_eval_step(params, d.entry + 5, LayerPath::ProjNorm { stage, block }, &s)?
        } else {
            input
        };
        x = relu_forward(&add(&y, &shortcut)?);
        if let Some(t) = trace.as_deref_mut() {
            let last_of_stage = d.block as usize + 1 == config.depth_param_n;
            if last_of_stage {
                t.push((format!("stage{stage}"), per_sample_shape(&x)));
            }
        }
    }

    let pooled = global_avgpool_forward(&x)?;
    if let Some(t) = trace.as_deref_mut() {
        t.push(("pool".into(), per_sample_shape(&pooled)));
    }
    let (fw, fb) = dense_at(params, fc_index)?;
    let logits = fc_forward(&pooled, fw, fb)?;
    let probs = softmax_forward(&logits)?;
    if let Some(t) = trace {
        t.push(("softmax".into(), per_sample_shape(&probs)));
    }
    Ok(probs)
}

/// Gradients of the mean cross-entropy over the cached batch with respect
/// to every learnable array, plus the loss value itself.
pub fn backward<S: Scalar>(
    params: &ParameterSet<S>,
    cache: &TrainCache<S>,
    labels: &[usize],
) -> Result<(GradSet<S>, f64)> {
    let (loss, grad_logits) = cross_entropy(&cache.probs, labels)?;
    let grads = backward_from(params, cache, &grad_logits)?;
    Ok((grads, loss))
}

/// Backpropagates an arbitrary gradient with respect to the pre-softmax
/// probabilities' logits. Exposed separately because it is linear in
/// `grad_logits`, a property the tests pin down.
pub fn backward_from<S: Scalar>(
    params: &ParameterSet<S>,
    cache: &TrainCache<S>,
    grad_logits: &Tensor<S>,
) -> Result<GradSet<S>> {
    contract!(
        cache.version == params.version(),
        "stale activation cache: parameters have version {}, cache was built at {}",
        params.version(),
        cache.version
    );
    let config = params.config();
    let (blocks, fc_index) = layout(config);
    contract!(
        cache.blocks.len() == blocks.len(),
        "activation cache holds {} blocks, network has {}",
        cache.blocks.len(),
        blocks.len()
    );
    let mut grads = GradSet::zeros_like(params);

    let (fw, fb) = dense_at(params, fc_index)?;
    let (g, gw_fc, gb_fc) = fc_backward(&cache.dropped, fw, fb, grad_logits)?;
    grads.set("fc.weights", gw_fc)?;
    grads.set("fc.bias", gb_fc)?;

    let g = dropout_backward(&g, cache.dropout_mask.as_deref())?;
    let last_shape = cache
        .blocks
        .last()
        .map(|b| b.out.shape().to_vec())
        .expect("a built network has at least one block per stage");
    let mut g = global_avgpool_backward(&g, &last_shape)?;

    for (d, bc) in blocks.iter().zip(&cache.blocks).rev() {
        let (stage, block) = (d.stage, d.block);
        // final ReLU, then the join fans the gradient into both arms
        let g_sum = relu_backward(&bc.out, &g)?;

        let path_norm1 = LayerPath::BlockNorm {
            stage,
            block,
            which: 1,
        };
        let (g_c1, gs1, gsh1) =
            batchnorm_backward(&g_sum, norm_scale_at(params, d.entry + 3, path_norm1)?, &bc.bn1)?;
        grads.set(&format!("{path_norm1}.scale"), gs1)?;
        grads.set(&format!("{path_norm1}.shift"), gsh1)?;

        let path_conv1 = LayerPath::BlockConv {
            stage,
            block,
            which: 1,
        };
        let (w1, s1) = conv_at(params, d.entry + 2, path_conv1)?;
        let (g_relu0, gw1, _) = conv2d_backward(&bc.relu0, w1, s1, &g_c1, false)?;
        grads.set(&format!("{path_conv1}.weights"), gw1)?;

        let g_bn0 = relu_backward(&bc.relu0, &g_relu0)?;
        let path_norm0 = LayerPath::BlockNorm {
            stage,
            block,
            which: 0,
        };
        let (g_c0, gs0, gsh0) =
            batchnorm_backward(&g_bn0, norm_scale_at(params, d.entry + 1, path_norm0)?, &bc.bn0)?;
        grads.set(&format!("{path_norm0}.scale"), gs0)?;
        grads.set(&format!("{path_norm0}.shift"), gsh0)?;

        let path_conv0 = LayerPath::BlockConv {
            stage,
            block,
            which: 0,
        };
        let (w0, s0) = conv_at(params, d.entry, path_conv0)?;
        let (g_branch, gw0, _) = conv2d_backward(&bc.input, w0, s0, &g_c0, false)?;
        grads.set(&format!("{path_conv0}.weights"), gw0)?;

        let g_shortcut = if d.projected {
            let proj_bn = bc
                .proj_bn
                .as_ref()
                .ok_or_else(|| Error::Contract("projected block cached without its shortcut".into()))?;
            let path_pn = LayerPath::ProjNorm { stage, block };
            let (g_pc, gps, gpsh) =
                batchnorm_backward(&g_sum, norm_scale_at(params, d.entry + 5, path_pn)?, proj_bn)?;
            grads.set(&format!("{path_pn}.scale"), gps)?;
            grads.set(&format!("{path_pn}.shift"), gpsh)?;
            let path_pc = LayerPath::ProjConv { stage, block };
            let (wp, sp) = conv_at(params, d.entry + 4, path_pc)?;
            let (g_in, gwp, _) = conv2d_backward(&bc.input, wp, sp, &g_pc, false)?;
            grads.set(&format!("{path_pc}.weights"), gwp)?;
            g_in
        } else {
            g_sum
        };
        g = add(&g_branch, &g_shortcut)?;
    }

    let g = relu_backward(&cache.stem_out, &g)?;
    let (g_c, gs, gsh) =
        batchnorm_backward(&g, norm_scale_at(params, 1, LayerPath::StemNorm)?, &cache.stem_bn)?;
    grads.set("stem.norm.scale", gs)?;
    grads.set("stem.norm.shift", gsh)?;
    let (w, s) = conv_at(params, 0, LayerPath::StemConv)?;
    let (_, gw, _) = conv2d_backward(&cache.input, w, s, &g_c, false)?;
    grads.set("stem.conv.weights", gw)?;

    Ok(grads)
}

/// Spatial extents the three stages produce for a given input extent
/// (stride 2 at the openings of stages 2 and 3).
pub fn stage_extents(input_extent: usize) -> [usize; 3] {
    let e1 = input_extent;
    let e2 = conv_out_extent(e1, 2);
    let e3 = conv_out_extent(e2, 2);
    [e1, e2, e3]
}

/// Copies `theta` (in `named_learnables` order) into the parameter arrays.
fn load_flat<S: Scalar>(params: &mut ParameterSet<S>, theta: &[f64]) {
    let mut at = 0;
    for t in params.learnables_mut() {
        for v in t.data_mut() {
            *v = S::from_f64(theta[at]);
            at += 1;
        }
    }
    assert_eq!(at, theta.len());
}

/// Whole-network gradient check at 64-bit precision: builds the configured
/// network (dropout forced to keep = 1 so the loss is deterministic), runs
/// one train-mode forward/backward on a random batch, and compares every
/// sampled parameter's analytic gradient against central finite
/// differences. `samples` parameters are probed (all of them if the network
/// is smaller than that).
pub fn finite_difference_check(
    config: &NetworkConfig,
    seed: u64,
    batch_size: usize,
    samples: usize,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut config = config.clone();
    config.dropout_keep = 1.0;
    contract!(batch_size >= 2, "gradient check needs a batch of at least 2");

    let pristine: ParameterSet<f64> = build(&config, seed)?;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "fd-input"));
    let mut input = Tensor::<f64>::zeros([
        batch_size,
        config.input_channels,
        config.input_extent,
        config.input_extent,
    ])?;
    for v in input.data_mut() {
        *v = rng.gen::<f64>() * 1.2 - 0.1;
    }
    let labels: Vec<usize> = (0..batch_size).map(|i| i % 2).collect();

    // flat parameter vector + per-element names
    let named = pristine.named_learnables();
    let spans: Vec<(String, usize)> = named.iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let mut theta: Vec<f64> = Vec::new();
    for (_, t) in &named {
        theta.extend(t.to_f64_vec());
    }
    let name_of = move |flat: usize| {
        let mut at = flat;
        for (name, len) in &spans {
            if at < *len {
                return format!("{name}[{at}]");
            }
            at -= len;
        }
        format!("<out of range {flat}>")
    };

    // analytic gradients on a throwaway copy (train mode moves the running
    // statistics; the copy keeps the pristine set untouched)
    let mut work = pristine.clone();
    let mut dropout_rng = ChaCha20Rng::seed_from_u64(0);
    let (_, cache) = forward_train(&mut work, &input, &mut dropout_rng)?;
    let (grads, _) = backward(&work, &cache, &labels)?;
    let mut analytic: Vec<f64> = Vec::new();
    for t in grads.arrays() {
        analytic.extend(t.to_f64_vec());
    }
    assert_eq!(analytic.len(), theta.len());

    let mut indices: Vec<usize> = (0..theta.len()).collect();
    if samples < indices.len() {
        let mut pick_rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "fd-indices"));
        for i in 0..samples {
            let j = i + (pick_rng.gen::<u64>() as usize) % (indices.len() - i);
            indices.swap(i, j);
        }
        indices.truncate(samples);
    }

    let eval = |theta: &[f64]| -> Result<f64> {
        let mut p = pristine.clone();
        load_flat(&mut p, theta);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let (probs, _) = forward_train(&mut p, &input, &mut rng)?;
        let (loss, _) = cross_entropy(&probs, &labels)?;
        Ok(loss)
    };
    check_fd(eval, &mut theta, &analytic, name_of, &indices, step, tolerance)
}
