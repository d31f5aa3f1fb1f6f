//! Network optimization: SGD with Nesterov momentum, coupled L2 weight
//! decay, plateau-driven learning-rate decay, per-epoch validation, and
//! best-checkpoint tracking.
//!
//! The update rule, with learning rate η, momentum μ, and weight decay λ:
//!
//! ```text
//! ĝ = g + λθ
//! v ← μv − ηĝ
//! θ ← θ + μv − ηĝ        (the freshly updated v)
//! ```
//!
//! All update arithmetic runs in f64 regardless of the storage scalar.
//!
//! Determinism: a single ChaCha20 stream derived from the run seed drives —
//! in this fixed order — the per-epoch shuffle, then each batch's dropout
//! masks. Scene lookups are linear scans over the caller's slice, so no
//! hash-map iteration order is ever observable. Repeated runs with the same
//! inputs produce bit-identical histories and parameters.
//!
//! Abort semantics: a non-finite loss, gradient, or parameter stops the run
//! with a training-abort error. The best checkpoint written so far (the
//! freshly initialized network is saved as a baseline before the first
//! epoch) is retained on disk when a checkpoint path was given.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_check, contract, Error, Result};
use crate::ops::loss::{cross_entropy, POSITIVE_CLASS};
use crate::resnet::{
    backward, build, forward_eval, forward_train, save_checkpoint, GradSet, NetworkConfig,
    ParameterSet,
};
use crate::sampler::{extract, PatchRef, SampleSet, PATCH_EXTENT};
use crate::scalar::Scalar;
use crate::scene::{Band, BandStack};
use crate::seed::{derive_seed, fnv1a64};
use crate::tensor::Tensor;

/// Training stops once the learning rate decays below this floor (after
/// `min_epochs`). Values within one part in 10^9 of the floor count as at
/// the floor, keeping the rule stable against rounding in the decay ladder.
pub const LR_FLOOR: f64 = 1e-5;

/// Optimization recipe. Defaults: batch 256, learning rate 0.1 decaying by
/// 10 on validation-loss plateaus (patience 10 epochs, minimum significant
/// improvement 1e-4), momentum 0.9, weight decay 5e-4, dropout keep 0.5,
/// 80–120 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    /// Epochs without significant validation improvement before the
    /// learning rate is divided by `lr_decay_factor`.
    pub plateau_patience: usize,
    /// Improvement smaller than this does not reset the plateau counter.
    pub plateau_min_delta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Must match the network's dropout keep probability.
    pub dropout_keep: f64,
    pub max_epochs: usize,
    /// The learning-rate floor may stop training only after this epoch.
    pub min_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            lr_initial: 0.1,
            lr_decay_factor: 10.0,
            plateau_patience: 10,
            plateau_min_delta: 1e-4,
            momentum: 0.9,
            weight_decay: 0.0005,
            dropout_keep: 0.5,
            max_epochs: 120,
            min_epochs: 80,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        config_check!(
            self.batch_size >= 2,
            "batch size {} cannot carry batch statistics",
            self.batch_size
        );
        config_check!(
            self.lr_initial.is_finite() && self.lr_initial > 0.0,
            "learning rate {} must be positive",
            self.lr_initial
        );
        config_check!(
            self.lr_decay_factor.is_finite() && self.lr_decay_factor > 1.0,
            "decay factor {} must exceed 1",
            self.lr_decay_factor
        );
        config_check!(self.plateau_patience >= 1, "plateau patience must be >= 1");
        config_check!(
            self.plateau_min_delta.is_finite() && self.plateau_min_delta >= 0.0,
            "plateau min delta {} must be non-negative",
            self.plateau_min_delta
        );
        config_check!(
            (0.0..1.0).contains(&self.momentum),
            "momentum {} outside [0, 1)",
            self.momentum
        );
        config_check!(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            "weight decay {} must be non-negative",
            self.weight_decay
        );
        config_check!(
            self.dropout_keep > 0.0 && self.dropout_keep <= 1.0,
            "dropout keep probability {} outside (0, 1]",
            self.dropout_keep
        );
        config_check!(self.max_epochs >= 1, "max_epochs must be >= 1");
        config_check!(
            self.min_epochs <= self.max_epochs,
            "min_epochs {} exceeds max_epochs {}",
            self.min_epochs,
            self.max_epochs
        );
        Ok(())
    }
}

/// One Nesterov step over raw arrays; all arithmetic in f64.
pub fn nesterov_update<S: Scalar>(
    theta: &mut [S],
    velocity: &mut [S],
    grad: &[S],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    contract!(
        theta.len() == velocity.len() && theta.len() == grad.len(),
        "parameter/velocity/gradient lengths {} / {} / {} differ",
        theta.len(),
        velocity.len(),
        grad.len()
    );
    for i in 0..theta.len() {
        let g_hat = grad[i].as_f64() + weight_decay * theta[i].as_f64();
        let v = momentum * velocity[i].as_f64() - lr * g_hat;
        velocity[i] = S::from_f64(v);
        theta[i] = S::from_f64(theta[i].as_f64() + momentum * v - lr * g_hat);
    }
    Ok(())
}

/// Apply one Nesterov step to every learnable of the network. Gradients
/// must be finite; a non-finite gradient is reported as a data error naming
/// the offending array (the train loop turns it into an abort).
pub fn sgd_nesterov_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    velocity: &mut GradSet<S>,
    grads: &GradSet<S>,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads.entries() {
        if !g.all_finite() {
            return Err(Error::Data(format!("non-finite gradient for {name}")));
        }
    }
    let thetas = params.learnables_mut();
    contract!(
        thetas.len() == grads.len() && thetas.len() == velocity.len(),
        "optimizer state arrays out of step with the parameter set"
    );
    for ((theta, v), (_, g)) in thetas
        .into_iter()
        .zip(velocity.arrays_mut())
        .zip(grads.entries())
    {
        nesterov_update(
            theta.data_mut(),
            v.data_mut(),
            g.data(),
            lr,
            config.momentum,
            config.weight_decay,
        )?;
    }
    Ok(())
}

/// Plateau tracker: counts epochs without significant validation
/// improvement and requests a decay when the count reaches the patience.
#[derive(Debug, Clone)]
pub struct PlateauState {
    best: f64,
    wait: usize,
    /// How many times the learning rate has been divided by the factor.
    pub decays: u32,
}

impl PlateauState {
    pub fn new() -> Self {
        PlateauState {
            best: f64::INFINITY,
            wait: 0,
            decays: 0,
        }
    }

    /// Feed one epoch's validation loss; returns true when this observation
    /// triggered a learning-rate decay.
    pub fn observe(&mut self, val_loss: f64, config: &TrainConfig) -> bool {
        if val_loss < self.best - config.plateau_min_delta {
            self.best = val_loss;
            self.wait = 0;
            return false;
        }
        self.wait += 1;
        if self.wait >= config.plateau_patience {
            self.decays += 1;
            self.wait = 0;
            return true;
        }
        false
    }
}

impl Default for PlateauState {
    fn default() -> Self {
        Self::new()
    }
}

/// The learning rate after `decays` plateau decays, recomputed from the
/// initial rate each time so no rounding accumulates across the ladder.
pub fn learning_rate(config: &TrainConfig, decays: u32) -> f64 {
    config.lr_initial / config.lr_decay_factor.powi(decays as i32)
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Rate in effect during this epoch's updates (decays apply from the
    /// next epoch).
    pub lr: f64,
}

/// History serialized as CSV. Floats use shortest round-trip formatting, so
/// identical runs produce byte-identical files.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_accuracy,lr\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.lr
        ));
    }
    out
}

/// Everything a completed run hands back.
#[derive(Debug, Clone)]
pub struct TrainOutcome<S: Scalar> {
    /// Parameters at the best validation loss.
    pub best: ParameterSet<S>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

/// Reproducibility record written next to every training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub seed: u64,
    /// FNV-1a 64 checksum (hex) of the sample manifest text.
    pub sample_manifest_fnv1a64: String,
}

pub fn run_manifest_json(
    train: &TrainConfig,
    network: &NetworkConfig,
    sample_manifest: &str,
) -> Result<String> {
    let manifest = RunManifest {
        train: train.clone(),
        network: network.clone(),
        seed: train.seed,
        sample_manifest_fnv1a64: format!("{:016x}", fnv1a64(sample_manifest.as_bytes())),
    };
    serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("run manifest serialization failed: {e}")))
}

/// Index ranges of the mini-batches covering `total` samples; the final
/// partial batch is kept.
pub fn batch_spans(total: usize, batch_size: usize) -> Vec<Range<usize>> {
    (0..total)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(total))
        .collect()
}

fn scene_stack<'a>(scenes: &[(&'a str, &'a BandStack)], id: &str) -> Result<&'a BandStack> {
    scenes
        .iter()
        .find(|(sid, _)| *sid == id)
        .map(|(_, s)| *s)
        .ok_or_else(|| Error::Data(format!("sample references unknown scene {id}")))
}

/// Gather one mini-batch of patches (possibly spanning scenes) and its
/// class labels.
fn assemble_batch<S: Scalar>(
    scenes: &[(&str, &BandStack)],
    refs: &[&PatchRef],
    bands: Option<&[Band]>,
    channels: usize,
) -> Result<(Tensor<S>, Vec<usize>)> {
    let patch = channels * PATCH_EXTENT * PATCH_EXTENT;
    let mut batch = Tensor::zeros(&[refs.len(), channels, PATCH_EXTENT, PATCH_EXTENT])?;
    let mut labels = Vec::with_capacity(refs.len());
    for (i, r) in refs.iter().enumerate() {
        let stack = scene_stack(scenes, &r.scene_id)?;
        let one: Tensor<S> = extract(stack, r.center_row, r.center_col, bands)?;
        contract!(
            one.data().len() == patch,
            "scene {} yields {}-channel patches, expected {channels}",
            r.scene_id,
            one.data().len() / (PATCH_EXTENT * PATCH_EXTENT)
        );
        batch.data_mut()[i * patch..(i + 1) * patch].copy_from_slice(one.data());
        labels.push(r.label.class_index());
    }
    Ok((batch, labels))
}

/// Eval-mode loss and accuracy over a list of patches. Loss is the
/// sample-weighted mean cross-entropy; accuracy calls a tie for the
/// positive class.
pub fn evaluate_patches<S: Scalar>(
    params: &ParameterSet<S>,
    scenes: &[(&str, &BandStack)],
    refs: &[&PatchRef],
    bands: Option<&[Band]>,
    batch_size: usize,
) -> Result<(f64, f64)> {
    contract!(!refs.is_empty(), "cannot evaluate an empty patch list");
    let channels = params.config().input_channels;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for span in batch_spans(refs.len(), batch_size) {
        let chunk = &refs[span];
        let (batch, labels) = assemble_batch::<S>(scenes, chunk, bands, channels)?;
        let probs = forward_eval(params, &batch)?;
        let (loss, _) = cross_entropy(&probs, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        for (bi, &y) in labels.iter().enumerate() {
            let p_pos = probs.data()[bi * 2 + POSITIVE_CLASS].as_f64();
            let p_neg = probs.data()[bi * 2 + (1 - POSITIVE_CLASS)].as_f64();
            let predicted = if p_pos >= p_neg { 1 } else { 0 };
            correct += usize::from(predicted == y);
        }
    }
    Ok((
        loss_sum / refs.len() as f64,
        correct as f64 / refs.len() as f64,
    ))
}

fn abort(epoch: usize, detail: impl Into<String>) -> Error {
    Error::TrainAbort {
        epoch,
        detail: detail.into(),
    }
}

/// Run the full optimization loop and return the best checkpoint with the
/// epoch history.
///
/// When `checkpoint_path` is given, the initialized network is saved there
/// before the first epoch and the file is overwritten on every validation
/// improvement, so an aborted run always leaves the last good parameters on
/// disk.
///
/// Mini-batches are drawn as a fresh shuffle each epoch; the final partial
/// batch is kept (a lone single-sample remainder is skipped, since one
/// sample carries no batch statistics). Validation runs in eval mode after
/// every epoch. Training stops at `max_epochs`, or as soon as the learning
/// rate has decayed below [`LR_FLOOR`] once `min_epochs` have completed.
pub fn train<S: Scalar>(
    set: &SampleSet,
    scenes: &[(&str, &BandStack)],
    bands: Option<&[Band]>,
    net_config: &NetworkConfig,
    config: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome<S>> {
    let train_refs: Vec<&PatchRef> = set.train_refs().collect();
    let val_refs: Vec<&PatchRef> = set.val_refs().collect();
    train_on_refs(
        &train_refs,
        &val_refs,
        scenes,
        bands,
        net_config,
        config,
        checkpoint_path,
    )
}

/// [`train`] over explicit patch lists, for callers that pool samples from
/// several scenes (the experiment protocols).
pub fn train_on_refs<S: Scalar>(
    train_refs: &[&PatchRef],
    val_refs: &[&PatchRef],
    scenes: &[(&str, &BandStack)],
    bands: Option<&[Band]>,
    net_config: &NetworkConfig,
    config: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    net_config.validate()?;
    config_check!(
        config.dropout_keep == net_config.dropout_keep,
        "optimizer dropout keep {} disagrees with the network's {}",
        config.dropout_keep,
        net_config.dropout_keep
    );
    for (i, (id, _)) in scenes.iter().enumerate() {
        contract!(
            !scenes[..i].iter().any(|(other, _)| other == id),
            "duplicate scene id {id}"
        );
    }
    config_check!(
        train_refs.len() >= 2,
        "training split holds {} patches; need at least 2",
        train_refs.len()
    );
    config_check!(!val_refs.is_empty(), "validation split is empty");

    let mut params = build::<S>(net_config, derive_seed(config.seed, "network-init"))?;
    let channels = net_config.input_channels;
    let mut velocity = GradSet::zeros_like(&params);
    if let Some(path) = checkpoint_path {
        save_checkpoint(path, &params)?;
    }

    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "train"));
    let mut plateau = PlateauState::new();
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut order: Vec<usize> = (0..train_refs.len()).collect();

    for epoch in 1..=config.max_epochs {
        let lr = learning_rate(config, plateau.decays);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for span in batch_spans(order.len(), config.batch_size) {
            if span.len() < 2 {
                continue;
            }
            let chunk: Vec<&PatchRef> = order[span].iter().map(|&i| train_refs[i]).collect();
            let (batch, labels) = assemble_batch::<S>(scenes, &chunk, bands, channels)?;
            let (_, cache) = forward_train(&mut params, &batch, &mut rng)?;
            let (grads, loss) = backward(&params, &cache, &labels)?;
            if !loss.is_finite() {
                return Err(abort(epoch, format!("non-finite training loss {loss}")));
            }
            match sgd_nesterov_step(&mut params, &mut velocity, &grads, lr, config) {
                Ok(()) => {}
                Err(Error::Data(detail)) => return Err(abort(epoch, detail)),
                Err(e) => return Err(e),
            }
            params
                .assert_finite()
                .map_err(|e| abort(epoch, e.to_string()))?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        contract!(seen > 0, "epoch {epoch} processed no batches");
        let train_loss = loss_sum / seen as f64;
        let (val_loss, val_accuracy) =
            evaluate_patches(&params, scenes, &val_refs, bands, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(abort(epoch, format!("non-finite validation loss {val_loss}")));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            lr,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = params.clone();
            if let Some(path) = checkpoint_path {
                save_checkpoint(path, &best)?;
            }
        }
        plateau.observe(val_loss, config);
        let next_lr = learning_rate(config, plateau.decays);
        if epoch >= config.min_epochs && next_lr < LR_FLOOR * (1.0 - 1e-9) {
            break;
        }
    }

    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_loss: best_val,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resnet::load_checkpoint;
    use crate::sampler::{subsample, PatchLabel};
    use crate::scene::{MaskClass, MaskRaster};

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn zero_gradient_zero_velocity_zero_decay_leaves_parameters_unchanged() {
        let mut theta = [0.3f64, -1.25, 7.5];
        let mut velocity = [0.0f64; 3];
        let grad = [0.0f64; 3];
        nesterov_update(&mut theta, &mut velocity, &grad, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(theta, [0.3, -1.25, 7.5]);
        assert_eq!(velocity, [0.0; 3]);
    }

    /// Hand-evaluated recurrence on f(x) = x^2/2 (gradient x) with
    /// lr 0.1, momentum 0.9, weight decay 0.5, starting at x = 1:
    ///   step 1: g_hat = 1.5,       v = -0.15,       x = 0.715
    ///   step 2: g_hat = 1.0725,    v = -0.24225,    x = 0.389725
    ///   step 3: g_hat = 0.5845875, v = -0.27648375, x = 0.082430875
    #[test]
    fn three_steps_on_a_quadratic_match_the_hand_computed_sequence() {
        let mut x = [1.0f64];
        let mut v = [0.0f64];
        let expected = [
            (0.715, -0.15),
            (0.389725, -0.24225),
            (0.082430875, -0.27648375),
        ];
        for (want_x, want_v) in expected {
            let grad = [x[0]];
            nesterov_update(&mut x, &mut v, &grad, 0.1, 0.9, 0.5).unwrap();
            approx(x[0], want_x, 1e-12);
            approx(v[0], want_v, 1e-12);
        }
    }

    #[test]
    fn zero_momentum_reduces_to_plain_sgd() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let theta0: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let grad: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (lr, wd) = (0.05, 0.01);
        let mut theta = theta0.clone();
        let mut velocity = vec![0.0f64; 40];
        nesterov_update(&mut theta, &mut velocity, &grad, lr, 0.0, wd).unwrap();
        for i in 0..40 {
            let plain = theta0[i] - lr * (grad[i] + wd * theta0[i]);
            assert_eq!(theta[i], plain);
        }
    }

    #[test]
    fn weight_decay_alone_shrinks_every_parameter_monotonically() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut theta: Vec<f64> = (0..30)
            .map(|_| {
                let m = rng.gen_range(0.5..1.0);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let mut velocity = vec![0.0f64; 30];
        let grad = vec![0.0f64; 30];
        let mut prev: Vec<f64> = theta.iter().map(|t| t.abs()).collect();
        for _ in 0..50 {
            nesterov_update(&mut theta, &mut velocity, &grad, 0.1, 0.9, 0.01).unwrap();
            for (t, p) in theta.iter().zip(prev.iter_mut()) {
                assert!(t.abs() <= *p, "|{t}| grew past {p}");
                *p = t.abs();
            }
        }
        assert!(theta.iter().all(|t| t.abs() < 0.95));
    }

    #[test]
    fn strictly_improving_loss_never_decays_the_rate() {
        let config = TrainConfig::default();
        let mut plateau = PlateauState::new();
        for i in 0..30 {
            let decayed = plateau.observe(1.0 - 0.01 * i as f64, &config);
            assert!(!decayed);
        }
        assert_eq!(learning_rate(&config, plateau.decays), 0.1);
    }

    #[test]
    fn a_flat_stretch_of_exactly_patience_epochs_decays_once() {
        let config = TrainConfig {
            plateau_patience: 4,
            ..TrainConfig::default()
        };
        let mut plateau = PlateauState::new();
        assert!(!plateau.observe(0.5, &config)); // baseline
        for i in 0..4 {
            let decayed = plateau.observe(0.5, &config);
            assert_eq!(decayed, i == 3, "epoch {i}");
        }
        approx(learning_rate(&config, plateau.decays), 0.01, 1e-15);
    }

    #[test]
    fn a_scripted_history_with_two_plateaus_walks_the_rate_ladder() {
        let config = TrainConfig {
            plateau_patience: 3,
            plateau_min_delta: 1e-4,
            ..TrainConfig::default()
        };
        let mut plateau = PlateauState::new();
        let script = [
            0.9, 0.7, 0.5, // improving: lr 0.1
            0.5, 0.5, 0.5, // plateau of 3 -> 0.01
            0.4, // improvement resumes
            0.4 + 5e-5,
            0.4,
            0.4, // sub-min-delta wiggle is not improvement -> 0.001
        ];
        let mut trace = Vec::new();
        for loss in script {
            plateau.observe(loss, &config);
            trace.push(learning_rate(&config, plateau.decays));
        }
        let want = [
            0.1, 0.1, 0.1, 0.1, 0.1, 0.01, 0.01, 0.01, 0.01, 0.001,
        ];
        for (got, want) in trace.iter().zip(want) {
            approx(*got, want, 1e-15);
        }
    }

    #[test]
    fn batches_cover_the_samples_with_one_kept_partial() {
        let spans = batch_spans(7500, 256);
        assert_eq!(spans.len(), 30);
        assert_eq!(spans.iter().filter(|s| s.len() == 256).count(), 29);
        assert_eq!(spans.last().unwrap().len(), 76);
        assert_eq!(spans.iter().map(|s| s.len()).sum::<usize>(), 7500);
        assert_eq!(batch_spans(512, 256).len(), 2);
        assert!(batch_spans(0, 256).is_empty());
    }

    /// A 64x64 single-band scene of vertical stripes: bright columns are
    /// cloud_shadow, dark columns clear — linearly separable from the
    /// central pixel alone.
    fn striped_scene() -> (BandStack, MaskRaster) {
        let (w, h) = (64usize, 64usize);
        let mut plane = vec![0.0f32; w * h];
        let mut labels = vec![0u8; w * h];
        for r in 0..h {
            for c in 0..w {
                let cloud = (c / 8) % 2 == 1;
                plane[r * w + c] = if cloud { 0.7 } else { 0.1 };
                labels[r * w + c] = u8::from(cloud);
            }
        }
        let stack = BandStack::new(w, h, vec![Band::Red], plane, vec![false; w * h], 30.0)
            .unwrap();
        let truth = MaskRaster::new(w, h, labels, None).unwrap();
        (stack, truth)
    }

    fn tiny_net(dropout_keep: f64) -> NetworkConfig {
        NetworkConfig {
            depth_param_n: 1,
            stage_widths: [4, 8, 16],
            input_channels: 1,
            input_extent: 15,
            num_classes: 2,
            dropout_keep,
        }
    }

    fn blob_config() -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            dropout_keep: 1.0,
            max_epochs: 5,
            min_epochs: 1,
            seed: 77,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn a_separable_two_blob_dataset_trains_to_99_percent_within_5_epochs() {
        let (stack, truth) = striped_scene();
        let set = subsample(&stack, &truth, "blob", 400, 11, false).unwrap();
        let outcome = train::<f32>(
            &set,
            &[("blob", &stack)],
            None,
            &tiny_net(1.0),
            &blob_config(),
            None,
        )
        .unwrap();
        let best_acc = outcome
            .history
            .iter()
            .map(|r| r.val_accuracy)
            .fold(0.0, f64::max);
        assert!(
            best_acc >= 0.99,
            "best validation accuracy {best_acc} after {} epochs",
            outcome.history.len()
        );
        // invariant: returned checkpoint loss is the history minimum
        let min_val = outcome
            .history
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(outcome.best_val_loss, min_val);
        assert_eq!(
            outcome.history[outcome.best_epoch - 1].val_loss,
            outcome.best_val_loss
        );
        // invariant: every recorded rate sits on the lr_initial / 10^k ladder
        for r in &outcome.history {
            let k = (0..=6)
                .find(|&k| (r.lr - 0.1 / 10f64.powi(k)).abs() < 1e-12)
                .expect("rate off the decay ladder");
            assert!(k >= 0);
        }
        let lrs: Vec<f64> = outcome.history.iter().map(|r| r.lr).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn identical_seeds_reproduce_history_and_parameters_bit_for_bit() {
        let (stack, truth) = striped_scene();
        let set = subsample(&stack, &truth, "blob", 160, 5, false).unwrap();
        let config = TrainConfig {
            max_epochs: 2,
            ..blob_config()
        };
        let run = || {
            train::<f32>(
                &set,
                &[("blob", &stack)],
                None,
                &tiny_net(1.0),
                &config,
                None,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        for (x, y) in a.history.iter().zip(b.history.iter()) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
        }
        for ((na, ta), (nb, tb)) in a
            .best
            .named_learnables()
            .iter()
            .zip(b.best.named_learnables().iter())
        {
            assert_eq!(na, nb);
            assert!(ta.bits_eq(tb), "parameter {na} differs between runs");
        }
    }

    #[test]
    fn an_empty_validation_split_is_a_configuration_error() {
        let (stack, truth) = striped_scene();
        let mut set = subsample(&stack, &truth, "blob", 160, 5, false).unwrap();
        set.refs.retain(|r| r.split == crate::sampler::Split::Train);
        let err = train::<f32>(
            &set,
            &[("blob", &stack)],
            None,
            &tiny_net(1.0),
            &blob_config(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn a_diverging_run_aborts_and_retains_the_baseline_checkpoint() {
        let (stack, truth) = striped_scene();
        let set = subsample(&stack, &truth, "blob", 160, 5, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.pmck");
        let config = TrainConfig {
            lr_initial: 1e200,
            weight_decay: 1e200,
            max_epochs: 1,
            min_epochs: 1,
            ..blob_config()
        };
        let err = train::<f32>(
            &set,
            &[("blob", &stack)],
            None,
            &tiny_net(1.0),
            &config,
            Some(&path),
        )
        .unwrap_err();
        assert!(matches!(err, Error::TrainAbort { epoch: 1, .. }), "{err}");
        let retained = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(retained.config(), &tiny_net(1.0));
    }

    #[test]
    fn converged_running_statistics_align_train_and_eval_modes() {
        let net = tiny_net(1.0); // dropout off
        let mut params = build::<f64>(&net, 41).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        let mut batch = Tensor::<f64>::zeros(&[8, 1, 15, 15]).unwrap();
        for v in batch.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut last_train = None;
        for _ in 0..200 {
            let (probs, _) = forward_train(&mut params, &batch, &mut rng).unwrap();
            last_train = Some(probs);
        }
        let train_probs = last_train.unwrap();
        let eval_probs = forward_eval(&params, &batch).unwrap();
        for (t, e) in train_probs.data().iter().zip(eval_probs.data().iter()) {
            assert!((t - e).abs() <= 1e-3, "train {t} vs eval {e}");
        }
    }

    #[test]
    fn labels_map_cloud_shadow_to_the_positive_class() {
        assert_eq!(PatchLabel::CloudShadow.class_index(), POSITIVE_CLASS);
        assert_eq!(MaskClass::CloudShadow.code(), 1);
    }

    #[test]
    fn config_validation_rejects_out_of_range_fields() {
        let base = TrainConfig::default();
        assert!(base.validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 1, ..base.clone() },
            TrainConfig { lr_initial: 0.0, ..base.clone() },
            TrainConfig { lr_decay_factor: 1.0, ..base.clone() },
            TrainConfig { plateau_patience: 0, ..base.clone() },
            TrainConfig { momentum: 1.0, ..base.clone() },
            TrainConfig { weight_decay: -0.1, ..base.clone() },
            TrainConfig { dropout_keep: 0.0, ..base.clone() },
            TrainConfig { min_epochs: 200, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn history_csv_round_trips_float_text_deterministically() {
        let history = vec![EpochRecord {
            epoch: 1,
            train_loss: 0.6931471805599453,
            val_loss: 0.1,
            val_accuracy: 0.9975,
            lr: 0.1,
        }];
        let csv = history_csv(&history);
        assert!(csv.starts_with("epoch,train_loss,val_loss,val_accuracy,lr\n"));
        assert!(csv.contains("1,0.6931471805599453,0.1,0.9975,0.1\n"));
        assert_eq!(csv, history_csv(&history));
    }

    #[test]
    fn the_run_manifest_records_configs_and_sample_checksum() {
        let train = TrainConfig::default();
        let net = tiny_net(0.5);
        let json = run_manifest_json(&train, &net, "patch manifest text").unwrap();
        let parsed: RunManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.train, train);
        assert_eq!(parsed.network, net);
        assert_eq!(
            parsed.sample_manifest_fnv1a64,
            format!("{:016x}", fnv1a64(b"patch manifest text"))
        );
    }
}
