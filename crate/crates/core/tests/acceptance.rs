//! Release acceptance gate.
//!
//! One integration test per acceptance criterion, each printing a single
//! `ACCEPTANCE NN <name>: PASS`/`FAIL` line (visible with `--nocapture`).
//! Every tolerance, scale, and seed is pinned as a named constant here so
//! the gate cannot drift silently.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use patchmask_core::error::{Error, FormatError};
use patchmask_core::infer::{apply_threshold, infer_scene, rethreshold, InferenceConfig};
use patchmask_core::metrics::{auroc, average_precision, confusion, evaluate_masks};
use patchmask_core::ops::loss::cross_entropy;
use patchmask_core::resnet::{
    build, finite_difference_check, forward_eval, forward_eval_traced, read_checkpoint,
    stage_extents, write_checkpoint, NetworkConfig, ParameterSet,
};
use patchmask_core::sampler::{
    enumerate_valid, extract_batch, subsample, PatchLabel, PatchRef, Split, PATCH_MARGIN,
};
use patchmask_core::scene::{
    generate_synthetic, read_bandstack_bytes, read_mask_bytes, write_bandstack_bytes,
    write_mask_bytes, Band, BandStack, MaskRaster, SynthSpec,
};
use patchmask_core::seed::derive_seed;
use patchmask_core::tensor::Tensor;
use patchmask_core::Scalar;
use patchmask_core::trainer::{history_csv, train_on_refs, TrainConfig, TrainOutcome};

// --- pinned tolerances and scales -----------------------------------------

/// Criterion 1: whole-network gradient check.
const FD_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const FD_TIME_LIMIT: Duration = Duration::from_secs(60);
const FD_SEED: u64 = 41;
const FD_BATCH: usize = 3;

/// Criterion 3: loss unit examples.
const LOSS_LN2_TOLERANCE: f64 = 1e-6;

/// Criterion 4: batched-vs-loop equivalence.
const EQUIV_THREADS: [usize; 3] = [1, 2, 8];
const EQUIV_TILE_SIZES: [usize; 2] = [32, 4096];
const EQUIV_SEED: u64 = 4242;

/// Criterion 5: sampler exactness.
const SAMPLER_QUOTA: usize = 10_000;
const ENUM_SCENES: usize = 50;
const ENUM_MAX_EXTENT: usize = 128;
const ENUM_SEED: u64 = 505;

/// Criterion 6: metric oracle agreement.
const METRIC_TOLERANCE: f64 = 1e-9;
const METRIC_SAMPLES: usize = 1_000;
const METRIC_SEEDS: u64 = 20;

/// Criteria 7–8: end-to-end synthetic learning, shared between the two
/// tests. The scale is reduced to desk size; the recipe (batch 256,
/// learning rate 0.1 with plateau decay, weight decay 5e-4, dropout 0.5,
/// Nesterov momentum 0.9) is the real one.
const E2E_SCENES: usize = 8;
const E2E_EXTENT: usize = 256;
const E2E_QUOTA: usize = 2_000;
const E2E_MAX_EPOCHS: usize = 4;
const E2E_MASTER_SEED: u64 = 7;
const E2E_MIN_VAL_ACCURACY: f64 = 0.95;
const E2E_MIN_CLOUD_F1: f64 = 0.90;
const E2E_TIME_LIMIT: Duration = Duration::from_secs(30 * 60);

/// Criterion 9: border invariant.
const BORDER_SIZES: usize = 20;
const BORDER_SEED: u64 = 909;

/// Criterion 10: threshold monotonicity.
const THRESHOLD_PLANES: usize = 100;
const THRESHOLD_SEED: u64 = 1010;

// --- harness ----------------------------------------------------------------

/// Run `body` and print the one-line verdict for criterion `id`.
fn criterion(id: u32, name: &str, body: impl FnOnce() -> Result<(), String>) {
    match body() {
        Ok(()) => println!("ACCEPTANCE {id:02} {name}: PASS"),
        Err(msg) => {
            println!("ACCEPTANCE {id:02} {name}: FAIL — {msg}");
            panic!("acceptance criterion {id:02} ({name}) failed: {msg}");
        }
    }
}

macro_rules! check {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

trait OrFail<T> {
    fn or_fail(self) -> Result<T, String>;
}

impl<T> OrFail<T> for Result<T, Error> {
    fn or_fail(self) -> Result<T, String> {
        self.map_err(|e| e.to_string())
    }
}

/// A fully-valid stack of uniform random reflectance.
fn random_stack(width: usize, height: usize, bands: &[Band], seed: u64) -> BandStack {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let plane_len = width * height;
    let planes: Vec<f32> = (0..plane_len * bands.len())
        .map(|_| rng.gen_range(0.0..=1.0))
        .collect();
    BandStack::new(
        width,
        height,
        bands.to_vec(),
        planes,
        vec![false; plane_len],
        30.0,
    )
    .expect("random stack construction")
}

fn tiny_network(input_channels: usize) -> NetworkConfig {
    NetworkConfig {
        depth_param_n: 1,
        stage_widths: [4, 8, 16],
        input_channels,
        dropout_keep: 1.0,
        ..NetworkConfig::default()
    }
}

// --- criterion 1 -------------------------------------------------------------

#[test]
fn criterion_01_gradient_correctness() {
    criterion(1, "gradient-correctness", || {
        let config = NetworkConfig {
            depth_param_n: 1,
            stage_widths: [4, 8, 16],
            input_channels: 4,
            ..NetworkConfig::default()
        };
        let t0 = Instant::now();
        // Probe every learnable parameter of the whole network.
        let report =
            finite_difference_check(&config, FD_SEED, FD_BATCH, usize::MAX, FD_STEP, FD_TOLERANCE)
                .or_fail()?;
        let elapsed = t0.elapsed();
        check!(
            report.passed(),
            "{} of {} probes exceeded {FD_TOLERANCE:e} (worst {} at {:.3e})",
            report.failures.len(),
            report.checked,
            report.worst,
            report.max_rel_err
        );
        check!(
            report.max_rel_err < FD_TOLERANCE,
            "max relative error {:.3e} is not below {FD_TOLERANCE:e}",
            report.max_rel_err
        );
        check!(
            elapsed <= FD_TIME_LIMIT,
            "gradient check took {elapsed:?}, limit {FD_TIME_LIMIT:?}"
        );
        println!(
            "  checked {} parameter(s), max relative error {:.3e}, {elapsed:?}",
            report.checked, report.max_rel_err
        );
        Ok(())
    });
}

// --- criterion 2 -------------------------------------------------------------

#[test]
fn criterion_02_architecture_fidelity() {
    criterion(2, "architecture-fidelity", || {
        check!(
            stage_extents(15) == [15, 8, 4],
            "stage extents for a 15x15 input are {:?}, expected [15, 8, 4]",
            stage_extents(15)
        );
        for n in [3usize, 5, 7, 9] {
            let config = NetworkConfig {
                depth_param_n: n,
                stage_widths: [16, 32, 64],
                input_channels: 7,
                ..NetworkConfig::default()
            };
            let params: ParameterSet<f32> = build(&config, 11).or_fail()?;
            let counted = params.weighted_layer_count();
            check!(
                counted == 6 * n + 2,
                "n={n}: counted {counted} weighted layers, expected {}",
                6 * n + 2
            );

            let input = Tensor::<f32>::zeros(&[1, 7, 15, 15]).or_fail()?;
            let (probs, trace) = forward_eval_traced(&params, &input).or_fail()?;
            let expect = |label: &str, shape: &[usize]| -> Result<(), String> {
                let found = trace
                    .iter()
                    .find(|(l, _)| l == label)
                    .ok_or_else(|| format!("n={n}: trace has no {label} entry"))?;
                check!(
                    found.1 == shape,
                    "n={n}: {label} produced shape {:?}, expected {shape:?}",
                    found.1
                );
                Ok(())
            };
            expect("stage1", &[16, 15, 15])?;
            expect("stage2", &[32, 8, 8])?;
            expect("stage3", &[64, 4, 4])?;
            expect("softmax", &[2])?;
            check!(
                probs.shape() == [1, 2],
                "n={n}: output shape {:?} is not a 2-way distribution",
                probs.shape()
            );
        }
        Ok(())
    });
}

// --- criterion 3 -------------------------------------------------------------

#[test]
fn criterion_03_loss_fidelity() {
    criterion(3, "loss-fidelity", || {
        let loss_of = |p_pos: f64, label: usize| -> Result<f64, String> {
            let probs = Tensor::<f64>::new([1, 2], vec![1.0 - p_pos, p_pos]).or_fail()?;
            Ok(cross_entropy(&probs, &[label]).or_fail()?.0)
        };

        let certain = loss_of(1.0, 1)?;
        check!(
            certain == 0.0,
            "a certain correct prediction scored {certain}, expected exactly 0"
        );

        let halves = loss_of(0.5, 1)?;
        check!(
            (halves - std::f64::consts::LN_2).abs() <= LOSS_LN2_TOLERANCE,
            "a 50/50 prediction scored {halves}, expected ln 2 within {LOSS_LN2_TOLERANCE:e}"
        );

        // Relabeling the classes (swapping the probability row and
        // flipping the truth) leaves the loss unchanged, bit-exactly.
        for p in [0.999, 0.9, 0.6, 0.5, 0.25, 0.1, 1e-6] {
            let row = Tensor::<f64>::new([1, 2], vec![1.0 - p, p]).or_fail()?;
            let swapped = Tensor::<f64>::new([1, 2], vec![p, 1.0 - p]).or_fail()?;
            let pos = cross_entropy(&row, &[1]).or_fail()?.0;
            let neg = cross_entropy(&swapped, &[0]).or_fail()?.0;
            check!(
                pos == neg,
                "symmetry identity broken at p={p}: {pos} vs {neg}"
            );
        }
        Ok(())
    });
}

// --- criterion 4 -------------------------------------------------------------

/// A 40x40 synthetic scene with clouds small enough to fit, plus a nodata
/// blot so invalid windows are exercised.
fn equivalence_scene() -> BandStack {
    let mut spec = SynthSpec::new(40, 40, EQUIV_SEED);
    spec.cloud_count = (2, 4);
    spec.cloud_radius = (3.0, 6.0);
    spec.shadow_offset = (7, -5);
    let (stack, _) = generate_synthetic(&spec).expect("40x40 synthetic scene");
    let mut nodata = stack.nodata().to_vec();
    for row in 18..21 {
        for col in 24..27 {
            nodata[row * 40 + col] = true;
        }
    }
    BandStack::new(
        stack.width(),
        stack.height(),
        stack.bands().to_vec(),
        stack.planes().to_vec(),
        nodata,
        stack.pixel_size_m(),
    )
    .expect("blotted scene")
}

#[test]
fn criterion_04_sliding_window_equivalence() {
    criterion(4, "sliding-window-equivalence", || {
        let stack = equivalence_scene();
        let params: ParameterSet<f32> = build(&tiny_network(7), EQUIV_SEED).or_fail()?;

        // Oracle: classify each valid center with its own batch-of-one
        // forward pass, in plain row-major order.
        let centers = enumerate_valid(&stack);
        check!(!centers.is_empty(), "the test scene has no valid centers");
        let plane_len = stack.width() * stack.height();
        let mut confidence = vec![0.0f32; plane_len];
        let mut valid = vec![false; plane_len];
        for &(row, col) in &centers {
            let patch_ref = PatchRef {
                scene_id: "equiv".into(),
                center_row: row,
                center_col: col,
                split: Split::Test,
                label: PatchLabel::Clear,
            };
            let single = extract_batch::<f32>(&stack, &[&patch_ref], None).or_fail()?;
            let probs = forward_eval(&params, &single).or_fail()?;
            let i = row * stack.width() + col;
            confidence[i] = probs.data()[1].as_f64() as f32;
            valid[i] = true;
        }
        let labels = apply_threshold(&confidence, &valid, 0.5).or_fail()?;
        let oracle = MaskRaster::new(
            stack.width(),
            stack.height(),
            labels,
            Some(confidence),
        )
        .or_fail()?;
        let oracle_bytes = write_mask_bytes(&oracle);

        for threads in EQUIV_THREADS {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| e.to_string())?;
            for tile_size in EQUIV_TILE_SIZES {
                let config = InferenceConfig {
                    tile_size,
                    ..InferenceConfig::default()
                };
                let mask = pool
                    .install(|| infer_scene(&params, &stack, &config))
                    .or_fail()?;
                check!(
                    write_mask_bytes(&mask) == oracle_bytes,
                    "batched inference with {threads} thread(s), tile size {tile_size} \
                     differs from the per-patch loop"
                );
            }
        }
        Ok(())
    });
}

// --- criterion 5 -------------------------------------------------------------

#[test]
fn criterion_05_sampler_exactness() {
    criterion(5, "sampler-exactness", || {
        // Horizontal stripes give every quadrant thousands of centers of
        // both classes: quota 10,000 must land exactly 2,500 per quadrant,
        // split exactly 75/25.
        let extent = 224usize;
        let stack = random_stack(extent, extent, &[Band::Red], 51);
        let labels: Vec<u8> = (0..extent * extent)
            .map(|i| u8::from((i / extent) % 16 < 8))
            .collect();
        let truth = MaskRaster::new(extent, extent, labels, None).or_fail()?;
        let set = subsample(&stack, &truth, "striped", SAMPLER_QUOTA, 52, true).or_fail()?;

        check!(
            set.refs.len() == SAMPLER_QUOTA,
            "drew {} centers, wanted {SAMPLER_QUOTA}",
            set.refs.len()
        );
        let mut per_quadrant = [0usize; 4];
        for r in &set.refs {
            per_quadrant[set.grid.quadrant(r.center_row, r.center_col) as usize] += 1;
        }
        check!(
            per_quadrant == [2_500; 4],
            "per-quadrant counts {per_quadrant:?}, expected 2,500 each"
        );
        let train = set.train_refs().count();
        let val = set.val_refs().count();
        check!(
            train == 7_500 && val == 2_500,
            "split {train}/{val}, expected 7,500/2,500"
        );

        // enumerate_valid against the brute-force window scan.
        let mut rng = ChaCha20Rng::seed_from_u64(ENUM_SEED);
        for scene in 0..ENUM_SCENES {
            let width = rng.gen_range(15..=ENUM_MAX_EXTENT);
            let height = rng.gen_range(15..=ENUM_MAX_EXTENT);
            let mut stack = random_stack(width, height, &[Band::Green], rng.gen());
            // Random speckle plus one clean scene and one heavily-masked.
            let p_nodata = match scene {
                0 => 0.0,
                1 => 0.6,
                _ => 0.05,
            };
            if p_nodata > 0.0 {
                let nodata: Vec<bool> =
                    (0..width * height).map(|_| rng.gen_bool(p_nodata)).collect();
                stack = BandStack::new(
                    width,
                    height,
                    stack.bands().to_vec(),
                    stack.planes().to_vec(),
                    nodata,
                    stack.pixel_size_m(),
                )
                .or_fail()?;
            }

            let fast = enumerate_valid(&stack);
            let mut brute = Vec::new();
            for row in PATCH_MARGIN..height.saturating_sub(PATCH_MARGIN) {
                for col in PATCH_MARGIN..width.saturating_sub(PATCH_MARGIN) {
                    let mut clean = true;
                    'scan: for r in row - PATCH_MARGIN..=row + PATCH_MARGIN {
                        for c in col - PATCH_MARGIN..=col + PATCH_MARGIN {
                            if stack.is_nodata(r, c) {
                                clean = false;
                                break 'scan;
                            }
                        }
                    }
                    if clean {
                        brute.push((row, col));
                    }
                }
            }
            check!(
                fast == brute,
                "scene {scene} ({width}x{height}): fast enumeration found {} center(s), \
                 brute force {}",
                fast.len(),
                brute.len()
            );
        }
        Ok(())
    });
}

// --- criterion 6 -------------------------------------------------------------

/// O(n^2) pairwise probability that a positive outranks a negative,
/// ties counting one half.
fn pairwise_auroc(confidences: &[f64], labels: &[bool]) -> Option<f64> {
    let positives: Vec<f64> = confidences
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&c, _)| c)
        .collect();
    let negatives: Vec<f64> = confidences
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&c, _)| c)
        .collect();
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut wins = 0.0f64;
    for &p in &positives {
        for &n in &negatives {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Some(wins / (positives.len() as f64 * negatives.len() as f64))
}

/// Non-interpolated average precision by prefix scan over the ranking
/// (descending confidence, ascending index on ties).
fn prefix_scan_ap(confidences: &[f64], labels: &[bool]) -> Option<f64> {
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    let mut seen_pos = 0usize;
    let mut sum = 0.0f64;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            seen_pos += 1;
            sum += seen_pos as f64 / (k + 1) as f64;
        }
    }
    Some(sum / total_pos as f64)
}

#[test]
fn criterion_06_metrics_oracle_equivalence() {
    criterion(6, "metrics-oracle-equivalence", || {
        for seed in 0..METRIC_SEEDS {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            // Quantized confidences force plenty of ties.
            let confidences: Vec<f64> = (0..METRIC_SAMPLES)
                .map(|_| rng.gen_range(0..=50) as f64 / 50.0)
                .collect();
            let labels: Vec<bool> = (0..METRIC_SAMPLES).map(|_| rng.gen_bool(0.5)).collect();

            let fast_auroc = auroc(&confidences, &labels).or_fail()?;
            let slow_auroc = pairwise_auroc(&confidences, &labels);
            match (fast_auroc, slow_auroc) {
                (Some(a), Some(b)) => check!(
                    (a - b).abs() <= METRIC_TOLERANCE,
                    "seed {seed}: AUROC {a} vs pairwise oracle {b}"
                ),
                (a, b) => check!(
                    a.is_none() && b.is_none(),
                    "seed {seed}: AUROC definedness disagrees with the oracle"
                ),
            }

            let fast_ap = average_precision(&confidences, &labels).or_fail()?;
            let slow_ap = prefix_scan_ap(&confidences, &labels);
            match (fast_ap, slow_ap) {
                (Some(a), Some(b)) => check!(
                    (a - b).abs() <= METRIC_TOLERANCE,
                    "seed {seed}: AP {a} vs prefix-scan oracle {b}"
                ),
                (a, b) => check!(
                    a.is_none() && b.is_none(),
                    "seed {seed}: AP definedness disagrees with the oracle"
                ),
            }

            // Confusion counts against the exhaustive pixel loop.
            let (width, height) = (rng.gen_range(10..40), rng.gen_range(10..40));
            let random_mask = |rng: &mut ChaCha20Rng| -> Result<MaskRaster, String> {
                let labels: Vec<u8> = (0..width * height)
                    .map(|_| [0u8, 1, 255][rng.gen_range(0..3)])
                    .collect();
                MaskRaster::new(width, height, labels, None).or_fail()
            };
            let pred = random_mask(&mut rng)?;
            let truth = random_mask(&mut rng)?;
            let counts = confusion(&pred, &truth);
            let (mut tp, mut fp, mut tn, mut fnn) = (0usize, 0, 0, 0);
            let mut co_valid = 0usize;
            for row in 0..height {
                for col in 0..width {
                    let p = pred.labels()[row * width + col];
                    let t = truth.labels()[row * width + col];
                    if p == 255 || t == 255 {
                        continue;
                    }
                    co_valid += 1;
                    match (p == 1, t == 1) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, false) => tn += 1,
                        (false, true) => fnn += 1,
                    }
                }
            }
            if co_valid == 0 {
                check!(
                    counts.is_err(),
                    "seed {seed}: zero co-valid pixels must be rejected"
                );
            } else {
                let counts = counts.or_fail()?;
                check!(
                    (counts.true_pos, counts.false_pos, counts.true_neg, counts.false_neg)
                        == (tp, fp, tn, fnn),
                    "seed {seed}: confusion ({}, {}, {}, {}) vs pixel loop ({tp}, {fp}, {tn}, {fnn})",
                    counts.true_pos,
                    counts.false_pos,
                    counts.true_neg,
                    counts.false_neg
                );
            }
        }
        Ok(())
    });
}

// --- criteria 7 and 8 --------------------------------------------------------

struct EndToEnd {
    history: String,
    mask_bytes: Vec<u8>,
    best_val_accuracy: f64,
    cloud_f1: Option<f64>,
    elapsed: Duration,
}

/// One leave-one-out fold at desk scale: train on seven synthetic scenes,
/// infer and score the held-out eighth. Deterministic in `E2E_MASTER_SEED`.
fn run_end_to_end() -> Result<EndToEnd, String> {
    let t0 = Instant::now();
    let mut scenes = Vec::with_capacity(E2E_SCENES);
    for i in 0..E2E_SCENES {
        let spec = SynthSpec::new(
            E2E_EXTENT,
            E2E_EXTENT,
            derive_seed(E2E_MASTER_SEED, &format!("e2e-scene-{i}")),
        );
        let (stack, truth) = generate_synthetic(&spec).or_fail()?;
        scenes.push((format!("scene-{i}"), stack, truth));
    }

    // Scene 0 is held out; its pixels never reach the sampler.
    let mut sets = Vec::new();
    for (id, stack, truth) in &scenes[1..] {
        sets.push(
            subsample(
                stack,
                truth,
                id,
                E2E_QUOTA,
                derive_seed(E2E_MASTER_SEED, &format!("sample-{id}")),
                false,
            )
            .or_fail()?,
        );
    }
    let train_refs: Vec<&PatchRef> = sets.iter().flat_map(|s| s.train_refs()).collect();
    let val_refs: Vec<&PatchRef> = sets.iter().flat_map(|s| s.val_refs()).collect();
    let pool: Vec<(&str, &BandStack)> = scenes[1..]
        .iter()
        .map(|(id, stack, _)| (id.as_str(), stack))
        .collect();

    let network = NetworkConfig {
        depth_param_n: 3,
        stage_widths: [8, 16, 32],
        input_channels: 7,
        ..NetworkConfig::default()
    };
    let config = TrainConfig {
        max_epochs: E2E_MAX_EPOCHS,
        min_epochs: 1,
        seed: E2E_MASTER_SEED,
        ..TrainConfig::default()
    };
    let outcome: TrainOutcome<f32> =
        train_on_refs(&train_refs, &val_refs, &pool, None, &network, &config, None).or_fail()?;

    let mask = infer_scene(&outcome.best, &scenes[0].1, &InferenceConfig::default()).or_fail()?;
    let report = evaluate_masks(&mask, &scenes[0].2).or_fail()?;

    Ok(EndToEnd {
        history: history_csv(&outcome.history),
        mask_bytes: write_mask_bytes(&mask),
        best_val_accuracy: outcome
            .history
            .iter()
            .map(|e| e.val_accuracy)
            .fold(0.0, f64::max),
        cloud_f1: report.f1_cloud_shadow,
        elapsed: t0.elapsed(),
    })
}

static END_TO_END: OnceLock<Result<EndToEnd, String>> = OnceLock::new();

fn end_to_end() -> Result<&'static EndToEnd, String> {
    END_TO_END
        .get_or_init(run_end_to_end)
        .as_ref()
        .map_err(|e| e.clone())
}

#[test]
fn criterion_07_end_to_end_synthetic_learning() {
    criterion(7, "end-to-end-synthetic-learning", || {
        let run = end_to_end()?;
        check!(
            run.best_val_accuracy >= E2E_MIN_VAL_ACCURACY,
            "best validation accuracy {:.4} is below {E2E_MIN_VAL_ACCURACY}",
            run.best_val_accuracy
        );
        let f1 = run
            .cloud_f1
            .ok_or("cloud/shadow F1 is undefined on the held-out scene")?;
        check!(
            f1 >= E2E_MIN_CLOUD_F1,
            "held-out cloud/shadow F1 {f1:.4} is below {E2E_MIN_CLOUD_F1}"
        );
        check!(
            run.elapsed <= E2E_TIME_LIMIT,
            "end-to-end run took {:?}, limit {E2E_TIME_LIMIT:?}",
            run.elapsed
        );
        println!(
            "  validation accuracy {:.4}, held-out F1 {f1:.4}, {:?}",
            run.best_val_accuracy, run.elapsed
        );
        Ok(())
    });
}

#[test]
fn criterion_08_determinism() {
    criterion(8, "determinism", || {
        let first = end_to_end()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| e.to_string())?;
        let second = pool.install(run_end_to_end)?;
        check!(
            first.history == second.history,
            "single-threaded rerun produced a different training history"
        );
        check!(
            first.mask_bytes == second.mask_bytes,
            "single-threaded rerun produced a different mask"
        );
        Ok(())
    });
}

// --- criterion 9 -------------------------------------------------------------

#[test]
fn criterion_09_border_invariant() {
    criterion(9, "border-invariant", || {
        let params: ParameterSet<f32> = build(&tiny_network(1), BORDER_SEED).or_fail()?;
        let mut rng = ChaCha20Rng::seed_from_u64(BORDER_SEED);
        let mut sizes = vec![(15usize, 15usize), (75, 20)];
        while sizes.len() < BORDER_SIZES {
            sizes.push((rng.gen_range(15..=75), rng.gen_range(15..=75)));
        }
        for (i, &(width, height)) in sizes.iter().enumerate() {
            let stack = random_stack(width, height, &[Band::Red], rng.gen());
            let mask =
                infer_scene(&params, &stack, &InferenceConfig::default()).or_fail()?;
            let (clear, cloud, nodata) = mask.counts();
            let expected = (width - 14) * (height - 14);
            check!(
                clear + cloud == expected,
                "size {i} ({width}x{height}): {} labeled pixel(s), expected {expected}",
                clear + cloud
            );
            check!(
                nodata == width * height - expected,
                "size {i} ({width}x{height}): nodata count {nodata} is not the frame"
            );
            for row in 0..height {
                for col in 0..width {
                    let framed = row < PATCH_MARGIN
                        || col < PATCH_MARGIN
                        || row + PATCH_MARGIN >= height
                        || col + PATCH_MARGIN >= width;
                    let is_nodata = mask.labels()[row * width + col] == 255;
                    check!(
                        framed == is_nodata,
                        "size {i} ({width}x{height}): pixel ({row}, {col}) breaks the \
                         7-pixel frame"
                    );
                }
            }
        }
        Ok(())
    });
}

// --- criterion 10 ------------------------------------------------------------

#[test]
fn criterion_10_threshold_monotonicity() {
    criterion(10, "threshold-monotonicity", || {
        let mut rng = ChaCha20Rng::seed_from_u64(THRESHOLD_SEED);
        for plane_idx in 0..THRESHOLD_PLANES {
            let (width, height) = (rng.gen_range(8..40), rng.gen_range(8..40));
            let n = width * height;
            let confidence: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.9)).collect();
            let t1: f64 = rng.gen_range(0.30..0.90);
            let t2: f64 = t1 - rng.gen_range(0.05..0.25);
            let strict = apply_threshold(&confidence, &valid, t1).or_fail()?;
            let loose = apply_threshold(&confidence, &valid, t2).or_fail()?;
            for i in 0..n {
                check!(
                    strict[i] != 1 || loose[i] == 1,
                    "plane {plane_idx}: pixel {i} is positive at {t1:.3} but not at \
                     the looser {t2:.3}"
                );
            }
        }

        // Rethresholding a stored confidence plane equals re-inference.
        let stack = equivalence_scene();
        let params: ParameterSet<f32> = build(&tiny_network(7), EQUIV_SEED).or_fail()?;
        let at = |threshold: f64| -> Result<MaskRaster, String> {
            infer_scene(
                &params,
                &stack,
                &InferenceConfig {
                    threshold,
                    ..InferenceConfig::default()
                },
            )
            .or_fail()
        };
        let stored = at(0.5)?;
        for threshold in [0.15, 0.5, 0.85] {
            let redone = rethreshold(&stored, threshold).or_fail()?;
            let direct = at(threshold)?;
            check!(
                write_mask_bytes(&redone) == write_mask_bytes(&direct),
                "rethresholding to {threshold} differs from re-inference"
            );
        }
        Ok(())
    });
}

// --- criterion 11 ------------------------------------------------------------

/// Corrupt `bytes` three canonical ways and demand the documented fault
/// class for each.
fn check_container_faults(
    what: &str,
    bytes: &[u8],
    decode: impl Fn(&[u8]) -> Option<Error>,
) -> Result<(), String> {
    // Magic.
    let mut bad_magic = bytes.to_vec();
    bad_magic[0] ^= 0xFF;
    match decode(&bad_magic) {
        Some(Error::Format(FormatError::BadMagic { .. })) => {}
        other => {
            return Err(format!(
                "{what}: corrupted magic produced {other:?}, expected the bad-magic fault"
            ))
        }
    }
    // Truncation.
    let truncated = &bytes[..bytes.len() - 5];
    match decode(truncated) {
        Some(Error::Format(FormatError::Truncated { .. })) => {}
        other => {
            return Err(format!(
                "{what}: truncation produced {other:?}, expected the truncation fault"
            ))
        }
    }
    // Payload corruption (caught by the checksum before any semantic parse).
    let mut flipped = bytes.to_vec();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x55;
    match decode(&flipped) {
        Some(Error::Format(FormatError::ChecksumMismatch { .. })) => {}
        other => {
            return Err(format!(
                "{what}: a flipped payload byte produced {other:?}, expected the \
                 checksum fault"
            ))
        }
    }
    Ok(())
}

#[test]
fn criterion_11_format_robustness() {
    criterion(11, "format-robustness", || {
        // Scene stack container.
        let mut spec = SynthSpec::new(24, 19, 113);
        spec.cloud_count = (1, 2);
        spec.cloud_radius = (2.0, 4.0);
        spec.shadow_offset = (5, -4);
        spec.nodata_border = 1;
        let (stack, truth) = generate_synthetic(&spec).or_fail()?;

        let stack_bytes = write_bandstack_bytes(&stack);
        let stack_again = read_bandstack_bytes(&stack_bytes).or_fail()?;
        check!(
            write_bandstack_bytes(&stack_again) == stack_bytes,
            "scene container roundtrip is not bit-exact"
        );
        check_container_faults("scene container", &stack_bytes, |b| {
            read_bandstack_bytes(b).err()
        })?;

        // Mask container, with a confidence plane.
        let confidence: Vec<f32> = truth
            .labels()
            .iter()
            .map(|&l| if l == 255 { 0.0 } else { 0.25 + 0.5 * l as f32 })
            .collect();
        let mask = MaskRaster::new(
            truth.width(),
            truth.height(),
            truth.labels().to_vec(),
            Some(confidence),
        )
        .or_fail()?;
        let mask_bytes = write_mask_bytes(&mask);
        let mask_again = read_mask_bytes(&mask_bytes).or_fail()?;
        check!(
            write_mask_bytes(&mask_again) == mask_bytes,
            "mask container roundtrip is not bit-exact"
        );
        check_container_faults("mask container", &mask_bytes, |b| read_mask_bytes(b).err())?;

        // Checkpoint container.
        let params: ParameterSet<f32> = build(&tiny_network(3), 114).or_fail()?;
        let ckpt_bytes = write_checkpoint(&params);
        let params_again: ParameterSet<f32> = read_checkpoint(&ckpt_bytes).or_fail()?;
        check!(
            write_checkpoint(&params_again) == ckpt_bytes,
            "checkpoint roundtrip is not bit-exact"
        );
        check_container_faults("checkpoint", &ckpt_bytes, |b| {
            read_checkpoint::<f32>(b).err()
        })?;
        Ok(())
    });
}
