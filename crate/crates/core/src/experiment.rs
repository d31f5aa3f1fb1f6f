//! The three evaluation protocols: land-type-specific leave-one-out,
//! mixed all-land-type runs with random scene holdouts, and the band
//! ablation sweep.
//!
//! Every fold derives its seeds from the master seed and the fold's
//! identity, so fold order and parallelism cannot change any number, and a
//! fold can be reproduced alone. Test scenes never enter patch sampling;
//! each fold audits that from its own sample manifests before training.
//!
//! Band handling: the effective band list is the scenes' shared list,
//! narrowed by `bands` (keep list) or `drop` (drop list). The network's
//! `input_channels` is always derived from that effective list, so a
//! 7-band scene with one band dropped trains a 6-channel network.

use serde::{Deserialize, Serialize};

use crate::error::{config_check, contract, Error, Result};
use crate::infer::{infer_scene, InferenceConfig, DEFAULT_THRESHOLD};
use crate::metrics::{aggregate, evaluate_masks, AggregateMode, MetricsReport};
use crate::resnet::{NetworkConfig, ParameterSet};
use crate::sampler::{subsample, to_manifest, PatchRef, SampleSet};
use crate::scalar::Scalar;
use crate::scene::{Band, BandStack, MaskRaster};
use crate::seed::derive_seed;
use crate::trainer::{run_manifest_json, train_on_refs, EpochRecord, TrainConfig};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Fraction of the non-test scenes assigned to the validation pool in the
/// all-land-type protocol (whole scenes; rounded, at least one scene per
/// pool).
pub const VALIDATION_SCENE_FRACTION: f64 = 0.2;

/// One scene with its ground truth, ready for sampling and evaluation.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub id: String,
    pub land_type: String,
    pub stack: BandStack,
    pub truth: MaskRaster,
}

/// Protocol-level knobs shared by all experiment modes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// Template network; `input_channels` is derived from the effective
    /// band list at run time.
    pub network: NetworkConfig,
    /// Keep list: restrict sampling and inference to these bands.
    pub bands: Option<Vec<Band>>,
    /// Drop list: use every shared band except these. Mutually exclusive
    /// with `bands`.
    pub drop: Option<Vec<Band>>,
    /// Patch quota per sampled scene.
    pub quota: usize,
    /// Repetitions of the all-land-type protocol.
    pub repetitions: usize,
    pub master_seed: u64,
    /// Decision threshold for test-scene inference.
    pub threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            network: NetworkConfig::default(),
            bands: None,
            drop: None,
            quota: 10_000,
            repetitions: 5,
            master_seed: 0,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// A fold that trained to completion.
#[derive(Debug, Clone)]
pub struct FoldSuccess<S: Scalar> {
    pub best: ParameterSet<S>,
    pub history: Vec<EpochRecord>,
    /// Inferred mask per test scene, in test-scene order.
    pub masks: Vec<(String, MaskRaster)>,
    pub per_scene: Vec<(String, MetricsReport)>,
    /// Unweighted mean over this fold's test scenes.
    pub report: MetricsReport,
    /// Audit trail: one sample manifest per scene the fold sampled.
    pub sample_manifests: Vec<(String, String)>,
    /// Reproduction record (configs, fold seed, sample checksum).
    pub run_manifest: String,
}

/// One fold or repetition, finished or aborted.
#[derive(Debug, Clone)]
pub struct FoldRun<S: Scalar> {
    pub name: String,
    pub land_type: Option<String>,
    pub test_scenes: Vec<String>,
    pub seed: u64,
    /// `Err` carries the abort diagnostic; the experiment continues with
    /// the remaining folds.
    pub outcome: std::result::Result<FoldSuccess<S>, String>,
}

/// A full protocol run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome<S: Scalar> {
    pub folds: Vec<FoldRun<S>>,
    /// Unweighted mean over the successful folds' reports; absent when
    /// every fold aborted.
    pub aggregate: Option<MetricsReport>,
}

impl<S: Scalar> ExperimentOutcome<S> {
    pub fn aborted_folds(&self) -> usize {
        self.folds.iter().filter(|f| f.outcome.is_err()).count()
    }
}

/// One row of the ablation sweep.
#[derive(Debug, Clone)]
pub struct VariantOutcome<S: Scalar> {
    pub name: String,
    pub bands: Vec<Band>,
    pub outcome: ExperimentOutcome<S>,
}

fn validate_config(config: &ExperimentConfig) -> Result<()> {
    config.train.validate()?;
    config_check!(config.repetitions >= 1, "repetition count must be >= 1");
    config_check!(
        config.threshold.is_finite() && config.threshold > 0.0 && config.threshold < 1.0,
        "decision threshold {} outside (0, 1)",
        config.threshold
    );
    config_check!(
        config.bands.is_none() || config.drop.is_none(),
        "band keep list and drop list are mutually exclusive"
    );
    Ok(())
}

/// The band list every scene shares, in the first scene's order.
fn shared_bands(scenes: &[LoadedScene]) -> Result<Vec<Band>> {
    contract!(!scenes.is_empty(), "experiment needs at least one scene");
    let first = scenes[0].stack.bands().to_vec();
    for s in scenes {
        config_check!(
            s.stack.bands() == first.as_slice(),
            "scene {} stores bands {:?}, others {:?}; experiments need one shared list",
            s.id,
            s.stack.bands(),
            first
        );
    }
    Ok(first)
}

/// Apply the keep/drop configuration to the shared band list.
fn effective_bands(shared: &[Band], config: &ExperimentConfig) -> Result<Vec<Band>> {
    if let Some(keep) = &config.bands {
        for b in keep {
            config_check!(
                shared.contains(b),
                "requested band {} is absent from the scenes",
                b.name()
            );
        }
        config_check!(!keep.is_empty(), "band keep list is empty");
        return Ok(keep.clone());
    }
    if let Some(drop) = &config.drop {
        for b in drop {
            config_check!(
                shared.contains(b),
                "cannot drop band {}: the scenes do not carry it",
                b.name()
            );
        }
        let kept: Vec<Band> = shared.iter().copied().filter(|b| !drop.contains(b)).collect();
        config_check!(!kept.is_empty(), "drop list removes every band");
        return Ok(kept);
    }
    Ok(shared.to_vec())
}

fn check_scenes(scenes: &[LoadedScene]) -> Result<()> {
    for (i, s) in scenes.iter().enumerate() {
        contract!(
            !scenes[..i].iter().any(|other| other.id == s.id),
            "duplicate scene id {}",
            s.id
        );
        contract!(
            s.stack.width() == s.truth.width() && s.stack.height() == s.truth.height(),
            "scene {} is {}x{} but its truth is {}x{}",
            s.id,
            s.stack.width(),
            s.stack.height(),
            s.truth.width(),
            s.truth.height()
        );
    }
    Ok(())
}

/// Land types in manifest order with their scene indices.
fn land_type_groups(scenes: &[LoadedScene]) -> Vec<(String, Vec<usize>)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        match groups.iter_mut().find(|(lt, _)| *lt == s.land_type) {
            Some((_, members)) => members.push(i),
            None => groups.push((s.land_type.clone(), vec![i])),
        }
    }
    groups
}

fn require_two_per_land_type(groups: &[(String, Vec<usize>)]) -> Result<()> {
    for (lt, members) in groups {
        config_check!(
            members.len() >= 2,
            "land type {lt} has {} scene(s); the protocols need at least 2",
            members.len()
        );
    }
    Ok(())
}

/// The leave-one-out fold list: every scene of every land type held out
/// once, in manifest order. A pure function of the manifest.
pub fn leave_one_out_folds(scenes: &[LoadedScene]) -> Vec<(String, String)> {
    land_type_groups(scenes)
        .into_iter()
        .flat_map(|(lt, members)| {
            members
                .into_iter()
                .map(move |i| (lt.clone(), i))
                .collect::<Vec<_>>()
        })
        .map(|(lt, i)| (lt, scenes[i].id.clone()))
        .collect()
}

/// Assert that no sampled patch comes from a test scene.
pub fn audit_no_leakage(
    sampled: &[(String, SampleSet)],
    test_ids: &[String],
) -> Result<()> {
    for (scene_id, set) in sampled {
        contract!(
            !test_ids.contains(scene_id),
            "test scene {scene_id} was sampled for training"
        );
        for r in &set.refs {
            contract!(
                !test_ids.contains(&r.scene_id),
                "patch at ({}, {}) leaks test scene {}",
                r.center_row,
                r.center_col,
                r.scene_id
            );
        }
    }
    Ok(())
}

/// Sample every pool scene, train one model, infer and evaluate every test
/// scene. `scene_splits` maps pool scene index -> use-as-validation flag;
/// when no scene is flagged, each scene's internal quadrant split supplies
/// the validation patches instead (the leave-one-out mode).
#[allow(clippy::too_many_arguments)]
fn run_fold<S: Scalar>(
    scenes: &[LoadedScene],
    pool: &[usize],
    val_scene_flags: Option<&[bool]>,
    test: &[usize],
    bands: &[Band],
    network: &NetworkConfig,
    config: &ExperimentConfig,
    fold_seed: u64,
) -> std::result::Result<FoldSuccess<S>, Error> {
    let mut sampled: Vec<(String, SampleSet)> = Vec::with_capacity(pool.len());
    for &i in pool {
        let s = &scenes[i];
        let set = subsample(
            &s.stack,
            &s.truth,
            &s.id,
            config.quota,
            derive_seed(fold_seed, &format!("sample-{}", s.id)),
            false,
        )?;
        sampled.push((s.id.clone(), set));
    }
    let test_ids: Vec<String> = test.iter().map(|&i| scenes[i].id.clone()).collect();
    audit_no_leakage(&sampled, &test_ids)?;

    let mut train_refs: Vec<&PatchRef> = Vec::new();
    let mut val_refs: Vec<&PatchRef> = Vec::new();
    match val_scene_flags {
        None => {
            for (_, set) in &sampled {
                train_refs.extend(set.train_refs());
                val_refs.extend(set.val_refs());
            }
        }
        Some(flags) => {
            contract!(
                flags.len() == pool.len(),
                "{} validation flags for {} pool scenes",
                flags.len(),
                pool.len()
            );
            for ((_, set), &is_val) in sampled.iter().zip(flags.iter()) {
                let sink = if is_val { &mut val_refs } else { &mut train_refs };
                sink.extend(set.refs.iter());
            }
        }
    }

    let stacks: Vec<(&str, &BandStack)> = pool
        .iter()
        .map(|&i| (scenes[i].id.as_str(), &scenes[i].stack))
        .collect();
    let fold_train = TrainConfig {
        seed: fold_seed,
        ..config.train.clone()
    };
    let outcome = train_on_refs::<S>(
        &train_refs,
        &val_refs,
        &stacks,
        Some(bands),
        network,
        &fold_train,
        None,
    )?;

    let infer_config = InferenceConfig {
        threshold: config.threshold,
        bands: Some(bands.to_vec()),
        ..InferenceConfig::default()
    };
    let mut masks = Vec::with_capacity(test.len());
    let mut per_scene = Vec::with_capacity(test.len());
    for &i in test {
        let s = &scenes[i];
        let mask = infer_scene(&outcome.best, &s.stack, &infer_config)?;
        per_scene.push((s.id.clone(), evaluate_masks(&mask, &s.truth)?));
        masks.push((s.id.clone(), mask));
    }
    let reports: Vec<MetricsReport> = per_scene.iter().map(|(_, r)| r.clone()).collect();
    let report = aggregate(&reports, AggregateMode::Macro)?;

    let sample_manifests: Vec<(String, String)> = sampled
        .iter()
        .map(|(id, set)| (id.clone(), to_manifest(set)))
        .collect();
    let combined: String = sample_manifests
        .iter()
        .map(|(id, text)| format!("== scene {id} ==\n{text}"))
        .collect();
    let run_manifest = run_manifest_json(&fold_train, network, &combined)?;

    Ok(FoldSuccess {
        best: outcome.best,
        history: outcome.history,
        masks,
        per_scene,
        report,
        sample_manifests,
        run_manifest,
    })
}

/// Wrap a fold body so a training abort is recorded while any other error
/// stops the experiment.
fn record_fold<S: Scalar>(
    name: String,
    land_type: Option<String>,
    test_scenes: Vec<String>,
    seed: u64,
    body: std::result::Result<FoldSuccess<S>, Error>,
) -> Result<FoldRun<S>> {
    match body {
        Ok(success) => Ok(FoldRun {
            name,
            land_type,
            test_scenes,
            seed,
            outcome: Ok(success),
        }),
        Err(Error::TrainAbort { epoch, detail }) => Ok(FoldRun {
            name,
            land_type,
            test_scenes,
            seed,
            outcome: Err(format!("aborted at epoch {epoch}: {detail}")),
        }),
        Err(other) => Err(other),
    }
}

fn finish<S: Scalar>(folds: Vec<FoldRun<S>>) -> Result<ExperimentOutcome<S>> {
    let reports: Vec<MetricsReport> = folds
        .iter()
        .filter_map(|f| f.outcome.as_ref().ok().map(|s| s.report.clone()))
        .collect();
    let summary = if reports.is_empty() {
        None
    } else {
        Some(aggregate(&reports, AggregateMode::Macro)?)
    };
    Ok(ExperimentOutcome {
        folds,
        aggregate: summary,
    })
}

/// Land-type-specific protocol: within each land type, hold out each scene
/// once, train on the rest of that land type, evaluate on the held-out
/// scene. Patch-level validation comes from each scene's quadrant split.
pub fn run_leave_one_out<S: Scalar>(
    scenes: &[LoadedScene],
    config: &ExperimentConfig,
) -> Result<ExperimentOutcome<S>> {
    validate_config(config)?;
    check_scenes(scenes)?;
    let groups = land_type_groups(scenes);
    require_two_per_land_type(&groups)?;
    let bands = effective_bands(&shared_bands(scenes)?, config)?;
    let network = NetworkConfig {
        input_channels: bands.len(),
        ..config.network.clone()
    };

    let mut folds = Vec::new();
    for (lt, members) in &groups {
        for &held_out in members {
            let held_id = scenes[held_out].id.clone();
            let fold_seed =
                derive_seed(config.master_seed, &format!("loo-{lt}-{held_id}"));
            let pool: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&i| i != held_out)
                .collect();
            let body = run_fold::<S>(
                scenes,
                &pool,
                None,
                &[held_out],
                &bands,
                &network,
                config,
                fold_seed,
            );
            folds.push(record_fold(
                format!("{lt}/{held_id}"),
                Some(lt.clone()),
                vec![held_id],
                fold_seed,
                body,
            )?);
        }
    }
    finish(folds)
}

/// All-land-type protocol: per repetition, hold out one random scene per
/// land type, split the remaining scenes 80/20 into whole-scene train and
/// validation pools, mix land types, train once, evaluate on every
/// held-out scene; aggregate over repetitions.
pub fn run_all_land_type<S: Scalar>(
    scenes: &[LoadedScene],
    config: &ExperimentConfig,
) -> Result<ExperimentOutcome<S>> {
    validate_config(config)?;
    check_scenes(scenes)?;
    let groups = land_type_groups(scenes);
    require_two_per_land_type(&groups)?;
    let bands = effective_bands(&shared_bands(scenes)?, config)?;
    let network = NetworkConfig {
        input_channels: bands.len(),
        ..config.network.clone()
    };

    let mut folds = Vec::new();
    for rep in 1..=config.repetitions {
        let fold_seed =
            derive_seed(config.master_seed, &format!("all-land-type-rep-{rep}"));
        // draw order: one test pick per land type (manifest order), then
        // the Fisher-Yates shuffle of the remainder
        let mut rng = ChaCha20Rng::seed_from_u64(fold_seed);
        let mut test: Vec<usize> = Vec::with_capacity(groups.len());
        for (_, members) in &groups {
            test.push(members[rng.gen_range(0..members.len())]);
        }
        let mut remainder: Vec<usize> = (0..scenes.len())
            .filter(|i| !test.contains(i))
            .collect();
        config_check!(
            remainder.len() >= 2,
            "repetition {rep} leaves {} scene(s) for the train/validation pools",
            remainder.len()
        );
        for i in (1..remainder.len()).rev() {
            let j = rng.gen_range(0..=i);
            remainder.swap(i, j);
        }
        let val_count = ((remainder.len() as f64 * VALIDATION_SCENE_FRACTION).round()
            as usize)
            .clamp(1, remainder.len() - 1);
        let val_set: Vec<usize> = remainder[..val_count].to_vec();
        // stable pool order: manifest order, independent of the shuffle
        let mut pool = remainder.clone();
        pool.sort_unstable();
        let flags: Vec<bool> = pool.iter().map(|i| val_set.contains(i)).collect();

        let body = run_fold::<S>(
            scenes,
            &pool,
            Some(&flags),
            &test,
            &bands,
            &network,
            config,
            fold_seed,
        );
        folds.push(record_fold(
            format!("rep-{rep}"),
            None,
            test.iter().map(|&i| scenes[i].id.clone()).collect(),
            fold_seed,
            body,
        )?);
    }
    finish(folds)
}

/// Band ablation: the all-bands baseline, each drop-one variant, and the
/// keep-{red, green, blue, nir} variant, each run through the
/// all-land-type protocol with its own derived master seed.
pub fn run_ablation<S: Scalar>(
    scenes: &[LoadedScene],
    config: &ExperimentConfig,
) -> Result<Vec<VariantOutcome<S>>> {
    validate_config(config)?;
    config_check!(
        config.bands.is_none() && config.drop.is_none(),
        "the ablation sweep defines its own band variants; leave keep/drop lists empty"
    );
    check_scenes(scenes)?;
    let shared = shared_bands(scenes)?;

    let mut variants: Vec<(String, Vec<Band>)> = Vec::new();
    variants.push(("all_bands".to_string(), shared.clone()));
    for &band in &shared {
        variants.push((
            format!("drop_{}", band.name()),
            shared.iter().copied().filter(|&b| b != band).collect(),
        ));
    }
    let keep = [Band::Red, Band::Green, Band::Blue, Band::Nir];
    for b in keep {
        config_check!(
            shared.contains(&b),
            "keep variant needs the {} band, which the scenes lack",
            b.name()
        );
    }
    variants.push(("keep_red_green_blue_nir".to_string(), keep.to_vec()));

    let mut out = Vec::with_capacity(variants.len());
    for (name, bands) in variants {
        let variant_config = ExperimentConfig {
            bands: Some(bands.clone()),
            drop: None,
            master_seed: derive_seed(config.master_seed, &format!("variant-{name}")),
            ..config.clone()
        };
        let outcome = run_all_land_type::<S>(scenes, &variant_config)?;
        out.push(VariantOutcome {
            name,
            bands,
            outcome,
        });
    }
    Ok(out)
}

/// Human-readable ablation summary: one row per variant.
pub fn ablation_table<S: Scalar>(variants: &[VariantOutcome<S>]) -> String {
    fn cell(v: Option<f64>) -> String {
        v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
    }
    let mut out = String::from(
        "variant                  channels  accuracy  f1_cloud_shadow  auroc   ap\n",
    );
    for v in variants {
        match &v.outcome.aggregate {
            Some(report) => out.push_str(&format!(
                "{:<24} {:<9} {:<9} {:<16} {:<7} {}\n",
                v.name,
                v.bands.len(),
                format!("{:.4}", report.accuracy),
                cell(report.f1_cloud_shadow),
                cell(report.auroc),
                cell(report.average_precision),
            )),
            None => out.push_str(&format!(
                "{:<24} {:<9} all repetitions aborted\n",
                v.name,
                v.bands.len()
            )),
        }
    }
    out
}
