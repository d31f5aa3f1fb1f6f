//! `patchmask`: command-line front end for the patch-classification engine.
//!
//! Orchestrates the full pipeline — raw import, synthetic scene generation,
//! patch sampling, training, sliding-window inference, evaluation,
//! re-thresholding, rendering — plus the three multi-scene experiment
//! protocols. Configuration comes from an optional TOML file; command-line
//! flags win over file values, and the `PATCHMASK_OUT` environment variable
//! supplies the default output root.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use patchmask_core::experiment::{
    ablation_table, run_all_land_type, run_leave_one_out, ExperimentConfig, ExperimentOutcome,
    FoldRun, LoadedScene,
};
use patchmask_core::infer::{
    infer_scene, render_composite_png, render_mask_png, rethreshold, InferenceConfig,
    DEFAULT_THRESHOLD, DEFAULT_TILE_SIZE,
};
use patchmask_core::metrics::evaluate_masks;
use patchmask_core::resnet::{load_checkpoint, save_checkpoint, NetworkConfig};
use patchmask_core::sampler::{from_manifest, subsample, to_manifest, SampleSet};
use patchmask_core::scene::{
    generate_synthetic, import_raw_mask, import_raw_planes, read_bandstack, read_mask,
    write_bandstack, write_mask, Band, BandStack, MaskRaster, RawImportHeader, SynthSpec,
};
use patchmask_core::seed::derive_seed;
use patchmask_core::trainer::{history_csv, run_manifest_json, train, TrainConfig, TrainOutcome};

/// Environment variable supplying the default output root.
const OUT_ENV: &str = "PATCHMASK_OUT";

/// Default patch quota per scene when neither flag nor file sets one.
const DEFAULT_QUOTA: usize = 10_000;

/// Exit status when one or more experiment folds aborted but the run
/// itself completed.
const EXIT_FOLD_ABORTED: u8 = 2;

#[derive(Parser)]
#[command(
    name = "patchmask",
    version,
    about = "Patch-based cloud & shadow mask engine",
    propagate_version = true
)]
struct Cli {
    /// TOML configuration file; flags win over file values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed for sampling, initialization, and shuffling.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads (default: one per core). Results are identical for
    /// any thread count.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Comma-separated bands to keep (e.g. `red,green,blue,nir`).
    #[arg(long, global = true, value_name = "LIST")]
    bands: Option<String>,

    /// Comma-separated bands to drop; mutually exclusive with --bands.
    #[arg(long, global = true, value_name = "LIST")]
    drop: Option<String>,

    /// Decision threshold on cloud/shadow confidence, strictly in (0, 1).
    #[arg(long, global = true, value_name = "F")]
    threshold: Option<f64>,

    /// Output directory (default: $PATCHMASK_OUT, else the working
    /// directory). Created if missing.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert raw little-endian i16 planes plus a sidecar header into the
    /// native scene container (and optionally a raw label plane into a
    /// truth mask).
    Import {
        /// Sidecar text header (width, height, band list, nodata rule).
        #[arg(long, value_name = "PATH")]
        header: PathBuf,
        /// One raw plane file per band, in sidecar band order. Repeatable.
        #[arg(long = "plane", value_name = "PATH", required = true)]
        planes: Vec<PathBuf>,
        /// Optional raw u8 label plane to import as the truth mask.
        #[arg(long, value_name = "PATH")]
        mask: Option<PathBuf>,
        /// Scene identifier; output files are named after it.
        #[arg(long, value_name = "ID")]
        id: String,
    },
    /// Generate synthetic scenes with elliptical clouds and offset shadows.
    Synth {
        /// Number of scenes to generate.
        #[arg(long, default_value_t = 1, value_name = "N")]
        count: usize,
        #[arg(long, default_value_t = 256, value_name = "PX")]
        width: usize,
        #[arg(long, default_value_t = 256, value_name = "PX")]
        height: usize,
        /// Width of the nodata frame around each scene, pixels.
        #[arg(long, default_value_t = 0, value_name = "PX")]
        border: usize,
    },
    /// Draw a balanced patch-center sample from one scene and write its
    /// manifest.
    Sample {
        #[arg(long, value_name = "PATH")]
        stack: PathBuf,
        #[arg(long, value_name = "PATH")]
        truth: PathBuf,
        /// Patch quota (default from config file, else 10000).
        #[arg(long, value_name = "N")]
        quota: Option<usize>,
        /// Fail on any per-cell shortfall instead of recording it.
        #[arg(long)]
        strict: bool,
    },
    /// Train a classifier on one scene and write checkpoint, history, and
    /// run manifest.
    Train {
        #[arg(long, value_name = "PATH")]
        stack: PathBuf,
        #[arg(long, value_name = "PATH")]
        truth: PathBuf,
        /// Reuse a previously written sample manifest instead of sampling.
        #[arg(long, value_name = "PATH")]
        samples: Option<PathBuf>,
        /// Patch quota when sampling fresh (default from config, else 10000).
        #[arg(long, value_name = "N")]
        quota: Option<usize>,
    },
    /// Classify every fully-valid pixel of a scene with a trained
    /// checkpoint and write the mask.
    Infer {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        stack: PathBuf,
        /// Patches per work unit (default from config, else 256).
        #[arg(long, value_name = "N")]
        tile_size: Option<usize>,
    },
    /// Compare a predicted mask against truth and write the metric report.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        pred: PathBuf,
        #[arg(long, value_name = "PATH")]
        truth: PathBuf,
    },
    /// Re-apply a different decision threshold to a mask that stores its
    /// confidence plane. Requires --threshold (or a file value).
    Rethreshold {
        #[arg(long, value_name = "PATH")]
        mask: PathBuf,
    },
    /// Render a mask as a gray/white PNG (and, with --stack, a stretched
    /// RGB composite).
    Render {
        #[arg(long, value_name = "PATH")]
        mask: PathBuf,
        /// Also render this scene as an RGB composite PNG.
        #[arg(long, value_name = "PATH")]
        stack: Option<PathBuf>,
    },
    /// Run a multi-scene experiment protocol described by the config file.
    Experiment {
        /// Protocol: land_type_specific | all_land_type | ablation
        /// (default from the [experiment] section).
        #[arg(long, value_name = "MODE")]
        mode: Option<String>,
        /// Repetitions of the all-land-type protocol (default from file,
        /// else 5).
        #[arg(long, value_name = "N")]
        repetitions: Option<usize>,
        /// Patch quota per sampled scene (default from file, else 10000).
        #[arg(long, value_name = "N")]
        quota: Option<usize>,
    },
}

// ---------------------------------------------------------------------------
// Configuration file
// ---------------------------------------------------------------------------

/// Top-level TOML layout. Every key is optional; flags override file values.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    out: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
    threshold: Option<f64>,
    bands: Option<Vec<String>>,
    drop: Option<Vec<String>>,
    quota: Option<usize>,
    tile_size: Option<usize>,
    train: Option<TrainConfig>,
    network: Option<NetworkConfig>,
    experiment: Option<ExperimentFile>,
}

/// `[experiment]` section: protocol mode plus the scene manifest.
#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    #[serde(default)]
    mode: Option<String>,
    #[serde(default)]
    repetitions: Option<usize>,
    #[serde(default)]
    quota: Option<usize>,
    #[serde(default)]
    scenes: Vec<SceneEntry>,
}

/// One `[[experiment.scenes]]` row.
#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneEntry {
    id: String,
    land_type: String,
    stack: PathBuf,
    truth: PathBuf,
}

/// Fully resolved run settings: flag > file > environment > default.
struct Settings {
    out: PathBuf,
    seed: u64,
    threshold: f64,
    /// True when the threshold came from a flag or file rather than the
    /// built-in default; `rethreshold` insists on an explicit value.
    threshold_explicit: bool,
    bands: Option<Vec<Band>>,
    drop: Option<Vec<Band>>,
    quota: usize,
    tile_size: usize,
    train: TrainConfig,
    network: NetworkConfig,
    experiment: Option<ExperimentFile>,
}

/// Parse a comma-separated band list, naming the offender and the valid
/// names on failure.
fn parse_band_list(list: &str) -> Result<Vec<Band>> {
    let mut bands = Vec::new();
    for name in list.split(',') {
        let name = name.trim();
        if name.is_empty() {
            continue;
        }
        let band = Band::parse(name).with_context(|| {
            let valid: Vec<&str> = Band::ALL.iter().map(|b| b.name()).collect();
            format!("unknown band {name:?}; valid names: {}", valid.join(", "))
        })?;
        bands.push(band);
    }
    if bands.is_empty() {
        bail!("band list {list:?} names no bands");
    }
    Ok(bands)
}

fn parse_band_names(names: &[String]) -> Result<Vec<Band>> {
    parse_band_list(&names.join(","))
}

fn resolve_settings(cli: &Cli) -> Result<Settings> {
    let file: FileConfig = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            toml::from_str(&text)
                .with_context(|| format!("parsing config file {}", path.display()))?
        }
        None => FileConfig::default(),
    };

    let out = cli
        .out
        .clone()
        .or(file.out)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));

    let mut train = file.train.unwrap_or_default();
    let mut network = file.network.clone().unwrap_or_default();
    // A [train] section without a [network] section (or vice versa) keeps
    // the dropout rates aligned; when both sections are present the file
    // is taken literally and the trainer enforces agreement.
    if file.network.is_none() {
        network.dropout_keep = train.dropout_keep;
    } else if train.dropout_keep != network.dropout_keep
        && train == TrainConfig::default()
    {
        train.dropout_keep = network.dropout_keep;
    }

    // One master seed drives everything; --seed beats the file's top-level
    // `seed`, which beats `[train] seed`.
    let seed = cli.seed.or(file.seed).unwrap_or(train.seed);
    train.seed = seed;

    let threshold_explicit = cli.threshold.is_some() || file.threshold.is_some();
    let threshold = cli
        .threshold
        .or(file.threshold)
        .unwrap_or(DEFAULT_THRESHOLD);

    let bands = match (&cli.bands, &file.bands) {
        (Some(list), _) => Some(parse_band_list(list)?),
        (None, Some(names)) => Some(parse_band_names(names)?),
        (None, None) => None,
    };
    let drop = match (&cli.drop, &file.drop) {
        (Some(list), _) => Some(parse_band_list(list)?),
        (None, Some(names)) => Some(parse_band_names(names)?),
        (None, None) => None,
    };
    if bands.is_some() && drop.is_some() {
        bail!("--bands and --drop are mutually exclusive");
    }

    let threads = cli.threads.or(file.threads);
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("installing the worker thread pool")?;
    }

    Ok(Settings {
        out,
        seed,
        threshold,
        threshold_explicit,
        bands,
        drop,
        quota: file.quota.unwrap_or(DEFAULT_QUOTA),
        tile_size: file.tile_size.unwrap_or(DEFAULT_TILE_SIZE),
        train,
        network,
        experiment: file.experiment,
    })
}

/// The band list to feed samplers and inference: `None` (all bands) or the
/// keep list implied by --bands / --drop for this particular stack.
fn effective_keep(stack: &BandStack, settings: &Settings) -> Result<Option<Vec<Band>>> {
    if let Some(keep) = &settings.bands {
        for band in keep {
            if stack.band_index(*band).is_none() {
                bail!("scene has no {} band to keep", band.name());
            }
        }
        return Ok(Some(keep.clone()));
    }
    if let Some(drop) = &settings.drop {
        for band in drop {
            if stack.band_index(*band).is_none() {
                bail!("scene has no {} band to drop", band.name());
            }
        }
        let keep: Vec<Band> = stack
            .bands()
            .iter()
            .copied()
            .filter(|b| !drop.contains(b))
            .collect();
        if keep.is_empty() {
            bail!("dropping {} band(s) leaves no input channels", drop.len());
        }
        return Ok(Some(keep));
    }
    Ok(None)
}

/// File stem of `path`, for deriving output names.
fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_import(
    settings: &Settings,
    header_path: &Path,
    plane_paths: &[PathBuf],
    mask_path: Option<&Path>,
    id: &str,
) -> Result<()> {
    let header_text = std::fs::read_to_string(header_path)
        .with_context(|| format!("reading sidecar {}", header_path.display()))?;
    let header = RawImportHeader::parse(&header_text)?;

    let mut plane_bytes = Vec::with_capacity(plane_paths.len());
    for path in plane_paths {
        plane_bytes.push(
            std::fs::read(path).with_context(|| format!("reading plane {}", path.display()))?,
        );
    }
    let plane_refs: Vec<&[u8]> = plane_bytes.iter().map(|b| b.as_slice()).collect();
    let mut stack = import_raw_planes(&header, &plane_refs)?;

    let mut truth = None;
    if let Some(path) = mask_path {
        let bytes =
            std::fs::read(path).with_context(|| format!("reading mask {}", path.display()))?;
        let raw = import_raw_mask(header.width, header.height, &bytes)?;
        // Clip both rasters to the common valid region so every consumer
        // sees one consistent validity plane.
        let stack_valid = stack.validity();
        let mask_valid = raw.validity();
        let nodata: Vec<bool> = stack_valid
            .iter()
            .zip(&mask_valid)
            .map(|(&s, &m)| !(s && m))
            .collect();
        let labels: Vec<u8> = raw
            .labels()
            .iter()
            .zip(&nodata)
            .map(|(&l, &n)| if n { 255 } else { l })
            .collect();
        stack = BandStack::new(
            stack.width(),
            stack.height(),
            stack.bands().to_vec(),
            stack.planes().to_vec(),
            nodata,
            stack.pixel_size_m(),
        )?;
        truth = Some(MaskRaster::new(raw.width(), raw.height(), labels, None)?);
    }

    let stack_path = settings.out.join(format!("{id}.pmbs"));
    write_bandstack(&stack, &stack_path)?;
    println!(
        "imported {}x{} scene, {} band(s), {} valid pixel(s) -> {}",
        stack.width(),
        stack.height(),
        stack.bands().len(),
        stack.valid_count(),
        stack_path.display()
    );
    if let Some(truth) = truth {
        let truth_path = settings.out.join(format!("{id}_truth.pmmr"));
        write_mask(&truth, &truth_path)?;
        let (clear, cloud, nodata) = truth.counts();
        println!(
            "imported truth mask: {clear} clear, {cloud} cloud/shadow, {nodata} nodata -> {}",
            truth_path.display()
        );
    }
    Ok(())
}

fn cmd_synth(
    settings: &Settings,
    count: usize,
    width: usize,
    height: usize,
    border: usize,
) -> Result<()> {
    if count == 0 {
        bail!("--count must be at least 1");
    }
    for i in 0..count {
        let mut spec = SynthSpec::new(
            width,
            height,
            derive_seed(settings.seed, &format!("synth-scene-{i}")),
        );
        spec.nodata_border = border;
        let (stack, truth) = generate_synthetic(&spec)?;
        let stack_path = settings.out.join(format!("synth-{i:02}.pmbs"));
        let truth_path = settings.out.join(format!("synth-{i:02}_truth.pmmr"));
        write_bandstack(&stack, &stack_path)?;
        write_mask(&truth, &truth_path)?;
        let (clear, cloud, nodata) = truth.counts();
        println!(
            "synth-{i:02}: {width}x{height}, {clear} clear / {cloud} cloud-shadow / {nodata} nodata -> {}, {}",
            stack_path.display(),
            truth_path.display()
        );
    }
    Ok(())
}

fn cmd_sample(
    settings: &Settings,
    stack_path: &Path,
    truth_path: &Path,
    quota: Option<usize>,
    strict: bool,
) -> Result<()> {
    let stack = read_bandstack(stack_path)?;
    let truth = read_mask(truth_path)?;
    let id = stem(stack_path);
    let quota = quota.unwrap_or(settings.quota);
    let set = subsample(&stack, &truth, &id, quota, settings.seed, strict)?;
    let manifest = to_manifest(&set);
    let manifest_path = settings.out.join(format!("{id}_samples.txt"));
    write_text(&manifest_path, &manifest)?;
    let train_count = set.train_refs().count();
    let val_count = set.val_refs().count();
    println!(
        "sampled {} patch center(s) ({} train / {} validation) -> {}",
        set.refs.len(),
        train_count,
        val_count,
        manifest_path.display()
    );
    for s in &set.shortfalls {
        println!(
            "  shortfall: quadrant {} provided {} of {} requested patch(es)",
            s.quadrant, s.available, s.requested
        );
    }
    Ok(())
}

fn load_samples(
    path: &Path,
    stack: &BandStack,
    truth: &MaskRaster,
) -> Result<SampleSet> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading sample manifest {}", path.display()))?;
    let set = from_manifest(&text)?;
    set.revalidate(stack, truth)?;
    Ok(set)
}

fn cmd_train(
    settings: &Settings,
    stack_path: &Path,
    truth_path: &Path,
    samples: Option<&Path>,
    quota: Option<usize>,
) -> Result<()> {
    let stack = read_bandstack(stack_path)?;
    let truth = read_mask(truth_path)?;
    let id = stem(stack_path);
    let set = match samples {
        Some(path) => load_samples(path, &stack, &truth)?,
        None => {
            let quota = quota.unwrap_or(settings.quota);
            subsample(&stack, &truth, &id, quota, settings.seed, false)?
        }
    };
    let keep = effective_keep(&stack, settings)?;
    let mut network = settings.network.clone();
    network.input_channels = keep
        .as_ref()
        .map(|k| k.len())
        .unwrap_or_else(|| stack.bands().len());

    let checkpoint_path = settings.out.join("checkpoint.pmck");
    let outcome: TrainOutcome<f32> = train(
        &set,
        &[(id.as_str(), &stack)],
        keep.as_deref(),
        &network,
        &settings.train,
        Some(&checkpoint_path),
    )?;

    let history_path = settings.out.join("history.csv");
    write_text(&history_path, &history_csv(&outcome.history))?;
    let manifest_json = run_manifest_json(&settings.train, &network, &to_manifest(&set))?;
    let manifest_path = settings.out.join("run_manifest.json");
    write_text(&manifest_path, &manifest_json)?;

    let last = outcome
        .history
        .last()
        .context("training produced no epochs")?;
    println!(
        "trained {} epoch(s); best epoch {} (validation loss {:.6}); final validation accuracy {:.4}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_val_loss,
        last.val_accuracy
    );
    println!(
        "wrote {}, {}, {}",
        checkpoint_path.display(),
        history_path.display(),
        manifest_path.display()
    );
    Ok(())
}

fn cmd_infer(
    settings: &Settings,
    checkpoint_path: &Path,
    stack_path: &Path,
    tile_size: Option<usize>,
) -> Result<()> {
    let params = load_checkpoint::<f32>(checkpoint_path)?;
    let stack = read_bandstack(stack_path)?;
    let config = InferenceConfig {
        threshold: settings.threshold,
        bands: effective_keep(&stack, settings)?,
        tile_size: tile_size.unwrap_or(settings.tile_size),
    };
    let mask = infer_scene(&params, &stack, &config)?;
    let mask_path = settings.out.join(format!("{}_mask.pmmr", stem(stack_path)));
    write_mask(&mask, &mask_path)?;
    let (clear, cloud, nodata) = mask.counts();
    println!(
        "classified {} pixel(s): {clear} clear, {cloud} cloud/shadow, {nodata} nodata -> {}",
        clear + cloud,
        mask_path.display()
    );
    Ok(())
}

fn cmd_evaluate(settings: &Settings, pred_path: &Path, truth_path: &Path) -> Result<()> {
    let pred = read_mask(pred_path)?;
    let truth = read_mask(truth_path)?;
    let report = evaluate_masks(&pred, &truth)?;
    print!("{}", report.to_table());
    let report_path = settings.out.join("report.json");
    let json = serde_json::to_string_pretty(&report).context("serializing metric report")?;
    write_text(&report_path, &json)?;
    println!("wrote {}", report_path.display());
    Ok(())
}

fn cmd_rethreshold(settings: &Settings, mask_path: &Path) -> Result<()> {
    if !settings.threshold_explicit {
        bail!("rethreshold needs an explicit --threshold (or a `threshold` file value)");
    }
    let mask = read_mask(mask_path)?;
    let updated = rethreshold(&mask, settings.threshold)?;
    let out_path = settings
        .out
        .join(format!("{}_t{}.pmmr", stem(mask_path), settings.threshold));
    write_mask(&updated, &out_path)?;
    let (before_clear, before_cloud, _) = mask.counts();
    let (clear, cloud, _) = updated.counts();
    println!(
        "rethresholded at {}: cloud/shadow {before_cloud} -> {cloud}, clear {before_clear} -> {clear} -> {}",
        settings.threshold,
        out_path.display()
    );
    Ok(())
}

fn cmd_render(settings: &Settings, mask_path: &Path, stack_path: Option<&Path>) -> Result<()> {
    let mask = read_mask(mask_path)?;
    let png_path = settings.out.join(format!("{}.png", stem(mask_path)));
    render_mask_png(&mask, &png_path)?;
    println!("rendered mask -> {}", png_path.display());
    if let Some(stack_path) = stack_path {
        let stack = read_bandstack(stack_path)?;
        let composite_path = settings
            .out
            .join(format!("{}_composite.png", stem(stack_path)));
        render_composite_png(&stack, &composite_path)?;
        println!("rendered composite -> {}", composite_path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Experiment protocols
// ---------------------------------------------------------------------------

/// Fold names embed the held-out scene as `land_type/scene`; keep each fold
/// in one flat directory entry.
fn fold_dir_name(name: &str) -> String {
    name.replace(['/', '\\'], "__")
}

/// Write one fold's artifacts under `dir` and return whether it aborted.
fn write_fold(dir: &Path, fold: &FoldRun<f32>) -> Result<bool> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    match &fold.outcome {
        Ok(success) => {
            save_checkpoint(&dir.join("checkpoint.pmck"), &success.best)?;
            write_text(&dir.join("history.csv"), &history_csv(&success.history))?;
            write_text(&dir.join("run_manifest.json"), &success.run_manifest)?;
            for (scene, manifest) in &success.sample_manifests {
                write_text(&dir.join(format!("samples_{scene}.txt")), manifest)?;
            }
            for (scene, mask) in &success.masks {
                write_mask(mask, &dir.join(format!("mask_{scene}.pmmr")))?;
            }
            for (scene, report) in &success.per_scene {
                let json = serde_json::to_string_pretty(report)
                    .context("serializing per-scene report")?;
                write_text(&dir.join(format!("report_{scene}.json")), &json)?;
            }
            let json = serde_json::to_string_pretty(&success.report)
                .context("serializing fold report")?;
            write_text(&dir.join("report.json"), &json)?;
            Ok(false)
        }
        Err(detail) => {
            write_text(
                &dir.join("abort.txt"),
                &format!("fold seed {}\n{detail}\n", fold.seed),
            )?;
            Ok(true)
        }
    }
}

/// Write a whole protocol outcome under `dir`; returns the aborted-fold
/// count and prints one status line per fold.
fn write_outcome(dir: &Path, outcome: &ExperimentOutcome<f32>) -> Result<usize> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut aborted = 0;
    for fold in &outcome.folds {
        let fold_dir = dir.join(fold_dir_name(&fold.name));
        let fold_aborted = write_fold(&fold_dir, fold)?;
        match &fold.outcome {
            Ok(success) => {
                let f1 = success
                    .report
                    .f1_cloud_shadow
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into());
                println!(
                    "  fold {}: accuracy {:.4}, cloud/shadow F1 {}",
                    fold.name, success.report.accuracy, f1
                );
            }
            Err(detail) => println!("  fold {}: ABORTED ({detail})", fold.name),
        }
        aborted += fold_aborted as usize;
    }
    if let Some(aggregate) = &outcome.aggregate {
        let json =
            serde_json::to_string_pretty(aggregate).context("serializing aggregate report")?;
        write_text(&dir.join("aggregate.json"), &json)?;
        write_text(&dir.join("aggregate.txt"), &aggregate.to_table())?;
        print!("{}", aggregate.to_table());
    }
    Ok(aborted)
}

fn cmd_experiment(
    settings: &Settings,
    mode: Option<&str>,
    repetitions: Option<usize>,
    quota: Option<usize>,
) -> Result<ExitCode> {
    let exp = settings
        .experiment
        .clone()
        .context("the experiment command needs an [experiment] section in the --config file")?;
    let mode = mode
        .map(str::to_owned)
        .or(exp.mode.clone())
        .context("experiment mode missing: pass --mode or set [experiment] mode")?;

    // Verify the whole manifest up front: a missing file aborts the run
    // before any training starts.
    if exp.scenes.is_empty() {
        bail!("the [experiment] section lists no scenes");
    }
    let mut missing = Vec::new();
    for entry in &exp.scenes {
        for path in [&entry.stack, &entry.truth] {
            if !path.is_file() {
                missing.push(path.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        bail!("missing scene file(s): {}", missing.join(", "));
    }
    let mut scenes = Vec::with_capacity(exp.scenes.len());
    for entry in &exp.scenes {
        scenes.push(LoadedScene {
            id: entry.id.clone(),
            land_type: entry.land_type.clone(),
            stack: read_bandstack(&entry.stack)?,
            truth: read_mask(&entry.truth)?,
        });
    }

    let config = ExperimentConfig {
        train: settings.train.clone(),
        network: settings.network.clone(),
        bands: settings.bands.clone(),
        drop: settings.drop.clone(),
        quota: quota.or(exp.quota).unwrap_or(settings.quota),
        repetitions: repetitions.or(exp.repetitions).unwrap_or(5),
        master_seed: settings.seed,
        threshold: settings.threshold,
    };

    let aborted = match mode.as_str() {
        "land_type_specific" | "leave_one_out" => {
            let outcome = run_leave_one_out::<f32>(&scenes, &config)?;
            println!("leave-one-out: {} fold(s)", outcome.folds.len());
            write_outcome(&settings.out.join("land_type_specific"), &outcome)?
        }
        "all_land_type" => {
            let outcome = run_all_land_type::<f32>(&scenes, &config)?;
            println!("all-land-type: {} repetition(s)", outcome.folds.len());
            write_outcome(&settings.out.join("all_land_type"), &outcome)?
        }
        "ablation" => {
            let variants =
                patchmask_core::experiment::run_ablation::<f32>(&scenes, &config)?;
            let dir = settings.out.join("ablation");
            std::fs::create_dir_all(&dir)
                .with_context(|| format!("creating {}", dir.display()))?;
            let mut total_aborted = 0;
            for variant in &variants {
                println!("variant {} ({} band(s)):", variant.name, variant.bands.len());
                total_aborted += write_outcome(&dir.join(&variant.name), &variant.outcome)?;
            }
            let table = ablation_table(&variants);
            write_text(&dir.join("ablation_table.txt"), &table)?;
            print!("{table}");
            total_aborted
        }
        other => bail!(
            "unknown experiment mode {other:?}; expected land_type_specific, all_land_type, or ablation"
        ),
    };

    if aborted > 0 {
        println!("{aborted} fold(s) aborted; their diagnostics are in abort.txt files");
        Ok(ExitCode::from(EXIT_FOLD_ABORTED))
    } else {
        Ok(ExitCode::SUCCESS)
    }
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn run(cli: &Cli) -> Result<ExitCode> {
    let settings = resolve_settings(cli)?;
    std::fs::create_dir_all(&settings.out)
        .with_context(|| format!("creating output directory {}", settings.out.display()))?;

    match &cli.command {
        Command::Import {
            header,
            planes,
            mask,
            id,
        } => cmd_import(&settings, header, planes, mask.as_deref(), id)?,
        Command::Synth {
            count,
            width,
            height,
            border,
        } => cmd_synth(&settings, *count, *width, *height, *border)?,
        Command::Sample {
            stack,
            truth,
            quota,
            strict,
        } => cmd_sample(&settings, stack, truth, *quota, *strict)?,
        Command::Train {
            stack,
            truth,
            samples,
            quota,
        } => cmd_train(&settings, stack, truth, samples.as_deref(), *quota)?,
        Command::Infer {
            checkpoint,
            stack,
            tile_size,
        } => cmd_infer(&settings, checkpoint, stack, *tile_size)?,
        Command::Evaluate { pred, truth } => cmd_evaluate(&settings, pred, truth)?,
        Command::Rethreshold { mask } => cmd_rethreshold(&settings, mask)?,
        Command::Render { mask, stack } => cmd_render(&settings, mask, stack.as_deref())?,
        Command::Experiment {
            mode,
            repetitions,
            quota,
        } => return cmd_experiment(&settings, mode.as_deref(), *repetitions, *quota),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
