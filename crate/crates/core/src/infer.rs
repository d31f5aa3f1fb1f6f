//! Whole-scene mask inference: slide the classifier over every valid
//! 15×15 window, keep the positive-class probability as a confidence
//! plane, and threshold it into labels.
//!
//! Only centers whose full window is in bounds and nodata-free are
//! classified; everything else — including the 7-pixel frame no window
//! fits inside — stays nodata. A confidence exactly equal to the threshold
//! maps to cloud_shadow (masking errs conservative: a false positive is
//! cheaper downstream than a missed cloud).
//!
//! Batching is a pure performance choice: eval-mode arithmetic never mixes
//! samples, so the batched sliding window is bit-identical to running each
//! window alone, for any tile size and any thread count. Workers share the
//! read-only parameters and write disjoint pixel ranges.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{config_check, contract, Error, Result};
use crate::ops::loss::POSITIVE_CLASS;
use crate::resnet::{forward_eval, ParameterSet};
use crate::sampler::{enumerate_valid, extract, resolve_bands, PATCH_EXTENT};
use crate::scalar::Scalar;
use crate::scene::{Band, BandStack, MaskClass, MaskRaster};
use crate::tensor::Tensor;

/// Default decision threshold: the 50% confidence rule.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Default number of windows classified per batch.
pub const DEFAULT_TILE_SIZE: usize = 256;

/// Scene-inference settings. The thread count is governed by the ambient
/// rayon pool (set by the command-line layer); results never depend on it.
#[derive(Debug, Clone)]
pub struct InferenceConfig {
    /// Decision threshold, strictly inside (0, 1).
    pub threshold: f64,
    /// Band subset handed to the network; `None` uses every band in the
    /// scene. The resulting channel count must match the checkpoint.
    pub bands: Option<Vec<Band>>,
    /// Windows per mini-batch.
    pub tile_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            threshold: DEFAULT_THRESHOLD,
            bands: None,
            tile_size: DEFAULT_TILE_SIZE,
        }
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    config_check!(
        threshold.is_finite() && threshold > 0.0 && threshold < 1.0,
        "decision threshold {threshold} outside (0, 1)"
    );
    Ok(())
}

/// Pure thresholding of a confidence plane into label codes: valid pixels
/// become cloud_shadow when `confidence >= threshold` (ties go to
/// cloud_shadow), clear otherwise; invalid pixels stay nodata.
pub fn apply_threshold(confidence: &[f32], valid: &[bool], threshold: f64) -> Result<Vec<u8>> {
    check_threshold(threshold)?;
    contract!(
        confidence.len() == valid.len(),
        "confidence plane holds {} pixels, validity {}",
        confidence.len(),
        valid.len()
    );
    contract!(
        confidence
            .iter()
            .zip(valid.iter())
            .all(|(&c, &v)| !v || (0.0..=1.0).contains(&c)),
        "confidences on valid pixels must lie in [0, 1]"
    );
    Ok(confidence
        .iter()
        .zip(valid.iter())
        .map(|(&c, &v)| {
            if !v {
                MaskClass::Nodata.code()
            } else if c as f64 >= threshold {
                MaskClass::CloudShadow.code()
            } else {
                MaskClass::Clear.code()
            }
        })
        .collect())
}

/// Relabel a confidence-carrying mask under a new threshold without
/// re-running the network.
pub fn rethreshold(mask: &MaskRaster, threshold: f64) -> Result<MaskRaster> {
    let confidence = mask.confidence().ok_or_else(|| {
        Error::Config("mask stores no confidence plane; rethresholding needs one".into())
    })?;
    let labels = apply_threshold(confidence, &mask.validity(), threshold)?;
    MaskRaster::new(
        mask.width(),
        mask.height(),
        labels,
        Some(confidence.to_vec()),
    )
}

/// Classify every valid window center of `stack` and return the labeled
/// mask with its confidence plane. Pixels without a fully valid window
/// (the 7-pixel frame, nodata-contaminated neighborhoods) are nodata.
pub fn infer_scene<S: Scalar>(
    params: &ParameterSet<S>,
    stack: &BandStack,
    config: &InferenceConfig,
) -> Result<MaskRaster> {
    check_threshold(config.threshold)?;
    config_check!(config.tile_size >= 1, "tile size must be at least 1");
    let bands = config.bands.as_deref();
    let channels = resolve_bands(stack, bands)?.len();
    config_check!(
        channels == params.config().input_channels,
        "scene subset provides {channels} channels, checkpoint expects {}",
        params.config().input_channels
    );

    let centers = enumerate_valid(stack);
    let tiles: Vec<&[(usize, usize)]> = centers.chunks(config.tile_size).collect();
    let patch = channels * PATCH_EXTENT * PATCH_EXTENT;
    let tile_confs: Vec<Vec<f32>> = tiles
        .par_iter()
        .map(|tile| -> Result<Vec<f32>> {
            let mut batch =
                Tensor::<S>::zeros(&[tile.len(), channels, PATCH_EXTENT, PATCH_EXTENT])?;
            for (i, &(row, col)) in tile.iter().enumerate() {
                let one: Tensor<S> = extract(stack, row, col, bands)?;
                batch.data_mut()[i * patch..(i + 1) * patch].copy_from_slice(one.data());
            }
            let probs = forward_eval(params, &batch)?;
            Ok((0..tile.len())
                .map(|i| probs.data()[i * 2 + POSITIVE_CLASS].as_f64() as f32)
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let n = stack.plane_len();
    let mut labels = vec![MaskClass::Nodata.code(); n];
    let mut confidence = vec![0.0f32; n];
    for (tile, confs) in tiles.iter().zip(tile_confs.iter()) {
        for (&(row, col), &conf) in tile.iter().zip(confs.iter()) {
            let at = row * stack.width() + col;
            confidence[at] = conf;
            labels[at] = if conf as f64 >= config.threshold {
                MaskClass::CloudShadow.code()
            } else {
                MaskClass::Clear.code()
            };
        }
    }
    MaskRaster::new(stack.width(), stack.height(), labels, Some(confidence))
}

/// Palette of the mask render.
pub fn mask_gray(class: MaskClass) -> u8 {
    match class {
        MaskClass::Clear => 128,
        MaskClass::CloudShadow => 255,
        MaskClass::Nodata => 0,
    }
}

/// 8-bit grayscale pixels of the mask image (row-major, one byte per
/// pixel): gray = clear, white = cloud_shadow, black = nodata.
pub fn mask_pixels(mask: &MaskRaster) -> Vec<u8> {
    (0..mask.height())
        .flat_map(|r| (0..mask.width()).map(move |c| mask_gray(mask.class_at(r, c))))
        .collect()
}

fn encode_png(pixels: &[u8], width: usize, height: usize, color: image::ColorType) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(&mut bytes)
        .write_image(pixels, width as u32, height as u32, color.into())
        .map_err(|e| Error::Data(format!("png encoding failed: {e}")))?;
    Ok(bytes)
}

/// PNG bytes of the mask render.
pub fn encode_mask_png(mask: &MaskRaster) -> Result<Vec<u8>> {
    encode_png(
        &mask_pixels(mask),
        mask.width(),
        mask.height(),
        image::ColorType::L8,
    )
}

/// Percentile bounds used by the composite stretch.
pub const STRETCH_LO_PERCENT: f64 = 2.0;
pub const STRETCH_HI_PERCENT: f64 = 98.0;

/// Nearest-rank percentile of the valid values of one plane.
fn percentile(sorted: &[f32], percent: f64) -> f32 {
    let n = sorted.len();
    let rank = ((percent / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Map one band plane to 8-bit with a 2nd–98th percentile stretch over
/// valid pixels; invalid pixels map to 0. A constant plane maps to 0.
fn stretch_plane(plane: &[f32], valid: &[bool]) -> Result<Vec<u8>> {
    let mut values: Vec<f32> = plane
        .iter()
        .zip(valid.iter())
        .filter(|(_, &v)| v)
        .map(|(&x, _)| x)
        .collect();
    if values.is_empty() {
        return Err(Error::Data(
            "composite render needs at least one valid pixel".into(),
        ));
    }
    values.sort_by(f32::total_cmp);
    let lo = percentile(&values, STRETCH_LO_PERCENT);
    let hi = percentile(&values, STRETCH_HI_PERCENT);
    Ok(plane
        .iter()
        .zip(valid.iter())
        .map(|(&x, &v)| {
            if !v || hi <= lo {
                0
            } else {
                let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
                (t * 255.0).round() as u8
            }
        })
        .collect())
}

/// Interleaved RGB8 pixels of the true-color composite (red, green, blue
/// bands with the percentile stretch; nodata pixels are black).
pub fn composite_pixels(stack: &BandStack) -> Result<Vec<u8>> {
    let valid = stack.validity();
    let mut channels = Vec::with_capacity(3);
    for band in [Band::Red, Band::Green, Band::Blue] {
        let idx = stack.band_index(band).ok_or_else(|| {
            Error::Config(format!(
                "composite render needs the {} band, which the scene lacks",
                band.name()
            ))
        })?;
        channels.push(stretch_plane(stack.plane(idx), &valid)?);
    }
    let mut rgb = Vec::with_capacity(stack.plane_len() * 3);
    for i in 0..stack.plane_len() {
        rgb.push(channels[0][i]);
        rgb.push(channels[1][i]);
        rgb.push(channels[2][i]);
    }
    Ok(rgb)
}

/// PNG bytes of the true-color composite.
pub fn encode_composite_png(stack: &BandStack) -> Result<Vec<u8>> {
    encode_png(
        &composite_pixels(stack)?,
        stack.width(),
        stack.height(),
        image::ColorType::Rgb8,
    )
}

/// Write the mask render to `path` as an 8-bit PNG.
pub fn render_mask_png(mask: &MaskRaster, path: &Path) -> Result<()> {
    let bytes = encode_mask_png(mask)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Write the true-color composite to `path` as an 8-bit PNG.
pub fn render_composite_png(stack: &BandStack, path: &Path) -> Result<()> {
    let bytes = encode_composite_png(stack)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
