//! Patch sampling: enumerate valid 15x15 windows, split scenes into a 2x2
//! grid of sub-images, and draw per-scene training/validation samples.
//!
//! A window is valid when it lies fully inside the scene and contains no
//! nodata pixel, so every candidate center sits at least 7 pixels from each
//! edge. Scenes are split by halving each axis (odd extents give the first
//! half the extra row/column); one sub-image, chosen uniformly at random,
//! becomes validation and the other three are training, which makes the
//! split exactly 75%/25% when every sub-image fills its share of the quota.
//! Patches are assigned to sub-images by their center pixel, so windows near
//! a grid line spatially overlap across the split; the optional strict mode
//! excludes centers whose window crosses a grid line (i.e. centers within 7
//! pixels of it) at the cost of some candidates.
//!
//! Sampling is uniform over valid centers without replacement and without
//! class balancing, single-threaded per scene, and fully determined by the
//! seed. A sub-image with fewer candidates than its share contributes all of
//! them and records the shortfall.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_check, contract, Error, Result};
use crate::scalar::Scalar;
use crate::scene::band::Band;
use crate::scene::mask::{MaskClass, MaskRaster};
use crate::scene::stack::BandStack;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// Side length of the square local region fed to the classifier.
pub const PATCH_EXTENT: usize = 15;
/// Distance from a window's center to its edge.
pub const PATCH_MARGIN: usize = PATCH_EXTENT / 2;

/// Which partition a patch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Binary patch label: the class of the window's central pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatchLabel {
    Clear,
    CloudShadow,
}

impl PatchLabel {
    /// Index into the classifier's 2-way softmax (cloud_shadow is the
    /// positive class, index 1).
    pub fn class_index(self) -> usize {
        match self {
            PatchLabel::Clear => 0,
            PatchLabel::CloudShadow => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PatchLabel::Clear => "clear",
            PatchLabel::CloudShadow => "cloud_shadow",
        }
    }

    pub fn parse(s: &str) -> Option<PatchLabel> {
        match s {
            "clear" => Some(PatchLabel::Clear),
            "cloud_shadow" => Some(PatchLabel::CloudShadow),
            _ => None,
        }
    }
}

/// One sampled local region, identified by its scene and center pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PatchRef {
    pub scene_id: String,
    pub center_row: usize,
    pub center_col: usize,
    pub split: Split,
    pub label: PatchLabel,
}

/// 2x2 partition of a scene with one sub-image held out for validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSplit {
    /// First row of the bottom half.
    pub row_mid: usize,
    /// First column of the right half.
    pub col_mid: usize,
    /// Quadrant index (row-major: 0 top-left, 1 top-right, 2 bottom-left,
    /// 3 bottom-right) used as validation.
    pub val_quadrant: u8,
}

impl GridSplit {
    /// Quadrant of a pixel.
    pub fn quadrant(&self, row: usize, col: usize) -> u8 {
        (u8::from(row >= self.row_mid) << 1) | u8::from(col >= self.col_mid)
    }

    /// Whether the 15x15 window at `center` contains pixels from more than
    /// one sub-image (equivalently: the center lies within 7 pixels of a
    /// grid line).
    pub fn window_crosses_line(&self, center_row: usize, center_col: usize) -> bool {
        let spans = |center: usize, mid: usize| {
            center + PATCH_MARGIN >= mid && center < mid + PATCH_MARGIN
        };
        spans(center_row, self.row_mid) || spans(center_col, self.col_mid)
    }
}

/// Halve each axis (first half keeps the extra row/column on odd extents)
/// and draw the validation quadrant uniformly from the seed.
pub fn grid_split(width: usize, height: usize, seed: u64) -> Result<GridSplit> {
    config_check!(
        width >= 30 && height >= 30,
        "grid split needs at least a 30x30 scene, got {}x{}",
        width,
        height
    );
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "grid-split"));
    Ok(GridSplit {
        row_mid: height.div_ceil(2),
        col_mid: width.div_ceil(2),
        val_quadrant: rng.gen_range(0..4),
    })
}

/// Whether the full window around `center` is inside the scene and free of
/// nodata pixels.
pub fn window_is_valid(stack: &BandStack, center_row: usize, center_col: usize) -> bool {
    if center_row < PATCH_MARGIN
        || center_col < PATCH_MARGIN
        || center_row + PATCH_MARGIN >= stack.height()
        || center_col + PATCH_MARGIN >= stack.width()
    {
        return false;
    }
    for row in center_row - PATCH_MARGIN..=center_row + PATCH_MARGIN {
        for col in center_col - PATCH_MARGIN..=center_col + PATCH_MARGIN {
            if stack.is_nodata(row, col) {
                return false;
            }
        }
    }
    true
}

/// All valid window centers, in row-major order.
///
/// Runs in O(pixels) via a summed-area table over the nodata plane rather
/// than rescanning each 15x15 window.
pub fn enumerate_valid(stack: &BandStack) -> Vec<(usize, usize)> {
    let width = stack.width();
    let height = stack.height();
    if width < PATCH_EXTENT || height < PATCH_EXTENT {
        return Vec::new();
    }
    // sat[(r+1)*(width+1) + (c+1)] = number of nodata pixels in [0..=r, 0..=c]
    let mut sat = vec![0u32; (width + 1) * (height + 1)];
    let nodata = stack.nodata();
    for row in 0..height {
        let mut row_sum = 0u32;
        for col in 0..width {
            row_sum += u32::from(nodata[row * width + col]);
            sat[(row + 1) * (width + 1) + (col + 1)] = sat[row * (width + 1) + (col + 1)] + row_sum;
        }
    }
    let window_nodata = |center_row: usize, center_col: usize| {
        let r0 = center_row - PATCH_MARGIN;
        let c0 = center_col - PATCH_MARGIN;
        let r1 = center_row + PATCH_MARGIN + 1;
        let c1 = center_col + PATCH_MARGIN + 1;
        let w = width + 1;
        sat[r1 * w + c1] + sat[r0 * w + c0] - sat[r0 * w + c1] - sat[r1 * w + c0]
    };
    let mut centers = Vec::new();
    for row in PATCH_MARGIN..height - PATCH_MARGIN {
        for col in PATCH_MARGIN..width - PATCH_MARGIN {
            if window_nodata(row, col) == 0 {
                centers.push((row, col));
            }
        }
    }
    centers
}

/// A sub-image that could not fill its share of the quota.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub quadrant: u8,
    pub requested: usize,
    pub available: usize,
}

/// The sampled patches of one scene, with full provenance for replay.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub seed: u64,
    pub quota: usize,
    pub grid: GridSplit,
    pub refs: Vec<PatchRef>,
    pub shortfalls: Vec<Shortfall>,
}

impl SampleSet {
    /// Re-check every patch against its scene: in-bounds, nodata-free
    /// window, label matching the truth, and split consistent with the grid
    /// assignment.
    pub fn revalidate(&self, stack: &BandStack, truth: &MaskRaster) -> Result<()> {
        for r in &self.refs {
            contract!(
                window_is_valid(stack, r.center_row, r.center_col),
                "patch at ({}, {}) does not re-validate",
                r.center_row,
                r.center_col
            );
            let class = truth.class_at(r.center_row, r.center_col);
            let expected = match r.label {
                PatchLabel::Clear => MaskClass::Clear,
                PatchLabel::CloudShadow => MaskClass::CloudShadow,
            };
            contract!(
                class == expected,
                "patch at ({}, {}) label {} disagrees with truth {}",
                r.center_row,
                r.center_col,
                r.label.name(),
                class
            );
            let quadrant = self.grid.quadrant(r.center_row, r.center_col);
            let expected_split = if quadrant == self.grid.val_quadrant {
                Split::Val
            } else {
                Split::Train
            };
            contract!(
                r.split == expected_split,
                "patch at ({}, {}) split {} disagrees with quadrant {}",
                r.center_row,
                r.center_col,
                r.split.name(),
                quadrant
            );
        }
        Ok(())
    }

    pub fn train_refs(&self) -> impl Iterator<Item = &PatchRef> {
        self.refs.iter().filter(|r| r.split == Split::Train)
    }

    pub fn val_refs(&self) -> impl Iterator<Item = &PatchRef> {
        self.refs.iter().filter(|r| r.split == Split::Val)
    }
}

/// Draw up to `quota / 4` centers uniformly without replacement from each
/// sub-image, labeling each by the truth at its center.
///
/// Centers whose truth pixel is nodata carry no label and are excluded from
/// the candidate pool. `strict` additionally excludes centers whose window
/// crosses a grid line, making train and validation windows spatially
/// disjoint instead of merely center-disjoint.
pub fn subsample(
    stack: &BandStack,
    truth: &MaskRaster,
    scene_id: &str,
    quota: usize,
    seed: u64,
    strict: bool,
) -> Result<SampleSet> {
    contract!(
        stack.width() == truth.width() && stack.height() == truth.height(),
        "truth raster {}x{} does not match scene {}x{}",
        truth.width(),
        truth.height(),
        stack.width(),
        stack.height()
    );
    config_check!(
        quota >= 4 && quota % 4 == 0,
        "quota must be a positive multiple of 4, got {}",
        quota
    );
    let grid = grid_split(stack.width(), stack.height(), seed)?;
    let share = quota / 4;

    let mut pools: [Vec<(usize, usize)>; 4] = Default::default();
    let mut any_valid = false;
    for (row, col) in enumerate_valid(stack) {
        any_valid = true;
        if truth.class_at(row, col) == MaskClass::Nodata {
            continue;
        }
        if strict && grid.window_crosses_line(row, col) {
            continue;
        }
        pools[grid.quadrant(row, col) as usize].push((row, col));
    }
    if !any_valid {
        return Err(Error::Data(format!(
            "scene {scene_id} has no valid 15x15 window"
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "subsample"));
    let mut refs = Vec::new();
    let mut shortfalls = Vec::new();
    for (q, pool) in pools.iter_mut().enumerate() {
        let take = share.min(pool.len());
        if pool.len() < share {
            shortfalls.push(Shortfall {
                quadrant: q as u8,
                requested: share,
                available: pool.len(),
            });
        }
        // partial Fisher-Yates: uniform without replacement
        for i in 0..take {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        let split = if q as u8 == grid.val_quadrant {
            Split::Val
        } else {
            Split::Train
        };
        for &(row, col) in pool.iter().take(take) {
            let label = match truth.class_at(row, col) {
                MaskClass::Clear => PatchLabel::Clear,
                MaskClass::CloudShadow => PatchLabel::CloudShadow,
                MaskClass::Nodata => unreachable!("nodata centers were excluded"),
            };
            refs.push(PatchRef {
                scene_id: scene_id.to_string(),
                center_row: row,
                center_col: col,
                split,
                label,
            });
        }
    }
    Ok(SampleSet {
        seed,
        quota,
        grid,
        refs,
        shortfalls,
    })
}

/// Resolve a band subset to plane indices (scene order when `None`).
/// Map an optional band subset to plane indices of `stack`; `None` selects
/// every band in stored order.
pub fn resolve_bands(stack: &BandStack, bands: Option<&[Band]>) -> Result<Vec<usize>> {
    match bands {
        None => Ok((0..stack.bands().len()).collect()),
        Some(subset) => {
            contract!(!subset.is_empty(), "band subset must be nonempty");
            subset
                .iter()
                .map(|&band| {
                    stack.band_index(band).ok_or_else(|| {
                        Error::Contract(format!("scene has no {} band", band.name()))
                    })
                })
                .collect()
        }
    }
}

/// Copy one window into a `[C, 15, 15]` tensor (channel-major), restricted
/// to `bands` when given.
pub fn extract<S: Scalar>(
    stack: &BandStack,
    center_row: usize,
    center_col: usize,
    bands: Option<&[Band]>,
) -> Result<Tensor<S>> {
    contract!(
        window_is_valid(stack, center_row, center_col),
        "window at ({}, {}) is out of bounds or contains nodata",
        center_row,
        center_col
    );
    let indices = resolve_bands(stack, bands)?;
    let mut out = Tensor::zeros(&[indices.len(), PATCH_EXTENT, PATCH_EXTENT])?;
    let data = out.data_mut();
    let mut cursor = 0;
    for &b in &indices {
        let plane = stack.plane(b);
        for row in center_row - PATCH_MARGIN..=center_row + PATCH_MARGIN {
            let start = row * stack.width() + center_col - PATCH_MARGIN;
            for &v in &plane[start..start + PATCH_EXTENT] {
                data[cursor] = S::from_f64(v as f64);
                cursor += 1;
            }
        }
    }
    Ok(out)
}

/// Extract a batch of windows into `[B, C, 15, 15]`, in the order given.
pub fn extract_batch<S: Scalar>(
    stack: &BandStack,
    refs: &[&PatchRef],
    bands: Option<&[Band]>,
) -> Result<Tensor<S>> {
    contract!(!refs.is_empty(), "cannot extract an empty batch");
    let indices = resolve_bands(stack, bands)?;
    let channels = indices.len();
    let patch = channels * PATCH_EXTENT * PATCH_EXTENT;
    let mut out = Tensor::zeros(&[refs.len(), channels, PATCH_EXTENT, PATCH_EXTENT])?;
    for (i, r) in refs.iter().enumerate() {
        let one: Tensor<S> = extract(stack, r.center_row, r.center_col, bands)?;
        out.data_mut()[i * patch..(i + 1) * patch].copy_from_slice(one.data());
    }
    Ok(out)
}

/// Serialize a sample set to the line-oriented audit manifest.
pub fn to_manifest(set: &SampleSet) -> String {
    let mut out = String::new();
    out.push_str("# patch sample manifest v1\n");
    out.push_str(&format!("seed = {}\n", set.seed));
    out.push_str(&format!("quota = {}\n", set.quota));
    out.push_str(&format!("row_mid = {}\n", set.grid.row_mid));
    out.push_str(&format!("col_mid = {}\n", set.grid.col_mid));
    out.push_str(&format!("val_quadrant = {}\n", set.grid.val_quadrant));
    for s in &set.shortfalls {
        out.push_str(&format!(
            "shortfall = {} {} {}\n",
            s.quadrant, s.requested, s.available
        ));
    }
    for r in &set.refs {
        out.push_str(&format!(
            "patch = {} {} {} {} {}\n",
            r.scene_id,
            r.center_row,
            r.center_col,
            r.split.name(),
            r.label.name()
        ));
    }
    out
}

/// Parse a manifest produced by [`to_manifest`].
pub fn from_manifest(text: &str) -> Result<SampleSet> {
    let mut seed: Option<u64> = None;
    let mut quota: Option<usize> = None;
    let mut row_mid: Option<usize> = None;
    let mut col_mid: Option<usize> = None;
    let mut val_quadrant: Option<u8> = None;
    let mut shortfalls = Vec::new();
    let mut refs = Vec::new();

    let bad = |lineno: usize, what: &str| {
        Error::Data(format!("manifest line {}: {}", lineno + 1, what))
    };
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(lineno, "expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "seed" => seed = Some(value.parse().map_err(|_| bad(lineno, "bad seed"))?),
            "quota" => quota = Some(value.parse().map_err(|_| bad(lineno, "bad quota"))?),
            "row_mid" => row_mid = Some(value.parse().map_err(|_| bad(lineno, "bad row_mid"))?),
            "col_mid" => col_mid = Some(value.parse().map_err(|_| bad(lineno, "bad col_mid"))?),
            "val_quadrant" => {
                val_quadrant = Some(value.parse().map_err(|_| bad(lineno, "bad val_quadrant"))?)
            }
            "shortfall" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(bad(lineno, "shortfall needs `quadrant requested available`"));
                }
                shortfalls.push(Shortfall {
                    quadrant: parts[0].parse().map_err(|_| bad(lineno, "bad quadrant"))?,
                    requested: parts[1].parse().map_err(|_| bad(lineno, "bad requested"))?,
                    available: parts[2].parse().map_err(|_| bad(lineno, "bad available"))?,
                });
            }
            "patch" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.len() != 5 {
                    return Err(bad(lineno, "patch needs `scene row col split label`"));
                }
                refs.push(PatchRef {
                    scene_id: parts[0].to_string(),
                    center_row: parts[1].parse().map_err(|_| bad(lineno, "bad row"))?,
                    center_col: parts[2].parse().map_err(|_| bad(lineno, "bad col"))?,
                    split: Split::parse(parts[3])
                        .ok_or_else(|| bad(lineno, "unknown split"))?,
                    label: PatchLabel::parse(parts[4])
                        .ok_or_else(|| bad(lineno, "unknown label"))?,
                });
            }
            other => return Err(bad(lineno, &format!("unknown key {other:?}"))),
        }
    }
    let missing = |k: &str| Error::Data(format!("manifest is missing required key {k:?}"));
    Ok(SampleSet {
        seed: seed.ok_or_else(|| missing("seed"))?,
        quota: quota.ok_or_else(|| missing("quota"))?,
        grid: GridSplit {
            row_mid: row_mid.ok_or_else(|| missing("row_mid"))?,
            col_mid: col_mid.ok_or_else(|| missing("col_mid"))?,
            val_quadrant: val_quadrant.ok_or_else(|| missing("val_quadrant"))?,
        },
        refs,
        shortfalls,
    })
}
