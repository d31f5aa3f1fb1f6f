//! In-memory multispectral scene: per-band reflectance planes plus a nodata
//! plane.
//!
//! Reflectance is stored already scaled to physical units (raw integer
//! exports are divided by 10,000 at import time), and valid pixels must lie
//! in [`REFLECTANCE_MIN`], [`REFLECTANCE_MAX`] — a range wide enough to admit
//! sensor artifacts on either side of the nominal [0, 1] interval. Nodata is
//! an explicit boolean plane rather than a sentinel value, so every real
//! reflectance value stays representable.
//!
//! A stack is immutable after construction and safe to share across threads.

use crate::error::{contract, Error, Result};
use crate::scene::band::Band;

/// Lowest reflectance a valid pixel may carry.
pub const REFLECTANCE_MIN: f32 = -0.2;
/// Highest reflectance a valid pixel may carry.
pub const REFLECTANCE_MAX: f32 = 1.6;
/// Divisor applied to raw integer reflectance exports at import time.
pub const REFLECTANCE_SCALE: f64 = 10_000.0;
/// Ground sampling distance assumed when none is declared, in meters.
pub const DEFAULT_PIXEL_SIZE_M: f64 = 30.0;

/// A width×height multispectral scene with planar band storage.
///
/// Planes are row-major and band-major: band `b`'s pixel `(row, col)` lives
/// at `planes[b * width * height + row * width + col]`. The nodata plane uses
/// `true` for invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct BandStack {
    width: usize,
    height: usize,
    bands: Vec<Band>,
    planes: Vec<f32>,
    nodata: Vec<bool>,
    pixel_size_m: f64,
}

impl BandStack {
    /// Build a stack, validating every declared invariant.
    ///
    /// `planes` holds one row-major plane per band, concatenated in band
    /// order; `nodata` is one row-major plane (`true` = invalid pixel).
    pub fn new(
        width: usize,
        height: usize,
        bands: Vec<Band>,
        planes: Vec<f32>,
        nodata: Vec<bool>,
        pixel_size_m: f64,
    ) -> Result<Self> {
        contract!(width > 0 && height > 0, "scene dimensions must be positive");
        contract!(!bands.is_empty(), "a scene must carry at least one band");
        let mut seen = bands.clone();
        seen.sort_unstable();
        seen.dedup();
        contract!(seen.len() == bands.len(), "band identifiers must be unique");
        let plane_len = width
            .checked_mul(height)
            .ok_or_else(|| Error::Contract("scene dimensions overflow".into()))?;
        contract!(
            planes.len() == plane_len * bands.len(),
            "band data holds {} values but {} bands of {}x{} need {}",
            planes.len(),
            bands.len(),
            width,
            height,
            plane_len * bands.len()
        );
        contract!(
            nodata.len() == plane_len,
            "nodata plane holds {} values but the scene is {}x{}",
            nodata.len(),
            width,
            height
        );
        contract!(
            pixel_size_m.is_finite() && pixel_size_m > 0.0,
            "pixel size must be positive and finite"
        );
        for (b, plane) in planes.chunks_exact(plane_len).enumerate() {
            for (i, &v) in plane.iter().enumerate() {
                if nodata[i] {
                    continue;
                }
                if !v.is_finite() || !(REFLECTANCE_MIN..=REFLECTANCE_MAX).contains(&v) {
                    return Err(Error::Data(format!(
                        "band {} pixel ({}, {}) has reflectance {} outside [{}, {}]",
                        bands[b].name(),
                        i / width,
                        i % width,
                        v,
                        REFLECTANCE_MIN,
                        REFLECTANCE_MAX,
                    )));
                }
            }
        }
        Ok(Self {
            width,
            height,
            bands,
            planes,
            nodata,
            pixel_size_m,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Bands in storage order.
    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn pixel_size_m(&self) -> f64 {
        self.pixel_size_m
    }

    /// Number of pixels in one plane.
    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    /// Row-major reflectance plane of the band at `band_index`.
    pub fn plane(&self, band_index: usize) -> &[f32] {
        let n = self.plane_len();
        &self.planes[band_index * n..(band_index + 1) * n]
    }

    /// All planes concatenated in band order.
    pub fn planes(&self) -> &[f32] {
        &self.planes
    }

    /// Position of `band` in storage order, if present.
    pub fn band_index(&self, band: Band) -> Option<usize> {
        self.bands.iter().position(|&b| b == band)
    }

    /// Reflectance of one pixel of one band.
    pub fn value(&self, band_index: usize, row: usize, col: usize) -> f32 {
        self.plane(band_index)[row * self.width + col]
    }

    /// Whether the pixel is invalid.
    pub fn is_nodata(&self, row: usize, col: usize) -> bool {
        self.nodata[row * self.width + col]
    }

    /// Row-major nodata plane (`true` = invalid).
    pub fn nodata(&self) -> &[bool] {
        &self.nodata
    }

    /// Row-major validity plane (`true` = valid) — the complement of
    /// [`BandStack::nodata`], in the orientation the region-intersection
    /// helpers expect.
    pub fn validity(&self) -> Vec<bool> {
        self.nodata.iter().map(|&n| !n).collect()
    }

    /// Count of valid pixels.
    pub fn valid_count(&self) -> usize {
        self.nodata.iter().filter(|&&n| !n).count()
    }
}
