//! Per-pixel classification rasters.
//!
//! Every pixel is one of three states: `clear` ground, `cloud_shadow`
//! (clouds and their shadows share one class), or `nodata`. An optional
//! confidence plane carries the classifier's cloud/shadow probability for
//! each valid pixel; nodata positions in that plane are canonicalized to 0.0
//! so rasters compare and serialize bit-exactly.

use crate::error::{contract, Error, Result};

/// The three pixel states a mask can assign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskClass {
    Clear,
    CloudShadow,
    Nodata,
}

impl MaskClass {
    /// Stable on-disk / in-memory label code.
    pub fn code(self) -> u8 {
        match self {
            MaskClass::Clear => 0,
            MaskClass::CloudShadow => 1,
            MaskClass::Nodata => 255,
        }
    }

    /// Decode a label code; `None` for anything outside the vocabulary.
    pub fn from_code(code: u8) -> Option<MaskClass> {
        match code {
            0 => Some(MaskClass::Clear),
            1 => Some(MaskClass::CloudShadow),
            255 => Some(MaskClass::Nodata),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskClass::Clear => "clear",
            MaskClass::CloudShadow => "cloud_shadow",
            MaskClass::Nodata => "nodata",
        }
    }
}

impl std::fmt::Display for MaskClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A width×height label raster with an optional confidence plane.
///
/// Labels are stored as [`MaskClass`] codes in row-major order. When a
/// confidence plane is present it holds, for every non-nodata pixel, the
/// predicted cloud/shadow probability in [0, 1]; nodata positions hold 0.0.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRaster {
    width: usize,
    height: usize,
    labels: Vec<u8>,
    confidence: Option<Vec<f32>>,
}

impl MaskRaster {
    /// Build a raster, validating label codes and (if present) the
    /// confidence plane. Confidence values at nodata pixels are overwritten
    /// with the canonical 0.0.
    pub fn new(
        width: usize,
        height: usize,
        labels: Vec<u8>,
        confidence: Option<Vec<f32>>,
    ) -> Result<Self> {
        contract!(width > 0 && height > 0, "mask dimensions must be positive");
        let plane_len = width
            .checked_mul(height)
            .ok_or_else(|| Error::Contract("mask dimensions overflow".into()))?;
        contract!(
            labels.len() == plane_len,
            "label plane holds {} values but the mask is {}x{}",
            labels.len(),
            width,
            height
        );
        for (i, &code) in labels.iter().enumerate() {
            if MaskClass::from_code(code).is_none() {
                return Err(Error::Data(format!(
                    "pixel ({}, {}) carries unknown label code {}",
                    i / width,
                    i % width,
                    code
                )));
            }
        }
        let confidence = match confidence {
            None => None,
            Some(mut plane) => {
                contract!(
                    plane.len() == plane_len,
                    "confidence plane holds {} values but the mask is {}x{}",
                    plane.len(),
                    width,
                    height
                );
                for (i, v) in plane.iter_mut().enumerate() {
                    if labels[i] == MaskClass::Nodata.code() {
                        *v = 0.0;
                    } else if !v.is_finite() || !(0.0..=1.0).contains(v) {
                        return Err(Error::Data(format!(
                            "pixel ({}, {}) carries confidence {} outside [0, 1]",
                            i / width,
                            i % width,
                            v
                        )));
                    }
                }
                Some(plane)
            }
        };
        Ok(Self {
            width,
            height,
            labels,
            confidence,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    /// Row-major label codes.
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Row-major confidence plane, if stored.
    pub fn confidence(&self) -> Option<&[f32]> {
        self.confidence.as_deref()
    }

    /// Class of one pixel.
    pub fn class_at(&self, row: usize, col: usize) -> MaskClass {
        MaskClass::from_code(self.labels[row * self.width + col])
            .expect("constructor validated every label code")
    }

    /// (clear, cloud_shadow, nodata) pixel counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut clear = 0;
        let mut cloud_shadow = 0;
        let mut nodata = 0;
        for &code in &self.labels {
            if code == MaskClass::Clear.code() {
                clear += 1;
            } else if code == MaskClass::CloudShadow.code() {
                cloud_shadow += 1;
            } else {
                nodata += 1;
            }
        }
        (clear, cloud_shadow, nodata)
    }

    /// Row-major validity plane (`true` where the pixel is not nodata).
    pub fn validity(&self) -> Vec<bool> {
        self.labels
            .iter()
            .map(|&code| code != MaskClass::Nodata.code())
            .collect()
    }
}
