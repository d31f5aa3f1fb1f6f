//! Bridge from external GIS exports: flat raw binary planes plus a sidecar
//! text header.
//!
//! The sidecar is line-oriented `key = value` text (`#` comments allowed):
//!
//! ```text
//! width = 512
//! height = 512
//! bands = blue, green, red, nir
//! nodata_value = -9999
//! pixel_size_m = 30
//! ```
//!
//! `width`, `height`, and `bands` are required; `nodata_value` defaults to
//! -9999 and `pixel_size_m` to 30. Each band arrives as one row-major plane
//! of little-endian `i16` raw reflectance, which is divided by 10,000 to
//! reach physical units. A pixel equal to `nodata_value` in any band is
//! nodata for the whole stack. Raw label planes use one `u8` per pixel in
//! the four-class vocabulary and are collapsed to the binary mask scheme on
//! the way in.

use crate::error::{Error, Result};
use crate::scene::band::Band;
use crate::scene::mask::MaskRaster;
use crate::scene::prep::binarize_labels;
use crate::scene::stack::{BandStack, DEFAULT_PIXEL_SIZE_M, REFLECTANCE_SCALE};

/// Default raw sentinel marking invalid pixels in integer exports.
pub const DEFAULT_NODATA_VALUE: i16 = -9999;

/// Parsed sidecar header describing a raw export.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImportHeader {
    pub width: usize,
    pub height: usize,
    pub bands: Vec<Band>,
    pub nodata_value: i16,
    pub pixel_size_m: f64,
}

impl RawImportHeader {
    /// Parse sidecar text. Unknown keys, repeats, and missing required keys
    /// are data errors naming the offender.
    pub fn parse(text: &str) -> Result<Self> {
        let mut width: Option<usize> = None;
        let mut height: Option<usize> = None;
        let mut bands: Option<Vec<Band>> = None;
        let mut nodata_value: Option<i16> = None;
        let mut pixel_size_m: Option<f64> = None;

        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Data(format!(
                    "sidecar line {}: expected `key = value`, found {:?}",
                    lineno + 1,
                    line
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            let dup = |k: &str| Error::Data(format!("sidecar key {k:?} appears twice"));
            match key {
                "width" => {
                    if width.is_some() {
                        return Err(dup(key));
                    }
                    width = Some(parse_field(key, value)?);
                }
                "height" => {
                    if height.is_some() {
                        return Err(dup(key));
                    }
                    height = Some(parse_field(key, value)?);
                }
                "bands" => {
                    if bands.is_some() {
                        return Err(dup(key));
                    }
                    let mut list = Vec::new();
                    for name in value.split(',') {
                        let name = name.trim();
                        let band = Band::parse(name).ok_or_else(|| {
                            Error::Data(format!("sidecar names unknown band {name:?}"))
                        })?;
                        list.push(band);
                    }
                    bands = Some(list);
                }
                "nodata_value" => {
                    if nodata_value.is_some() {
                        return Err(dup(key));
                    }
                    nodata_value = Some(parse_field(key, value)?);
                }
                "pixel_size_m" => {
                    if pixel_size_m.is_some() {
                        return Err(dup(key));
                    }
                    pixel_size_m = Some(parse_field(key, value)?);
                }
                other => {
                    return Err(Error::Data(format!(
                        "sidecar line {}: unknown key {:?}",
                        lineno + 1,
                        other
                    )))
                }
            }
        }

        let missing = |k: &str| Error::Data(format!("sidecar is missing required key {k:?}"));
        Ok(RawImportHeader {
            width: width.ok_or_else(|| missing("width"))?,
            height: height.ok_or_else(|| missing("height"))?,
            bands: bands.ok_or_else(|| missing("bands"))?,
            nodata_value: nodata_value.unwrap_or(DEFAULT_NODATA_VALUE),
            pixel_size_m: pixel_size_m.unwrap_or(DEFAULT_PIXEL_SIZE_M),
        })
    }
}

fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Data(format!("sidecar key {key:?} has unparseable value {value:?}")))
}

/// Decode one little-endian `i16` plane.
fn decode_i16_plane(bytes: &[u8], expected_pixels: usize, band: Band) -> Result<Vec<i16>> {
    if bytes.len() != expected_pixels * 2 {
        return Err(Error::Data(format!(
            "raw plane for band {} holds {} bytes but {} pixels need {}",
            band.name(),
            bytes.len(),
            expected_pixels,
            expected_pixels * 2
        )));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect())
}

/// Assemble a stack from raw planes (one per header band, in header order).
///
/// Raw values are divided by 10,000; a pixel equal to the header's
/// `nodata_value` in any band invalidates that pixel across the whole
/// stack. Out-of-range reflectance on a pixel that survives the nodata rule
/// is a data error, as it indicates an undeclared sentinel.
pub fn import_raw_planes(header: &RawImportHeader, planes: &[&[u8]]) -> Result<BandStack> {
    if planes.len() != header.bands.len() {
        return Err(Error::Data(format!(
            "sidecar declares {} bands but {} raw planes were supplied",
            header.bands.len(),
            planes.len()
        )));
    }
    let n = header.width * header.height;
    let mut decoded = Vec::with_capacity(planes.len());
    for (i, bytes) in planes.iter().enumerate() {
        decoded.push(decode_i16_plane(bytes, n, header.bands[i])?);
    }
    let mut nodata = vec![false; n];
    for plane in &decoded {
        for (i, &raw) in plane.iter().enumerate() {
            if raw == header.nodata_value {
                nodata[i] = true;
            }
        }
    }
    let mut scaled = Vec::with_capacity(n * decoded.len());
    for plane in &decoded {
        scaled.extend(
            plane
                .iter()
                .map(|&raw| (raw as f64 / REFLECTANCE_SCALE) as f32),
        );
    }
    BandStack::new(
        header.width,
        header.height,
        header.bands.clone(),
        scaled,
        nodata,
        header.pixel_size_m,
    )
}

/// Collapse a raw `u8` four-class label plane to a binary mask.
pub fn import_raw_mask(width: usize, height: usize, bytes: &[u8]) -> Result<MaskRaster> {
    if bytes.len() != width * height {
        return Err(Error::Data(format!(
            "raw label plane holds {} bytes but the mask is {}x{}",
            bytes.len(),
            width,
            height
        )));
    }
    binarize_labels(width, height, bytes)
}
