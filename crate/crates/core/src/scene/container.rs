//! On-disk containers for scenes ("PMBS": band stack) and masks ("PMMR":
//! mask raster).
//!
//! Both share the common container skeleton (4-byte magic, `u16` version,
//! payload, trailing FNV-1a 64 checksum; everything little-endian) and a
//! planar payload: `u32` width, `u32` height, a `u16` plane count, one
//! 16-byte zero-padded ASCII identifier per plane, then the row-major plane
//! data itself. A stack stores one `f32` reflectance plane per band followed
//! by a `u8` nodata plane (0 = valid, 1 = nodata) and additionally carries
//! its pixel size; a mask stores a `u8` label plane and, optionally, an
//! `f32` confidence plane, with the plane identifiers pinned to `labels` and
//! `confidence`.
//!
//! Fault precedence on read: wrong magic, then unsupported version, then a
//! structural size check (a payload shorter than the declared sizes demand
//! is `Truncated`, carrying the shortfall; longer is `InvalidField`), then
//! the checksum over the whole payload, and only then field-level semantic
//! validation. Flipping any plane byte therefore surfaces as
//! `ChecksumMismatch`, never as a spurious value error, while a cut file
//! always reports `Truncated`.

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::format::{ByteReader, ByteWriter};
use crate::scene::band::Band;
use crate::scene::mask::MaskRaster;
use crate::scene::stack::BandStack;

/// Magic of the band-stack container.
pub const STACK_MAGIC: [u8; 4] = *b"PMBS";
/// Magic of the mask-raster container.
pub const MASK_MAGIC: [u8; 4] = *b"PMMR";
/// Current version of both containers.
pub const CONTAINER_VERSION: u16 = 1;

const ID_LEN: usize = 16;
const LABELS_ID: &str = "labels";
const CONFIDENCE_ID: &str = "confidence";

fn put_id16(w: &mut ByteWriter, name: &str) {
    debug_assert!(name.is_ascii() && name.len() <= ID_LEN);
    let mut slot = [0u8; ID_LEN];
    slot[..name.len()].copy_from_slice(name.as_bytes());
    w.put_bytes(&slot);
}

fn read_id16(r: &mut ByteReader) -> Result<String> {
    let at = r.offset();
    let raw = r.take(ID_LEN)?;
    let end = raw.iter().position(|&b| b == 0).unwrap_or(ID_LEN);
    if raw[end..].iter().any(|&b| b != 0) || !raw[..end].is_ascii() || end == 0 {
        return Err(FormatError::InvalidField {
            what: "plane identifier is not zero-padded ASCII".into(),
            offset: at,
        }
        .into());
    }
    Ok(std::str::from_utf8(&raw[..end])
        .expect("checked ASCII")
        .to_string())
}

/// Parsed dimensions small enough that every derived byte count fits.
fn checked_plane_len(r: &ByteReader, width: u32, height: u32) -> Result<usize> {
    if width == 0 || height == 0 {
        return Err(r.invalid("dimensions must be positive"));
    }
    (width as usize)
        .checked_mul(height as usize)
        .ok_or_else(|| r.invalid("dimensions overflow"))
}

/// Serialize a stack to container bytes.
pub fn write_bandstack_bytes(stack: &BandStack) -> Vec<u8> {
    let mut w = ByteWriter::new(STACK_MAGIC, CONTAINER_VERSION);
    w.put_u32(stack.width() as u32);
    w.put_u32(stack.height() as u32);
    w.put_f64(stack.pixel_size_m());
    w.put_u16(stack.bands().len() as u16);
    for &band in stack.bands() {
        put_id16(&mut w, band.name());
    }
    for b in 0..stack.bands().len() {
        w.put_f32_slice(stack.plane(b));
    }
    let nodata: Vec<u8> = stack.nodata().iter().map(|&n| n as u8).collect();
    w.put_bytes(&nodata);
    w.finish()
}

/// Deserialize a stack from container bytes.
pub fn read_bandstack_bytes(data: &[u8]) -> Result<BandStack> {
    let mut r = ByteReader::open(data, STACK_MAGIC, CONTAINER_VERSION)?;
    let width = r.u32()?;
    let height = r.u32()?;
    let pixel_size_m = r.f64()?;
    let band_count = r.u16()? as usize;
    if band_count == 0 || band_count > Band::ALL.len() {
        return Err(r.invalid(format!(
            "band count {} outside 1..={}",
            band_count,
            Band::ALL.len()
        )));
    }
    let n = checked_plane_len(&r, width, height)?;
    let expected = band_count
        .checked_mul(n)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(band_count * ID_LEN))
        .and_then(|v| v.checked_add(n))
        .ok_or_else(|| r.invalid("declared sizes overflow"))?;
    r.expect_remaining(expected)?;
    r.verify_checksum()?;

    let mut bands = Vec::with_capacity(band_count);
    for _ in 0..band_count {
        let at = r.offset();
        let name = read_id16(&mut r)?;
        let band = Band::parse(&name).ok_or(FormatError::InvalidField {
            what: format!("unrecognized band identifier {name:?}"),
            offset: at,
        })?;
        if bands.contains(&band) {
            return Err(FormatError::InvalidField {
                what: format!("duplicate band identifier {name:?}"),
                offset: at,
            }
            .into());
        }
        bands.push(band);
    }
    let mut planes = Vec::with_capacity(band_count * n);
    for _ in 0..band_count {
        planes.extend_from_slice(&r.f32_vec(n)?);
    }
    let at = r.offset();
    let nodata_bytes = r.take(n)?;
    let mut nodata = Vec::with_capacity(n);
    for (i, &b) in nodata_bytes.iter().enumerate() {
        match b {
            0 => nodata.push(false),
            1 => nodata.push(true),
            other => {
                return Err(FormatError::InvalidField {
                    what: format!("nodata plane byte {other} is neither 0 nor 1"),
                    offset: at + i as u64,
                }
                .into())
            }
        }
    }
    r.finish()?;
    BandStack::new(
        width as usize,
        height as usize,
        bands,
        planes,
        nodata,
        pixel_size_m,
    )
}

/// Serialize a mask to container bytes.
pub fn write_mask_bytes(mask: &MaskRaster) -> Vec<u8> {
    let mut w = ByteWriter::new(MASK_MAGIC, CONTAINER_VERSION);
    w.put_u32(mask.width() as u32);
    w.put_u32(mask.height() as u32);
    let planes: u16 = if mask.confidence().is_some() { 2 } else { 1 };
    w.put_u16(planes);
    put_id16(&mut w, LABELS_ID);
    if mask.confidence().is_some() {
        put_id16(&mut w, CONFIDENCE_ID);
    }
    w.put_bytes(mask.labels());
    if let Some(confidence) = mask.confidence() {
        w.put_f32_slice(confidence);
    }
    w.finish()
}

/// Deserialize a mask from container bytes.
pub fn read_mask_bytes(data: &[u8]) -> Result<MaskRaster> {
    let mut r = ByteReader::open(data, MASK_MAGIC, CONTAINER_VERSION)?;
    let width = r.u32()?;
    let height = r.u32()?;
    let plane_count = r.u16()?;
    if plane_count != 1 && plane_count != 2 {
        return Err(r.invalid(format!("plane count {plane_count} is neither 1 nor 2")));
    }
    let has_confidence = plane_count == 2;
    let n = checked_plane_len(&r, width, height)?;
    let conf_bytes = if has_confidence {
        n.checked_mul(4)
            .and_then(|v| v.checked_add(ID_LEN))
            .ok_or_else(|| r.invalid("declared sizes overflow"))?
    } else {
        0
    };
    let expected = n
        .checked_add(ID_LEN)
        .and_then(|v| v.checked_add(conf_bytes))
        .ok_or_else(|| r.invalid("declared sizes overflow"))?;
    r.expect_remaining(expected)?;
    r.verify_checksum()?;

    for expected in [LABELS_ID, CONFIDENCE_ID].iter().take(plane_count as usize) {
        let at = r.offset();
        let name = read_id16(&mut r)?;
        if name != *expected {
            return Err(FormatError::InvalidField {
                what: format!("expected plane identifier {expected:?}, found {name:?}"),
                offset: at,
            }
            .into());
        }
    }
    let labels = r.take(n)?.to_vec();
    let confidence = if has_confidence {
        Some(r.f32_vec(n)?)
    } else {
        None
    };
    r.finish()?;
    MaskRaster::new(width as usize, height as usize, labels, confidence)
}

/// Write a stack to a file, replacing anything already at `path`.
pub fn write_bandstack(stack: &BandStack, path: &Path) -> Result<()> {
    std::fs::write(path, write_bandstack_bytes(stack))
        .map_err(|e| Error::io(format!("writing scene {}", path.display()), e))
}

/// Read a stack from a file.
pub fn read_bandstack(path: &Path) -> Result<BandStack> {
    let data = std::fs::read(path)
        .map_err(|e| Error::io(format!("reading scene {}", path.display()), e))?;
    read_bandstack_bytes(&data)
}

/// Write a mask to a file, replacing anything already at `path`.
pub fn write_mask(mask: &MaskRaster, path: &Path) -> Result<()> {
    std::fs::write(path, write_mask_bytes(mask))
        .map_err(|e| Error::io(format!("writing mask {}", path.display()), e))
}

/// Read a mask from a file.
pub fn read_mask(path: &Path) -> Result<MaskRaster> {
    let data = std::fs::read(path)
        .map_err(|e| Error::io(format!("reading mask {}", path.display()), e))?;
    read_mask_bytes(&data)
}
