//! Valid-region preparation.
//!
//! Different products covering the same scene (spectral bands, QA-derived
//! masks, label rasters) disagree slightly about which pixels are valid. The
//! pipeline reconciles them by intersecting their validity planes and
//! clipping everything to the result, so every downstream consumer sees one
//! consistent valid region. Raw four-class label rasters are collapsed to
//! the binary clear / cloud_shadow scheme here as well: clouds and their
//! shadows are deliberately pooled into a single class because shadows alone
//! are far too rare to stand as their own class.

use crate::error::{contract, Error, Result};
use crate::scene::mask::{MaskClass, MaskRaster};

/// Label codes accepted by [`binarize_labels`]: the four-class vocabulary of
/// upstream label rasters.
pub mod raw_class {
    pub const CLEAR: u8 = 0;
    pub const CLOUD: u8 = 1;
    pub const SHADOW: u8 = 2;
    pub const NODATA: u8 = 255;
}

/// Pointwise AND of validity planes (`true` = valid).
///
/// A pixel is valid in the result iff it is valid in every input plane. All
/// planes must share dimensions; with flat row-major storage that means
/// equal lengths.
pub fn intersect_valid(planes: &[&[bool]]) -> Result<Vec<bool>> {
    contract!(!planes.is_empty(), "at least one validity plane is required");
    let len = planes[0].len();
    for (i, plane) in planes.iter().enumerate() {
        contract!(
            plane.len() == len,
            "validity plane {} holds {} pixels but plane 0 holds {}",
            i,
            plane.len(),
            len
        );
    }
    let mut out = planes[0].to_vec();
    for plane in &planes[1..] {
        for (o, &v) in out.iter_mut().zip(plane.iter()) {
            *o = *o && v;
        }
    }
    Ok(out)
}

/// Collapse a raw four-class label plane to the binary mask scheme.
///
/// `cloud` and `shadow` both become `cloud_shadow`; `clear` stays `clear`;
/// `nodata` is preserved. Unknown codes are a data error naming the pixel.
pub fn binarize_labels(width: usize, height: usize, raw: &[u8]) -> Result<MaskRaster> {
    contract!(
        raw.len() == width * height,
        "raw label plane holds {} values but the scene is {}x{}",
        raw.len(),
        width,
        height
    );
    let mut labels = Vec::with_capacity(raw.len());
    for (i, &code) in raw.iter().enumerate() {
        let class = match code {
            raw_class::CLEAR => MaskClass::Clear,
            raw_class::CLOUD | raw_class::SHADOW => MaskClass::CloudShadow,
            raw_class::NODATA => MaskClass::Nodata,
            other => {
                return Err(Error::Data(format!(
                    "pixel ({}, {}) carries unknown raw label code {}",
                    i / width,
                    i % width,
                    other
                )))
            }
        };
        labels.push(class.code());
    }
    MaskRaster::new(width, height, labels, None)
}
