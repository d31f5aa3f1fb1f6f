//! Spectral band vocabulary for scene stacks.
//!
//! Seven optical surface-reflectance bands are recognized; thermal bands are
//! deliberately absent so the pipeline stays portable to sensors without
//! thermal instruments. Band identifiers are stable lowercase ASCII names
//! used both in APIs and inside the on-disk container headers.

/// One spectral band of a scene stack.
#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    Hash,
    PartialOrd,
    Ord,
    serde::Serialize,
    serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    UltraBlue,
    Blue,
    Green,
    Red,
    Nir,
    Swir1,
    Swir2,
}

impl Band {
    /// Every recognized band, in canonical sensor order.
    pub const ALL: [Band; 7] = [
        Band::UltraBlue,
        Band::Blue,
        Band::Green,
        Band::Red,
        Band::Nir,
        Band::Swir1,
        Band::Swir2,
    ];

    /// Stable lowercase identifier (also the on-disk spelling).
    pub fn name(self) -> &'static str {
        match self {
            Band::UltraBlue => "ultra_blue",
            Band::Blue => "blue",
            Band::Green => "green",
            Band::Red => "red",
            Band::Nir => "nir",
            Band::Swir1 => "swir1",
            Band::Swir2 => "swir2",
        }
    }

    /// Parse a band identifier; `None` for anything outside the vocabulary.
    pub fn parse(name: &str) -> Option<Band> {
        Band::ALL.iter().copied().find(|b| b.name() == name)
    }
}

impl std::fmt::Display for Band {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip_through_parse() {
        for band in Band::ALL {
            assert_eq!(Band::parse(band.name()), Some(band));
        }
    }

    #[test]
    fn unknown_names_are_rejected() {
        for bad in ["thermal", "BLUE", "swir3", "", "nir "] {
            assert_eq!(Band::parse(bad), None, "{bad:?} should not parse");
        }
    }

    #[test]
    fn names_fit_the_container_identifier_slot() {
        for band in Band::ALL {
            assert!(band.name().is_ascii());
            assert!(band.name().len() <= 16);
        }
    }

    #[test]
    fn vocabulary_is_seven_unique_bands() {
        let mut names: Vec<_> = Band::ALL.iter().map(|b| b.name()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 7);
    }
}
