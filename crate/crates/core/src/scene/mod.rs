//! Scenes and masks: in-memory types, on-disk containers, valid-region
//! preparation, raw-export import, and synthetic scene generation.

pub mod band;
pub mod container;
pub mod import;
pub mod mask;
pub mod prep;
pub mod stack;
pub mod synth;

pub use band::Band;
pub use container::{
    read_bandstack, read_bandstack_bytes, read_mask, read_mask_bytes, write_bandstack,
    write_bandstack_bytes, write_mask, write_mask_bytes,
};
pub use import::{import_raw_mask, import_raw_planes, RawImportHeader};
pub use mask::{MaskClass, MaskRaster};
pub use prep::{binarize_labels, intersect_valid};
pub use stack::{BandStack, REFLECTANCE_MAX, REFLECTANCE_MIN};
pub use synth::{generate_synthetic, SynthSpec};
