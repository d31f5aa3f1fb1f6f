//! Deterministic derivation of sub-seeds from a single master seed.
//!
//! Every randomized stage of a run (parameter init, epoch shuffling, each
//! fold of an experiment, each synthetic scene, ...) gets its own stream
//! derived from the master seed and a stable label, so adding or reordering
//! stages never perturbs the draws of another stage.

/// FNV-1a 64-bit hash. Also used as the trailing checksum of the binary
/// containers.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 output function: a single bijective scrambling step.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the sub-seed for the stage named `label`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    splitmix64(master ^ fnv1a64(label.as_bytes()))
}
