//! Deterministic seed derivation.
//!
//! Every random stream in an experiment is keyed by a path of integer tags
//! under one master seed, so reruns with the same configuration reproduce
//! results bit for bit on any platform. Derivation uses the splitmix64
//! finalizer, which mixes each tag into the running state with full
//! avalanche; string tags are first reduced with FNV-1a.

/// One round of the splitmix64 output function.
#[inline]
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a hash of a string, for naming stream families.
pub fn hash_tag(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from a base seed and a tag path.
///
/// Unrelated paths give statistically independent seeds; the same path
/// always gives the same seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &tag in path {
        s = splitmix64(s ^ splitmix64(tag));
    }
    s
}
