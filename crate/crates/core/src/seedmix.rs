//! Seed derivation helper: splitmix64-style mixing so that seeds derived for
//! different purposes (per-step samplers, id permutations) are decorrelated
//! even when the inputs are small consecutive integers.

pub(crate) fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
