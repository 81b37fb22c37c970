//! Stable seed derivation. Every random stream in the crate is keyed by the
//! master seed plus the identity of the work item, so results do not depend on
//! scheduling or on which other work items exist.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Seed for the posterior fit of `run_id` after observing `epoch` epochs.
pub fn fit_seed(master: u64, run_id: &str, epoch: u32) -> u64 {
    let h = splitmix64(master ^ fnv1a(run_id.as_bytes()));
    splitmix64(h ^ u64::from(epoch).wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// Seed for an indexed sub-stream (synthetic race `index`, sweep cell `index`, ...).
pub fn stream_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index.wrapping_mul(0xa076_1d64_78bd_642f))
}
