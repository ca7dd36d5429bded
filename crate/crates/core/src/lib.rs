//! Leaf-focused data preparation, segmentation, translation and evaluation.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod datakit;
pub mod evalharness;
pub mod error;
pub mod image;
pub mod leafgan;
pub mod lflseg;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};

/// Derives an independent seed for one pipeline stage from the root seed.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(1, "a"), stage_seed(1, "b"));
        assert_ne!(stage_seed(1, "a"), stage_seed(2, "a"));
        assert_eq!(stage_seed(7, "gan.G"), stage_seed(7, "gan.G"));
    }
}
