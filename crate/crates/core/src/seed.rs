//! Splits one run seed into independent per-component seeds.

/// SplitMix64 finaliser over `seed` mixed with an FNV-1a hash of `tag`.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::sub_seed;

    #[test]
    fn tags_and_seeds_separate() {
        assert_eq!(sub_seed(7, "model"), sub_seed(7, "model"));
        assert_ne!(sub_seed(7, "model"), sub_seed(7, "shuffle"));
        assert_ne!(sub_seed(7, "model"), sub_seed(8, "model"));
    }
}
