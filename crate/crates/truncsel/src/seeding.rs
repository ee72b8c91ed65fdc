//! Derivation of independent RNG seeds from (master seed, index, stage tag).

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for the stream identified by `index` and `tag` under `master`.
pub fn stream_seed(master: u64, index: u64, tag: &str) -> u64 {
    splitmix(splitmix(splitmix(master) ^ index) ^ fnv1a(tag))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_streams() {
        let a = stream_seed(1, 0, "dgp");
        assert_eq!(a, stream_seed(1, 0, "dgp"));
        assert_ne!(a, stream_seed(1, 1, "dgp"));
        assert_ne!(a, stream_seed(2, 0, "dgp"));
        assert_ne!(a, stream_seed(1, 0, "lca"));
    }
}
