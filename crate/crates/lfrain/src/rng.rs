use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Derives a child seed from the master seed and a component label.
///
/// FNV-1a over the label mixed with the master seed, then a splitmix64
/// finalizer. Pure integer arithmetic, so the derivation is identical on
/// every platform, and distinct labels give independent streams.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ master.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic RNG stream for one component of a run.
pub fn stream(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}

/// Uniform sample in [lo, hi).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_stable_and_label_sensitive() {
        let a = derive_seed(7, "synth");
        let b = derive_seed(7, "synth");
        let c = derive_seed(7, "train");
        let d = derive_seed(8, "synth");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn streams_reproduce() {
        let mut r1 = stream(42, "x");
        let mut r2 = stream(42, "x");
        for _ in 0..16 {
            assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
        }
    }
}
