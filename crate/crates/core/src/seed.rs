//! Seed derivation: one master seed fans out into independent sub-streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng64 = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Mask = 2,
    Shuffle = 3,
    Dropout = 4,
    Split = 5,
    ValidationMask = 6,
    Data = 7,
    Noise = 8,
    Head = 9,
    Random = 10,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes `(master, stream, a, b)` into a child seed.
pub fn derive(master: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix(master);
    h = splitmix(h ^ stream as u64);
    h = splitmix(h ^ a);
    splitmix(h ^ b.rotate_left(17))
}

pub fn rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: Stream, a: u64, b: u64) -> Rng64 {
    rng(derive(master, stream, a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct() {
        let a = derive(7, Stream::Mask, 0, 0);
        assert_ne!(a, derive(7, Stream::Dropout, 0, 0));
        assert_ne!(a, derive(7, Stream::Mask, 1, 0));
        assert_ne!(a, derive(7, Stream::Mask, 0, 1));
        assert_ne!(a, derive(8, Stream::Mask, 0, 0));
        assert_eq!(a, derive(7, Stream::Mask, 0, 0));
    }
}
