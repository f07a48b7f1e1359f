//! Seeded random streams. Each consumer draws from its own stream so adding
//! draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Mask = 2,
    Batches = 3,
    Growth = 4,
    Glyphs = 5,
    Colorize = 6,
    TestColors = 7,
    Split = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    keyed(seed, which, 0)
}

/// Stream keyed additionally by an index, e.g. one per generated example.
pub fn keyed(seed: u64, which: Stream, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(splitmix(splitmix(seed) ^ index));
    rng.set_stream(which as u64);
    rng
}
