use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream for `(master seed, grid point, start)`. Serial and
/// parallel runs draw identical numbers for the same triple.
pub fn stream(master: u64, point: u64, start: u64) -> ChaCha8Rng {
    let mut h = splitmix(master);
    h = splitmix(h ^ point.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    h = splitmix(h ^ start.wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
