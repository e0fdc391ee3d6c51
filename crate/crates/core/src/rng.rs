//! Counter-based random streams.
//!
//! A stream is addressed by (master seed, replica, domain tag, counter). The
//! first three are hashed into a ChaCha key and the counter selects the ChaCha
//! stream, so any stream can be regenerated without touching its neighbours.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep unrelated consumers of the same lineage independent.
pub mod tag {
    pub const NOISE: u64 = 0x6e6f_6973_6500_0001;
    pub const FEYNMAN_KAC: u64 = 0x666b_0000_0000_0002;
    pub const SYNTHETIC: u64 = 0x7379_6e00_0000_0003;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for one `(master, replica, tag, counter)` address.
pub fn stream(master_seed: u64, replica: u64, tag: u64, counter: i64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut h = splitmix64(master_seed ^ splitmix64(tag));
    for chunk in key.chunks_exact_mut(8) {
        h = splitmix64(h ^ replica.wrapping_mul(0xd1b5_4a32_d192_ed03));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(counter as u64);
    rng
}
