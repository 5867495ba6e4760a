use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_SAMPLE: u64 = 1;
pub const TAG_COUPLE: u64 = 2;
pub const TAG_BOOTSTRAP: u64 = 3;
pub const TAG_VALIDATE: u64 = 4;

/// Human-readable description of [`seed_stream`], stored in run manifests.
pub const DERIVATION: &str =
    "ChaCha8 keyed by SplitMix64(base ^ tag * 0xD1B54A32D192ED03) x4, stream id = replicate";

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Tag for per-depth streams of a command.
pub fn depth_tag(tag: u64, depth: usize) -> u64 {
    tag | (depth as u64) << 32
}

/// Deterministic random stream for one replicate. The key depends on `(base_seed, tag)`
/// and the replicate index selects a ChaCha stream, so distinct replicates never share
/// a keystream.
pub fn seed_stream(base_seed: u64, replicate: u64, tag: u64) -> ChaCha8Rng {
    let mut s = base_seed ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(replicate);
    rng
}

/// A 64-bit seed derived the same way, for APIs that take a plain seed.
pub fn derive_seed(base_seed: u64, replicate: u64, tag: u64) -> u64 {
    use rand::RngCore;
    seed_stream(base_seed, replicate, tag).next_u64()
}
