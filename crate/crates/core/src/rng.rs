use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent, platform-stable RNG for work item `stream` under `seed`.
/// Parallel consumers index their streams so results never depend on
/// scheduling.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
