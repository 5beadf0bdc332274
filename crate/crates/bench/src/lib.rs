//! Shared setup for the criterion benchmarks.

use alaska_core::anchorage::AnchorageConfig;
use alaska_core::runtime::HandleWorld;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A world churned into a fragmented state: `objects` live allocations with
/// interleaved holes.
pub fn fragmented_world(objects: usize, obj_size: u64, seed: u64) -> (HandleWorld, Vec<u64>) {
    let mut world = HandleWorld::new(AnchorageConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut live = Vec::new();
    for _ in 0..objects * 2 {
        let h = world.halloc(obj_size).expect("alloc");
        if rng.gen_bool(0.5) && !live.is_empty() {
            let idx = rng.gen_range(0..live.len());
            let victim = live.swap_remove(idx);
            world.hfree(victim).expect("free");
        }
        live.push(h);
    }
    (world, live)
}
