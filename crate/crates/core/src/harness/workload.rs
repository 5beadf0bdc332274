//! Allocation workloads driving the defragmentation experiments.
//!
//! The LRU churn workload mirrors a capped cache: inserts evict the oldest
//! entries until live bytes fall back under the cap. Old sub-heaps fill
//! with holes that the active sub-heap's free lists never see, so the
//! heap's extent keeps growing while live bytes stay flat — the
//! fragmentation the controller is there to fight.

use std::collections::VecDeque;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::handle::classify;
use crate::pin::GlobalPinMap;
use crate::runtime::{HandleWorld, RuntimeError};

#[derive(Clone, Copy, Debug)]
pub enum SizeDist {
    Fixed(u64),
    Range(u64, u64),
}

impl SizeDist {
    fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        match self {
            SizeDist::Fixed(n) => *n,
            SizeDist::Range(lo, hi) => rng.gen_range(*lo..=*hi),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WorkloadKind {
    LruChurn,
    UniformRandom,
    Ramp,
}

#[derive(Clone, Debug)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub live_cap_bytes: u64,
    pub obj_size: SizeDist,
    pub op_count: u64,
    pub seed: u64,
    pub duration_ticks: u64,
}

impl WorkloadSpec {
    pub fn lru_churn(live_cap_bytes: u64, obj_size: u64, op_count: u64, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            kind: WorkloadKind::LruChurn,
            live_cap_bytes,
            obj_size: SizeDist::Fixed(obj_size),
            op_count,
            seed,
            duration_ticks: 1000,
        }
    }
}

struct LiveObject {
    handle: u64,
    block_bytes: u64,
}

pub struct Workload {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    queue: VecDeque<LiveObject>,
    live_bytes: u64,
    pub ops_done: u64,
    counter: u64,
}

impl Workload {
    pub fn new(spec: WorkloadSpec) -> Workload {
        let rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Workload {
            spec,
            rng,
            queue: VecDeque::new(),
            live_bytes: 0,
            ops_done: 0,
            counter: 0,
        }
    }

    pub fn live_bytes(&self) -> u64 {
        self.live_bytes
    }

    pub fn live_objects(&self) -> usize {
        self.queue.len()
    }

    pub fn finished(&self) -> bool {
        self.ops_done >= self.spec.op_count
    }

    fn insert(&mut self, world: &mut HandleWorld) -> Result<(), RuntimeError> {
        let size = self.spec.obj_size.sample(&mut self.rng).max(1);
        let handle = world.halloc(size)?;
        // Touch the object so the workload is not purely metadata.
        let addr = world.translate(handle).expect("fresh handle");
        world
            .heap
            .write(addr, &self.counter.to_le_bytes()[..8.min(size as usize)])
            .expect("in-bounds");
        self.counter += 1;
        let block_bytes = world.block_bytes(handle).expect("fresh handle");
        self.live_bytes += block_bytes;
        self.queue.push_back(LiveObject {
            handle,
            block_bytes,
        });
        Ok(())
    }

    fn evict_oldest(&mut self, world: &mut HandleWorld) -> Result<(), RuntimeError> {
        if let Some(obj) = self.queue.pop_front() {
            world.hfree(obj.handle)?;
            self.live_bytes -= obj.block_bytes;
        }
        Ok(())
    }

    fn free_random(&mut self, world: &mut HandleWorld) -> Result<(), RuntimeError> {
        if self.queue.is_empty() {
            return Ok(());
        }
        let idx = self.rng.gen_range(0..self.queue.len());
        let obj = self.queue.remove(idx).expect("index in range");
        world.hfree(obj.handle)?;
        self.live_bytes -= obj.block_bytes;
        Ok(())
    }

    /// One workload operation.
    pub fn step(&mut self, world: &mut HandleWorld) -> Result<(), RuntimeError> {
        if self.finished() {
            return Ok(());
        }
        self.ops_done += 1;
        match self.spec.kind {
            WorkloadKind::LruChurn => {
                self.insert(world)?;
                // Evict until memory usage falls back below the cap.
                while self.live_bytes > self.spec.live_cap_bytes {
                    self.evict_oldest(world)?;
                }
                Ok(())
            }
            WorkloadKind::UniformRandom => {
                let under_cap = self.live_bytes < self.spec.live_cap_bytes;
                if self.queue.is_empty() || (under_cap && self.rng.gen_bool(0.6)) {
                    self.insert(world)
                } else {
                    self.free_random(world)
                }
            }
            WorkloadKind::Ramp => {
                // Grow to the cap, then churn by freeing a random victim
                // for every insert, leaving scattered holes.
                if self.live_bytes < self.spec.live_cap_bytes {
                    self.insert(world)
                } else {
                    self.free_random(world)?;
                    self.insert(world)
                }
            }
        }
    }

    pub fn live_handles(&self) -> impl Iterator<Item = u64> + '_ {
        self.queue.iter().map(|o| o.handle)
    }
}

/// Which live objects count as pinned when the driver runs a pass.
#[derive(Clone, Copy, Debug)]
pub enum PinPolicy {
    None,
    All,
    /// Pins a deterministic, count-independent subset: objects whose
    /// handle id hashes under the fraction.
    Fraction(f64),
}

impl PinPolicy {
    pub fn build_map(&self, workload: &Workload) -> GlobalPinMap {
        let mut map = GlobalPinMap::new();
        for h in workload.live_handles() {
            let id = match classify(h) {
                crate::handle::Classified::Handle { id, .. } => id,
                crate::handle::Classified::Raw(_) => continue,
            };
            let keep = match self {
                PinPolicy::None => false,
                PinPolicy::All => true,
                PinPolicy::Fraction(f) => {
                    // Splitmix-style hash keeps the choice stable per id.
                    let mut x = id as u64;
                    x = x.wrapping_mul(0x9E37_79B9_7F4A_7C15);
                    x ^= x >> 31;
                    ((x % 10_000) as f64) < f * 10_000.0
                }
            };
            if keep {
                map.insert(id);
            }
        }
        map
    }
}
