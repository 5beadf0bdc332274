//! Deterministic mutator simulation for the barrier protocol.
//!
//! Mutators run scripted operations under a seeded round-robin scheduler, so
//! every rendezvous test is reproducible. The scheduler honors the same
//! rules the real threads do: a poll parks the mutator when a barrier is
//! requested, an external region joins by proxy with pins published at
//! entry, and exiting an external region while a barrier is pending parks at
//! the implicit safepoint on the way out.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BarrierState, GlobalPinMap, MutatorContext, PauseRecord, PinError};

#[derive(Clone, Debug)]
pub enum MutatorOp {
    Push { owner: u32, slots: usize },
    Pop,
    Pin { slot: usize, value: u64 },
    Release { slot: usize },
    Poll,
    ExternalEnter,
    ExternalExit,
    /// A step that touches no pin state; stands in for ordinary computation.
    Work,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MutatorState {
    Running,
    Parked,
    External,
    Done,
}

pub struct SimMutator {
    pub ctx: MutatorContext,
    script: Vec<MutatorOp>,
    pc: usize,
    pub state: MutatorState,
    /// Frame snapshot made visible to the barrier (at a poll or on external
    /// entry). `None` while running normally.
    published: Option<GlobalPinMap>,
}

impl SimMutator {
    pub fn new(script: Vec<MutatorOp>) -> SimMutator {
        SimMutator {
            ctx: MutatorContext::new(),
            script,
            pc: 0,
            state: MutatorState::Running,
            published: None,
        }
    }

    fn publish(&mut self) {
        self.published = Some(GlobalPinMap::from_ids(self.ctx.pinned_ids()));
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SimError {
    #[error("pin runtime error: {0}")]
    Pin(#[from] PinError),
    #[error("barrier did not complete within {0} scheduler steps")]
    NoProgress(usize),
    #[error("reentrant barrier begin")]
    ReentrantBarrier,
    #[error("barrier end without a barrier in progress")]
    NotInBarrier,
}

pub struct SimWorld {
    pub mutators: Vec<SimMutator>,
    pub barrier: BarrierState,
    rng: ChaCha8Rng,
    in_barrier: bool,
    now_ns: u64,
}

impl SimWorld {
    pub fn new(seed: u64, scripts: Vec<Vec<MutatorOp>>) -> SimWorld {
        SimWorld {
            mutators: scripts.into_iter().map(SimMutator::new).collect(),
            barrier: BarrierState::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            in_barrier: false,
            now_ns: 0,
        }
    }

    /// Executes one operation on one runnable mutator, chosen in a shuffled
    /// round-robin order. Returns false when nothing can run.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let mut order: Vec<usize> = (0..self.mutators.len()).collect();
        order.shuffle(&mut self.rng);
        for idx in order {
            if self.runnable(idx) {
                self.exec_one(idx)?;
                self.now_ns += 1;
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn runnable(&self, idx: usize) -> bool {
        matches!(
            self.mutators[idx].state,
            MutatorState::Running | MutatorState::External
        ) && self.mutators[idx].pc < self.mutators[idx].script.len()
    }

    fn exec_one(&mut self, idx: usize) -> Result<(), SimError> {
        let requested = self.barrier.requested;
        let m = &mut self.mutators[idx];
        let op = m.script[m.pc].clone();
        m.pc += 1;
        match op {
            MutatorOp::Push { owner, slots } => m.ctx.frame_push(owner, slots),
            MutatorOp::Pop => {
                m.ctx.frame_pop();
            }
            MutatorOp::Pin { slot, value } => m.ctx.pin(slot, value)?,
            MutatorOp::Release { slot } => {
                m.ctx.release(slot)?;
            }
            MutatorOp::Poll => {
                // The cheap path is a single flag load; only a pending
                // request escalates into publish-and-park.
                if requested {
                    m.publish();
                    m.state = MutatorState::Parked;
                    self.barrier.joined += 1;
                }
            }
            MutatorOp::ExternalEnter => {
                m.publish();
                m.ctx.external_enter();
                m.state = MutatorState::External;
            }
            MutatorOp::ExternalExit => {
                m.ctx.external_exit()?;
                if !m.ctx.in_external() {
                    if requested {
                        // Implicit safepoint on the way out of external code.
                        m.publish();
                        m.state = MutatorState::Parked;
                        self.barrier.joined += 1;
                    } else {
                        m.published = None;
                        m.state = MutatorState::Running;
                    }
                }
            }
            MutatorOp::Work => {}
        }
        if m.pc >= m.script.len() && m.state == MutatorState::Running {
            m.state = MutatorState::Done;
            m.published = None;
        }
        Ok(())
    }

    /// True when every mutator is parked, inside external code, or finished.
    pub fn world_stopped(&self) -> bool {
        self.mutators.iter().all(|m| {
            matches!(
                m.state,
                MutatorState::Parked | MutatorState::External | MutatorState::Done
            )
        })
    }

    /// Requests a barrier and steps the scheduler until the world stops,
    /// then returns the unified pin map. `max_steps` bounds the rendezvous;
    /// exceeding it means some mutator neither polls nor escapes.
    pub fn barrier_begin(&mut self, max_steps: usize) -> Result<GlobalPinMap, SimError> {
        if self.in_barrier {
            return Err(SimError::ReentrantBarrier);
        }
        self.barrier.requested = true;
        self.in_barrier = true;
        let mut steps = 0;
        while !self.world_stopped() {
            if steps >= max_steps {
                return Err(SimError::NoProgress(max_steps));
            }
            if !self.step()? {
                break;
            }
            steps += 1;
        }
        if !self.world_stopped() {
            return Err(SimError::NoProgress(steps));
        }
        let mut map = GlobalPinMap::new();
        for m in &self.mutators {
            if let Some(published) = &m.published {
                map.extend(published);
            }
        }
        Ok(map)
    }

    /// Resumes every parked mutator and bumps the epoch.
    pub fn barrier_end(&mut self, pause_ns: u64) -> Result<(), SimError> {
        if !self.in_barrier {
            return Err(SimError::NotInBarrier);
        }
        self.barrier.pauses.push(PauseRecord {
            epoch: self.barrier.epoch,
            start_ns: self.now_ns,
            duration_ns: pause_ns,
        });
        self.now_ns += pause_ns;
        self.barrier.epoch += 1;
        self.barrier.requested = false;
        self.barrier.joined = 0;
        self.in_barrier = false;
        for m in &mut self.mutators {
            if m.state == MutatorState::Parked {
                m.published = None;
                m.state = if m.pc >= m.script.len() {
                    MutatorState::Done
                } else {
                    MutatorState::Running
                };
            }
        }
        Ok(())
    }

    /// Exhaustive scan of live mutator contexts — the independent oracle the
    /// published-snapshot union is compared against.
    pub fn oracle_scan(&self) -> GlobalPinMap {
        GlobalPinMap::scan_contexts(self.mutators.iter().map(|m| &m.ctx))
    }

    pub fn run_to_completion(&mut self, max_steps: usize) -> Result<(), SimError> {
        for _ in 0..max_steps {
            if !self.step()? {
                return Ok(());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handle::Handle;
    use rand::Rng;

    fn h(id: u32) -> u64 {
        Handle::encode(id, 0).unwrap().bits()
    }

    fn pin_script(ids: &[u32]) -> Vec<MutatorOp> {
        let mut ops = vec![MutatorOp::Push {
            owner: 0,
            slots: ids.len(),
        }];
        for (slot, &id) in ids.iter().enumerate() {
            ops.push(MutatorOp::Pin {
                slot,
                value: h(id),
            });
        }
        // Poll forever so the barrier can always make progress.
        for _ in 0..64 {
            ops.push(MutatorOp::Work);
            ops.push(MutatorOp::Poll);
        }
        ops
    }

    #[test]
    fn poll_without_request_changes_nothing() {
        let mut world = SimWorld::new(1, vec![vec![MutatorOp::Poll, MutatorOp::Work]]);
        world.step().unwrap();
        assert_eq!(world.barrier.joined, 0);
        assert_eq!(world.mutators[0].state, MutatorState::Running);
    }

    #[test]
    fn single_mutator_parks_when_requested() {
        let mut world = SimWorld::new(1, vec![vec![MutatorOp::Poll, MutatorOp::Poll]]);
        world.barrier.requested = true;
        world.step().unwrap();
        assert_eq!(world.barrier.joined, 1);
        assert_eq!(world.mutators[0].state, MutatorState::Parked);
    }

    #[test]
    fn four_mutators_rendezvous() {
        let scripts = (0..4).map(|i| pin_script(&[i])).collect();
        let mut world = SimWorld::new(42, scripts);
        let map = world.barrier_begin(10_000).unwrap();
        assert_eq!(world.barrier.joined, 4);
        assert_eq!(map, GlobalPinMap::from_ids(0..4));
        world.barrier_end(100).unwrap();
        assert_eq!(world.barrier.epoch, 1);
    }

    #[test]
    fn two_mutators_union() {
        let scripts = vec![pin_script(&[3]), pin_script(&[8])];
        let mut world = SimWorld::new(9, scripts);
        let map = world.barrier_begin(10_000).unwrap();
        assert_eq!(map, GlobalPinMap::from_ids([3, 8]));
    }

    #[test]
    fn external_mutator_joins_by_proxy() {
        // Mutator 0 pins {5} then blocks in an external call with no exit in
        // its script; mutator 1 polls. The barrier completes with joined = 1
        // plus the proxy, and the map still contains 5.
        let blocked = vec![
            MutatorOp::Push { owner: 0, slots: 1 },
            MutatorOp::Pin { slot: 0, value: h(5) },
            MutatorOp::ExternalEnter,
            MutatorOp::Work,
        ];
        let polling = pin_script(&[7]);
        let mut world = SimWorld::new(3, vec![blocked, polling]);
        let map = world.barrier_begin(10_000).unwrap();
        assert_eq!(world.barrier.joined, 1);
        assert_eq!(world.mutators[0].state, MutatorState::External);
        assert_eq!(map, GlobalPinMap::from_ids([5, 7]));
    }

    #[test]
    fn external_exit_parks_when_barrier_pending() {
        let script = vec![
            MutatorOp::Push { owner: 0, slots: 1 },
            MutatorOp::Pin { slot: 0, value: h(2) },
            MutatorOp::ExternalEnter,
            MutatorOp::ExternalExit,
            MutatorOp::Work,
        ];
        let mut world = SimWorld::new(5, vec![script]);
        // Enter the external region first.
        world.step().unwrap();
        world.step().unwrap();
        world.step().unwrap();
        assert_eq!(world.mutators[0].state, MutatorState::External);
        world.barrier.requested = true;
        world.step().unwrap(); // executes ExternalExit
        assert_eq!(world.mutators[0].state, MutatorState::Parked);
        assert_eq!(world.barrier.joined, 1);
    }

    #[test]
    fn enter_exit_without_barrier_has_no_observable_effect() {
        let script = vec![
            MutatorOp::ExternalEnter,
            MutatorOp::ExternalExit,
            MutatorOp::Work,
        ];
        let mut world = SimWorld::new(5, vec![script]);
        world.run_to_completion(100).unwrap();
        assert_eq!(world.barrier.joined, 0);
        assert_eq!(world.barrier.epoch, 0);
    }

    /// Randomized pin patterns across ten mutators: the barrier's unified
    /// map must equal the exhaustive scan of all frame stacks.
    #[test]
    fn unified_map_matches_full_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for round in 0..50 {
            let scripts: Vec<Vec<MutatorOp>> = (0..10)
                .map(|_| {
                    let n = rng.gen_range(0..5usize);
                    let ids: Vec<u32> = (0..n).map(|_| rng.gen_range(0..40)).collect();
                    pin_script(&ids)
                })
                .collect();
            let mut world = SimWorld::new(round, scripts);
            // Let some work happen before the barrier.
            for _ in 0..rng.gen_range(0..60) {
                world.step().unwrap();
            }
            let map = world.barrier_begin(100_000).unwrap();
            assert_eq!(map, world.oracle_scan(), "seed/round {round}");
            world.barrier_end(10).unwrap();
        }
    }

    /// Progress: mutators polling at least every k steps (or escaped) always
    /// let the barrier complete.
    #[test]
    fn barrier_terminates_with_bounded_poll_gaps() {
        let mut scripts = Vec::new();
        for k in 1..6usize {
            let mut ops = Vec::new();
            for _ in 0..200 {
                for _ in 0..k {
                    ops.push(MutatorOp::Work);
                }
                ops.push(MutatorOp::Poll);
            }
            scripts.push(ops);
        }
        let mut world = SimWorld::new(13, scripts);
        let map = world.barrier_begin(100_000).unwrap();
        assert!(map.is_empty());
        world.barrier_end(0).unwrap();
    }

    #[test]
    fn reentrant_begin_is_an_error() {
        let mut world = SimWorld::new(1, vec![pin_script(&[1])]);
        world.barrier_begin(10_000).unwrap();
        assert_eq!(
            world.barrier_begin(10_000).unwrap_err(),
            SimError::ReentrantBarrier
        );
    }

    #[test]
    fn empty_world_barrier_is_empty() {
        let mut world = SimWorld::new(1, vec![]);
        let map = world.barrier_begin(10).unwrap();
        assert!(map.is_empty());
    }
}
