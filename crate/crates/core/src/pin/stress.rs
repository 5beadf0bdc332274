//! Real-thread driver for the barrier protocol.
//!
//! Pin and release stay on the mutator's private context with no
//! synchronization; the shared surface is one atomic request flag (a single
//! load on the poll fast path) plus a mutex/condvar rendezvous that only the
//! slow paths touch. Base-field rewrites during defragmentation happen
//! between `barrier_begin` and `barrier_end`, while every mutator is parked
//! or inside an external region.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use super::{GlobalPinMap, MutatorContext, PauseRecord, PinError};

struct Inner {
    epoch: u64,
    registered: usize,
    parked: usize,
    external: usize,
    published: HashMap<usize, GlobalPinMap>,
    next_id: usize,
    in_barrier: bool,
    stop_instant: Option<Instant>,
    pauses: Vec<PauseRecord>,
}

struct Shared {
    requested: AtomicBool,
    inner: Mutex<Inner>,
    cv: Condvar,
    origin: Instant,
}

#[derive(Clone)]
pub struct StressRuntime {
    shared: Arc<Shared>,
}

impl Default for StressRuntime {
    fn default() -> Self {
        Self::new()
    }
}

impl StressRuntime {
    pub fn new() -> StressRuntime {
        StressRuntime {
            shared: Arc::new(Shared {
                requested: AtomicBool::new(false),
                inner: Mutex::new(Inner {
                    epoch: 0,
                    registered: 0,
                    parked: 0,
                    external: 0,
                    published: HashMap::new(),
                    next_id: 0,
                    in_barrier: false,
                    stop_instant: None,
                    pauses: Vec::new(),
                }),
                cv: Condvar::new(),
                origin: Instant::now(),
            }),
        }
    }

    pub fn register(&self) -> StressMutator {
        let mut inner = self.shared.inner.lock().unwrap();
        inner.registered += 1;
        let id = inner.next_id;
        inner.next_id += 1;
        StressMutator {
            id,
            ctx: MutatorContext::new(),
            shared: Arc::clone(&self.shared),
        }
    }

    /// Requests a stop-the-world pause, waits until every registered mutator
    /// is parked or escaped, and returns the unified pin map. The world
    /// stays stopped until `barrier_end`.
    pub fn barrier_begin(&self) -> GlobalPinMap {
        self.shared.requested.store(true, Ordering::SeqCst);
        let mut inner = self.shared.inner.lock().unwrap();
        assert!(!inner.in_barrier, "reentrant barrier begin");
        inner.in_barrier = true;
        while inner.parked + inner.external < inner.registered {
            inner = self.shared.cv.wait(inner).unwrap();
        }
        inner.stop_instant = Some(Instant::now());
        let mut map = GlobalPinMap::new();
        for published in inner.published.values() {
            map.extend(published);
        }
        map
    }

    /// Resumes all mutators and logs the pause length.
    pub fn barrier_end(&self) {
        let mut inner = self.shared.inner.lock().unwrap();
        assert!(inner.in_barrier, "barrier end without begin");
        let stop = inner.stop_instant.take().expect("barrier was begun");
        let record = PauseRecord {
            epoch: inner.epoch,
            start_ns: stop.duration_since(self.shared.origin).as_nanos() as u64,
            duration_ns: stop.elapsed().as_nanos() as u64,
        };
        inner.pauses.push(record);
        inner.epoch += 1;
        inner.in_barrier = false;
        self.shared.requested.store(false, Ordering::SeqCst);
        self.shared.cv.notify_all();
    }

    pub fn epoch(&self) -> u64 {
        self.shared.inner.lock().unwrap().epoch
    }

    pub fn pauses(&self) -> Vec<PauseRecord> {
        self.shared.inner.lock().unwrap().pauses.clone()
    }
}

pub struct StressMutator {
    id: usize,
    pub ctx: MutatorContext,
    shared: Arc<Shared>,
}

impl StressMutator {
    /// Safepoint poll: one atomic load when no barrier is pending, otherwise
    /// publish the frame stack and park until the epoch advances.
    pub fn poll(&mut self) {
        if !self.shared.requested.load(Ordering::SeqCst) {
            return;
        }
        self.park();
    }

    fn park(&mut self) {
        let snapshot = GlobalPinMap::from_ids(self.ctx.pinned_ids());
        let mut inner = self.shared.inner.lock().unwrap();
        inner.published.insert(self.id, snapshot);
        inner.parked += 1;
        self.shared.cv.notify_all();
        let epoch = inner.epoch;
        while inner.epoch == epoch {
            inner = self.shared.cv.wait(inner).unwrap();
        }
        inner.parked -= 1;
        inner.published.remove(&self.id);
    }

    /// Pins were recorded before the escape, so the barrier may proceed
    /// without this mutator while it is inside external code.
    pub fn external_enter(&mut self) {
        self.ctx.external_enter();
        let snapshot = GlobalPinMap::from_ids(self.ctx.pinned_ids());
        let mut inner = self.shared.inner.lock().unwrap();
        inner.published.insert(self.id, snapshot);
        inner.external += 1;
        self.shared.cv.notify_all();
    }

    pub fn external_exit(&mut self) -> Result<(), PinError> {
        self.ctx.external_exit()?;
        {
            let mut inner = self.shared.inner.lock().unwrap();
            inner.external -= 1;
            inner.published.remove(&self.id);
        }
        // Implicit safepoint on the way out: a pending barrier parks us here.
        self.poll();
        Ok(())
    }
}

impl Drop for StressMutator {
    fn drop(&mut self) {
        let mut inner = self.shared.inner.lock().unwrap();
        inner.registered -= 1;
        inner.published.remove(&self.id);
        self.shared.cv.notify_all();
    }
}
