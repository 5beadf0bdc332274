//! Per-mutator pin tracking and the stop-the-world barrier protocol.
//!
//! Each function invocation that translates handles owns one fixed-size pin
//! frame. Pins and releases write plain slots in the top frame — no shared
//! state, no atomics. The only shared machinery is the barrier: a `requested`
//! flag that mutators observe at safepoint polls, publishing their frame
//! stacks and parking until the barrier ends. Mutators inside external calls
//! count as joined by proxy because their pins were published on entry and
//! nothing below the escape can touch handles.
//!
//! Two drivers exist for the same protocol: [`sim`] steps simulated mutators
//! under a seeded round-robin scheduler (the deterministic oracle used by
//! tests), and [`stress`] runs real threads against the identical state
//! machine.

pub mod sim;
pub mod stress;

use std::collections::BTreeSet;

use smallvec::SmallVec;
use thiserror::Error;

use crate::handle::{classify, Classified};

pub type HandleId = u32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PinError {
    #[error("pin slot {slot} out of range for frame of {len} slots")]
    SlotOutOfRange { slot: usize, len: usize },
    #[error("pin frame stack is empty")]
    NoFrame,
    #[error("unbalanced external enter/exit")]
    UnbalancedExternal,
}

/// A single invocation's pin slots. The slot count is fixed when the frame
/// is pushed (the pass computed it statically), mirroring an on-stack array.
#[derive(Clone, Debug)]
pub struct PinFrame {
    pub owner: u32,
    slots: SmallVec<[Option<u64>; 8]>,
}

impl PinFrame {
    pub fn new(owner: u32, slot_count: usize) -> PinFrame {
        PinFrame {
            owner,
            slots: smallvec::smallvec![None; slot_count],
        }
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn get(&self, slot: usize) -> Option<u64> {
        self.slots.get(slot).copied().flatten()
    }

    pub fn occupied(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn pinned_values(&self) -> impl Iterator<Item = u64> + '_ {
        self.slots.iter().filter_map(|s| *s)
    }
}

/// One mutator's private view: a stack of pin frames mirroring its call
/// stack, plus external-call depth for the proxy-join rule.
#[derive(Clone, Debug, Default)]
pub struct MutatorContext {
    frames: Vec<PinFrame>,
    external_depth: u32,
    pub at_safepoint: bool,
}

impl MutatorContext {
    pub fn new() -> MutatorContext {
        MutatorContext::default()
    }

    pub fn frame_push(&mut self, owner: u32, slot_count: usize) {
        debug_assert_eq!(
            self.external_depth, 0,
            "no pin frames may be pushed below an external call"
        );
        self.frames.push(PinFrame::new(owner, slot_count));
    }

    pub fn frame_pop(&mut self) -> Option<PinFrame> {
        self.frames.pop()
    }

    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    pub fn top(&self) -> Option<&PinFrame> {
        self.frames.last()
    }

    /// Writes a handle into a slot of the top frame. Raw addresses are not
    /// recorded; translation of a raw value pins nothing.
    pub fn pin(&mut self, slot: usize, value: u64) -> Result<(), PinError> {
        let frame = self.frames.last_mut().ok_or(PinError::NoFrame)?;
        let len = frame.slots.len();
        if slot >= len {
            return Err(PinError::SlotOutOfRange { slot, len });
        }
        if matches!(classify(value), Classified::Handle { .. }) {
            frame.slots[slot] = Some(value);
        }
        Ok(())
    }

    /// Clears a slot. Returns the value that was pinned there, if any.
    pub fn release(&mut self, slot: usize) -> Result<Option<u64>, PinError> {
        let frame = self.frames.last_mut().ok_or(PinError::NoFrame)?;
        let len = frame.slots.len();
        if slot >= len {
            return Err(PinError::SlotOutOfRange { slot, len });
        }
        Ok(frame.slots[slot].take())
    }

    pub fn external_enter(&mut self) {
        self.external_depth += 1;
    }

    pub fn external_exit(&mut self) -> Result<(), PinError> {
        if self.external_depth == 0 {
            return Err(PinError::UnbalancedExternal);
        }
        self.external_depth -= 1;
        Ok(())
    }

    pub fn in_external(&self) -> bool {
        self.external_depth > 0
    }

    /// All handle ids currently pinned anywhere in this mutator's stack.
    pub fn pinned_ids(&self) -> BTreeSet<HandleId> {
        let mut ids = BTreeSet::new();
        for frame in &self.frames {
            for value in frame.pinned_values() {
                if let Classified::Handle { id, .. } = classify(value) {
                    ids.insert(id);
                }
            }
        }
        ids
    }

    pub fn frames(&self) -> &[PinFrame] {
        &self.frames
    }
}

/// The barrier-time union of every mutator's pin frames.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GlobalPinMap {
    ids: BTreeSet<HandleId>,
}

impl GlobalPinMap {
    pub fn new() -> GlobalPinMap {
        GlobalPinMap::default()
    }

    pub fn from_ids(ids: impl IntoIterator<Item = HandleId>) -> GlobalPinMap {
        GlobalPinMap {
            ids: ids.into_iter().collect(),
        }
    }

    /// Independent full scan over mutator contexts; the oracle the barrier
    /// path is checked against.
    pub fn scan_contexts<'a>(ctxs: impl IntoIterator<Item = &'a MutatorContext>) -> GlobalPinMap {
        let mut map = GlobalPinMap::new();
        for ctx in ctxs {
            map.ids.extend(ctx.pinned_ids());
        }
        map
    }

    pub fn insert(&mut self, id: HandleId) {
        self.ids.insert(id);
    }

    pub fn extend(&mut self, other: &GlobalPinMap) {
        self.ids.extend(other.ids.iter().copied());
    }

    pub fn contains(&self, id: HandleId) -> bool {
        self.ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = HandleId> + '_ {
        self.ids.iter().copied()
    }
}

/// One stop-the-world pause, in nanoseconds of whichever clock the driver
/// uses. `start` is the instant the world was fully stopped; rendezvous wait
/// is not part of the pause.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PauseRecord {
    pub epoch: u64,
    pub start_ns: u64,
    pub duration_ns: u64,
}

/// Shared barrier bookkeeping: the request flag every poll loads, the join
/// count, and the epoch that parked mutators wait on.
#[derive(Debug, Default)]
pub struct BarrierState {
    pub requested: bool,
    pub joined: usize,
    pub epoch: u64,
    pub pauses: Vec<PauseRecord>,
}

impl BarrierState {
    pub fn new() -> BarrierState {
        BarrierState::default()
    }
}
