//! Handle representation and the single-level handle table.
//!
//! A handle is a 64-bit value with the top bit set: bits 32..=62 hold the
//! handle ID (an index into the handle table) and bits 0..=31 hold a byte
//! offset into the object. Values with the top bit clear are ordinary raw
//! addresses and are never interpreted through the table, so both kinds can
//! flow through the same pointer-typed registers.

use thiserror::Error;

/// Top bit distinguishing handles from raw addresses.
pub const HANDLE_TAG: u64 = 1 << 63;
/// Handle IDs are 31 bits wide; the table can never exceed 2^31 entries.
pub const MAX_HANDLE_ID: u32 = (1 << 31) - 1;
/// Objects are addressed through a 32-bit offset, capping them at 4 GiB.
pub const MAX_OBJECT_SIZE: u64 = 1 << 32;

const CHUNK_ENTRIES: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HandleError {
    #[error("handle id {0} exceeds the 31-bit id space")]
    IdOutOfRange(u64),
    #[error("offset {0} exceeds the 32-bit offset space")]
    OffsetOutOfRange(u64),
    #[error("handle table exhausted ({0} entries)")]
    TableExhausted(u32),
    #[error("use of dead handle (id {id}, offset {offset})")]
    DeadHandle { id: u32, offset: u32 },
    #[error("offset {offset} out of bounds for object of {size} bytes (id {id})")]
    OutOfBounds { id: u32, offset: u32, size: u64 },
    #[error("double free of handle id {0}")]
    DoubleFree(u32),
    #[error("handle id {0} is not active")]
    NotActive(u32),
    #[error("object size {0} exceeds the 4 GiB cap")]
    ObjectTooLarge(u64),
}

/// A 64-bit handle value (tag bit set).
#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Handle(u64);

impl Handle {
    /// Composes a handle from an id and a byte offset.
    pub fn encode(id: u32, offset: u32) -> Result<Handle, HandleError> {
        if id > MAX_HANDLE_ID {
            return Err(HandleError::IdOutOfRange(id as u64));
        }
        Ok(Handle(HANDLE_TAG | ((id as u64) << 32) | offset as u64))
    }

    /// Reinterprets raw bits as a handle. Returns `None` if the tag bit is clear.
    pub fn from_bits(bits: u64) -> Option<Handle> {
        if bits & HANDLE_TAG != 0 {
            Some(Handle(bits))
        } else {
            None
        }
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn id(self) -> u32 {
        ((self.0 >> 32) & MAX_HANDLE_ID as u64) as u32
    }

    pub fn offset(self) -> u32 {
        self.0 as u32
    }
}

impl std::fmt::Debug for Handle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Handle(id={}, offset={})", self.id(), self.offset())
    }
}

/// The two interpretations of a 64-bit pointer-typed value.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Classified {
    Handle { id: u32, offset: u32 },
    Raw(u64),
}

/// Splits a value on the tag bit. Raw addresses (including null) pass
/// through untouched.
#[inline]
pub fn classify(value: u64) -> Classified {
    if value & HANDLE_TAG != 0 {
        Classified::Handle {
            id: ((value >> 32) & MAX_HANDLE_ID as u64) as u32,
            offset: value as u32,
        }
    } else {
        Classified::Raw(value)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum EntryState {
    Free,
    Active,
}

/// One handle table entry: the current backing address of an object plus
/// enough metadata for the service callbacks and bounds diagnostics.
#[derive(Copy, Clone, Debug)]
pub struct HandleTableEntry {
    pub base: u64,
    pub size: u64,
    pub state: EntryState,
    pub free_link: Option<u32>,
}

impl HandleTableEntry {
    const EMPTY: HandleTableEntry = HandleTableEntry {
        base: 0,
        size: 0,
        state: EntryState::Free,
        free_link: None,
    };
}

/// The single-level handle table. Entry IDs are handed out by a bump cursor
/// starting at zero, with a free list consulted first for reuse. Storage
/// grows in fixed chunks that never move once allocated, modeling a table
/// that cannot be relocated while handles are live.
pub struct HandleTable {
    chunks: Vec<Box<[HandleTableEntry]>>,
    bump_next: u32,
    free_head: Option<u32>,
    capacity_limit: u32,
    active: u32,
}

impl Default for HandleTable {
    fn default() -> Self {
        Self::new()
    }
}

impl HandleTable {
    pub fn new() -> HandleTable {
        Self::with_capacity_limit(MAX_HANDLE_ID + 1)
    }

    /// A table with a smaller id space, for exhaustion tests.
    pub fn with_capacity_limit(limit: u32) -> HandleTable {
        HandleTable {
            chunks: Vec::new(),
            bump_next: 0,
            free_head: None,
            capacity_limit: limit,
            active: 0,
        }
    }

    pub fn active_count(&self) -> u32 {
        self.active
    }

    pub fn bump_next(&self) -> u32 {
        self.bump_next
    }

    fn entry(&self, id: u32) -> Option<&HandleTableEntry> {
        if id >= self.bump_next {
            return None;
        }
        Some(&self.chunks[id as usize / CHUNK_ENTRIES][id as usize % CHUNK_ENTRIES])
    }

    fn entry_mut(&mut self, id: u32) -> Option<&mut HandleTableEntry> {
        if id >= self.bump_next {
            return None;
        }
        Some(&mut self.chunks[id as usize / CHUNK_ENTRIES][id as usize % CHUNK_ENTRIES])
    }

    /// Allocates an entry id: the free list head when one exists, otherwise
    /// the bump cursor. O(1) either way.
    pub fn allocate(&mut self) -> Result<u32, HandleError> {
        if let Some(id) = self.free_head {
            let entry = self.entry_mut(id).expect("free list id in range");
            debug_assert_eq!(entry.state, EntryState::Free);
            let next_free = entry.free_link;
            entry.free_link = None;
            entry.state = EntryState::Active;
            self.free_head = next_free;
            self.active += 1;
            return Ok(id);
        }
        if self.bump_next >= self.capacity_limit {
            return Err(HandleError::TableExhausted(self.capacity_limit));
        }
        let id = self.bump_next;
        if id as usize / CHUNK_ENTRIES == self.chunks.len() {
            self.chunks
                .push(vec![HandleTableEntry::EMPTY; CHUNK_ENTRIES].into_boxed_slice());
        }
        self.bump_next += 1;
        let entry = self.entry_mut(id).expect("bump id in range");
        entry.state = EntryState::Active;
        self.active += 1;
        Ok(id)
    }

    /// Returns an entry to the free list. The base is cleared so stale
    /// translations fault instead of reading a moved-out address.
    pub fn free(&mut self, id: u32) -> Result<(), HandleError> {
        let free_head = self.free_head;
        let entry = self.entry_mut(id).ok_or(HandleError::NotActive(id))?;
        if entry.state == EntryState::Free {
            return Err(HandleError::DoubleFree(id));
        }
        entry.state = EntryState::Free;
        entry.base = 0;
        entry.size = 0;
        entry.free_link = free_head;
        self.free_head = Some(id);
        self.active -= 1;
        Ok(())
    }

    /// Binds an active entry to its backing memory.
    pub fn set_backing(&mut self, id: u32, base: u64, size: u64) -> Result<(), HandleError> {
        if size > MAX_OBJECT_SIZE {
            return Err(HandleError::ObjectTooLarge(size));
        }
        let entry = self.entry_mut(id).ok_or(HandleError::NotActive(id))?;
        if entry.state != EntryState::Active {
            return Err(HandleError::NotActive(id));
        }
        entry.base = base;
        entry.size = size;
        Ok(())
    }

    /// Relocation update: repoints an entry at a new base. This is the whole
    /// point of the indirection — moving an object touches exactly this one
    /// word.
    pub fn set_base(&mut self, id: u32, base: u64) -> Result<(), HandleError> {
        let entry = self.entry_mut(id).ok_or(HandleError::NotActive(id))?;
        if entry.state != EntryState::Active {
            return Err(HandleError::NotActive(id));
        }
        entry.base = base;
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&HandleTableEntry> {
        self.entry(id)
    }

    pub fn is_active(&self, id: u32) -> bool {
        self.entry(id)
            .map(|e| e.state == EntryState::Active)
            .unwrap_or(false)
    }

    /// Object size metadata, backing the service `size` callback.
    pub fn size_of(&self, id: u32) -> Result<u64, HandleError> {
        match self.entry(id) {
            Some(e) if e.state == EntryState::Active => Ok(e.size),
            _ => Err(HandleError::NotActive(id)),
        }
    }

    /// Translates a value to a raw address with the dead-handle and bounds
    /// checks enabled. Raw addresses pass through unchanged; handles resolve
    /// to `entry.base + offset` with a single table lookup.
    ///
    /// The table lives wherever the host allocator put it, so the id must be
    /// masked out of the tag bit here; the original scheme places the table
    /// so the tag folds into the table address instead.
    pub fn translate(&self, value: u64) -> Result<u64, HandleError> {
        match classify(value) {
            Classified::Raw(addr) => Ok(addr),
            Classified::Handle { id, offset } => {
                let entry = self
                    .entry(id)
                    .ok_or(HandleError::DeadHandle { id, offset })?;
                if entry.state != EntryState::Active || entry.base == 0 {
                    return Err(HandleError::DeadHandle { id, offset });
                }
                if (offset as u64) >= entry.size {
                    return Err(HandleError::OutOfBounds {
                        id,
                        offset,
                        size: entry.size,
                    });
                }
                Ok(entry.base + offset as u64)
            }
        }
    }

    /// Translation without the bounds diagnostic, matching the production
    /// fast path where in-bounds access is assumed. Dead entries still
    /// resolve (to a cleared base); benchmark use only.
    #[inline]
    pub fn translate_unchecked(&self, value: u64) -> u64 {
        match classify(value) {
            Classified::Raw(addr) => addr,
            Classified::Handle { id, offset } => {
                let entry = &self.chunks[id as usize / CHUNK_ENTRIES][id as usize % CHUNK_ENTRIES];
                entry.base + offset as u64
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn encode_bit_layout() {
        assert_eq!(Handle::encode(5, 12).unwrap().bits(), 0x8000_0005_0000_000C);
        assert_eq!(Handle::encode(0, 0).unwrap().bits(), 0x8000_0000_0000_0000);
        assert_eq!(
            Handle::encode(MAX_HANDLE_ID, u32::MAX).unwrap().bits(),
            0xFFFF_FFFF_FFFF_FFFF
        );
    }

    #[test]
    fn encode_rejects_wide_ids() {
        assert_eq!(
            Handle::encode(MAX_HANDLE_ID + 1, 0),
            Err(HandleError::IdOutOfRange(MAX_HANDLE_ID as u64 + 1))
        );
    }

    #[test]
    fn classify_splits_on_top_bit() {
        assert_eq!(
            classify(0x0000_7FFF_1234_0010),
            Classified::Raw(0x0000_7FFF_1234_0010)
        );
        assert_eq!(
            classify(0x8000_0005_0000_000C),
            Classified::Handle { id: 5, offset: 12 }
        );
        assert_eq!(
            classify(0x8000_0000_0000_0000),
            Classified::Handle { id: 0, offset: 0 }
        );
        // Null is a raw address and must survive translation untouched.
        assert_eq!(classify(0), Classified::Raw(0));
    }

    #[test]
    fn translate_raw_is_identity() {
        let table = HandleTable::new();
        assert_eq!(table.translate(0x5000).unwrap(), 0x5000);
        assert_eq!(table.translate(0).unwrap(), 0);
    }

    #[test]
    fn translate_adds_offset_to_base() {
        let mut table = HandleTable::new();
        for _ in 0..8 {
            table.allocate().unwrap();
        }
        table.set_backing(7, 0x1000, 64).unwrap();
        let h = Handle::encode(7, 0x10).unwrap();
        assert_eq!(table.translate(h.bits()).unwrap(), 0x1010);
    }

    #[test]
    fn translate_faults_on_dead_handle() {
        let mut table = HandleTable::new();
        for _ in 0..4 {
            table.allocate().unwrap();
        }
        table.set_backing(3, 0x2000, 16).unwrap();
        table.free(3).unwrap();
        let h = Handle::encode(3, 0).unwrap();
        assert!(matches!(
            table.translate(h.bits()),
            Err(HandleError::DeadHandle { id: 3, .. })
        ));
    }

    #[test]
    fn translate_bounds_diagnostic() {
        let mut table = HandleTable::new();
        table.allocate().unwrap();
        table.set_backing(0, 0x4000, 16).unwrap();
        let h = Handle::encode(0, 16).unwrap();
        assert_eq!(
            table.translate(h.bits()),
            Err(HandleError::OutOfBounds {
                id: 0,
                offset: 16,
                size: 16
            })
        );
    }

    #[test]
    fn allocation_bumps_from_zero() {
        let mut table = HandleTable::new();
        assert_eq!(table.allocate().unwrap(), 0);
        assert_eq!(table.allocate().unwrap(), 1);
    }

    #[test]
    fn free_list_consulted_before_bump() {
        let mut table = HandleTable::new();
        for expect in 0..3 {
            assert_eq!(table.allocate().unwrap(), expect);
        }
        table.free(1).unwrap();
        assert_eq!(table.allocate().unwrap(), 1);
        assert_eq!(table.allocate().unwrap(), 3);
    }

    #[test]
    fn capacity_limit_is_enforced() {
        let mut table = HandleTable::with_capacity_limit(2);
        table.allocate().unwrap();
        table.allocate().unwrap();
        assert_eq!(table.allocate(), Err(HandleError::TableExhausted(2)));
        // Freeing restores capacity through the free list.
        table.free(0).unwrap();
        assert_eq!(table.allocate().unwrap(), 0);
    }

    #[test]
    fn double_free_detected() {
        let mut table = HandleTable::new();
        for _ in 0..5 {
            table.allocate().unwrap();
        }
        table.free(4).unwrap();
        assert_eq!(table.free(4), Err(HandleError::DoubleFree(4)));
    }

    #[test]
    fn relocation_update_is_a_single_word() {
        let mut table = HandleTable::new();
        table.allocate().unwrap();
        table.set_backing(0, 0x1000, 4096).unwrap();
        table.set_base(0, 0x9000).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let off = rng.gen_range(0u32..4096);
            let h = Handle::encode(0, off).unwrap();
            assert_eq!(table.translate(h.bits()).unwrap(), 0x9000 + off as u64);
        }
    }

    /// Allocation-reuse model check: active ids never duplicate and every
    /// freed id is reused before the bump cursor advances.
    #[test]
    fn alloc_free_interleavings_match_model() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut table = HandleTable::new();
        let mut active: Vec<u32> = Vec::new();
        let mut freed: Vec<u32> = Vec::new();
        for _ in 0..10_000 {
            if active.is_empty() || rng.gen_bool(0.6) {
                let before_bump = table.bump_next();
                let id = table.allocate().unwrap();
                assert!(!active.contains(&id), "duplicate active id {id}");
                if !freed.is_empty() {
                    assert!(
                        freed.contains(&id),
                        "freed ids must be reused before bump advances"
                    );
                    assert_eq!(table.bump_next(), before_bump);
                    freed.retain(|&f| f != id);
                }
                active.push(id);
            } else {
                let idx = rng.gen_range(0..active.len());
                let id = active.swap_remove(idx);
                table.free(id).unwrap();
                freed.push(id);
            }
        }
        assert_eq!(table.active_count() as usize, active.len());
    }

    proptest! {
        #[test]
        fn encode_classify_round_trip(id in 0u32..=MAX_HANDLE_ID, offset: u32) {
            let h = Handle::encode(id, offset).unwrap();
            prop_assert_eq!(classify(h.bits()), Classified::Handle { id, offset });
            prop_assert_eq!(h.id(), id);
            prop_assert_eq!(h.offset(), offset);
        }

        #[test]
        fn translation_is_pure(base in 1u64..u64::MAX >> 2, size in 1u64..=MAX_OBJECT_SIZE, offset: u32) {
            let mut table = HandleTable::new();
            table.allocate().unwrap();
            table.set_backing(0, base, size).unwrap();
            let h = Handle::encode(0, offset).unwrap();
            let first = table.translate(h.bits());
            let second = table.translate(h.bits());
            prop_assert_eq!(first.clone(), second);
            if (offset as u64) < size {
                prop_assert_eq!(first.unwrap(), base + offset as u64);
            } else {
                prop_assert!(first.is_err());
            }
        }
    }
}
