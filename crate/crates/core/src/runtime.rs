//! Glue between the handle table and the backing-memory service: the
//! `halloc`/`hfree` surface programs allocate through, plus the in-barrier
//! defragmentation driver.

use std::time::Duration;

use thiserror::Error;

use crate::anchorage::{AllocError, AnchorageConfig, Heap, HeapStats, MoveReport};
use crate::handle::{classify, Classified, Handle, HandleError, HandleTable};
use crate::pin::GlobalPinMap;

/// The service callback surface: lifetime management, backing memory, and
/// object metadata. The core runtime stays allocator-agnostic behind it.
pub trait BackingService {
    fn service_alloc(&mut self, size: u64, owner: u32) -> Result<u64, AllocError>;
    fn service_free(&mut self, addr: u64) -> Result<u64, AllocError>;
    fn service_size(&self, addr: u64) -> Result<u64, AllocError>;
}

impl BackingService for Heap {
    fn service_alloc(&mut self, size: u64, owner: u32) -> Result<u64, AllocError> {
        Heap::service_alloc(self, size, owner)
    }

    fn service_free(&mut self, addr: u64) -> Result<u64, AllocError> {
        Heap::service_free(self, addr)
    }

    fn service_size(&self, addr: u64) -> Result<u64, AllocError> {
        Heap::service_size(self, addr)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error(transparent)]
    Handle(#[from] HandleError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error("hfree of a raw non-null address {0:#x}")]
    FreeOfRawAddress(u64),
    #[error("hfree through an interior handle (id {id}, offset {offset})")]
    FreeWithOffset { id: u32, offset: u32 },
}

/// A handle table paired with its defragmenting service.
pub struct HandleWorld {
    pub table: HandleTable,
    pub heap: Heap,
}

impl HandleWorld {
    pub fn new(cfg: AnchorageConfig) -> HandleWorld {
        HandleWorld {
            table: HandleTable::new(),
            heap: Heap::new(cfg),
        }
    }

    /// Allocates a handle id, asks the service for backing memory, and
    /// returns the encoded handle with offset zero.
    pub fn halloc(&mut self, size: u64) -> Result<u64, RuntimeError> {
        let id = self.table.allocate()?;
        match self.heap.service_alloc(size, id) {
            Ok(base) => {
                self.table.set_backing(id, base, size)?;
                Ok(Handle::encode(id, 0)?.bits())
            }
            Err(e) => {
                self.table.free(id).expect("fresh id is active");
                Err(e.into())
            }
        }
    }

    /// Frees the object named by a handle value. Null passes through as a
    /// no-op; raw non-null addresses and interior handles are faults.
    pub fn hfree(&mut self, value: u64) -> Result<(), RuntimeError> {
        match classify(value) {
            Classified::Raw(0) => Ok(()),
            Classified::Raw(addr) => Err(RuntimeError::FreeOfRawAddress(addr)),
            Classified::Handle { id, offset } => {
                if offset != 0 {
                    return Err(RuntimeError::FreeWithOffset { id, offset });
                }
                let base = self
                    .table
                    .get(id)
                    .filter(|e| e.state == crate::handle::EntryState::Active)
                    .ok_or(HandleError::DeadHandle { id, offset })?
                    .base;
                self.heap.service_free(base)?;
                self.table.free(id)?;
                Ok(())
            }
        }
    }

    /// Reallocation keeps the handle: fresh backing memory, contents copied,
    /// old block freed, and the table entry repointed. Callers keep using
    /// the same handle bits.
    pub fn hrealloc(&mut self, value: u64, new_size: u64) -> Result<u64, RuntimeError> {
        match classify(value) {
            Classified::Raw(0) => self.halloc(new_size),
            Classified::Raw(addr) => Err(RuntimeError::FreeOfRawAddress(addr)),
            Classified::Handle { id, offset } => {
                if offset != 0 {
                    return Err(RuntimeError::FreeWithOffset { id, offset });
                }
                let entry = *self
                    .table
                    .get(id)
                    .filter(|e| e.state == crate::handle::EntryState::Active)
                    .ok_or(HandleError::DeadHandle { id, offset })?;
                let new_base = self.heap.service_alloc(new_size, id)?;
                let copy_len = entry.size.min(new_size);
                if copy_len > 0 {
                    let bytes = self.heap.read(entry.base, copy_len)?.to_vec();
                    self.heap.write(new_base, &bytes)?;
                }
                self.heap.service_free(entry.base)?;
                self.table.set_backing(id, new_base, new_size)?;
                Ok(value)
            }
        }
    }

    pub fn translate(&self, value: u64) -> Result<u64, HandleError> {
        self.table.translate(value)
    }

    /// Size of the backing block (rounded, possibly larger than the object)
    /// behind a handle. What live-byte accounting sees.
    pub fn block_bytes(&self, value: u64) -> Result<u64, RuntimeError> {
        match classify(value) {
            Classified::Handle { id, offset } => {
                let base = self
                    .table
                    .get(id)
                    .filter(|e| e.state == crate::handle::EntryState::Active)
                    .ok_or(HandleError::DeadHandle { id, offset })?
                    .base;
                Ok(self.heap.service_size(base)?)
            }
            Classified::Raw(addr) => Err(RuntimeError::FreeOfRawAddress(addr)),
        }
    }

    pub fn stats(&self) -> HeapStats {
        self.heap.stats()
    }

    /// One in-barrier relocation round: a budgeted pass followed by page
    /// release on the evacuation source. The caller must hold the world
    /// stopped and pass the unified pin map.
    pub fn defrag(&mut self, pins: &GlobalPinMap, budget: u64) -> MoveReport {
        let report = self.heap.defrag_pass(&mut self.table, pins, budget);
        if let Some(src) = report.source {
            self.heap.release_pages(src);
        }
        report
    }
}

/// Cost model for pauses under the virtual clock: a fixed stop-the-world
/// overhead plus copy time at a configurable throughput.
#[derive(Clone, Copy, Debug)]
pub struct PauseModel {
    pub fixed: Duration,
    pub throughput_bytes_per_sec: u64,
}

impl Default for PauseModel {
    fn default() -> Self {
        PauseModel {
            fixed: Duration::from_micros(100),
            throughput_bytes_per_sec: 64 << 20,
        }
    }
}

impl PauseModel {
    pub fn pause_for(&self, moved_bytes: u64) -> Duration {
        self.fixed
            + Duration::from_nanos(
                (moved_bytes as f64 / self.throughput_bytes_per_sec as f64 * 1e9) as u64,
            )
    }
}
