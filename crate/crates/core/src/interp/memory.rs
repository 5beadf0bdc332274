//! The direct-mode heap: a bump arena whose objects never move. Raw
//! addresses live in a range disjoint from the handle service's sub-heaps
//! so the interpreter can dispatch loads and stores by address alone,
//! letting raw and handle allocations coexist in one program.

use std::collections::BTreeMap;

use thiserror::Error;

/// Base address of the direct arena; anchorage sub-heaps grow far below.
pub const DIRECT_BASE: u64 = 0x4000_0000_0000;

const ALIGN: u64 = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DirectHeapError {
    #[error("direct heap: address {0:#x} does not name a live allocation")]
    BadAddress(u64),
    #[error("direct heap: access of {len} bytes at {addr:#x} escapes its allocation")]
    OutOfBounds { addr: u64, len: u64 },
    #[error("direct heap: double free at {0:#x}")]
    DoubleFree(u64),
    #[error("direct heap: allocation size {0} is invalid")]
    BadSize(i64),
}

#[derive(Copy, Clone, Debug)]
struct DirectBlock {
    size: u64,
    live: bool,
}

#[derive(Default)]
pub struct DirectHeap {
    data: Vec<u8>,
    blocks: BTreeMap<u64, DirectBlock>,
}

impl DirectHeap {
    pub fn new() -> DirectHeap {
        DirectHeap::default()
    }

    pub fn contains(addr: u64) -> bool {
        addr >= DIRECT_BASE
    }

    pub fn alloc(&mut self, size: i64) -> Result<u64, DirectHeapError> {
        if size <= 0 {
            return Err(DirectHeapError::BadSize(size));
        }
        let size = size as u64;
        let rounded = size.div_ceil(ALIGN) * ALIGN;
        let offset = self.data.len() as u64;
        self.data.resize((offset + rounded) as usize, 0);
        let addr = DIRECT_BASE + offset;
        self.blocks.insert(addr, DirectBlock { size, live: true });
        Ok(addr)
    }

    pub fn free(&mut self, addr: u64) -> Result<(), DirectHeapError> {
        match self.blocks.get_mut(&addr) {
            Some(b) if b.live => {
                b.live = false;
                Ok(())
            }
            Some(_) => Err(DirectHeapError::DoubleFree(addr)),
            None => Err(DirectHeapError::BadAddress(addr)),
        }
    }

    pub fn realloc(&mut self, addr: u64, new_size: i64) -> Result<u64, DirectHeapError> {
        if addr == 0 {
            return self.alloc(new_size);
        }
        let old = *self
            .blocks
            .get(&addr)
            .filter(|b| b.live)
            .ok_or(DirectHeapError::BadAddress(addr))?;
        let new_addr = self.alloc(new_size)?;
        let copy = old.size.min(new_size as u64);
        let src = (addr - DIRECT_BASE) as usize;
        let dst = (new_addr - DIRECT_BASE) as usize;
        self.data.copy_within(src..src + copy as usize, dst);
        self.free(addr)?;
        Ok(new_addr)
    }

    fn locate(&self, addr: u64, len: u64) -> Result<usize, DirectHeapError> {
        let (&base, block) = self
            .blocks
            .range(..=addr)
            .next_back()
            .ok_or(DirectHeapError::BadAddress(addr))?;
        if !block.live || addr >= base + block.size {
            return Err(DirectHeapError::BadAddress(addr));
        }
        if addr + len > base + block.size {
            return Err(DirectHeapError::OutOfBounds { addr, len });
        }
        Ok((addr - DIRECT_BASE) as usize)
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<&[u8], DirectHeapError> {
        let off = self.locate(addr, len)?;
        Ok(&self.data[off..off + len as usize])
    }

    pub fn write(&mut self, addr: u64, bytes: &[u8]) -> Result<(), DirectHeapError> {
        let off = self.locate(addr, bytes.len() as u64)?;
        self.data[off..off + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_rw_free_cycle() {
        let mut h = DirectHeap::new();
        let a = h.alloc(24).unwrap();
        assert!(DirectHeap::contains(a));
        h.write(a + 8, &7u64.to_le_bytes()).unwrap();
        assert_eq!(h.read(a + 8, 8).unwrap(), &7u64.to_le_bytes());
        assert_eq!(
            h.write(a + 20, &[0; 8]),
            Err(DirectHeapError::OutOfBounds { addr: a + 20, len: 8 })
        );
        h.free(a).unwrap();
        assert_eq!(h.free(a), Err(DirectHeapError::DoubleFree(a)));
        assert!(h.read(a, 1).is_err());
    }

    #[test]
    fn realloc_copies_prefix() {
        let mut h = DirectHeap::new();
        let a = h.alloc(16).unwrap();
        h.write(a, &[9u8; 16]).unwrap();
        let b = h.realloc(a, 64).unwrap();
        assert_ne!(a, b);
        assert_eq!(h.read(b, 16).unwrap(), &[9u8; 16]);
        assert!(h.read(a, 1).is_err(), "old block is gone");
    }
}
