use serde::Serialize;

use super::VmError;

/// Index of a physical page frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct PhysPageId(pub u32);

/// Refcounted physical page store.
///
/// Frames hold `payload_bytes` of opaque data each; page-table frames are
/// counted against the same capacity but carry no payload. Freed frames
/// keep their bytes until reallocated, and the free list is LIFO, so the
/// next allocation reuses the most recently freed frame.
#[derive(Debug)]
pub struct PhysMem {
    payload_bytes: usize,
    payloads: Vec<u8>,
    refcounts: Vec<u32>,
    free: Vec<PhysPageId>,
    capacity: u64,
    data_in_use: u64,
    table_frames: u64,
}

// keeps spare capacity, so a cloned machine does not reallocate (and
// copy) its whole payload store on the first new frame
impl Clone for PhysMem {
    fn clone(&self) -> Self {
        let mut payloads = Vec::with_capacity(self.payloads.capacity());
        payloads.extend_from_slice(&self.payloads);
        let mut refcounts = Vec::with_capacity(self.refcounts.capacity());
        refcounts.extend_from_slice(&self.refcounts);
        Self { payloads, refcounts, free: self.free.clone(), ..*self }
    }
}

impl PhysMem {
    pub fn new(payload_bytes: usize, capacity: u64) -> Self {
        Self {
            payload_bytes,
            payloads: Vec::new(),
            refcounts: Vec::new(),
            free: Vec::new(),
            capacity,
            data_in_use: 0,
            table_frames: 0,
        }
    }

    pub fn payload_bytes(&self) -> usize {
        self.payload_bytes
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn in_use(&self) -> u64 {
        self.data_in_use + self.table_frames
    }

    pub fn data_in_use(&self) -> u64 {
        self.data_in_use
    }

    pub fn table_frames(&self) -> u64 {
        self.table_frames
    }

    /// Number of frame slots ever materialized (allocated or free).
    pub fn slots(&self) -> usize {
        self.refcounts.len()
    }

    pub fn reserve(&mut self, frames: usize) {
        self.refcounts.reserve(frames);
        self.payloads.reserve(frames * self.payload_bytes);
    }

    /// Allocates a frame with refcount 1. Its payload is whatever the frame
    /// last held (zero for a never-used frame).
    pub fn alloc(&mut self) -> Result<PhysPageId, VmError> {
        if self.in_use() >= self.capacity {
            return Err(VmError::OutOfPhysMem);
        }
        let id = match self.free.pop() {
            Some(id) => id,
            None => {
                let id = PhysPageId(self.refcounts.len() as u32);
                self.refcounts.push(0);
                self.payloads.resize(self.payloads.len() + self.payload_bytes, 0);
                id
            }
        };
        debug_assert_eq!(self.refcounts[id.0 as usize], 0);
        self.refcounts[id.0 as usize] = 1;
        self.data_in_use += 1;
        Ok(id)
    }

    /// Allocates `n` frames into `out`, all or none. Recycled frames come
    /// first, in the order [`PhysMem::alloc`] would hand them out.
    pub fn alloc_many(&mut self, n: usize, out: &mut Vec<PhysPageId>) -> Result<(), VmError> {
        if self.in_use() + n as u64 > self.capacity {
            return Err(VmError::OutOfPhysMem);
        }
        let reused = n.min(self.free.len());
        for _ in 0..reused {
            let id = self.free.pop().expect("counted");
            self.refcounts[id.0 as usize] = 1;
            out.push(id);
        }
        let fresh = n - reused;
        let first = self.refcounts.len() as u32;
        self.refcounts.resize(self.refcounts.len() + fresh, 1);
        self.payloads.resize(self.payloads.len() + fresh * self.payload_bytes, 0);
        out.extend((first..first + fresh as u32).map(PhysPageId));
        self.data_in_use += n as u64;
        Ok(())
    }

    pub fn alloc_table_frame(&mut self) -> Result<(), VmError> {
        if self.in_use() >= self.capacity {
            return Err(VmError::OutOfPhysMem);
        }
        self.table_frames += 1;
        Ok(())
    }

    pub fn free_table_frame(&mut self) {
        debug_assert!(self.table_frames > 0);
        self.table_frames -= 1;
    }

    pub fn refcount(&self, p: PhysPageId) -> u32 {
        self.refcounts[p.0 as usize]
    }

    pub fn inc(&mut self, p: PhysPageId) {
        self.refcounts[p.0 as usize] += 1;
    }

    /// Drops one reference; returns true when the frame was freed.
    pub fn dec(&mut self, p: PhysPageId) -> bool {
        let rc = &mut self.refcounts[p.0 as usize];
        assert!(*rc > 0, "refcount underflow on frame {}", p.0);
        *rc -= 1;
        if *rc == 0 {
            self.free.push(p);
            self.data_in_use -= 1;
            true
        } else {
            false
        }
    }

    /// Moves `n` references from one frame to another.
    pub(crate) fn transfer(&mut self, from: PhysPageId, to: PhysPageId, n: u32) {
        // `to` was allocated with refcount 1
        self.refcounts[to.0 as usize] = n;
        for _ in 0..n {
            self.dec(from);
        }
        if n == 0 {
            self.dec(to);
        }
    }

    pub fn payload(&self, p: PhysPageId) -> &[u8] {
        let at = p.0 as usize * self.payload_bytes;
        &self.payloads[at..at + self.payload_bytes]
    }

    pub fn payload_mut(&mut self, p: PhysPageId) -> &mut [u8] {
        let at = p.0 as usize * self.payload_bytes;
        &mut self.payloads[at..at + self.payload_bytes]
    }

    pub fn copy_payload(&mut self, src: PhysPageId, dst: PhysPageId) {
        if src == dst || self.payload_bytes == 0 {
            return;
        }
        let n = self.payload_bytes;
        let (s, d) = (src.0 as usize * n, dst.0 as usize * n);
        self.payloads.copy_within(s..s + n, d);
    }

    pub fn is_free(&self, p: PhysPageId) -> bool {
        self.refcounts[p.0 as usize] == 0
    }

    pub fn free_list(&self) -> &[PhysPageId] {
        &self.free
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lifo_reuse_keeps_stale_bytes() {
        let mut m = PhysMem::new(4, 8);
        let a = m.alloc().unwrap();
        m.payload_mut(a).copy_from_slice(b"abcd");
        assert!(m.dec(a));
        let b = m.alloc().unwrap();
        assert_eq!(a, b);
        assert_eq!(m.payload(b), b"abcd");
    }

    #[test]
    fn capacity_counts_table_frames() {
        let mut m = PhysMem::new(0, 2);
        m.alloc_table_frame().unwrap();
        m.alloc().unwrap();
        assert_eq!(m.alloc(), Err(VmError::OutOfPhysMem));
        assert_eq!(m.alloc_table_frame(), Err(VmError::OutOfPhysMem));
    }

    #[test]
    fn free_slots_have_zero_refcount() {
        let mut m = PhysMem::new(1, 4);
        let a = m.alloc().unwrap();
        m.inc(a);
        assert!(!m.dec(a));
        assert!(m.dec(a));
        assert!(m.free_list().iter().all(|&p| m.refcount(p) == 0));
    }
}
