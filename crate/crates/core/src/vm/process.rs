use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::phys::PhysPageId;
use super::table::TableId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pid(pub u32);

impl std::fmt::Display for Pid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Error stored in a peer link when a proactive sync fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    OutOfMemory,
}

/// The per-VMA two-way link between a parent VMA and its async-fork child.
///
/// Only one simulated timeline ever touches a link, so the lock that
/// guards it in a kernel has no counterpart here.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PeerLink {
    pub linked_pid: Option<Pid>,
    pub error: Option<ErrorCode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Vma {
    pub start: u64,
    pub end: u64,
    pub peer: PeerLink,
}

impl Vma {
    pub fn new(start: u64, end: u64) -> Self {
        Self { start, end, peer: PeerLink::default() }
    }

    pub fn range(&self) -> Range<u64> {
        self.start..self.end
    }

    pub fn contains(&self, vpage: u64) -> bool {
        self.start <= vpage && vpage < self.end
    }

    pub fn overlaps(&self, r: &Range<u64>) -> bool {
        self.start < r.end && r.start < self.end
    }

    pub fn pages(&self) -> u64 {
        self.end - self.start
    }

    /// PMD indices this VMA touches.
    pub fn pmds(&self) -> Range<u64> {
        if self.start >= self.end {
            return 0..0;
        }
        (self.start >> 9)..((self.end - 1) >> 9) + 1
    }
}

/// Per-process translation cache. Filled only by walks of the owning
/// process's table; entries leave only through explicit flushes.
#[derive(Debug, Clone, Default)]
pub struct Tlb {
    entries: BTreeMap<u64, PhysPageId>,
}

impl Tlb {
    pub fn lookup(&self, vpage: u64) -> Option<PhysPageId> {
        if self.entries.is_empty() {
            return None;
        }
        self.entries.get(&vpage).copied()
    }

    pub fn fill(&mut self, vpage: u64, phys: PhysPageId) {
        self.entries.insert(vpage, phys);
    }

    pub fn flush(&mut self, vpage: u64) {
        self.entries.remove(&vpage);
    }

    pub fn flush_range(&mut self, r: Range<u64>) {
        if self.entries.is_empty() {
            return;
        }
        let doomed: Vec<u64> = self.entries.range(r).map(|(&v, _)| v).collect();
        for v in doomed {
            self.entries.remove(&v);
        }
    }

    pub fn flush_all(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, PhysPageId)> + '_ {
        self.entries.iter().map(|(&v, &p)| (v, p))
    }
}

#[derive(Debug, Clone)]
pub struct Process {
    pub pid: Pid,
    pub parent: Option<Pid>,
    /// Disjoint, sorted by `start`.
    pub vmas: Vec<Vma>,
    /// PGD table; `None` once the address space is torn down.
    pub root: Option<TableId>,
    pub tlb: Tlb,
    pub alive: bool,
}

impl Process {
    pub fn vma_index(&self, vpage: u64) -> Option<usize> {
        let i = self.vmas.partition_point(|v| v.end <= vpage);
        (i < self.vmas.len() && self.vmas[i].contains(vpage)).then_some(i)
    }

    pub fn vma(&self, vpage: u64) -> Option<&Vma> {
        self.vma_index(vpage).map(|i| &self.vmas[i])
    }

    pub fn covers(&self, r: &Range<u64>) -> bool {
        let mut at = r.start;
        while at < r.end {
            match self.vma(at) {
                Some(v) => at = v.end,
                None => return false,
            }
        }
        true
    }

    pub fn has_address_space(&self) -> bool {
        self.root.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vma_pmds_cover_partial_tables() {
        assert_eq!(Vma::new(0, 512).pmds(), 0..1);
        assert_eq!(Vma::new(0, 513).pmds(), 0..2);
        assert_eq!(Vma::new(511, 1025).pmds(), 0..3);
        assert_eq!(Vma::new(7, 7).pmds(), 0..0);
    }

    #[test]
    fn vma_lookup_and_coverage() {
        let p = Process {
            pid: Pid(1),
            parent: None,
            vmas: vec![Vma::new(0, 10), Vma::new(10, 20), Vma::new(30, 40)],
            root: None,
            tlb: Tlb::default(),
            alive: true,
        };
        assert_eq!(p.vma_index(15), Some(1));
        assert_eq!(p.vma_index(25), None);
        assert!(p.covers(&(5..20)));
        assert!(!p.covers(&(5..31)));
    }
}
