//! The memory model: refcounted physical pages, four-level page tables,
//! VMAs, per-process TLBs and the OS operations that modify them.

mod phys;
mod process;
mod shape;
mod table;
mod world;

use thiserror::Error;

pub use phys::{PhysMem, PhysPageId};
pub use process::{ErrorCode, PeerLink, Pid, Process, Tlb, Vma};
pub use shape::{parse_bytes, table_shape, TableShape, PAGE_BYTES};
pub use table::{Body, DirEntry, EntryTable, Level, Pte, TableArena, TableId, ENTRIES};
pub use world::{
    AllocSite, Charge, FaultOutcome, MigrationReport, MigrationStep, RefcountMismatch, World, WorldStats, WriteKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum VmError {
    #[error("out of physical memory")]
    OutOfPhysMem,
    #[error("pid {pid} has no VMA covering vpage {vpage}")]
    UnmappedAddress { pid: Pid, vpage: u64 },
    #[error("no live process with pid {0}")]
    NoSuchProcess(Pid),
    #[error("vpage {vpage} of pid {pid} is already mapped")]
    AlreadyMapped { pid: Pid, vpage: u64 },
    #[error("{mem_bytes} bytes is not a positive multiple of the {page_bytes}-byte page")]
    BadShape { mem_bytes: u64, page_bytes: u64 },
    #[error("access of {len} bytes at offset {offset} overruns the {cap}-byte page payload")]
    PayloadOverrun { offset: usize, len: usize, cap: usize },
    #[error("VMA layout rejected: {0}")]
    BadVma(&'static str),
}
