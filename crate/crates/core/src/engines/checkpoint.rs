use std::ops::Range;

use serde::Serialize;

use crate::vm::{Pid, World};

/// OS operations that modify PTEs in a process and so must be intercepted
/// while an async fork is still copying that process's table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointOp {
    Unmap,
    Protect,
    Merge,
    Split,
    PageFault,
    OomReclaim,
    GetUserPage,
    Migrate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Touches a whole VMA range; checked through the VMA's peer link.
    VmaWide,
    /// Touches a single PMD entry.
    PmdWide,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckpointEvent {
    pub kind: CheckpointKind,
    pub op: CheckpointOp,
    pub range: Range<u64>,
}

impl CheckpointEvent {
    pub fn pmd(op: CheckpointOp, vpage: u64) -> Self {
        Self { kind: CheckpointKind::PmdWide, op, range: vpage..vpage + 1 }
    }

    pub fn vma(op: CheckpointOp, range: Range<u64>) -> Self {
        Self { kind: CheckpointKind::VmaWide, op, range }
    }

    /// PMD indices in scope.
    pub fn pmds(&self) -> Range<u64> {
        if self.range.is_empty() {
            return 0..0;
        }
        (self.range.start >> 9)..((self.range.end - 1) >> 9) + 1
    }
}

/// Called by the memory model before it mutates a PTE of `pid`.
///
/// Returns the number of proactive syncs performed. A failed sync is
/// handled inside the hook (rolled back and recorded in the peer link);
/// the triggering operation then proceeds against the parent's own table.
pub trait CheckpointHook {
    fn checkpoint(&mut self, world: &mut World, pid: Pid, event: CheckpointEvent) -> usize;
}

/// No fork sessions: every checkpoint is a no-op.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoHooks;

impl CheckpointHook for NoHooks {
    fn checkpoint(&mut self, _: &mut World, _: Pid, _: CheckpointEvent) -> usize {
        0
    }
}
