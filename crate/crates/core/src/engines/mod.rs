//! Snapshot fork mechanisms: the default deep-copy fork, the shared-PTE-
//! table fork (ODF) and the asynchronous fork with proactive
//! synchronization, plus the session registry that drives them.

mod async_fork;
mod checkpoint;
mod default;
mod odf;
mod registry;

use serde::{Deserialize, Serialize};

pub use async_fork::{fork_async_parent, AsyncCopy, AsyncForkError, Claim, Copier};
pub use checkpoint::{CheckpointEvent, CheckpointHook, CheckpointKind, CheckpointOp, NoHooks};
pub use default::fork_default;
pub use odf::{cow_pte_table, fork_odf};
pub use registry::{Session, SessionStats, Snapshots};

use crate::clock::{CostModel, ForkCost, Nanos};
use crate::vm::Pid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Default,
    Odf,
    Async,
}

impl EngineKind {
    pub const ALL: [EngineKind; 3] = [EngineKind::Default, EngineKind::Odf, EngineKind::Async];

    pub fn as_str(self) -> &'static str {
        match self {
            EngineKind::Default => "default",
            EngineKind::Odf => "odf",
            EngineKind::Async => "async",
        }
    }
}

impl std::str::FromStr for EngineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(EngineKind::Default),
            "odf" => Ok(EngineKind::Odf),
            "async" => Ok(EngineKind::Async),
            _ => Err(format!("unknown engine {s:?} (expected default, odf or async)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ParentCopy,
    ChildCopy,
    Persist,
    Done,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RollbackCase {
    /// Allocation failed while the parent was marking PMDs.
    ParentPhase,
    /// Allocation failed in a child worker, or a worker found an error
    /// code in a peer link.
    ChildPhase,
    /// Allocation failed during a proactive sync.
    SyncPhase,
}

/// A successful fork call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Forked {
    pub child: Pid,
    pub cost: ForkCost,
}

impl Forked {
    pub fn kernel_ns(&self, cost: &CostModel) -> Nanos {
        self.cost.total_ns(cost)
    }
}
