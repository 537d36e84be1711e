use serde::Serialize;

use super::{Cause, Nanos};
use crate::engines::{EngineKind, Phase, RollbackCase};
use crate::vm::Pid;

/// One line of the run trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    /// A kernel-mode interval of the parent (user→kernel→user).
    Kernel {
        pid: Pid,
        start: Nanos,
        duration: Nanos,
        cause: Cause,
        pmd: Option<u64>,
    },
    Fork {
        at: Nanos,
        session: usize,
        engine: EngineKind,
        parent: Pid,
        child: Option<Pid>,
        kernel_ns: Nanos,
    },
    Phase {
        at: Nanos,
        session: usize,
        phase: Phase,
    },
    Rollback {
        at: Nanos,
        session: usize,
        case: RollbackCase,
        restored_pmds: u64,
    },
    OsOp {
        at: Nanos,
        op: String,
        vpage: u64,
        pages: u64,
    },
    Coherence {
        at: Nanos,
        pid: Pid,
        vpage: u64,
    },
    Dump {
        at: Nanos,
        session: usize,
        entries: usize,
        matches_oracle: bool,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, r: TraceRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sum of kernel-mode time per cause, in trace order.
    pub fn kernel_total(&self, cause: Option<Cause>) -> Nanos {
        self.records
            .iter()
            .filter_map(|r| match r {
                TraceRecord::Kernel { duration, cause: c, .. } if cause.is_none_or(|want| want == *c) => {
                    Some(*duration)
                }
                _ => None,
            })
            .sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }
}
