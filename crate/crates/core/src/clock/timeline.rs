use serde::{Deserialize, Serialize};

use super::Nanos;
use crate::vm::Pid;

/// Why a process entered kernel mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    ForkCall,
    ProactiveSync,
    OdfCow,
    DataPageFault,
}

impl Cause {
    pub const ALL: [Cause; 4] = [Cause::ForkCall, Cause::ProactiveSync, Cause::OdfCow, Cause::DataPageFault];

    pub fn as_str(self) -> &'static str {
        match self {
            Cause::ForkCall => "fork_call",
            Cause::ProactiveSync => "proactive_sync",
            Cause::OdfCow => "odf_cow",
            Cause::DataPageFault => "data_page_fault",
        }
    }

    /// Page-table copy work done on the parent's behalf after fork
    /// returned; the interruptions counted against each fork engine.
    pub fn is_table_interruption(self) -> bool {
        matches!(self, Cause::ProactiveSync | Cause::OdfCow)
    }
}

/// One uninterruptible kernel-mode interval of a process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Episode {
    pub pid: Pid,
    pub start: Nanos,
    pub duration: Nanos,
    pub cause: Cause,
}

impl Episode {
    pub fn end(&self) -> Nanos {
        self.start + self.duration
    }
}

/// The parent's single CPU: a user/kernel mode timeline.
///
/// Work is laid out back to back; anything that arrives while the CPU is
/// busy starts at `busy_until`.
#[derive(Debug, Clone, Default)]
pub struct ParentTimeline {
    busy_until: Nanos,
    episodes: Vec<Episode>,
}

impl ParentTimeline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn busy_until(&self) -> Nanos {
        self.busy_until
    }

    pub fn is_busy_at(&self, t: Nanos) -> bool {
        t < self.busy_until
    }

    /// Puts `pid` out of service for `duration` starting no earlier than
    /// `now`. Zero-length charges are dropped.
    pub fn charge_kernel(&mut self, now: Nanos, pid: Pid, duration: Nanos, cause: Cause) -> Option<Episode> {
        if duration == 0 {
            return None;
        }
        let start = now.max(self.busy_until);
        let ep = Episode { pid, start, duration, cause };
        self.busy_until = ep.end();
        self.episodes.push(ep);
        Some(ep)
    }

    /// Runs user-mode work; returns `(start, end)`.
    pub fn run_user(&mut self, now: Nanos, duration: Nanos) -> (Nanos, Nanos) {
        let start = now.max(self.busy_until);
        self.busy_until = start + duration;
        (start, self.busy_until)
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn into_episodes(self) -> Vec<Episode> {
        self.episodes
    }
}
