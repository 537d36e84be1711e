use serde::Serialize;

use super::async_fork::CopyProgress;
use super::{
    fork_async_parent, fork_default, fork_odf, AsyncCopy, CheckpointEvent, CheckpointHook, CheckpointKind,
    CheckpointOp, EngineKind, Phase, RollbackCase,
};
use crate::clock::{ForkCost, Nanos, TraceRecord};
use crate::vm::{Pid, Vma, World};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SessionStats {
    pub child_copies: u64,
    pub syncs: u64,
    pub pmds_scanned: u64,
    pub exclusivity_violations: u64,
}

/// One in-flight or finished fork + persist.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: usize,
    pub engine: EngineKind,
    pub parent: Pid,
    pub child: Option<Pid>,
    pub phase: Phase,
    pub workers: usize,
    /// When the fork call was entered.
    pub fork_start: Nanos,
    /// When the fork call returned to the parent.
    pub fork_return: Nanos,
    pub fork_cost: ForkCost,
    pub copy_end: Option<Nanos>,
    pub persist_end: Option<Nanos>,
    pub ended: Option<Nanos>,
    /// Pages the child writes out.
    pub persist_pages: u64,
    pub copy: Option<AsyncCopy>,
    pub rollbacks: Vec<(Nanos, RollbackCase, u64)>,
    pub phases: Vec<(Nanos, Phase)>,
}

impl Session {
    fn enter(&mut self, at: Nanos, phase: Phase, trace: &mut Vec<TraceRecord>) {
        debug_assert!(phase > self.phase || phase == Phase::Aborted, "{:?} -> {phase:?}", self.phase);
        self.phase = phase;
        self.phases.push((at, phase));
        trace.push(TraceRecord::Phase { at, session: self.id, phase });
        if matches!(phase, Phase::Done | Phase::Aborted) {
            self.ended = Some(at);
        }
    }

    fn rollback(&mut self, at: Nanos, case: RollbackCase, restored: u64, trace: &mut Vec<TraceRecord>) {
        self.rollbacks.push((at, case, restored));
        trace.push(TraceRecord::Rollback { at, session: self.id, case, restored_pmds: restored });
    }

    /// Snapshot window: fork entry until persist end (or abort).
    pub fn window(&self) -> Option<(Nanos, Nanos)> {
        Some((self.fork_start, self.persist_end.or(self.ended)?))
    }

    pub fn is_active(&self) -> bool {
        matches!(self.phase, Phase::ParentCopy | Phase::ChildCopy | Phase::Persist)
    }

    pub fn stats(&self) -> SessionStats {
        match &self.copy {
            Some(c) => SessionStats {
                child_copies: c.child_copies,
                syncs: c.syncs,
                pmds_scanned: c.pmds_scanned,
                exclusivity_violations: c.exclusivity_violations() as u64,
            },
            None => SessionStats::default(),
        }
    }
}

/// Every snapshot session of a run. Acts as the checkpoint hook for the
/// memory model, so it needs to know the current simulated instant.
#[derive(Debug, Clone, Default)]
pub struct Snapshots {
    sessions: Vec<Session>,
    now: Nanos,
    trace: Vec<TraceRecord>,
}

impl Snapshots {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_now(&mut self, now: Nanos) {
        self.now = now;
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn session(&self, id: usize) -> &Session {
        &self.sessions[id]
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }

    /// Forks `parent` at `now` with `engine`. The fork's kernel time is left
    /// in the world's pending charges; the session records where the fork
    /// call ends assuming those charges run back to back from `now`.
    pub fn begin(&mut self, world: &mut World, engine: EngineKind, parent: Pid, workers: usize, now: Nanos) -> usize {
        self.now = now;
        self.advance(world, now);
        let pending_before: Nanos = world.pending_charges().iter().map(|c| c.ns).sum();
        let id = self.sessions.len();
        let mut s = Session {
            id,
            engine,
            parent,
            child: None,
            phase: Phase::ParentCopy,
            workers: workers.max(1),
            fork_start: now,
            fork_return: now,
            fork_cost: ForkCost::default(),
            copy_end: None,
            persist_end: None,
            ended: None,
            persist_pages: world.mapped_pages(parent),
            copy: None,
            rollbacks: Vec::new(),
            phases: vec![(now, Phase::ParentCopy)],
        };
        self.trace.push(TraceRecord::Phase { at: now, session: id, phase: Phase::ParentCopy });

        if engine == EngineKind::Async {
            self.handoff_prior(world, parent, now);
        }
        let forked = match engine {
            EngineKind::Default => fork_default(world, parent).map(|f| (f, None)).map_err(|_| 0),
            EngineKind::Odf => fork_odf(world, parent).map(|f| (f, None)).map_err(|_| 0),
            EngineKind::Async => fork_async_parent(world, parent).map(|(f, m)| (f, Some(m))).map_err(|e| {
                s.fork_cost = e.cost;
                e.restored_pmds
            }),
        };
        let pending_after: Nanos = world.pending_charges().iter().map(|c| c.ns).sum();
        s.fork_return = now + (pending_after - pending_before);
        let mut trace = std::mem::take(&mut self.trace);
        match forked {
            Ok((f, marked)) => {
                s.child = Some(f.child);
                s.fork_cost = f.cost;
                trace.push(TraceRecord::Fork {
                    at: now,
                    session: id,
                    engine,
                    parent,
                    child: Some(f.child),
                    kernel_ns: f.kernel_ns(&world.cost),
                });
                if let Some(marked) = marked {
                    s.copy = Some(AsyncCopy::new(world, parent, f.child, marked, s.workers, s.fork_return));
                    s.enter(s.fork_return, Phase::ChildCopy, &mut trace);
                } else {
                    s.copy_end = Some(s.fork_return);
                    s.persist_end = Some(s.fork_return + world.cost.persist_ns(s.persist_pages));
                    s.enter(s.fork_return, Phase::Persist, &mut trace);
                }
            }
            Err(restored) => {
                trace.push(TraceRecord::Fork {
                    at: now,
                    session: id,
                    engine,
                    parent,
                    child: None,
                    kernel_ns: s.fork_cost.total_ns(&world.cost),
                });
                if engine == EngineKind::Async {
                    s.rollback(s.fork_return, RollbackCase::ParentPhase, restored, &mut trace);
                }
                s.enter(s.fork_return, Phase::Aborted, &mut trace);
            }
        }
        self.trace = trace;
        self.sessions.push(s);
        id
    }

    /// Before a new async fork of `parent`, copies every remaining PMD of
    /// each VMA still linked to an earlier child over to that child.
    fn handoff_prior(&mut self, world: &mut World, parent: Pid, now: Nanos) {
        let mut trace = std::mem::take(&mut self.trace);
        for s in self.sessions.iter_mut().filter(|s| s.phase == Phase::ChildCopy && s.parent == parent) {
            let copy = s.copy.as_mut().expect("async session");
            let vmas: Vec<Vma> = world.process(parent).map(|p| p.vmas.clone()).unwrap_or_default();
            let prior = copy.child;
            for v in vmas.iter().filter(|v| v.peer.linked_pid == Some(prior)) {
                for pmd in copy.uncopied_in(v.pmds()) {
                    let vpage = (pmd << 9).max(v.start);
                    if let Err(restored) = copy.proactive_sync(world, pmd, vpage, now) {
                        s.rollbacks.push((now, RollbackCase::SyncPhase, restored));
                        trace.push(TraceRecord::Rollback {
                            at: now,
                            session: s.id,
                            case: RollbackCase::SyncPhase,
                            restored_pmds: restored,
                        });
                        break;
                    }
                }
                copy.close_links(world, &v.range());
            }
        }
        self.trace = trace;
    }

    /// Moves every session's child copy forward to `t`, settling phase
    /// changes that happened on the way.
    pub fn advance(&mut self, world: &mut World, t: Nanos) {
        let mut trace = std::mem::take(&mut self.trace);
        for s in self.sessions.iter_mut().filter(|s| s.phase == Phase::ChildCopy) {
            let copy = s.copy.as_mut().expect("async session");
            match copy.advance(world, t) {
                CopyProgress::Running => {}
                CopyProgress::Finished { end } => {
                    s.copy_end = Some(end);
                    s.persist_end = Some(end + world.cost.persist_ns(s.persist_pages));
                    s.enter(end, Phase::Persist, &mut trace);
                }
                CopyProgress::Aborted { at, restored } => {
                    s.rollback(at, RollbackCase::ChildPhase, restored, &mut trace);
                    s.enter(at, Phase::Aborted, &mut trace);
                }
            }
        }
        self.trace = trace;
    }

    /// Earliest instant by which some child copy is certain to have ended.
    pub fn next_copy_deadline(&self, world: &World) -> Option<Nanos> {
        self.sessions
            .iter()
            .filter(|s| s.phase == Phase::ChildCopy)
            .filter_map(|s| s.copy.as_ref())
            .map(|c| c.projected_end(world))
            .min()
    }

    /// Ends a persisting session: the child exits.
    pub fn complete(&mut self, world: &mut World, id: usize, at: Nanos) {
        let mut trace = std::mem::take(&mut self.trace);
        let s = &mut self.sessions[id];
        if s.phase == Phase::Persist {
            if let Some(c) = s.child {
                world.exit(c);
            }
            s.enter(at, Phase::Done, &mut trace);
        }
        self.trace = trace;
    }
}

impl CheckpointHook for Snapshots {
    fn checkpoint(&mut self, world: &mut World, pid: Pid, event: CheckpointEvent) -> usize {
        if event.op == CheckpointOp::Migrate {
            // the data does not change, so there is nothing to sync
            return 0;
        }
        let now = self.now;
        self.advance(world, now);
        let mut syncs = 0;
        let mut trace = std::mem::take(&mut self.trace);
        for s in self.sessions.iter_mut().filter(|s| s.phase == Phase::ChildCopy && s.parent == pid) {
            let copy = s.copy.as_mut().expect("async session");
            let mut failed = None;
            match event.kind {
                CheckpointKind::PmdWide => {
                    let pmd = event.range.start >> 9;
                    copy.pmds_scanned += 1;
                    if copy.is_uncopied(pmd) {
                        match copy.proactive_sync(world, pmd, event.range.start, now) {
                            Ok(_) => syncs += 1,
                            Err(restored) => failed = Some(restored),
                        }
                    }
                }
                CheckpointKind::VmaWide => {
                    let vmas: Vec<Vma> = world.process(pid).map(|p| p.vmas.clone()).unwrap_or_default();
                    for v in vmas.iter().filter(|v| v.overlaps(&event.range)) {
                        if v.peer.linked_pid != Some(copy.child) {
                            continue;
                        }
                        let lo = v.start.max(event.range.start);
                        let hi = v.end.min(event.range.end);
                        for pmd in (lo >> 9)..((hi - 1) >> 9) + 1 {
                            copy.pmds_scanned += 1;
                            if !copy.is_uncopied(pmd) {
                                continue;
                            }
                            match copy.proactive_sync(world, pmd, (pmd << 9).max(lo), now) {
                                Ok(_) => syncs += 1,
                                Err(restored) => {
                                    failed = Some(restored);
                                    break;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(restored) = failed {
                s.rollback(now, RollbackCase::SyncPhase, restored, &mut trace);
            }
        }
        self.trace = trace;
        syncs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::CostModel;
    use crate::vm::AllocSite;

    fn world(vmas: u64, pages_per: u64) -> (World, Pid) {
        let mut w = World::new(CostModel::default(), 4, 1 << 18);
        let ranges: Vec<_> = (0..vmas).map(|i| i * pages_per..(i + 1) * pages_per).collect();
        let p = w.spawn(&ranges).unwrap();
        w.map_range(p, 0..vmas * pages_per, &mut |v, b| b[0] = v as u8).unwrap();
        (w, p)
    }

    #[test]
    fn default_goes_straight_to_persist() {
        let (mut w, p) = world(1, 512);
        let mut s = Snapshots::new();
        let id = s.begin(&mut w, EngineKind::Default, p, 1, 100);
        let sess = s.session(id);
        assert_eq!(sess.phase, Phase::Persist);
        let phases: Vec<Phase> = sess.phases.iter().map(|&(_, ph)| ph).collect();
        assert_eq!(phases, vec![Phase::ParentCopy, Phase::Persist]);
        assert_eq!(sess.fork_return, 100 + 500 * 3 + 17_101);
        assert_eq!(sess.persist_end, Some(sess.fork_return + 512 * 19_000));
    }

    #[test]
    fn write_to_uncopied_pmd_syncs_once() {
        let (mut w, p) = world(1, 2048);
        let mut s = Snapshots::new();
        s.begin(&mut w, EngineKind::Async, p, 1, 0);
        w.take_charges();
        s.set_now(1);
        let out = w.write(p, 1500, 0, &[1], &mut s).unwrap();
        assert_eq!(out.syncs, 1);
        let out = w.write(p, 1501, 0, &[1], &mut s).unwrap();
        assert_eq!(out.syncs, 0);
        let causes: Vec<_> = w.take_charges().iter().map(|c| c.cause).collect();
        use crate::clock::Cause::*;
        assert_eq!(causes, vec![ProactiveSync, DataPageFault, DataPageFault]);
    }

    #[test]
    fn unmap_over_three_uncopied_pmds_syncs_three() {
        let (mut w, p) = world(1, 4096);
        let mut s = Snapshots::new();
        s.begin(&mut w, EngineKind::Async, p, 1, 0);
        s.set_now(0);
        let syncs = w.unmap_range(p, 1024..2560, &mut s).unwrap();
        assert_eq!(syncs, 3);
    }

    #[test]
    fn cleared_link_short_circuits_vma_events() {
        let (mut w, p) = world(2, 512);
        let mut s = Snapshots::new();
        let id = s.begin(&mut w, EngineKind::Async, p, 1, 0);
        // first VMA done after one PMD copy plus the close step
        s.advance(&mut w, s.session(id).fork_return + 17_601);
        assert_eq!(w.process(p).unwrap().vmas[0].peer.linked_pid, None);
        let scanned = s.session(id).stats().pmds_scanned;
        s.set_now(s.session(id).fork_return + 17_601);
        assert_eq!(w.protect_range(p, 0..512, &mut s).unwrap(), 0);
        assert_eq!(s.session(id).stats().pmds_scanned, scanned);
    }

    #[test]
    fn sync_failure_rolls_back_one_vma_then_child_aborts() {
        let (mut w, p) = world(3, 1024);
        let mut s = Snapshots::new();
        let id = s.begin(&mut w, EngineKind::Async, p, 1, 0);
        w.arm_failure(AllocSite::Sync, 1);
        s.set_now(0);
        // VMA B = 1024..2048, PMDs 2 and 3
        w.write(p, 1100, 0, &[5], &mut s).unwrap();
        let wp = w.wp_pmds(p);
        assert_eq!(wp, vec![0, 1, 4, 5]);
        assert_eq!(s.session(id).rollbacks[0].1, RollbackCase::SyncPhase);
        s.advance(&mut w, u64::MAX);
        let sess = s.session(id);
        assert_eq!(sess.phase, Phase::Aborted);
        assert_eq!(sess.rollbacks[1].1, RollbackCase::ChildPhase);
        assert!(w.wp_pmds(p).is_empty());
        assert!(!w.is_alive(sess.child.unwrap()));
        assert!(w.refcount_audit().is_empty());
    }

    #[test]
    fn consecutive_fork_hands_off_remaining_pmds() {
        let (mut w, p) = world(2, 1024);
        let mut s = Snapshots::new();
        let a = s.begin(&mut w, EngineKind::Async, p, 1, 0);
        w.take_charges();
        let b = s.begin(&mut w, EngineKind::Async, p, 1, 1_000);
        let charges = w.take_charges();
        let handed = charges.iter().filter(|c| c.cause == crate::clock::Cause::ProactiveSync).count();
        assert_eq!(handed, 4);
        s.advance(&mut w, u64::MAX);
        assert_eq!(s.session(a).phase, Phase::Persist);
        assert_eq!(s.session(b).phase, Phase::Persist);
        let (ca, cb) = (s.session(a).child.unwrap(), s.session(b).child.unwrap());
        for v in 0..2048 {
            assert_eq!(w.pte(ca, v).unwrap().phys(), w.pte(p, v).unwrap().phys());
            assert_eq!(w.pte(cb, v).unwrap().phys(), w.pte(p, v).unwrap().phys());
        }
        assert!(w.refcount_audit().is_empty());
    }
}
