use std::collections::{BTreeSet, VecDeque};
use std::ops::Range;

use serde::Serialize;

use super::Forked;
use crate::clock::{Cause, ForkCost, Nanos};
use crate::vm::{AllocSite, DirEntry, ErrorCode, Level, PeerLink, Pid, VmError, Vma, World, ENTRIES};

/// Parent-side failure of an async fork, already rolled back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AsyncForkError {
    pub error: VmError,
    /// PMDs that had been write-protect marked and were restored.
    pub restored_pmds: u64,
    pub cost: ForkCost,
}

/// The parent half of an async fork: copies the PGD and PUD levels into a
/// new child (allocating its PUD and PMD tables), write-protect marks every
/// populated PMD entry of the parent and links each VMA to the child.
/// Returns the child and the set of marked PMD indices.
pub fn fork_async_parent(world: &mut World, parent: Pid) -> Result<(Forked, BTreeSet<u64>), AsyncForkError> {
    let fail = |error| AsyncForkError { error, restored_pmds: 0, cost: ForkCost::default() };
    let proc = world.process(parent).filter(|p| p.alive).ok_or(fail(VmError::NoSuchProcess(parent)))?;
    let vmas: Vec<Range<u64>> = proc.vmas.iter().map(Vma::range).collect();

    let mut cost = ForkCost::default();
    let mut marked = BTreeSet::new();
    let mut child = None;
    let result = mark_and_copy(world, parent, &vmas, &mut cost, &mut marked, &mut child);
    if let Err(error) = result {
        for &pmd in &marked {
            if let Some(e) = world.pmd_entry_mut(parent, pmd << 9) {
                e.writable = true;
            }
        }
        if let Some(c) = child {
            world.exit(c);
        }
        world.charge(parent, Cause::ForkCall, cost.total_ns(&world.cost), None);
        return Err(AsyncForkError { error, restored_pmds: marked.len() as u64, cost });
    }
    let child = child.expect("created on success");
    for v in &mut world.process_mut(parent).expect("live").vmas {
        v.peer = PeerLink { linked_pid: Some(child), error: None };
    }
    for v in &mut world.process_mut(child).expect("live").vmas {
        v.peer = PeerLink { linked_pid: Some(parent), error: None };
    }
    let ns = cost.total_ns(&world.cost);
    world.charge(parent, Cause::ForkCall, ns, None);
    Ok((Forked { child, cost }, marked))
}

fn mark_and_copy(
    world: &mut World,
    parent: Pid,
    vmas: &[Range<u64>],
    cost: &mut ForkCost,
    marked: &mut BTreeSet<u64>,
    child: &mut Option<Pid>,
) -> Result<(), VmError> {
    world.gate(AllocSite::Fork)?;
    let root = world.alloc_table(Level::Pgd)?;
    let list = vmas.iter().map(|r| Vma::new(r.start, r.end)).collect();
    let c = world.insert_process(Some(parent), list, Some(root));
    *child = Some(c);
    for r in vmas {
        let Some(first) = (r.start < r.end).then_some(r.start >> 9) else { continue };
        for pmd in first..=((r.end - 1) >> 9) {
            let base = pmd << 9;
            match world.pmd_entry(parent, base) {
                Some(DirEntry { target: Some(_), writable: true }) => {}
                _ => continue,
            }
            let mut t = root;
            for level in [Level::Pgd, Level::Pud] {
                let i = level.index(base);
                t = match world.tables.get(t).dir()[i].target {
                    Some(next) => next,
                    None => {
                        world.gate(AllocSite::Fork)?;
                        let next = world.alloc_table(level.child().expect("directory level"))?;
                        world.tables.get_mut(t).dir_mut()[i] = DirEntry { target: Some(next), writable: true };
                        cost.nonleaf_entries += 1;
                        next
                    }
                };
            }
            world.pmd_entry_mut(parent, base).expect("checked above").writable = false;
            cost.wp_marks += 1;
            marked.insert(pmd);
        }
    }
    Ok(())
}

/// Who performed a PTE-table copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Copier {
    Parent,
    Worker(usize),
}

/// Interval during which a PTE table was held for copying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Claim {
    pub pmd: u64,
    pub start: Nanos,
    pub end: Nanos,
    pub by: Copier,
}

#[derive(Debug, Clone, Copy)]
struct Cursor {
    vma: usize,
    next: u64,
    end: u64,
}

#[derive(Debug, Clone)]
struct Worker {
    time: Nanos,
    queue: VecDeque<usize>,
    cur: Option<Cursor>,
}

impl Worker {
    fn done(&self) -> bool {
        self.cur.is_none() && self.queue.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopyProgress {
    Running,
    Finished { end: Nanos },
    Aborted { at: Nanos, restored: u64 },
}

fn pmd_span(r: &Range<u64>) -> Range<u64> {
    if r.is_empty() {
        return 0..0;
    }
    (r.start >> 9)..((r.end - 1) >> 9) + 1
}

/// Child-side copy state of one async fork.
///
/// Workers are simulated by span arithmetic: each has its own clock, and
/// [`AsyncCopy::advance`] runs worker steps in start-time order up to a
/// given instant. A PMD copy is applied at the instant its claim starts.
#[derive(Debug, Clone)]
pub struct AsyncCopy {
    pub parent: Pid,
    pub child: Pid,
    uncopied: BTreeSet<u64>,
    vmas: Vec<Range<u64>>,
    workers: Vec<Worker>,
    start: Nanos,
    pub claims: Vec<Claim>,
    pub child_copies: u64,
    pub syncs: u64,
    pub pmds_scanned: u64,
}

impl AsyncCopy {
    /// VMAs are dealt round-robin to `workers` in descending PMD count.
    pub fn new(world: &World, parent: Pid, child: Pid, uncopied: BTreeSet<u64>, workers: usize, start: Nanos) -> Self {
        let vmas: Vec<Range<u64>> =
            world.process(child).map(|p| p.vmas.iter().map(Vma::range).collect()).unwrap_or_default();
        let mut order: Vec<usize> = (0..vmas.len()).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(pmd_span(&vmas[i]).count()), vmas[i].start));
        let n = workers.max(1);
        let mut ws: Vec<Worker> = (0..n).map(|_| Worker { time: start, queue: VecDeque::new(), cur: None }).collect();
        for (k, i) in order.into_iter().enumerate() {
            ws[k % n].queue.push_back(i);
        }
        Self {
            parent,
            child,
            uncopied,
            vmas,
            workers: ws,
            start,
            claims: Vec::new(),
            child_copies: 0,
            syncs: 0,
            pmds_scanned: 0,
        }
    }

    pub fn is_uncopied(&self, pmd: u64) -> bool {
        self.uncopied.contains(&pmd)
    }

    pub fn uncopied(&self) -> &BTreeSet<u64> {
        &self.uncopied
    }

    pub fn uncopied_in(&self, pmds: Range<u64>) -> Vec<u64> {
        self.uncopied.range(pmds).copied().collect()
    }

    pub fn worker_count(&self) -> usize {
        self.workers.len()
    }

    /// Upper bound on when the copy finishes if nothing else is synced.
    pub fn projected_end(&self, world: &World) -> Nanos {
        let unit = world.cost.pmd_copy_ns(ENTRIES as u64);
        let mut end = self.start;
        for w in &self.workers {
            let mut left = 0u64;
            if let Some(c) = w.cur {
                left += self.uncopied.range(c.next..c.end).count() as u64;
            }
            for &i in &w.queue {
                left += self.uncopied.range(pmd_span(&self.vmas[i])).count() as u64;
            }
            end = end.max(w.time + left * unit);
        }
        end
    }

    /// Runs every worker step that starts at or before `t`.
    pub fn advance(&mut self, world: &mut World, t: Nanos) -> CopyProgress {
        loop {
            let next = self
                .workers
                .iter()
                .enumerate()
                .filter(|(_, w)| !w.done())
                .min_by_key(|(i, w)| (w.time, *i))
                .map(|(i, w)| (i, w.time));
            match next {
                None => {
                    let end = self.workers.iter().map(|w| w.time).max().unwrap_or(self.start);
                    return CopyProgress::Finished { end };
                }
                Some((_, at)) if at > t => return CopyProgress::Running,
                Some((i, _)) => {
                    if let Err(at) = self.step(world, i) {
                        let restored = self.abort(world);
                        return CopyProgress::Aborted { at, restored };
                    }
                }
            }
        }
    }

    fn step(&mut self, world: &mut World, i: usize) -> Result<(), Nanos> {
        let time = self.workers[i].time;
        match self.workers[i].cur {
            None => {
                let vma = self.workers[i].queue.pop_front().expect("worker has work");
                if self.link_error(world, vma) {
                    return Err(time);
                }
                let span = pmd_span(&self.vmas[vma]);
                self.workers[i].cur = Some(Cursor { vma, next: span.start, end: span.end });
            }
            Some(c) if c.next < c.end => {
                let pmd = c.next;
                self.workers[i].cur = Some(Cursor { next: c.next + 1, ..c });
                if self.uncopied.contains(&pmd) {
                    world.gate(AllocSite::ChildCopy).map_err(|_| time)?;
                    let ns = self.copy_pmd(world, pmd).map_err(|_| time)?;
                    self.claims.push(Claim { pmd, start: time, end: time + ns, by: Copier::Worker(i) });
                    self.child_copies += 1;
                    self.workers[i].time += ns;
                }
            }
            Some(c) => {
                if self.link_error(world, c.vma) {
                    return Err(time);
                }
                self.close_links(world, &self.vmas[c.vma].clone());
                self.workers[i].cur = None;
            }
        }
        Ok(())
    }

    fn link_error(&self, world: &World, vma: usize) -> bool {
        let r = &self.vmas[vma];
        world.process(self.child).is_some_and(|p| p.vmas.iter().any(|v| v.overlaps(r) && v.peer.error.is_some()))
    }

    /// Clears the peer link of every VMA overlapping `r` (on both sides)
    /// that has no uncopied PMD left.
    pub(crate) fn close_links(&self, world: &mut World, r: &Range<u64>) {
        for (pid, peer) in [(self.parent, self.child), (self.child, self.parent)] {
            let Some(p) = world.process_mut(pid) else { continue };
            for v in p.vmas.iter_mut().filter(|v| v.overlaps(r) && v.peer.linked_pid == Some(peer)) {
                if self.uncopied.range(v.pmds()).next().is_none() && v.peer.error.is_none() {
                    v.peer.linked_pid = None;
                }
            }
        }
    }

    /// Copies PMD `pmd` and its PTE table to the child: every PTE ends
    /// write-protected on both sides and every mapped frame gains a
    /// reference; the parent's PMD becomes writable again.
    fn copy_pmd(&mut self, world: &mut World, pmd: u64) -> Result<Nanos, VmError> {
        let base = pmd << 9;
        let (cpmd, ci) = world.ensure_pmd_slot(self.child, base)?;
        if let Some(src) = world.pte_table(self.parent, base) {
            let t = world.copy_table(src)?;
            for p in world.tables.get_mut(src).leaf_mut().iter_mut() {
                p.set_writable(false);
            }
            for p in world.tables.get_mut(t).leaf_mut().iter_mut() {
                p.set_writable(false);
                if let Some(f) = p.phys() {
                    world.phys.inc(f);
                }
            }
            world.tables.get_mut(cpmd).dir_mut()[ci] = DirEntry { target: Some(t), writable: true };
        }
        if let Some(e) = world.pmd_entry_mut(self.parent, base) {
            e.writable = true;
        }
        self.uncopied.remove(&pmd);
        Ok(world.cost.pmd_copy_ns(ENTRIES as u64))
    }

    /// Parent-side copy of one uncopied PMD, charged to the parent. On
    /// failure the PMDs of the VMA containing `vpage` are restored and the
    /// error is left in that VMA's peer link; returns the restored count.
    pub fn proactive_sync(&mut self, world: &mut World, pmd: u64, vpage: u64, now: Nanos) -> Result<Nanos, u64> {
        let copied = world.gate(AllocSite::Sync).and_then(|_| self.copy_pmd(world, pmd));
        match copied {
            Ok(ns) => {
                world.charge(self.parent, Cause::ProactiveSync, ns, Some(pmd));
                self.claims.push(Claim { pmd, start: now, end: now + ns, by: Copier::Parent });
                self.syncs += 1;
                Ok(ns)
            }
            Err(_) => Err(self.fail_vma(world, vpage)),
        }
    }

    fn fail_vma(&mut self, world: &mut World, vpage: u64) -> u64 {
        let r = world.process(self.parent).and_then(|p| p.vma(vpage)).map(Vma::range).unwrap_or(vpage..vpage + 1);
        let doomed = self.uncopied_in(pmd_span(&r));
        for &pmd in &doomed {
            if let Some(e) = world.pmd_entry_mut(self.parent, pmd << 9) {
                e.writable = true;
            }
            self.uncopied.remove(&pmd);
        }
        for (pid, peer) in [(self.parent, self.child), (self.child, self.parent)] {
            let Some(p) = world.process_mut(pid) else { continue };
            for v in p.vmas.iter_mut().filter(|v| v.overlaps(&r) && v.peer.linked_pid == Some(peer)) {
                v.peer.error = Some(ErrorCode::OutOfMemory);
            }
        }
        doomed.len() as u64
    }

    /// Restores every remaining marked PMD, unlinks all VMAs and kills the
    /// child. Returns the number of PMDs restored.
    pub fn abort(&mut self, world: &mut World) -> u64 {
        let restored = self.uncopied.len() as u64;
        for &pmd in &self.uncopied {
            if let Some(e) = world.pmd_entry_mut(self.parent, pmd << 9) {
                e.writable = true;
            }
        }
        self.uncopied.clear();
        if let Some(p) = world.process_mut(self.parent) {
            for v in p.vmas.iter_mut().filter(|v| v.peer.linked_pid == Some(self.child)) {
                v.peer = PeerLink::default();
            }
        }
        world.exit(self.child);
        for w in &mut self.workers {
            w.queue.clear();
            w.cur = None;
        }
        restored
    }

    /// Pairs of overlapping claims on the same PTE table by different copiers.
    pub fn exclusivity_violations(&self) -> usize {
        let mut by_pmd: Vec<&Claim> = self.claims.iter().collect();
        by_pmd.sort_by_key(|c| (c.pmd, c.start));
        by_pmd.windows(2).filter(|w| w[0].pmd == w[1].pmd && w[0].by != w[1].by && w[1].start < w[0].end).count()
    }
}
