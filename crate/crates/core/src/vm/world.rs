use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::phys::{PhysMem, PhysPageId};
use super::process::{Pid, Process, Tlb, Vma};
use super::table::{DirEntry, Level, Pte, TableArena, TableId, ENTRIES};
use super::VmError;
use crate::clock::{Cause, CostModel, Nanos};
use crate::engines::{CheckpointEvent, CheckpointHook, CheckpointOp};

/// Kernel time owed by a process, queued until the runner lays it out on
/// the timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Charge {
    pub pid: Pid,
    pub cause: Cause,
    pub ns: Nanos,
    /// PMD index the work was done for, if any.
    pub pmd: Option<u64>,
}

/// Allocation sites that error injection can target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocSite {
    /// Table allocations made by the parent inside a fork call.
    Fork,
    /// PTE-table allocations made by async-fork child workers.
    ChildCopy,
    /// PTE-table allocations made by the parent's proactive syncs.
    Sync,
}

#[derive(Debug, Clone, Copy)]
struct Armed {
    site: AllocSite,
    remaining: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct WorldStats {
    pub data_faults: u64,
    pub cow_copies: u64,
    pub cow_reuses: u64,
    pub demand_zero: u64,
    pub odf_unshares: u64,
    /// Faults on a PMD left write-protected with no session owning it.
    /// Rollback is supposed to make this impossible.
    pub stale_wp_faults: u64,
    pub migrations: u64,
    pub injected_failures: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteKind {
    InPlace,
    DemandZero,
    Cow,
    /// Write-protected but no longer shared: the frame is reused.
    Reuse,
    /// Only the PTE table had to be unshared or presence restored.
    Refault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FaultOutcome {
    pub kind: WriteKind,
    pub syncs: usize,
    pub unshared: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MigrationStep {
    SetNotPresent,
    FlushOwnerTlb,
    ScanOthers,
    UpdatePte,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MigrationReport {
    pub from: PhysPageId,
    pub to: PhysPageId,
    /// Other processes whose PTE for the page was found and invalidated.
    pub invalidated: Vec<Pid>,
    /// Other processes whose walk saw the not-present entry and were skipped.
    pub skipped: Vec<Pid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RefcountMismatch {
    pub phys: PhysPageId,
    pub refcount: u32,
    pub mappings: u32,
}

/// The whole simulated machine: physical memory, every page table and
/// every process.
#[derive(Debug, Clone)]
pub struct World {
    pub cost: CostModel,
    pub phys: PhysMem,
    pub tables: TableArena,
    procs: BTreeMap<Pid, Process>,
    next_pid: u32,
    charges: Vec<Charge>,
    armed: Vec<Armed>,
    zero_page: Vec<u8>,
    pub stats: WorldStats,
}

fn pmd_base(pmd: u64) -> u64 {
    pmd << 9
}

impl World {
    pub fn new(cost: CostModel, payload_bytes: usize, capacity_pages: u64) -> Self {
        Self {
            cost,
            phys: PhysMem::new(payload_bytes, capacity_pages),
            tables: TableArena::default(),
            procs: BTreeMap::new(),
            next_pid: 1,
            charges: Vec::new(),
            armed: Vec::new(),
            zero_page: vec![0; payload_bytes],
            stats: WorldStats::default(),
        }
    }

    // ---- processes ----

    /// Creates a process with an empty table and the given VMAs.
    pub fn spawn(&mut self, vmas: &[Range<u64>]) -> Result<Pid, VmError> {
        let mut list: Vec<Vma> = vmas.iter().map(|r| Vma::new(r.start, r.end)).collect();
        list.sort_by_key(|v| v.start);
        for w in list.windows(2) {
            if w[0].end > w[1].start {
                return Err(VmError::BadVma("VMAs overlap"));
            }
        }
        if list.iter().any(|v| v.start >= v.end) {
            return Err(VmError::BadVma("empty VMA"));
        }
        let root = self.alloc_table(Level::Pgd)?;
        Ok(self.insert_process(None, list, Some(root)))
    }

    pub(crate) fn insert_process(&mut self, parent: Option<Pid>, vmas: Vec<Vma>, root: Option<TableId>) -> Pid {
        let pid = Pid(self.next_pid);
        self.next_pid += 1;
        self.procs.insert(pid, Process { pid, parent, vmas, root, tlb: Tlb::default(), alive: true });
        pid
    }

    pub fn process(&self, pid: Pid) -> Option<&Process> {
        self.procs.get(&pid)
    }

    pub(crate) fn process_mut(&mut self, pid: Pid) -> Option<&mut Process> {
        self.procs.get_mut(&pid)
    }

    pub fn pids(&self) -> Vec<Pid> {
        self.procs.keys().copied().collect()
    }

    pub fn is_alive(&self, pid: Pid) -> bool {
        self.procs.get(&pid).is_some_and(|p| p.alive)
    }

    fn live(&self, pid: Pid) -> Result<&Process, VmError> {
        self.procs.get(&pid).filter(|p| p.alive).ok_or(VmError::NoSuchProcess(pid))
    }

    fn covering_vma(&self, pid: Pid, vpage: u64) -> Result<&Vma, VmError> {
        self.live(pid)?.vma(vpage).ok_or(VmError::UnmappedAddress { pid, vpage })
    }

    pub fn add_vma(&mut self, pid: Pid, range: Range<u64>) -> Result<(), VmError> {
        if range.is_empty() {
            return Err(VmError::BadVma("empty VMA"));
        }
        let p = self.procs.get_mut(&pid).filter(|p| p.alive).ok_or(VmError::NoSuchProcess(pid))?;
        if p.vmas.iter().any(|v| v.overlaps(&range)) {
            return Err(VmError::BadVma("VMAs overlap"));
        }
        let at = p.vmas.partition_point(|v| v.start < range.start);
        p.vmas.insert(at, Vma::new(range.start, range.end));
        Ok(())
    }

    /// Tears down the address space and removes the process.
    pub fn exit(&mut self, pid: Pid) {
        self.teardown(pid);
        self.procs.remove(&pid);
    }

    /// Releases every table and data reference of `pid` and marks it dead.
    pub fn teardown(&mut self, pid: Pid) {
        let Some(p) = self.procs.get_mut(&pid) else { return };
        p.alive = false;
        p.tlb.flush_all();
        let Some(root) = p.root.take() else { return };
        self.release_subtree(root);
    }

    fn release_subtree(&mut self, id: TableId) {
        let level = self.tables.get(id).level;
        if level == Level::Pte {
            let t = self.tables.get_mut(id);
            if t.sharers > 1 {
                t.sharers -= 1;
                return;
            }
            for f in t.leaf().iter().filter_map(|p| p.phys()) {
                self.phys.dec(f);
            }
        } else {
            let kids: Vec<TableId> = self.tables.get(id).dir().iter().filter_map(|e| e.target).collect();
            for k in kids {
                self.release_subtree(k);
            }
        }
        self.release_table(id);
    }

    // ---- tables ----

    pub(crate) fn alloc_table(&mut self, level: Level) -> Result<TableId, VmError> {
        self.phys.alloc_table_frame()?;
        Ok(self.tables.alloc(level))
    }

    /// Private copy of a PTE table; does not touch refcounts.
    pub(crate) fn copy_table(&mut self, src: TableId) -> Result<TableId, VmError> {
        self.phys.alloc_table_frame()?;
        Ok(self.tables.alloc_copy(src))
    }

    pub(crate) fn release_table(&mut self, id: TableId) {
        self.tables.release(id);
        self.phys.free_table_frame();
    }

    pub fn root(&self, pid: Pid) -> Option<TableId> {
        self.procs.get(&pid)?.root
    }

    /// The PMD table and slot index for `vpage`, if the path exists.
    pub(crate) fn pmd_slot(&self, pid: Pid, vpage: u64) -> Option<(TableId, usize)> {
        let root = self.procs.get(&pid)?.root?;
        let pud = self.tables.get(root).dir()[Level::Pgd.index(vpage)].target?;
        let pmd = self.tables.get(pud).dir()[Level::Pud.index(vpage)].target?;
        Some((pmd, Level::Pmd.index(vpage)))
    }

    pub fn pmd_entry(&self, pid: Pid, vpage: u64) -> Option<DirEntry> {
        let (t, i) = self.pmd_slot(pid, vpage)?;
        Some(self.tables.get(t).dir()[i])
    }

    pub(crate) fn pmd_entry_mut(&mut self, pid: Pid, vpage: u64) -> Option<&mut DirEntry> {
        let (t, i) = self.pmd_slot(pid, vpage)?;
        Some(&mut self.tables.get_mut(t).dir_mut()[i])
    }

    pub fn pte_table(&self, pid: Pid, vpage: u64) -> Option<TableId> {
        self.pmd_entry(pid, vpage)?.target
    }

    /// Walks `pid`'s table for `vpage`. Pure: no TLB, no faults.
    pub fn pte(&self, pid: Pid, vpage: u64) -> Option<Pte> {
        let t = self.pte_table(pid, vpage)?;
        Some(self.tables.get(t).leaf()[Level::Pte.index(vpage)])
    }

    /// Creates missing PUD and PMD tables on the path to `vpage`.
    pub(crate) fn ensure_pmd_slot(&mut self, pid: Pid, vpage: u64) -> Result<(TableId, usize), VmError> {
        let root = self.live(pid)?.root.ok_or(VmError::NoSuchProcess(pid))?;
        let mut t = root;
        for level in [Level::Pgd, Level::Pud] {
            let i = level.index(vpage);
            t = match self.tables.get(t).dir()[i].target {
                Some(next) => next,
                None => {
                    let next = self.alloc_table(level.child().expect("directory level"))?;
                    self.tables.get_mut(t).dir_mut()[i] = DirEntry { target: Some(next), writable: true };
                    next
                }
            };
        }
        Ok((t, Level::Pmd.index(vpage)))
    }

    pub(crate) fn ensure_pte_table(&mut self, pid: Pid, vpage: u64) -> Result<TableId, VmError> {
        let (pmd, i) = self.ensure_pmd_slot(pid, vpage)?;
        if let Some(t) = self.tables.get(pmd).dir()[i].target {
            return Ok(t);
        }
        let t = self.alloc_table(Level::Pte)?;
        self.tables.get_mut(pmd).dir_mut()[i] = DirEntry { target: Some(t), writable: true };
        Ok(t)
    }

    fn slot_mut(&mut self, table: TableId, vpage: u64) -> &mut Pte {
        &mut self.tables.get_mut(table).leaf_mut()[Level::Pte.index(vpage)]
    }

    /// Every populated PMD entry of `pid`, as `(pmd index, entry)`, ascending.
    pub fn pmd_entries(&self, pid: Pid) -> Vec<(u64, DirEntry)> {
        let mut out = Vec::new();
        let Some(root) = self.procs.get(&pid).and_then(|p| p.root) else { return out };
        for (gi, g) in self.tables.get(root).dir().iter().enumerate() {
            let Some(pud) = g.target else { continue };
            for (ui, u) in self.tables.get(pud).dir().iter().enumerate() {
                let Some(pmd) = u.target else { continue };
                for (mi, m) in self.tables.get(pmd).dir().iter().enumerate() {
                    if m.target.is_some() {
                        out.push((((gi as u64) << 18) | ((ui as u64) << 9) | mi as u64, *m));
                    }
                }
            }
        }
        out
    }

    /// PMD indices of `pid` currently write-protect marked.
    pub fn wp_pmds(&self, pid: Pid) -> Vec<u64> {
        self.pmd_entries(pid).into_iter().filter(|(_, e)| !e.writable).map(|(i, _)| i).collect()
    }

    pub fn mapped_pages(&self, pid: Pid) -> u64 {
        self.pmd_entries(pid).iter().map(|(_, e)| self.tables.get(e.target.expect("populated")).mapped_ptes()).sum()
    }

    /// Mapped virtual pages of `pid` in ascending order.
    pub fn mapped_vpages(&self, pid: Pid) -> Vec<u64> {
        let mut out = Vec::new();
        for (pmd, e) in self.pmd_entries(pid) {
            let t = self.tables.get(e.target.expect("populated"));
            for (i, p) in t.leaf().iter().enumerate() {
                if p.is_mapped() {
                    out.push(pmd_base(pmd) + i as u64);
                }
            }
        }
        out
    }

    // ---- accounting ----

    pub(crate) fn charge(&mut self, pid: Pid, cause: Cause, ns: Nanos, pmd: Option<u64>) {
        if ns > 0 {
            self.charges.push(Charge { pid, cause, ns, pmd });
        }
    }

    pub fn take_charges(&mut self) -> Vec<Charge> {
        std::mem::take(&mut self.charges)
    }

    pub fn pending_charges(&self) -> &[Charge] {
        &self.charges
    }

    /// Makes the `nth` allocation at `site` from now on fail.
    pub fn arm_failure(&mut self, site: AllocSite, nth: u64) {
        self.armed.push(Armed { site, remaining: nth.max(1) });
    }

    pub fn armed_failures(&self) -> usize {
        self.armed.len()
    }

    /// Passes unless an armed failure for `site` comes due.
    pub(crate) fn gate(&mut self, site: AllocSite) -> Result<(), VmError> {
        let mut fire = None;
        for (i, a) in self.armed.iter_mut().enumerate() {
            if a.site == site {
                a.remaining -= 1;
                if a.remaining == 0 && fire.is_none() {
                    fire = Some(i);
                }
            }
        }
        if let Some(i) = fire {
            self.armed.remove(i);
            self.stats.injected_failures += 1;
            return Err(VmError::OutOfPhysMem);
        }
        Ok(())
    }

    // ---- memory operations ----

    /// Backs every page of `range` with a fresh frame whose payload is
    /// produced by `fill` (the frame starts zeroed).
    pub fn map_range(
        &mut self,
        pid: Pid,
        range: Range<u64>,
        fill: &mut dyn FnMut(u64, &mut [u8]),
    ) -> Result<(), VmError> {
        let p = self.live(pid)?;
        if !p.covers(&range) {
            let vpage = (range.start..range.end).find(|&v| p.vma(v).is_none()).unwrap_or(range.start);
            return Err(VmError::UnmappedAddress { pid, vpage });
        }
        let mut frames = Vec::with_capacity(ENTRIES);
        let mut lo = range.start;
        while lo < range.end {
            let hi = pmd_base((lo >> 9) + 1).min(range.end);
            let t = self.ensure_pte_table(pid, lo)?;
            let leaf = self.tables.get(t).leaf();
            if let Some(vpage) = (lo..hi).find(|&v| leaf[Level::Pte.index(v)].is_mapped()) {
                return Err(VmError::AlreadyMapped { pid, vpage });
            }
            frames.clear();
            if self.phys.alloc_many((hi - lo) as usize, &mut frames).is_err() {
                // map what fits, one page at a time, then fail
                for vpage in lo..hi {
                    let f = self.phys.alloc()?;
                    self.init_frame(f, vpage, fill);
                    *self.slot_mut(t, vpage) = Pte::mapped(f, true);
                }
                unreachable!("a chunk that did not fit at once fit page by page");
            }
            for (vpage, &f) in (lo..hi).zip(&frames) {
                self.init_frame(f, vpage, fill);
            }
            let leaf = self.tables.get_mut(t).leaf_mut();
            for (vpage, &f) in (lo..hi).zip(&frames) {
                leaf[Level::Pte.index(vpage)] = Pte::mapped(f, true);
            }
            lo = hi;
        }
        Ok(())
    }

    fn init_frame(&mut self, f: PhysPageId, vpage: u64, fill: &mut dyn FnMut(u64, &mut [u8])) {
        if self.phys.payload_bytes() > 0 {
            let buf = self.phys.payload_mut(f);
            buf.fill(0);
            fill(vpage, buf);
        }
    }

    /// Translates through the TLB, walking and filling on a miss. A TLB hit
    /// is returned as is, even when the table has since changed.
    pub fn translate(&mut self, pid: Pid, vpage: u64) -> Result<Option<PhysPageId>, VmError> {
        self.covering_vma(pid, vpage)?;
        let p = &self.procs[&pid];
        if let Some(f) = p.tlb.lookup(vpage) {
            return Ok(Some(f));
        }
        let Some(t) = self.pte_table(pid, vpage) else { return Ok(None) };
        let pte = self.slot_mut(t, vpage);
        let Some(f) = pte.phys() else { return Ok(None) };
        if !pte.present() {
            // nothing is ever swapped out: the frame is still where the
            // last protocol step left it
            pte.set_present(true);
        }
        self.procs.get_mut(&pid).expect("live").tlb.fill(vpage, f);
        Ok(Some(f))
    }

    /// Reads a page, filling the TLB on a miss.
    pub fn read(&mut self, pid: Pid, vpage: u64) -> Result<&[u8], VmError> {
        match self.translate(pid, vpage)? {
            Some(f) => Ok(self.phys.payload(f)),
            None => Ok(&self.zero_page),
        }
    }

    /// Reads a page through the TLB without filling it on a miss.
    pub fn peek(&self, pid: Pid, vpage: u64) -> Result<&[u8], VmError> {
        self.covering_vma(pid, vpage)?;
        let p = &self.procs[&pid];
        let f = p.tlb.lookup(vpage).or_else(|| self.pte(pid, vpage).and_then(|e| e.phys()));
        Ok(f.map_or(&self.zero_page[..], |f| self.phys.payload(f)))
    }

    fn fast_path(&self, pid: Pid, vpage: u64) -> Option<(TableId, PhysPageId)> {
        let e = self.pmd_entry(pid, vpage)?;
        let t = e.target?;
        let table = self.tables.get(t);
        if !e.writable || table.sharers > 1 {
            return None;
        }
        let pte = table.leaf()[Level::Pte.index(vpage)];
        let f = pte.phys()?;
        (pte.present() && pte.writable() && self.phys.refcount(f) == 1).then_some((t, f))
    }

    /// Writes `data` at `offset` into the page's payload, faulting first
    /// when the page is absent, write-protected or shared.
    pub fn write(
        &mut self,
        pid: Pid,
        vpage: u64,
        offset: usize,
        data: &[u8],
        hooks: &mut dyn CheckpointHook,
    ) -> Result<FaultOutcome, VmError> {
        self.covering_vma(pid, vpage)?;
        let cap = self.phys.payload_bytes();
        if offset + data.len() > cap {
            return Err(VmError::PayloadOverrun { offset, len: data.len(), cap });
        }
        if let Some((_, f)) = self.fast_path(pid, vpage) {
            self.phys.payload_mut(f)[offset..offset + data.len()].copy_from_slice(data);
            return Ok(FaultOutcome { kind: WriteKind::InPlace, syncs: 0, unshared: false });
        }

        let syncs = hooks.checkpoint(self, pid, CheckpointEvent::pmd(CheckpointOp::PageFault, vpage));
        let (pmd_t, pmd_i) = self.ensure_pmd_slot(pid, vpage)?;
        let entry = &mut self.tables.get_mut(pmd_t).dir_mut()[pmd_i];
        if !entry.writable && entry.target.is_some() {
            entry.writable = true;
            self.stats.stale_wp_faults += 1;
        }
        let unshared = self.unshare_if_shared(pid, vpage)?.is_some();
        let t = self.ensure_pte_table(pid, vpage)?;
        let pte = self.tables.get(t).leaf()[Level::Pte.index(vpage)];

        let (kind, frame) = match pte.phys() {
            None => {
                let f = self.phys.alloc()?;
                self.phys.payload_mut(f).fill(0);
                *self.slot_mut(t, vpage) = Pte::mapped(f, true);
                self.stats.demand_zero += 1;
                (WriteKind::DemandZero, f)
            }
            Some(old) if self.phys.refcount(old) > 1 => {
                let f = self.phys.alloc()?;
                self.phys.copy_payload(old, f);
                self.phys.dec(old);
                *self.slot_mut(t, vpage) = Pte::mapped(f, true);
                self.procs.get_mut(&pid).expect("live").tlb.flush(vpage);
                self.stats.cow_copies += 1;
                (WriteKind::Cow, f)
            }
            Some(old) if !pte.writable() => {
                *self.slot_mut(t, vpage) = Pte::mapped(old, true);
                self.stats.cow_reuses += 1;
                (WriteKind::Reuse, old)
            }
            Some(old) => {
                self.slot_mut(t, vpage).set_present(true);
                (WriteKind::Refault, old)
            }
        };
        if kind != WriteKind::Refault {
            self.stats.data_faults += 1;
            let ns = self.cost.fault_ns();
            self.charge(pid, Cause::DataPageFault, ns, Some(vpage >> 9));
        }
        self.phys.payload_mut(frame)[offset..offset + data.len()].copy_from_slice(data);
        self.procs.get_mut(&pid).expect("live").tlb.fill(vpage, frame);
        Ok(FaultOutcome { kind, syncs, unshared })
    }

    /// Gives `pid` a private copy of the PTE table covering `vpage` if that
    /// table is shared. Both copies end write-protected and every mapped
    /// frame gains a reference. Charges the copy to `pid`.
    pub(crate) fn unshare_if_shared(&mut self, pid: Pid, vpage: u64) -> Result<Option<Nanos>, VmError> {
        let Some(old) = self.pte_table(pid, vpage) else { return Ok(None) };
        if self.tables.get(old).sharers < 2 {
            return Ok(None);
        }
        let new = self.copy_table(old)?;
        self.tables.get_mut(old).sharers -= 1;
        for p in self.tables.get_mut(old).leaf_mut().iter_mut() {
            p.set_writable(false);
        }
        for p in self.tables.get_mut(new).leaf_mut().iter_mut() {
            p.set_writable(false);
            if let Some(f) = p.phys() {
                self.phys.inc(f);
            }
        }
        self.pmd_entry_mut(pid, vpage).expect("populated").target = Some(new);
        self.stats.odf_unshares += 1;
        let ns = self.cost.pmd_copy_ns(ENTRIES as u64);
        self.charge(pid, Cause::OdfCow, ns, Some(vpage >> 9));
        Ok(Some(ns))
    }

    /// Moves the page at `vpage` of `owner` to a new frame using the OS
    /// protocol: clear presence, flush the owner's TLB entry, scan every
    /// other process (ascending pid) for a present mapping of the old frame
    /// and invalidate it, then point all invalidated entries at the new
    /// frame and free the old one. `observer` sees the world after each step.
    pub fn migrate_page(
        &mut self,
        owner: Pid,
        vpage: u64,
        hooks: &mut dyn CheckpointHook,
        observer: &mut dyn FnMut(MigrationStep, &World),
    ) -> Result<MigrationReport, VmError> {
        self.covering_vma(owner, vpage)?;
        let unmapped = VmError::UnmappedAddress { pid: owner, vpage };
        let owner_t = self.pte_table(owner, vpage).ok_or(unmapped)?;
        let x = self.tables.get(owner_t).leaf()[Level::Pte.index(vpage)].phys().ok_or(unmapped)?;
        hooks.checkpoint(self, owner, CheckpointEvent::pmd(CheckpointOp::Migrate, vpage));
        let y = self.phys.alloc()?;
        self.stats.migrations += 1;

        self.slot_mut(owner_t, vpage).set_present(false);
        observer(MigrationStep::SetNotPresent, self);

        self.procs.get_mut(&owner).expect("live").tlb.flush(vpage);
        observer(MigrationStep::FlushOwnerTlb, self);

        let mut touched = vec![owner_t];
        let mut invalidated = Vec::new();
        let mut skipped = Vec::new();
        let others: Vec<Pid> = self.procs.values().filter(|p| p.alive && p.pid != owner).map(|p| p.pid).collect();
        for pid in others {
            let Some(t) = self.pte_table(pid, vpage) else { continue };
            let pte = self.slot_mut(t, vpage);
            if pte.phys() != Some(x) {
                continue;
            }
            if pte.present() {
                pte.set_present(false);
                self.procs.get_mut(&pid).expect("live").tlb.flush(vpage);
                if !touched.contains(&t) {
                    touched.push(t);
                }
                invalidated.push(pid);
            } else {
                skipped.push(pid);
            }
        }
        observer(MigrationStep::ScanOthers, self);

        for &t in &touched {
            let pte = self.slot_mut(t, vpage);
            pte.set_phys(y);
            pte.set_present(true);
        }
        self.phys.copy_payload(x, y);
        debug_assert_eq!(self.phys.refcount(x) as usize, touched.len(), "frame mapped outside the scanned slots");
        self.phys.transfer(x, y, touched.len() as u32);
        observer(MigrationStep::UpdatePte, self);
        Ok(MigrationReport { from: x, to: y, invalidated, skipped })
    }

    fn require_cover(&self, pid: Pid, range: &Range<u64>) -> Result<(), VmError> {
        let p = self.live(pid)?;
        if range.is_empty() || !p.covers(range) {
            let vpage = (range.start..range.end).find(|&v| p.vma(v).is_none()).unwrap_or(range.start);
            return Err(VmError::UnmappedAddress { pid, vpage });
        }
        Ok(())
    }

    fn unshare_range(&mut self, pid: Pid, range: &Range<u64>) -> Result<(), VmError> {
        let mut pmd = range.start >> 9;
        while pmd_base(pmd) < range.end {
            self.unshare_if_shared(pid, pmd_base(pmd).max(range.start))?;
            pmd += 1;
        }
        Ok(())
    }

    /// Applies `f` to every populated PTE slot of `pid` in `range`.
    fn for_each_pte(&mut self, pid: Pid, range: &Range<u64>, mut f: impl FnMut(&mut Pte, &mut PhysMem)) {
        let mut pmd = range.start >> 9;
        while pmd_base(pmd) < range.end {
            let lo = pmd_base(pmd).max(range.start);
            let hi = pmd_base(pmd + 1).min(range.end);
            if let Some(t) = self.pte_table(pid, lo) {
                let phys = &mut self.phys;
                let leaf = self.tables.get_mut(t).leaf_mut();
                for v in lo..hi {
                    f(&mut leaf[Level::Pte.index(v)], phys);
                }
            }
            pmd += 1;
        }
    }

    /// Splits the VMA containing `at` into `[start, at)` and `[at, end)`.
    /// Both pieces keep the peer link; a linked peer's VMA is split at the
    /// same boundary.
    fn split_at(&mut self, pid: Pid, at: u64, mirror: bool) {
        let Some(p) = self.procs.get_mut(&pid) else { return };
        let Some(i) = p.vma_index(at) else { return };
        if p.vmas[i].start == at {
            return;
        }
        let mut tail = p.vmas[i].clone();
        tail.start = at;
        p.vmas[i].end = at;
        let peer = tail.peer.linked_pid;
        p.vmas.insert(i + 1, tail);
        if mirror {
            if let Some(peer) = peer {
                self.split_at(peer, at, false);
            }
        }
    }

    /// Unmaps `range`: drops the covered mappings and shrinks, splits or
    /// removes the VMAs involved.
    pub fn unmap_range(
        &mut self,
        pid: Pid,
        range: Range<u64>,
        hooks: &mut dyn CheckpointHook,
    ) -> Result<usize, VmError> {
        self.require_cover(pid, &range)?;
        let syncs = hooks.checkpoint(self, pid, CheckpointEvent::vma(CheckpointOp::Unmap, range.clone()));
        self.unshare_range(pid, &range)?;
        self.for_each_pte(pid, &range, |pte, phys| {
            if let Some(f) = pte.phys() {
                phys.dec(f);
                *pte = Pte::EMPTY;
            }
        });
        self.split_at(pid, range.start, true);
        self.split_at(pid, range.end, true);
        let p = self.procs.get_mut(&pid).expect("live");
        p.vmas.retain(|v| !(range.start <= v.start && v.end <= range.end));
        p.tlb.flush_range(range);
        Ok(syncs)
    }

    /// Write-protects every mapped page of `range`.
    pub fn protect_range(
        &mut self,
        pid: Pid,
        range: Range<u64>,
        hooks: &mut dyn CheckpointHook,
    ) -> Result<usize, VmError> {
        self.require_cover(pid, &range)?;
        let syncs = hooks.checkpoint(self, pid, CheckpointEvent::vma(CheckpointOp::Protect, range.clone()));
        self.unshare_range(pid, &range)?;
        self.for_each_pte(pid, &range, |pte, _| pte.set_writable(false));
        self.procs.get_mut(&pid).expect("live").tlb.flush_range(range);
        Ok(syncs)
    }

    /// Splits the VMA containing `at`; `at` must be strictly inside it.
    pub fn split_vma(&mut self, pid: Pid, at: u64, hooks: &mut dyn CheckpointHook) -> Result<usize, VmError> {
        let v = self.covering_vma(pid, at)?.clone();
        if v.start == at {
            return Err(VmError::BadVma("split point is a VMA boundary"));
        }
        let syncs = hooks.checkpoint(self, pid, CheckpointEvent::vma(CheckpointOp::Split, v.range()));
        self.split_at(pid, at, true);
        Ok(syncs)
    }

    /// Merges the VMA ending at `at` with the one starting there.
    pub fn merge_vmas(&mut self, pid: Pid, at: u64, hooks: &mut dyn CheckpointHook) -> Result<usize, VmError> {
        let p = self.live(pid)?;
        let i = p.vma_index(at).ok_or(VmError::UnmappedAddress { pid, vpage: at })?;
        if i == 0 || p.vmas[i].start != at || p.vmas[i - 1].end != at {
            return Err(VmError::BadVma("no adjacent VMAs meet at the merge point"));
        }
        let range = p.vmas[i - 1].start..p.vmas[i].end;
        let syncs = hooks.checkpoint(self, pid, CheckpointEvent::vma(CheckpointOp::Merge, range));
        let p = self.procs.get_mut(&pid).expect("live");
        let i = p.vma_index(at).expect("still there");
        let b = p.vmas.remove(i);
        let a = &mut p.vmas[i - 1];
        a.end = b.end;
        if a.peer.linked_pid.is_none() {
            a.peer.linked_pid = b.peer.linked_pid;
        }
        a.peer.error = a.peer.error.or(b.peer.error);
        Ok(syncs)
    }

    /// Reclaims one page: its mapping is dropped and its contents lost.
    pub fn oom_reclaim(&mut self, pid: Pid, vpage: u64, hooks: &mut dyn CheckpointHook) -> Result<usize, VmError> {
        self.covering_vma(pid, vpage)?;
        let syncs = hooks.checkpoint(self, pid, CheckpointEvent::pmd(CheckpointOp::OomReclaim, vpage));
        self.unshare_if_shared(pid, vpage)?;
        let range = vpage..vpage + 1;
        self.for_each_pte(pid, &range, |pte, phys| {
            if let Some(f) = pte.phys() {
                phys.dec(f);
                *pte = Pte::EMPTY;
            }
        });
        self.procs.get_mut(&pid).expect("live").tlb.flush(vpage);
        Ok(syncs)
    }

    /// Pins a page for kernel access; a write pin breaks copy-on-write.
    pub fn get_user_page(
        &mut self,
        pid: Pid,
        vpage: u64,
        write: bool,
        hooks: &mut dyn CheckpointHook,
    ) -> Result<usize, VmError> {
        self.covering_vma(pid, vpage)?;
        let mut syncs = hooks.checkpoint(self, pid, CheckpointEvent::pmd(CheckpointOp::GetUserPage, vpage));
        if write {
            syncs += self.write(pid, vpage, 0, &[], hooks)?.syncs;
        } else {
            self.translate(pid, vpage)?;
        }
        Ok(syncs)
    }

    // ---- audits ----

    /// TLB entries that disagree with a fresh walk of the owner's table.
    pub fn coherence_audit(&self) -> Vec<(Pid, u64)> {
        let mut out = Vec::new();
        for p in self.procs.values().filter(|p| p.alive) {
            for (v, f) in p.tlb.iter() {
                let ok = self.pte(p.pid, v).is_some_and(|e| e.present() && e.phys() == Some(f));
                if !ok {
                    out.push((p.pid, v));
                }
            }
        }
        out
    }

    fn leaf_tables(&self) -> BTreeSet<TableId> {
        let mut out = BTreeSet::new();
        for p in self.procs.values() {
            for (_, e) in self.pmd_entries(p.pid) {
                out.insert(e.target.expect("populated"));
            }
        }
        out
    }

    /// Frames whose refcount differs from the number of leaf slots (shared
    /// tables counted once) that map them.
    pub fn refcount_audit(&self) -> Vec<RefcountMismatch> {
        let mut counts: HashMap<PhysPageId, u32> = HashMap::new();
        for t in self.leaf_tables() {
            for f in self.tables.get(t).leaf().iter().filter_map(|p| p.phys()) {
                *counts.entry(f).or_default() += 1;
            }
        }
        let mut out = Vec::new();
        for i in 0..self.phys.slots() {
            let f = PhysPageId(i as u32);
            let mappings = counts.get(&f).copied().unwrap_or(0);
            let refcount = self.phys.refcount(f);
            if refcount != mappings {
                out.push(RefcountMismatch { phys: f, refcount, mappings });
            }
        }
        out
    }

    /// Checks levels along every chain, that only PTE tables are reachable
    /// twice, and that sharer counts match the PMD entries pointing at them.
    pub fn structural_audit(&self) -> Result<(), String> {
        let mut seen_dirs = BTreeSet::new();
        let mut leaf_refs: BTreeMap<TableId, u32> = BTreeMap::new();
        for p in self.procs.values() {
            let Some(root) = p.root else { continue };
            let mut stack = vec![(root, Level::Pgd)];
            while let Some((id, want)) = stack.pop() {
                let t = self.tables.get(id);
                if t.level != want {
                    return Err(format!("table {} is {:?}, expected {want:?}", id.0, t.level));
                }
                if want == Level::Pte {
                    *leaf_refs.entry(id).or_default() += 1;
                    continue;
                }
                if !seen_dirs.insert(id) {
                    return Err(format!("{want:?} table {} reachable twice", id.0));
                }
                let child = want.child().expect("directory level");
                stack.extend(t.dir().iter().filter_map(|e| e.target).map(|c| (c, child)));
            }
        }
        for (id, refs) in leaf_refs {
            let sharers = self.tables.get(id).sharers;
            if sharers != refs {
                return Err(format!("PTE table {} has sharer count {sharers} but {refs} PMD entries", id.0));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engines::NoHooks;

    fn world() -> World {
        World::new(CostModel::default(), 8, 1 << 20)
    }

    #[test]
    fn map_512_pages_makes_one_pte_table() {
        let mut w = world();
        let p = w.spawn(&[0..1024]).unwrap();
        w.map_range(p, 0..512, &mut |_, _| {}).unwrap();
        assert_eq!(w.pmd_entries(p).len(), 1);
        w.map_range(p, 512..513, &mut |_, _| {}).unwrap();
        assert_eq!(w.pmd_entries(p).len(), 2);
    }

    #[test]
    fn map_without_free_frames_fails() {
        let mut w = World::new(CostModel::default(), 8, 4);
        let p = w.spawn(&[0..16]).unwrap();
        assert_eq!(w.map_range(p, 0..16, &mut |_, _| {}), Err(VmError::OutOfPhysMem));
    }

    #[test]
    fn map_outside_vma_is_rejected() {
        let mut w = world();
        let p = w.spawn(&[0..8]).unwrap();
        assert!(matches!(w.map_range(p, 4..12, &mut |_, _| {}), Err(VmError::UnmappedAddress { vpage: 8, .. })));
    }

    #[test]
    fn second_read_hits_tlb() {
        let mut w = world();
        let p = w.spawn(&[0..8]).unwrap();
        w.map_range(p, 0..8, &mut |v, b| b[0] = v as u8).unwrap();
        assert_eq!(w.read(p, 3).unwrap()[0], 3);
        assert_eq!(w.process(p).unwrap().tlb.len(), 1);
        // corrupt the table behind the TLB's back: the hit must not walk
        let t = w.pte_table(p, 3).unwrap();
        w.tables.get_mut(t).leaf_mut()[3] = Pte::EMPTY;
        assert_eq!(w.read(p, 3).unwrap()[0], 3);
    }

    #[test]
    fn in_place_write_does_not_fault() {
        let mut w = world();
        let p = w.spawn(&[0..8]).unwrap();
        w.map_range(p, 0..8, &mut |_, _| {}).unwrap();
        let out = w.write(p, 2, 0, b"hi", &mut NoHooks).unwrap();
        assert_eq!(out.kind, WriteKind::InPlace);
        assert!(w.take_charges().is_empty());
        assert_eq!(&w.read(p, 2).unwrap()[..2], b"hi");
    }

    #[test]
    fn demand_zero_on_unmapped_page() {
        let mut w = world();
        let p = w.spawn(&[0..8]).unwrap();
        let out = w.write(p, 5, 1, b"z", &mut NoHooks).unwrap();
        assert_eq!(out.kind, WriteKind::DemandZero);
        assert_eq!(w.read(p, 5).unwrap(), &[0, b'z', 0, 0, 0, 0, 0, 0]);
        assert_eq!(w.take_charges()[0].cause, Cause::DataPageFault);
    }

    #[test]
    fn unmap_middle_splits_vma() {
        let mut w = world();
        let p = w.spawn(&[0..30]).unwrap();
        w.map_range(p, 0..30, &mut |_, _| {}).unwrap();
        w.unmap_range(p, 10..20, &mut NoHooks).unwrap();
        let spans: Vec<_> = w.process(p).unwrap().vmas.iter().map(|v| v.range()).collect();
        assert_eq!(spans, vec![0..10, 20..30]);
        assert_eq!(w.mapped_pages(p), 20);
        assert!(w.refcount_audit().is_empty());
        assert_eq!(w.phys.data_in_use(), 20);
    }

    #[test]
    fn unmap_whole_vma_removes_it() {
        let mut w = world();
        let p = w.spawn(&[0..10, 20..30]).unwrap();
        w.map_range(p, 0..10, &mut |_, _| {}).unwrap();
        w.unmap_range(p, 0..10, &mut NoHooks).unwrap();
        assert_eq!(w.process(p).unwrap().vmas.len(), 1);
        assert_eq!(w.phys.data_in_use(), 0);
    }

    #[test]
    fn private_migration_updates_in_place() {
        let mut w = world();
        let p = w.spawn(&[0..8]).unwrap();
        w.map_range(p, 0..8, &mut |v, b| b[0] = v as u8 + 1).unwrap();
        w.read(p, 4).unwrap();
        let r = w.migrate_page(p, 4, &mut NoHooks, &mut |_, _| {}).unwrap();
        assert_ne!(r.from, r.to);
        assert!(w.coherence_audit().is_empty());
        assert_eq!(w.read(p, 4).unwrap()[0], 5);
        assert!(w.phys.is_free(r.from));
        assert!(w.refcount_audit().is_empty());
    }

    #[test]
    fn merge_then_split_round_trips() {
        let mut w = world();
        let p = w.spawn(&[0..10, 10..20]).unwrap();
        w.merge_vmas(p, 10, &mut NoHooks).unwrap();
        assert_eq!(w.process(p).unwrap().vmas.len(), 1);
        w.split_vma(p, 10, &mut NoHooks).unwrap();
        assert_eq!(w.process(p).unwrap().vmas.len(), 2);
        assert!(w.merge_vmas(p, 5, &mut NoHooks).is_err());
    }

    #[test]
    fn oom_reclaim_drops_contents() {
        let mut w = world();
        let p = w.spawn(&[0..8]).unwrap();
        w.map_range(p, 0..8, &mut |_, b| b[0] = 9).unwrap();
        w.oom_reclaim(p, 1, &mut NoHooks).unwrap();
        assert_eq!(w.read(p, 1).unwrap()[0], 0);
        assert_eq!(w.mapped_pages(p), 7);
    }

    #[test]
    fn armed_failure_fires_once() {
        let mut w = world();
        w.arm_failure(AllocSite::Sync, 2);
        assert!(w.gate(AllocSite::Fork).is_ok());
        assert!(w.gate(AllocSite::Sync).is_ok());
        assert_eq!(w.gate(AllocSite::Sync), Err(VmError::OutOfPhysMem));
        assert!(w.gate(AllocSite::Sync).is_ok());
    }

    #[test]
    fn teardown_returns_every_frame() {
        let mut w = world();
        let p = w.spawn(&[0..2000]).unwrap();
        w.map_range(p, 0..2000, &mut |_, _| {}).unwrap();
        w.exit(p);
        assert_eq!(w.phys.in_use(), 0);
        assert_eq!(w.tables.live(), 0);
    }
}
