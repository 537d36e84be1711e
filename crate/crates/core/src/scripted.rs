//! Hand-driven replays of three small situations, recording what each
//! process's TLB and page table say about one virtual page after every step.
//!
//! * [`table1`]: a page migration while parent and child share the PTE
//!   table (ODF). The child's TLB keeps the old frame.
//! * [`table4`]: the same migration during an async child copy, before the
//!   child has copied the PMD. The child later copies the new mapping.
//! * [`fig5`]: a SET of a new key on an uncopied PMD during an async copy.

use std::fmt::Write as _;
use std::ops::Range;

use crate::clock::{CostModel, Nanos};
use crate::engines::{EngineKind, Snapshots};
use crate::error::SimError;
use crate::kv::{snapshot_dump, Dump, KvStore};
use crate::vm::{MigrationReport, MigrationStep, PhysPageId, Pid, World};

/// What one translation structure says about the traced page.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Entry {
    Absent,
    NotPresent,
    Frame(PhysPageId),
}

/// A process's TLB and PTE for the traced page, written `N/A`, `V->N`
/// (not present) or `V->X` with frames named by role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct View {
    pub tlb: String,
    pub pte: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepState {
    pub step: usize,
    pub operation: &'static str,
    pub parent: View,
    pub child: View,
}

#[derive(Debug, Clone)]
pub struct Replay {
    pub engine: EngineKind,
    pub parent: Pid,
    pub child: Pid,
    pub vpage: u64,
    pub steps: Vec<StepState>,
    pub migration: MigrationReport,
    /// Bytes the child's access at the last step returned.
    pub child_read: Vec<u8>,
    /// Frame the child's access went to, `X` or `Y`.
    pub child_frame: String,
    pub coherence_violations: Vec<(Pid, u64)>,
    /// Parent state at fork time.
    pub oracle: Dump,
    /// The child's view after the parent overwrote the migrated key.
    pub dump: Dump,
    pub mismatched_keys: Vec<u64>,
}

impl Replay {
    /// Plain-text table of the recorded steps.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<4} {:<28} {:<24} {:<24}", "step", "operation", "parent", "child");
        for st in &self.steps {
            let side = |v: &View| format!("TLB: {} PTE: {}", v.tlb, v.pte);
            let _ = writeln!(s, "{:<4} {:<28} {:<24} {:<24}", st.step, st.operation, side(&st.parent), side(&st.child));
        }
        let _ = writeln!(s, "child access went to frame {}", self.child_frame);
        let _ = writeln!(s, "coherence violations: {}", self.coherence_violations.len());
        let _ = writeln!(s, "dump keys differing from the fork-time state: {:?}", self.mismatched_keys);
        s
    }
}

/// Outcome of [`fig5`].
#[derive(Debug, Clone)]
pub struct SetDuringCopy {
    pub syncs: usize,
    pub oracle: Dump,
    pub dump: Dump,
    /// The new key as the parent sees it afterwards.
    pub parent_value: Vec<u8>,
}

const HEAP: Range<u64> = 0..512;
const SCRATCH_START: u64 = 1024;
const VALUE_BYTES: usize = 16;

struct Machine {
    world: World,
    kv: KvStore,
    parent: Pid,
    snaps: Snapshots,
}

fn value_of(key: u64, tag: u8) -> Vec<u8> {
    vec![tag.wrapping_add(key as u8); VALUE_BYTES]
}

/// A parent holding keys 0 and 1 on one heap page. `scratch_pmds` extra
/// PMDs of mapped memory sit after the heap; with one copy worker they are
/// copied before the heap.
fn machine(scratch_pmds: u64) -> Result<Machine, SimError> {
    let mut world = World::new(CostModel::default(), 64, 1 << 16);
    let scratch = SCRATCH_START..SCRATCH_START + 512 * scratch_pmds;
    let mut vmas = vec![HEAP];
    if scratch_pmds > 0 {
        vmas.push(scratch.clone());
    }
    let parent = world.spawn(&vmas)?;
    let mut kv = KvStore::new(parent, vec![HEAP], 3, 64);
    kv.preload(&mut world, 0..2, VALUE_BYTES, &mut |k, b| b.copy_from_slice(&value_of(k, b'a')))?;
    if scratch_pmds > 0 {
        world.map_range(parent, scratch, &mut |_, _| {})?;
    }
    world.take_charges();
    Ok(Machine { world, kv, parent, snaps: Snapshots::new() })
}

fn tlb_entry(w: &World, pid: Pid, v: u64) -> Entry {
    w.process(pid).and_then(|p| p.tlb.lookup(v)).map_or(Entry::Absent, Entry::Frame)
}

fn pte_entry(w: &World, pid: Pid, v: u64) -> Entry {
    match w.pte(pid, v) {
        Some(p) => match p.phys() {
            Some(f) if p.present() => Entry::Frame(f),
            Some(_) => Entry::NotPresent,
            None => Entry::Absent,
        },
        None => Entry::Absent,
    }
}

struct Raw {
    step: usize,
    operation: &'static str,
    entries: [Entry; 4],
}

fn capture(w: &World, parent: Pid, child: Pid, v: u64, step: usize, operation: &'static str) -> Raw {
    Raw {
        step,
        operation,
        entries: [tlb_entry(w, parent, v), pte_entry(w, parent, v), tlb_entry(w, child, v), pte_entry(w, child, v)],
    }
}

fn name(f: PhysPageId, x: PhysPageId, y: PhysPageId) -> String {
    if f == x {
        "X".into()
    } else if f == y {
        "Y".into()
    } else {
        format!("#{}", f.0)
    }
}

fn label(e: Entry, x: PhysPageId, y: PhysPageId) -> String {
    match e {
        Entry::Absent => "N/A".into(),
        Entry::NotPresent => "V->N".into(),
        Entry::Frame(f) => format!("V->{}", name(f, x, y)),
    }
}

fn label_all(raw: Vec<Raw>, x: PhysPageId, y: PhysPageId) -> Vec<StepState> {
    raw.into_iter()
        .map(|r| {
            let [pt, pp, ct, cp] = r.entries.map(|e| label(e, x, y));
            StepState {
                step: r.step,
                operation: r.operation,
                parent: View { tlb: pt, pte: pp },
                child: View { tlb: ct, pte: cp },
            }
        })
        .collect()
}

/// Page migration under an ODF-shared PTE table, then a parent SET of the
/// migrated key whose copy-on-write reuses the freed frame.
pub fn table1() -> Result<Replay, SimError> {
    let mut m = machine(0)?;
    let (parent, v) = (m.parent, m.kv.page_of(0).expect("preloaded"));
    m.world.read(parent, v)?;
    let oracle = m.kv.oracle(&m.world);
    let id = m.snaps.begin(&mut m.world, EngineKind::Odf, parent, 1, 0);
    let child = m.snaps.session(id).child.expect("fork succeeded");
    m.world.read(child, v)?;

    let mut raw = vec![capture(&m.world, parent, child, v, 1, "Initial state")];
    let report = m.world.migrate_page(parent, v, &mut m.snaps, &mut |step, w| {
        let (n, op) = match step {
            MigrationStep::SetNotPresent => (2, "P: Set PTE -> None present"),
            MigrationStep::FlushOwnerTlb => (3, "P: Flush TLB"),
            MigrationStep::ScanOthers => (4, "C: Skipped because N!=X"),
            MigrationStep::UpdatePte => (5, "P: Update PTE"),
        };
        raw.push(capture(w, parent, child, v, n, op));
    })?;
    finish(m, raw, report, oracle, parent, child, v)
}

/// Page migration during an async child copy, before the child has copied
/// the page's PMD; the child copies the updated entry afterwards.
pub fn table4() -> Result<Replay, SimError> {
    let mut m = machine(8)?;
    let (parent, v) = (m.parent, m.kv.page_of(0).expect("preloaded"));
    m.world.read(parent, v)?;
    let oracle = m.kv.oracle(&m.world);
    let id = m.snaps.begin(&mut m.world, EngineKind::Async, parent, 1, 0);
    let s = m.snaps.session(id);
    let (child, t) = (s.child.expect("fork succeeded"), s.fork_return);
    m.snaps.set_now(t);
    m.snaps.advance(&mut m.world, t);

    let mut raw = vec![capture(&m.world, parent, child, v, 1, "Initial state")];
    let report = m.world.migrate_page(parent, v, &mut m.snaps, &mut |step, w| {
        let (n, op) = match step {
            MigrationStep::SetNotPresent => (2, "P: Set PTE -> None present"),
            MigrationStep::FlushOwnerTlb => (3, "P: Flush TLB"),
            // the child has no entry for the page yet, so there is nothing
            // to scan and the published sequence has no row for it
            MigrationStep::ScanOthers => return,
            MigrationStep::UpdatePte => (4, "P: Update PTE"),
        };
        raw.push(capture(w, parent, child, v, n, op));
    })?;
    let end = m.snaps.next_copy_deadline(&m.world).expect("copy in progress");
    m.snaps.set_now(end);
    m.snaps.advance(&mut m.world, end);
    raw.push(capture(&m.world, parent, child, v, 5, "C: Copy PTE"));
    finish(m, raw, report, oracle, parent, child, v)
}

fn finish(
    mut m: Machine,
    mut raw: Vec<Raw>,
    migration: MigrationReport,
    oracle: Dump,
    parent: Pid,
    child: Pid,
    v: u64,
) -> Result<Replay, SimError> {
    let step = raw.len() + 1;
    m.world.read(parent, v)?;
    let child_read = m.world.read(child, v)?.to_vec();
    raw.push(capture(&m.world, parent, child, v, step, "P&C: Access V"));
    let (x, y) = (migration.from, migration.to);
    let child_frame = name(m.world.translate(child, v)?.expect("mapped"), x, y);
    let coherence_violations = m.world.coherence_audit();

    // a post-fork overwrite by the parent must stay invisible to the child
    m.kv.set(&mut m.world, 0, &value_of(0, b'A'), &mut m.snaps)?;
    let dump = snapshot_dump(&m.world, child, &[HEAP]);
    let mismatched_keys = dump.diff(&oracle);
    Ok(Replay {
        engine: m.snaps.session(0).engine,
        parent,
        child,
        vpage: v,
        steps: label_all(raw, x, y),
        migration,
        child_read,
        child_frame,
        coherence_violations,
        oracle,
        dump,
        mismatched_keys,
    })
}

/// Keys 0 and 1 exist at fork time; key 2 is set while the heap PMD is
/// still uncopied.
pub fn fig5() -> Result<SetDuringCopy, SimError> {
    let mut m = machine(8)?;
    let parent = m.parent;
    let oracle = m.kv.oracle(&m.world);
    let id = m.snaps.begin(&mut m.world, EngineKind::Async, parent, 1, 0);
    let s = m.snaps.session(id);
    let (child, t): (Pid, Nanos) = (s.child.expect("fork succeeded"), s.fork_return + 50_000);
    m.snaps.set_now(t);
    m.snaps.advance(&mut m.world, t);
    let out = m.kv.set(&mut m.world, 2, &value_of(2, b'a'), &mut m.snaps)?;
    let end = m.snaps.next_copy_deadline(&m.world).expect("copy in progress");
    m.snaps.set_now(end);
    m.snaps.advance(&mut m.world, end);
    Ok(SetDuringCopy {
        syncs: out.syncs,
        oracle,
        dump: snapshot_dump(&m.world, child, &[HEAP]),
        parent_value: m.kv.get(&mut m.world, 2)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols(r: &Replay) -> Vec<[&str; 4]> {
        r.steps
            .iter()
            .map(|s| [s.parent.tlb.as_str(), s.parent.pte.as_str(), s.child.tlb.as_str(), s.child.pte.as_str()])
            .collect()
    }

    #[test]
    fn shared_table_migration_leaves_child_tlb_stale() {
        let r = table1().unwrap();
        assert_eq!(
            cols(&r),
            [
                ["V->X", "V->X", "V->X", "V->X"],
                ["V->X", "V->N", "V->X", "V->N"],
                ["N/A", "V->N", "V->X", "V->N"],
                ["N/A", "V->N", "V->X", "V->N"],
                ["N/A", "V->Y", "V->X", "V->Y"],
                ["V->Y", "V->Y", "V->X", "V->Y"],
            ]
        );
        assert_eq!(r.migration.skipped, vec![r.child]);
        assert_eq!(r.coherence_violations, vec![(r.child, r.vpage)]);
        assert_eq!(r.child_frame, "X");
        assert_eq!(r.mismatched_keys, vec![0]);
        assert_eq!(r.dump.get(0), Some(&value_of(0, b'A')[..]));
    }

    #[test]
    fn async_migration_before_copy_is_coherent() {
        let r = table4().unwrap();
        assert_eq!(
            cols(&r),
            [
                ["V->X", "V->X", "N/A", "N/A"],
                ["V->X", "V->N", "N/A", "N/A"],
                ["N/A", "V->N", "N/A", "N/A"],
                ["N/A", "V->Y", "N/A", "N/A"],
                ["N/A", "V->Y", "N/A", "V->Y"],
                ["V->Y", "V->Y", "V->Y", "V->Y"],
            ]
        );
        assert!(r.coherence_violations.is_empty());
        assert_eq!(r.child_frame, "Y");
        assert!(r.mismatched_keys.is_empty());
    }

    #[test]
    fn set_on_uncopied_pmd_syncs_once() {
        let r = fig5().unwrap();
        assert_eq!(r.syncs, 1);
        assert_eq!(r.dump.len(), 2);
        assert!(r.dump.diff(&r.oracle).is_empty());
        assert_eq!(r.parent_value, value_of(2, b'a'));
    }
}
