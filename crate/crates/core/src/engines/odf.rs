use super::Forked;
use crate::clock::{Cause, ForkCost, Nanos};
use crate::vm::{AllocSite, DirEntry, Level, Pid, TableId, VmError, Vma, World, ENTRIES};

/// Copies `parent`'s PGD, PUD and PMD levels into a new child whose PMD
/// entries point at the parent's PTE tables, which become shared. Only the
/// non-leaf copy is charged.
pub fn fork_odf(world: &mut World, parent: Pid) -> Result<Forked, VmError> {
    let proc = world.process(parent).filter(|p| p.alive).ok_or(VmError::NoSuchProcess(parent))?;
    let vmas = proc.vmas.iter().map(|v| Vma::new(v.start, v.end)).collect();
    let src_root = proc.root.ok_or(VmError::NoSuchProcess(parent))?;

    world.gate(AllocSite::Fork)?;
    let root = world.alloc_table(Level::Pgd)?;
    let child = world.insert_process(Some(parent), vmas, Some(root));
    let mut cost = ForkCost::default();
    if let Err(e) = share_dir(world, src_root, root, Level::Pgd, &mut cost) {
        world.exit(child);
        world.charge(parent, Cause::ForkCall, cost.total_ns(&world.cost), None);
        return Err(e);
    }
    let ns = cost.total_ns(&world.cost);
    world.charge(parent, Cause::ForkCall, ns, None);
    Ok(Forked { child, cost })
}

fn share_dir(world: &mut World, src: TableId, dst: TableId, level: Level, cost: &mut ForkCost) -> Result<(), VmError> {
    let child_level = level.child().expect("directory level");
    for i in 0..ENTRIES {
        let e = world.tables.get(src).dir()[i];
        let Some(target) = e.target else { continue };
        let copy = if child_level == Level::Pte {
            world.tables.get_mut(target).sharers += 1;
            target
        } else {
            world.gate(AllocSite::Fork)?;
            world.alloc_table(child_level)?
        };
        cost.nonleaf_entries += 1;
        world.tables.get_mut(dst).dir_mut()[i] = DirEntry { target: Some(copy), writable: e.writable };
        if child_level != Level::Pte {
            share_dir(world, target, copy, child_level, cost)?;
        }
    }
    Ok(())
}

/// Gives `pid` a private copy of the shared PTE table covering `vpage`:
/// 512 entries copied, both copies write-protected, every mapped frame
/// gaining a reference. Returns the kernel time charged, or `None` when the
/// table was not shared.
pub fn cow_pte_table(world: &mut World, pid: Pid, vpage: u64) -> Result<Option<Nanos>, VmError> {
    world.unshare_if_shared(pid, vpage)
}
