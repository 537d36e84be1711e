use super::Forked;
use crate::clock::{Cause, ForkCost};
use crate::vm::{AllocSite, DirEntry, Level, Pid, TableId, VmError, World, ENTRIES};

/// Deep-copies `parent`'s table into a new child and write-protects every
/// PTE on both sides. The whole copy is charged to the parent as one
/// kernel episode. On allocation failure the partial child is discarded
/// and the parent is left untouched.
pub fn fork_default(world: &mut World, parent: Pid) -> Result<Forked, VmError> {
    let proc = world.process(parent).filter(|p| p.alive).ok_or(VmError::NoSuchProcess(parent))?;
    let vmas = proc.vmas.iter().map(|v| crate::vm::Vma::new(v.start, v.end)).collect();
    let src_root = proc.root.ok_or(VmError::NoSuchProcess(parent))?;

    world.gate(AllocSite::Fork)?;
    let root = world.alloc_table(Level::Pgd)?;
    let child = world.insert_process(Some(parent), vmas, Some(root));
    let mut cost = ForkCost::default();
    let mut parent_leaves = Vec::new();
    if let Err(e) = copy_dir(world, src_root, root, Level::Pgd, &mut cost, &mut parent_leaves) {
        world.exit(child);
        world.charge(parent, Cause::ForkCall, cost.total_ns(&world.cost), None);
        return Err(e);
    }
    for t in parent_leaves {
        for p in world.tables.get_mut(t).leaf_mut().iter_mut() {
            p.set_writable(false);
        }
    }
    let ns = cost.total_ns(&world.cost);
    world.charge(parent, Cause::ForkCall, ns, None);
    Ok(Forked { child, cost })
}

fn copy_dir(
    world: &mut World,
    src: TableId,
    dst: TableId,
    level: Level,
    cost: &mut ForkCost,
    leaves: &mut Vec<TableId>,
) -> Result<(), VmError> {
    let child_level = level.child().expect("directory level");
    for i in 0..ENTRIES {
        let e = world.tables.get(src).dir()[i];
        let Some(target) = e.target else { continue };
        world.gate(AllocSite::Fork)?;
        let copy = if child_level == Level::Pte {
            let t = world.copy_table(target)?;
            for p in world.tables.get_mut(t).leaf_mut().iter_mut() {
                p.set_writable(false);
                if let Some(f) = p.phys() {
                    world.phys.inc(f);
                }
            }
            cost.ptes += ENTRIES as u64;
            leaves.push(target);
            t
        } else {
            world.alloc_table(child_level)?
        };
        cost.nonleaf_entries += 1;
        world.tables.get_mut(dst).dir_mut()[i] = DirEntry { target: Some(copy), writable: e.writable };
        if child_level != Level::Pte {
            copy_dir(world, target, copy, child_level, cost, leaves)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::CostModel;
    use crate::engines::NoHooks;
    use crate::vm::{PhysPageId, WriteKind};

    #[test]
    fn empty_parent_forks_for_free() {
        let mut w = World::new(CostModel::default(), 4, 1 << 10);
        let p = w.spawn(&[]).unwrap();
        let f = fork_default(&mut w, p).unwrap();
        assert_eq!(f.kernel_ns(&w.cost), 0);
        assert!(w.take_charges().is_empty());
    }

    #[test]
    fn every_page_refcount_two_after_fork() {
        let mut w = World::new(CostModel::default(), 4, 1 << 12);
        let p = w.spawn(&[0..1500]).unwrap();
        w.map_range(p, 0..1500, &mut |_, _| {}).unwrap();
        let f = fork_default(&mut w, p).unwrap();
        for v in 0..1500 {
            let frame = w.pte(p, v).unwrap().phys().unwrap();
            assert_eq!(w.phys.refcount(frame), 2);
            assert_eq!(w.pte(f.child, v).unwrap().phys(), Some(frame));
        }
        assert!(w.refcount_audit().is_empty());
        w.structural_audit().unwrap();
        // 1 PUD table + 1 PMD table + 3 PTE tables
        assert_eq!(f.cost.nonleaf_entries, 5);
    }

    #[test]
    fn write_after_fork_copies_the_page() {
        let mut w = World::new(CostModel::default(), 4, 1 << 12);
        let p = w.spawn(&[0..8]).unwrap();
        w.map_range(p, 0..8, &mut |_, b| b[0] = 7).unwrap();
        let f = fork_default(&mut w, p).unwrap();
        let total = |w: &World| {
            let mut frames: Vec<PhysPageId> =
                (0..8).flat_map(|v| [p, f.child].map(|pid| w.pte(pid, v).unwrap().phys().unwrap())).collect();
            frames.sort();
            frames.dedup();
            frames.iter().map(|&x| w.phys.refcount(x)).sum::<u32>()
        };
        assert_eq!(total(&w), 16);
        let out = w.write(p, 3, 0, &[1], &mut NoHooks).unwrap();
        assert_eq!(out.kind, WriteKind::Cow);
        let a = w.pte(p, 3).unwrap().phys().unwrap();
        let b = w.pte(f.child, 3).unwrap().phys().unwrap();
        assert_eq!((w.phys.refcount(a), w.phys.refcount(b)), (1, 1));
        assert_eq!(total(&w), 16);
        assert_eq!(w.read(f.child, 3).unwrap()[0], 7);
    }

    #[test]
    fn failed_fork_leaves_parent_intact() {
        let mut w = World::new(CostModel::default(), 4, 1 << 12);
        let p = w.spawn(&[0..2048]).unwrap();
        w.map_range(p, 0..2048, &mut |_, _| {}).unwrap();
        let in_use = w.phys.in_use();
        w.arm_failure(AllocSite::Fork, 4);
        assert_eq!(fork_default(&mut w, p), Err(VmError::OutOfPhysMem));
        assert_eq!(w.phys.in_use(), in_use);
        assert_eq!(w.pids(), vec![p]);
        assert!(w.pte(p, 0).unwrap().writable());
        assert!(w.refcount_audit().is_empty());
    }
}
