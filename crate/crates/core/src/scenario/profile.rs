use serde::Serialize;

use crate::clock::{CostModel, ForkCost};
use crate::engines::{fork_async_parent, fork_default, fork_odf, EngineKind};
use crate::error::SimError;
use crate::vm::{table_shape, TableShape, World, PAGE_BYTES};

/// Kernel time of a single fork of a fully mapped region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ForkProfile {
    pub mem_bytes: u64,
    pub engine: EngineKind,
    pub shape: TableShape,
    pub cost: ForkCost,
    pub kernel_ns: u64,
    pub nonleaf_ns: u64,
    pub page_table_ns: u64,
    /// `page_table_ns / kernel_ns`.
    pub page_table_share: f64,
}

/// Maps `mem_bytes` from address zero on a machine whose pages carry no
/// payload, then forks it once with `engine`. For the async fork this is
/// the parent phase only.
pub fn fork_profile(mem_bytes: u64, engine: EngineKind, cost: CostModel) -> Result<ForkProfile, SimError> {
    let shape = table_shape(mem_bytes, PAGE_BYTES)?;
    let pages = shape.pte_entries;
    let tables = shape.nonleaf_entries() + 1;
    let mut world = World::new(cost, 0, pages + 4 * tables);
    let parent = world.spawn(&[0..pages])?;
    world.map_range(parent, 0..pages, &mut |_, _| {})?;
    let fork_cost = match engine {
        EngineKind::Default => fork_default(&mut world, parent)?.cost,
        EngineKind::Odf => fork_odf(&mut world, parent)?.cost,
        EngineKind::Async => fork_async_parent(&mut world, parent).map_err(|e| e.error)?.0.cost,
    };
    let kernel_ns = fork_cost.total_ns(&cost);
    let page_table_ns = fork_cost.page_table_ns(&cost);
    Ok(ForkProfile {
        mem_bytes,
        engine,
        shape,
        cost: fork_cost,
        kernel_ns,
        nonleaf_ns: fork_cost.nonleaf_ns(&cost),
        page_table_ns,
        page_table_share: if kernel_ns == 0 { 0.0 } else { page_table_ns as f64 / kernel_ns as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_region_costs() {
        let c = CostModel::default();
        let p = fork_profile(4 << 20, EngineKind::Default, c).unwrap();
        // 1 PGD + 1 PUD + 2 PMD entries, 1024 PTEs
        assert_eq!(p.cost.nonleaf_entries, 4);
        assert_eq!(p.cost.ptes, 1024);
        assert_eq!(p.kernel_ns, CostModel::ns(4.0 * 500.0 + 1024.0 * 33.4));
        let a = fork_profile(4 << 20, EngineKind::Async, c).unwrap();
        assert_eq!(a.cost.wp_marks, 2);
        assert_eq!(a.cost.ptes, 0);
    }
}
