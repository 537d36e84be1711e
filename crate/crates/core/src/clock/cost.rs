use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Nanosecond charges for every kernel action the simulator accounts for.
///
/// Per-unit costs are kept as `f64` so aggregate charges such as
/// `512 * 33.4 ns` are exact before the single rounding step to integer
/// nanoseconds in [`CostModel::ns`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    /// Copying one PGD/PUD/PMD entry (allocating and initializing the
    /// table page it points to).
    pub c_nonleaf_ns: f64,
    /// Copying one PTE, including the refcount bump and write-protect.
    pub c_pte_ns: f64,
    /// Write-protecting one PMD entry in the parent during an async fork.
    pub c_wp_ns: f64,
    /// Servicing one data-page fault.
    pub c_fault_ns: f64,
    /// Writing one page to the snapshot file.
    pub persist_per_page_ns: f64,
    /// User-mode cost of serving one query.
    pub service_time_ns: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            c_nonleaf_ns: 500.0,
            c_pte_ns: 33.4,
            c_wp_ns: 18.0,
            c_fault_ns: 3_600.0,
            persist_per_page_ns: 19_000.0,
            service_time_ns: 20_000.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fields = [
            ("c_nonleaf_ns", self.c_nonleaf_ns),
            ("c_pte_ns", self.c_pte_ns),
            ("c_wp_ns", self.c_wp_ns),
            ("c_fault_ns", self.c_fault_ns),
            ("persist_per_page_ns", self.persist_per_page_ns),
            ("service_time_ns", self.service_time_ns),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::Invalid(format!("cost.{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Rounds a fractional nanosecond amount to the integer timeline.
    pub fn ns(raw: f64) -> u64 {
        raw.round().max(0.0) as u64
    }

    /// Cost of copying `nonleaf` directory entries and `ptes` leaf entries.
    pub fn table_copy_ns(&self, nonleaf: u64, ptes: u64) -> u64 {
        Self::ns(nonleaf as f64 * self.c_nonleaf_ns + ptes as f64 * self.c_pte_ns)
    }

    /// Cost of copying one PMD entry plus the `ptes` entries of its table:
    /// the unit of work behind a proactive sync, an ODF table split and a
    /// child-side PMD copy.
    pub fn pmd_copy_ns(&self, ptes: u64) -> u64 {
        self.table_copy_ns(1, ptes)
    }

    pub fn fault_ns(&self) -> u64 {
        Self::ns(self.c_fault_ns)
    }

    pub fn service_ns(&self) -> u64 {
        Self::ns(self.service_time_ns).max(1)
    }

    pub fn persist_ns(&self, pages: u64) -> u64 {
        Self::ns(pages as f64 * self.persist_per_page_ns)
    }
}

/// Breakdown of a fork call's kernel time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ForkCost {
    /// PGD/PUD/PMD entries copied.
    pub nonleaf_entries: u64,
    /// PTEs copied.
    pub ptes: u64,
    /// PMD entries write-protected (async fork only).
    pub wp_marks: u64,
}

impl ForkCost {
    pub fn nonleaf_ns(&self, cost: &CostModel) -> u64 {
        CostModel::ns(self.nonleaf_entries as f64 * cost.c_nonleaf_ns)
    }

    pub fn total_ns(&self, cost: &CostModel) -> u64 {
        CostModel::ns(
            self.nonleaf_entries as f64 * cost.c_nonleaf_ns
                + self.ptes as f64 * cost.c_pte_ns
                + self.wp_marks as f64 * cost.c_wp_ns,
        )
    }

    /// Kernel time spent on the page table itself. Fork has no other
    /// modeled work, so this equals [`ForkCost::total_ns`].
    pub fn page_table_ns(&self, cost: &CostModel) -> u64 {
        self.total_ns(cost)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_positive() {
        CostModel::default().validate().unwrap();
    }

    #[test]
    fn rejects_non_positive() {
        let c = CostModel { c_pte_ns: 0.0, ..CostModel::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn pmd_copy_is_17_6_us() {
        // 500 + 512 * 33.4 = 17600.8
        assert_eq!(CostModel::default().pmd_copy_ns(512), 17_601);
    }

    #[test]
    fn eight_gib_fork_breakdown() {
        let c = CostModel::default();
        let f = ForkCost { nonleaf_entries: 1 + 8 + 4096, ptes: 1 << 21, wp_marks: 0 };
        assert_eq!(f.nonleaf_ns(&c), 2_052_500);
        // 2_052_500 + 2_097_152 * 33.4 = 72_097_376.8
        assert_eq!(f.total_ns(&c), 72_097_377);
    }
}
