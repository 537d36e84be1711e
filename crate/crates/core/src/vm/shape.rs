use serde::Serialize;

use super::table::ENTRIES;
use super::VmError;

pub const PAGE_BYTES: u64 = 4096;

/// Entry counts per level for a fully mapped region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TableShape {
    pub pgd_entries: u64,
    pub pud_entries: u64,
    pub pmd_entries: u64,
    pub pte_entries: u64,
}

impl TableShape {
    pub fn nonleaf_entries(&self) -> u64 {
        self.pgd_entries + self.pud_entries + self.pmd_entries
    }
}

/// Page-table shape of a region of `mem_bytes` mapped from address zero.
pub fn table_shape(mem_bytes: u64, page_bytes: u64) -> Result<TableShape, VmError> {
    if page_bytes == 0 || mem_bytes == 0 || !mem_bytes.is_multiple_of(page_bytes) {
        return Err(VmError::BadShape { mem_bytes, page_bytes });
    }
    let up = |n: u64| n.div_ceil(ENTRIES as u64);
    let pte_entries = mem_bytes / page_bytes;
    let pmd_entries = up(pte_entries);
    let pud_entries = up(pmd_entries);
    let pgd_entries = up(pud_entries);
    Ok(TableShape { pgd_entries, pud_entries, pmd_entries, pte_entries })
}

const UNITS: [(&str, u64); 4] = [("KiB", 1 << 10), ("MiB", 1 << 20), ("GiB", 1 << 30), ("TiB", 1 << 40)];

/// Parses `"8GiB"`, `"64 MiB"`, `"4096"` into bytes.
pub fn parse_bytes(s: &str) -> Option<u64> {
    let s = s.trim();
    for (suffix, mult) in UNITS {
        if let Some(num) = s.strip_suffix(suffix) {
            return num.trim().parse::<u64>().ok()?.checked_mul(mult);
        }
    }
    s.strip_suffix('B').unwrap_or(s).trim().parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    const GIB: u64 = 1 << 30;

    #[test]
    fn eight_gib() {
        let s = table_shape(8 * GIB, PAGE_BYTES).unwrap();
        assert_eq!((s.pgd_entries, s.pud_entries, s.pmd_entries, s.pte_entries), (1, 8, 4096, 2_097_152));
    }

    #[test]
    fn two_mib_is_one_table() {
        let s = table_shape(2 << 20, PAGE_BYTES).unwrap();
        assert_eq!((s.pgd_entries, s.pud_entries, s.pmd_entries, s.pte_entries), (1, 1, 1, 512));
    }

    #[test]
    fn sixty_four_gib() {
        let s = table_shape(64 * GIB, PAGE_BYTES).unwrap();
        assert_eq!((s.pgd_entries, s.pud_entries, s.pmd_entries, s.pte_entries), (1, 64, 32_768, 16_777_216));
    }

    #[test]
    fn rejects_non_multiples() {
        assert!(table_shape(4097, PAGE_BYTES).is_err());
        assert!(table_shape(0, PAGE_BYTES).is_err());
    }

    #[test]
    fn parses_sizes() {
        assert_eq!(parse_bytes("8GiB"), Some(8 * GIB));
        assert_eq!(parse_bytes("64 MiB"), Some(64 << 20));
        assert_eq!(parse_bytes("4096"), Some(4096));
        assert_eq!(parse_bytes("12B"), Some(12));
        assert_eq!(parse_bytes("lots"), None);
    }
}
