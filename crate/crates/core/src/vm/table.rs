use serde::Serialize;

use super::phys::PhysPageId;

/// Entries per table at every level.
pub const ENTRIES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct TableId(pub u32);

/// Radix-tree level, top to bottom. P4D is not modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Level {
    Pgd,
    Pud,
    Pmd,
    Pte,
}

impl Level {
    pub fn child(self) -> Option<Level> {
        match self {
            Level::Pgd => Some(Level::Pud),
            Level::Pud => Some(Level::Pmd),
            Level::Pmd => Some(Level::Pte),
            Level::Pte => None,
        }
    }

    /// Bit offset of this level's index within a virtual page number.
    pub fn shift(self) -> u32 {
        match self {
            Level::Pgd => 27,
            Level::Pud => 18,
            Level::Pmd => 9,
            Level::Pte => 0,
        }
    }

    pub fn index(self, vpage: u64) -> usize {
        ((vpage >> self.shift()) & (ENTRIES as u64 - 1)) as usize
    }
}

/// A PGD, PUD or PMD entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirEntry {
    pub target: Option<TableId>,
    /// At PMD level under an async fork, `false` also means "this PMD and
    /// its PTE table have not been copied to the child yet".
    pub writable: bool,
}

impl Default for DirEntry {
    fn default() -> Self {
        Self { target: None, writable: true }
    }
}

const PRESENT: u8 = 1;
const WRITABLE: u8 = 2;
const NO_PHYS: u32 = u32::MAX;

/// A leaf entry. `phys` set with `present == false` is a translation that
/// is temporarily invalid (e.g. mid-migration).
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Pte {
    phys: u32,
    flags: u8,
}

impl Default for Pte {
    fn default() -> Self {
        Self::EMPTY
    }
}

impl std::fmt::Debug for Pte {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.phys() {
            None => write!(f, "Pte(none)"),
            Some(p) => write!(
                f,
                "Pte({}{}{})",
                p.0,
                if self.present() { "" } else { " !P" },
                if self.writable() { " W" } else { "" }
            ),
        }
    }
}

impl Pte {
    pub const EMPTY: Pte = Pte { phys: NO_PHYS, flags: 0 };

    pub fn mapped(phys: PhysPageId, writable: bool) -> Self {
        Pte { phys: phys.0, flags: PRESENT | if writable { WRITABLE } else { 0 } }
    }

    pub fn phys(&self) -> Option<PhysPageId> {
        (self.phys != NO_PHYS).then_some(PhysPageId(self.phys))
    }

    pub fn is_mapped(&self) -> bool {
        self.phys != NO_PHYS
    }

    pub fn present(&self) -> bool {
        self.flags & PRESENT != 0
    }

    pub fn writable(&self) -> bool {
        self.flags & WRITABLE != 0
    }

    pub fn set_present(&mut self, on: bool) {
        if on {
            self.flags |= PRESENT;
        } else {
            self.flags &= !PRESENT;
        }
    }

    pub fn set_writable(&mut self, on: bool) {
        if on {
            self.flags |= WRITABLE;
        } else {
            self.flags &= !WRITABLE;
        }
    }

    pub fn set_phys(&mut self, phys: PhysPageId) {
        self.phys = phys.0;
    }
}

#[derive(Debug, Clone)]
pub enum Body {
    Dir(Box<[DirEntry; ENTRIES]>),
    Leaf(Box<[Pte; ENTRIES]>),
}

#[derive(Debug, Clone)]
pub struct EntryTable {
    pub level: Level,
    pub body: Body,
    /// Number of PMD entries (across processes) targeting this table.
    /// Only PTE tables are ever shared.
    pub sharers: u32,
}

impl EntryTable {
    fn new(level: Level) -> Self {
        let body = match level {
            Level::Pte => Body::Leaf(Box::new([Pte::EMPTY; ENTRIES])),
            _ => Body::Dir(Box::new([DirEntry::default(); ENTRIES])),
        };
        Self { level, body, sharers: 1 }
    }

    pub fn dir(&self) -> &[DirEntry; ENTRIES] {
        match &self.body {
            Body::Dir(d) => d,
            Body::Leaf(_) => panic!("{:?} table has no directory entries", self.level),
        }
    }

    pub fn dir_mut(&mut self) -> &mut [DirEntry; ENTRIES] {
        match &mut self.body {
            Body::Dir(d) => d,
            Body::Leaf(_) => panic!("{:?} table has no directory entries", self.level),
        }
    }

    pub fn leaf(&self) -> &[Pte; ENTRIES] {
        match &self.body {
            Body::Leaf(l) => l,
            Body::Dir(_) => panic!("{:?} table has no leaf entries", self.level),
        }
    }

    pub fn leaf_mut(&mut self) -> &mut [Pte; ENTRIES] {
        match &mut self.body {
            Body::Leaf(l) => l,
            Body::Dir(_) => panic!("{:?} table has no leaf entries", self.level),
        }
    }

    pub fn mapped_ptes(&self) -> u64 {
        self.leaf().iter().filter(|p| p.is_mapped()).count() as u64
    }
}

/// Store of every entry table in the machine, keyed by [`TableId`].
///
/// Tables live here rather than inside a process so PTE tables can be
/// shared between processes.
#[derive(Debug, Clone, Default)]
pub struct TableArena {
    slots: Vec<Option<EntryTable>>,
    free: Vec<TableId>,
    live: usize,
}

impl TableArena {
    pub fn alloc(&mut self, level: Level) -> TableId {
        let t = EntryTable::new(level);
        self.live += 1;
        match self.free.pop() {
            Some(id) => {
                self.slots[id.0 as usize] = Some(t);
                id
            }
            None => {
                self.slots.push(Some(t));
                TableId(self.slots.len() as u32 - 1)
            }
        }
    }

    pub fn alloc_copy(&mut self, src: TableId) -> TableId {
        let mut t = self.get(src).clone();
        t.sharers = 1;
        self.live += 1;
        match self.free.pop() {
            Some(id) => {
                self.slots[id.0 as usize] = Some(t);
                id
            }
            None => {
                self.slots.push(Some(t));
                TableId(self.slots.len() as u32 - 1)
            }
        }
    }

    pub fn release(&mut self, id: TableId) {
        let slot = &mut self.slots[id.0 as usize];
        assert!(slot.is_some(), "double free of table {}", id.0);
        *slot = None;
        self.free.push(id);
        self.live -= 1;
    }

    pub fn get(&self, id: TableId) -> &EntryTable {
        self.slots[id.0 as usize].as_ref().expect("live table")
    }

    pub fn get_mut(&mut self, id: TableId) -> &mut EntryTable {
        self.slots[id.0 as usize].as_mut().expect("live table")
    }

    pub fn live(&self) -> usize {
        self.live
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_have_512_slots() {
        let mut a = TableArena::default();
        for level in [Level::Pgd, Level::Pud, Level::Pmd] {
            let t = a.alloc(level);
            assert_eq!(a.get(t).dir().len(), 512);
        }
        let t = a.alloc(Level::Pte);
        assert_eq!(a.get(t).leaf().len(), 512);
    }

    #[test]
    fn index_math() {
        let v = (3u64 << 27) | (5 << 18) | (7 << 9) | 11;
        assert_eq!(Level::Pgd.index(v), 3);
        assert_eq!(Level::Pud.index(v), 5);
        assert_eq!(Level::Pmd.index(v), 7);
        assert_eq!(Level::Pte.index(v), 11);
    }

    #[test]
    fn pte_flags() {
        let mut p = Pte::mapped(PhysPageId(9), true);
        assert!(p.present() && p.writable());
        p.set_present(false);
        p.set_writable(false);
        assert_eq!(p.phys(), Some(PhysPageId(9)));
        assert!(!p.present() && !p.writable());
        assert_eq!(Pte::EMPTY.phys(), None);
    }

    #[test]
    fn released_ids_are_reused() {
        let mut a = TableArena::default();
        let t = a.alloc(Level::Pte);
        a.release(t);
        assert_eq!(a.alloc(Level::Pmd), t);
        assert_eq!(a.live(), 1);
    }
}
