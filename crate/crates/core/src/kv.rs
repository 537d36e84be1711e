//! A toy key-value store whose records live in simulated pages, so every
//! SET goes through the memory model's write path.
//!
//! Page layout is self-describing: a page holds back-to-back records of
//! `tag:u8 key:u64 cap:u16 len:u16 value[cap]` (little endian), ended by a
//! zero tag or the end of the payload. Records never straddle pages.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engines::CheckpointHook;
use crate::vm::{FaultOutcome, Pid, VmError, World};

pub const HEADER_BYTES: usize = 13;

const TAG_EMPTY: u8 = 0;
const TAG_LIVE: u8 = 1;
const TAG_DEAD: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KvError {
    #[error("key {0} not found")]
    KeyNotFound(u64),
    #[error("key {key} is outside the key space of {key_space}")]
    KeyOutOfRange { key: u64, key_space: u64 },
    #[error("value of {len} bytes does not fit a {payload}-byte page")]
    ValueTooLarge { len: usize, payload: usize },
    #[error("heap exhausted")]
    HeapFull,
    #[error(transparent)]
    Vm(#[from] VmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    vpage: u64,
    offset: u16,
    cap: u16,
}

const NO_SLOT: Slot = Slot { vpage: u64::MAX, offset: 0, cap: 0 };

fn encode(key: u64, cap: usize, value: &[u8], out: &mut Vec<u8>) {
    out.clear();
    out.push(TAG_LIVE);
    out.extend_from_slice(&key.to_le_bytes());
    out.extend_from_slice(&(cap as u16).to_le_bytes());
    out.extend_from_slice(&(value.len() as u16).to_le_bytes());
    out.extend_from_slice(value);
}

/// Live records of one page payload, in layout order.
pub fn parse_page(page: &[u8]) -> impl Iterator<Item = (u64, &[u8])> + '_ {
    let mut off = 0usize;
    std::iter::from_fn(move || loop {
        if off + HEADER_BYTES > page.len() || page[off] == TAG_EMPTY {
            return None;
        }
        let tag = page[off];
        let key = u64::from_le_bytes(page[off + 1..off + 9].try_into().expect("8 bytes"));
        let cap = u16::from_le_bytes([page[off + 9], page[off + 10]]) as usize;
        let len = u16::from_le_bytes([page[off + 11], page[off + 12]]) as usize;
        let body = off + HEADER_BYTES;
        if body + cap > page.len() || len > cap {
            return None;
        }
        off = body + cap;
        if tag == TAG_LIVE {
            return Some((key, &page[body..body + len]));
        }
    })
}

/// Key-value store of one process. Keys are dense in `[0, key_space)`.
#[derive(Debug, Clone)]
pub struct KvStore {
    pid: Pid,
    heap: Vec<Range<u64>>,
    cursor: (usize, u64, usize),
    index: Vec<Slot>,
    payload: usize,
    live: u64,
    scratch: Vec<u8>,
}

impl KvStore {
    pub fn new(pid: Pid, heap: Vec<Range<u64>>, key_space: u64, payload_bytes: usize) -> Self {
        let start = heap.first().map_or(0, |r| r.start);
        Self {
            pid,
            heap,
            cursor: (0, start, 0),
            index: vec![NO_SLOT; key_space as usize],
            payload: payload_bytes,
            live: 0,
            scratch: Vec::new(),
        }
    }

    pub fn pid(&self) -> Pid {
        self.pid
    }

    pub fn heap(&self) -> &[Range<u64>] {
        &self.heap
    }

    pub fn len(&self) -> u64 {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn key_space(&self) -> u64 {
        self.index.len() as u64
    }

    fn slot(&self, key: u64) -> Result<Option<Slot>, KvError> {
        let s = *self.index.get(key as usize).ok_or(KvError::KeyOutOfRange { key, key_space: self.key_space() })?;
        Ok((s != NO_SLOT).then_some(s))
    }

    fn check_value(&self, len: usize) -> Result<(), KvError> {
        if HEADER_BYTES + len > self.payload || len > u16::MAX as usize {
            return Err(KvError::ValueTooLarge { len, payload: self.payload });
        }
        Ok(())
    }

    /// Reserves `bytes` at the bump cursor, moving to the next page (or
    /// VMA) when the current one cannot hold them.
    fn bump(&mut self, bytes: usize) -> Result<(u64, usize), KvError> {
        loop {
            let (vi, vpage, off) = self.cursor;
            let r = self.heap.get(vi).ok_or(KvError::HeapFull)?;
            if vpage >= r.end {
                let next = vi + 1;
                self.cursor = (next, self.heap.get(next).map_or(0, |r| r.start), 0);
                continue;
            }
            if off + bytes <= self.payload {
                self.cursor = (vi, vpage, off + bytes);
                return Ok((vpage, off));
            }
            self.cursor = (vi, vpage + 1, 0);
        }
    }

    /// Fills fresh heap pages with `count` keys from `keys.start`, each
    /// holding a `value_len`-byte value produced by `value`. Much faster than
    /// `count` SETs; the pages must not be mapped yet.
    pub fn preload(
        &mut self,
        world: &mut World,
        keys: Range<u64>,
        value_len: usize,
        value: &mut dyn FnMut(u64, &mut [u8]),
    ) -> Result<(), KvError> {
        self.check_value(value_len)?;
        if keys.end > self.key_space() {
            return Err(KvError::KeyOutOfRange { key: keys.end - 1, key_space: self.key_space() });
        }
        let rec = HEADER_BYTES + value_len;
        let per_page = (self.payload / rec) as u64;
        let mut next_key = keys.start;
        while next_key < keys.end {
            if self.cursor.2 != 0 && self.cursor.2 + rec > self.payload {
                self.cursor = (self.cursor.0, self.cursor.1 + 1, 0);
            }
            if self.cursor.2 != 0 {
                // finish the partly used page through the normal path
                let mut buf = vec![0; value_len];
                value(next_key, &mut buf);
                self.set(world, next_key, &buf, &mut crate::engines::NoHooks)?;
                next_key += 1;
                continue;
            }
            let (vi, vpage, _) = self.cursor;
            let r = self.heap.get(vi).ok_or(KvError::HeapFull)?.clone();
            if vpage >= r.end {
                self.cursor = (vi + 1, self.heap.get(vi + 1).map_or(0, |r| r.start), 0);
                continue;
            }
            let pages = (keys.end - next_key).div_ceil(per_page).min(r.end - vpage);
            let first = next_key;
            let end_key = keys.end;
            world.map_range(self.pid, vpage..vpage + pages, &mut |v, buf| {
                let k0 = first + (v - vpage) * per_page;
                let mut off = 0;
                let mut head = [TAG_LIVE; HEADER_BYTES];
                head[9..11].copy_from_slice(&(value_len as u16).to_le_bytes());
                head[11..13].copy_from_slice(&(value_len as u16).to_le_bytes());
                for k in k0..(k0 + per_page).min(end_key) {
                    head[1..9].copy_from_slice(&k.to_le_bytes());
                    let r = &mut buf[off..off + rec];
                    r[..HEADER_BYTES].copy_from_slice(&head);
                    value(k, &mut r[HEADER_BYTES..]);
                    off += rec;
                }
            })?;
            for i in 0..pages * per_page {
                let k = first + i;
                if k >= end_key {
                    break;
                }
                let offset = (i % per_page) as usize * rec;
                self.index[k as usize] =
                    Slot { vpage: vpage + i / per_page, offset: offset as u16, cap: value_len as u16 };
                self.live += 1;
            }
            let used = (end_key - first).min(pages * per_page);
            let last_fill = used - (pages - 1) * per_page;
            let last_page = vpage + pages - 1;
            self.cursor = (vi, last_page, last_fill as usize * rec);
            next_key = first + used;
        }
        Ok(())
    }

    /// Stores `value` under `key`, in place when it fits the old record.
    pub fn set(
        &mut self,
        world: &mut World,
        key: u64,
        value: &[u8],
        hooks: &mut dyn CheckpointHook,
    ) -> Result<FaultOutcome, KvError> {
        self.check_value(value.len())?;
        let old = self.slot(key)?;
        let mut buf = std::mem::take(&mut self.scratch);
        let result = (|| {
            if let Some(s) = old {
                if value.len() <= s.cap as usize {
                    encode(key, s.cap as usize, value, &mut buf);
                    return Ok(world.write(self.pid, s.vpage, s.offset as usize, &buf, hooks)?);
                }
            }
            let (vpage, offset) = self.bump(HEADER_BYTES + value.len())?;
            encode(key, value.len(), value, &mut buf);
            let out = world.write(self.pid, vpage, offset, &buf, hooks)?;
            if let Some(s) = old {
                world.write(self.pid, s.vpage, s.offset as usize, &[TAG_DEAD], hooks)?;
            } else {
                self.live += 1;
            }
            self.index[key as usize] = Slot { vpage, offset: offset as u16, cap: value.len() as u16 };
            Ok(out)
        })();
        self.scratch = buf;
        result
    }

    /// Reads `key` through the owner's TLB.
    pub fn get(&self, world: &mut World, key: u64) -> Result<Vec<u8>, KvError> {
        let s = self.slot(key)?.ok_or(KvError::KeyNotFound(key))?;
        let page = world.read(self.pid, s.vpage)?;
        record_at(page, s.offset as usize).ok_or(KvError::KeyNotFound(key))
    }

    /// Reference snapshot: every live record of the heap read straight
    /// from the owner's current page table, bypassing TLBs and the cost
    /// model.
    pub fn oracle(&self, world: &World) -> Dump {
        let mut b = DumpBuilder::default();
        for r in &self.heap {
            for v in r.clone() {
                let Some(f) = world.pte(self.pid, v).and_then(|p| p.phys()) else { continue };
                for (k, val) in parse_page(world.phys.payload(f)) {
                    b.push(k, val);
                }
            }
        }
        b.finish()
    }

    /// Virtual pages that hold at least one live record.
    pub fn pages_in_use(&self) -> std::collections::BTreeSet<u64> {
        self.index.iter().filter(|s| **s != NO_SLOT).map(|s| s.vpage).collect()
    }

    /// The page holding `key`, if present.
    pub fn page_of(&self, key: u64) -> Option<u64> {
        self.slot(key).ok().flatten().map(|s| s.vpage)
    }
}

fn record_at(page: &[u8], off: usize) -> Option<Vec<u8>> {
    parse_page(&page[off..]).next().map(|(_, v)| v.to_vec())
}

/// What a snapshot child writes out: every live record reachable through
/// the child's own translations (TLB first, then its table), scanned page
/// by page over `heap`.
pub fn snapshot_dump(world: &World, child: Pid, heap: &[Range<u64>]) -> Dump {
    let mut b = DumpBuilder::default();
    for r in heap {
        for v in r.clone() {
            let Ok(page) = world.peek(child, v) else { continue };
            for (k, val) in parse_page(page) {
                b.push(k, val);
            }
        }
    }
    b.finish()
}

#[derive(Debug, Default)]
struct DumpBuilder {
    keys: Vec<u64>,
    ends: Vec<u32>,
    bytes: Vec<u8>,
}

impl DumpBuilder {
    fn push(&mut self, key: u64, value: &[u8]) {
        self.keys.push(key);
        self.bytes.extend_from_slice(value);
        self.ends.push(self.bytes.len() as u32);
    }

    fn finish(self) -> Dump {
        let n = self.keys.len();
        if self.keys.windows(2).all(|w| w[0] < w[1]) {
            return Dump { keys: self.keys, ends: self.ends, bytes: self.bytes };
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| self.keys[i]);
        let mut out = DumpBuilder::default();
        for i in order {
            let lo = if i == 0 { 0 } else { self.ends[i - 1] as usize };
            out.push(self.keys[i], &self.bytes[lo..self.ends[i] as usize]);
        }
        Dump { keys: out.keys, ends: out.ends, bytes: out.bytes }
    }
}

/// A canonical (key-sorted) key→value map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dump {
    keys: Vec<u64>,
    ends: Vec<u32>,
    bytes: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct JsonEntry {
    key: u64,
    value: String,
}

impl Dump {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (u64, &'a [u8])>) -> Self {
        let mut b = DumpBuilder::default();
        for (k, v) in pairs {
            b.push(k, v);
        }
        b.finish()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn value(&self, i: usize) -> &[u8] {
        let lo = if i == 0 { 0 } else { self.ends[i - 1] as usize };
        &self.bytes[lo..self.ends[i] as usize]
    }

    pub fn get(&self, key: u64) -> Option<&[u8]> {
        self.keys.binary_search(&key).ok().map(|i| self.value(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[u8])> + '_ {
        self.keys.iter().enumerate().map(|(i, &k)| (k, self.value(i)))
    }

    /// Keys whose presence or value differ, ascending.
    pub fn diff(&self, other: &Dump) -> Vec<u64> {
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.len() || j < other.len() {
            match (self.keys.get(i), other.keys.get(j)) {
                (Some(&a), Some(&b)) if a == b => {
                    if self.value(i) != other.value(j) {
                        out.push(a);
                    }
                    i += 1;
                    j += 1;
                }
                (Some(&a), Some(&b)) if a < b => {
                    out.push(a);
                    i += 1;
                }
                (Some(_), Some(&b)) => {
                    out.push(b);
                    j += 1;
                }
                (Some(&a), None) => {
                    out.push(a);
                    i += 1;
                }
                (None, Some(&b)) => {
                    out.push(b);
                    j += 1;
                }
                (None, None) => break,
            }
        }
        out
    }

    /// `u64 count`, then per entry `u64 key, u32 len, value` (little endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.len() * 12 + self.bytes.len());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (k, v) in self.iter() {
            out.extend_from_slice(&k.to_le_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v);
        }
        out
    }

    pub fn from_bytes(mut b: &[u8]) -> Option<Self> {
        let mut take = |n: usize| -> Option<&[u8]> {
            let (head, tail) = (b.get(..n)?, b.get(n..)?);
            b = tail;
            Some(head)
        };
        let n = u64::from_le_bytes(take(8)?.try_into().ok()?);
        let mut out = DumpBuilder::default();
        for _ in 0..n {
            let k = u64::from_le_bytes(take(8)?.try_into().ok()?);
            let len = u32::from_le_bytes(take(4)?.try_into().ok()?) as usize;
            out.push(k, take(len)?);
        }
        Some(out.finish())
    }

    /// `[{"key": k, "value": "<hex>"}, ...]`
    pub fn to_json(&self) -> String {
        let entries: Vec<JsonEntry> = self.iter().map(|(key, v)| JsonEntry { key, value: hex::encode(v) }).collect();
        serde_json::to_string(&entries).expect("dump serializes")
    }

    pub fn from_json(s: &str) -> Option<Self> {
        let entries: Vec<JsonEntry> = serde_json::from_str(s).ok()?;
        let mut b = DumpBuilder::default();
        for e in entries {
            b.push(e.key, &hex::decode(e.value).ok()?);
        }
        Some(b.finish())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::CostModel;
    use crate::engines::{fork_default, NoHooks};

    fn store(pages: u64, payload: usize, keys: u64) -> (World, KvStore) {
        let mut w = World::new(CostModel::default(), payload, 1 << 16);
        let p = w.spawn(&[0..pages]).unwrap();
        (w, KvStore::new(p, vec![0..pages], keys, payload))
    }

    #[test]
    fn set_then_get() {
        let (mut w, mut kv) = store(16, 64, 100);
        kv.set(&mut w, 7, b"seven", &mut NoHooks).unwrap();
        assert_eq!(kv.get(&mut w, 7).unwrap(), b"seven");
        assert_eq!(kv.get(&mut w, 8), Err(KvError::KeyNotFound(8)));
    }

    #[test]
    fn growing_value_relocates() {
        let (mut w, mut kv) = store(16, 64, 100);
        kv.set(&mut w, 1, b"ab", &mut NoHooks).unwrap();
        kv.set(&mut w, 1, b"abcdef", &mut NoHooks).unwrap();
        assert_eq!(kv.get(&mut w, 1).unwrap(), b"abcdef");
        let d = kv.oracle(&w);
        assert_eq!(d.len(), 1);
        assert_eq!(snapshot_dump(&w, kv.pid(), kv.heap()), d);
    }

    #[test]
    fn records_never_straddle_pages() {
        let (mut w, mut kv) = store(16, 40, 100);
        for k in 0..10 {
            kv.set(&mut w, k, &[k as u8; 20], &mut NoHooks).unwrap();
        }
        // 33-byte records, one per 40-byte page
        assert_eq!(w.mapped_pages(kv.pid()), 10);
    }

    #[test]
    fn preload_matches_individual_sets() {
        let (mut w1, mut a) = store(64, 64, 100);
        let (mut w2, mut b) = store(64, 64, 100);
        let val = |k: u64, buf: &mut [u8]| buf.fill(k as u8);
        a.preload(&mut w1, 0..37, 10, &mut |k, b| val(k, b)).unwrap();
        for k in 0..37 {
            let mut v = [0u8; 10];
            val(k, &mut v);
            b.set(&mut w2, k, &v, &mut NoHooks).unwrap();
        }
        assert_eq!(a.oracle(&w1), b.oracle(&w2));
        assert_eq!(w1.mapped_pages(a.pid()), w2.mapped_pages(b.pid()));
        a.set(&mut w1, 50, b"x", &mut NoHooks).unwrap();
        b.set(&mut w2, 50, b"x", &mut NoHooks).unwrap();
        assert_eq!(a.page_of(50), b.page_of(50));
    }

    #[test]
    fn dump_after_fork_keeps_old_value() {
        let (mut w, mut kv) = store(16, 64, 10);
        kv.set(&mut w, 0, b"v0", &mut NoHooks).unwrap();
        kv.set(&mut w, 1, b"v1", &mut NoHooks).unwrap();
        let oracle = kv.oracle(&w);
        let child = fork_default(&mut w, kv.pid()).unwrap().child;
        kv.set(&mut w, 0, b"v9", &mut NoHooks).unwrap();
        let dump = snapshot_dump(&w, child, kv.heap());
        assert_eq!(dump, oracle);
        assert_eq!(dump.get(0), Some(&b"v0"[..]));
        assert_eq!(kv.oracle(&w).diff(&dump), vec![0]);
    }

    #[test]
    fn empty_store_dumps_empty() {
        let (w, kv) = store(4, 64, 10);
        assert!(kv.oracle(&w).is_empty());
        assert!(snapshot_dump(&w, kv.pid(), kv.heap()).is_empty());
    }

    #[test]
    fn serialization_round_trips() {
        let d = Dump::from_pairs([(3, &b"c"[..]), (1, &b"a"[..]), (2, &b""[..])]);
        assert_eq!(d.iter().map(|(k, _)| k).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(Dump::from_bytes(&d.to_bytes()), Some(d.clone()));
        assert_eq!(Dump::from_json(&d.to_json()), Some(d.clone()));
        assert_eq!(d.to_json(), r#"[{"key":1,"value":"61"},{"key":2,"value":""},{"key":3,"value":"63"}]"#);
    }
}
