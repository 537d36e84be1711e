use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::clock::{CostModel, Nanos};
use crate::engines::EngineKind;
use crate::error::ConfigError;
use crate::vm::{parse_bytes, AllocSite, PAGE_BYTES};
use crate::workload::WorkloadSpec;

/// A byte count written either as an integer or as a string such as
/// `"8GiB"` or `"512MiB"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ByteSize(pub u64);

impl<'de> Deserialize<'de> for ByteSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ok(ByteSize(n)),
            Raw::Str(s) => {
                parse_bytes(&s).map(ByteSize).ok_or_else(|| serde::de::Error::custom(format!("bad byte size {s:?}")))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    /// Page migration (the OS moves the page to a new frame).
    Migrate,
    /// Reclaim of one page under memory pressure.
    Oom,
    /// `munmap` of `pages` pages.
    Unmap,
    /// `mprotect` read-only of `pages` pages.
    Protect,
    /// Split of the VMA containing the address at that address.
    Split,
    /// Merge of the two VMAs meeting at the address.
    Merge,
    /// Kernel pin of the page for writing.
    GetUserPage,
    /// With `key`: the parent SETs that key to `value` bytes. Otherwise a
    /// one-byte write of `value` at offset 0 of the page.
    Write,
    /// A read of the page.
    Read,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Migrate => "migrate",
            OpKind::Oom => "oom",
            OpKind::Unmap => "unmap",
            OpKind::Protect => "protect",
            OpKind::Split => "split",
            OpKind::Merge => "merge",
            OpKind::GetUserPage => "get_user_page",
            OpKind::Write => "write",
            OpKind::Read => "read",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpTarget {
    #[default]
    Parent,
    /// The child of the most recent snapshot that is still alive.
    Child,
}

/// An OS-level operation injected at a fixed time. The address is given by
/// exactly one of `key` (the page holding that key), `vpage`, or
/// `scratch_page` (an offset into the scratch area).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpSpec {
    pub at_ns: Nanos,
    pub kind: OpKind,
    #[serde(default)]
    pub target: OpTarget,
    pub key: Option<u64>,
    pub vpage: Option<u64>,
    pub scratch_page: Option<u64>,
    #[serde(default = "one")]
    pub pages: u64,
    /// Byte written (repeated to the value size for key writes).
    #[serde(default)]
    pub value: u8,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorPhase {
    /// The fork call itself (parent marking or copying tables).
    Parent,
    /// An async-fork child worker.
    Child,
    /// A proactive synchronization.
    Sync,
}

impl ErrorPhase {
    pub fn site(self) -> AllocSite {
        match self {
            ErrorPhase::Parent => AllocSite::Fork,
            ErrorPhase::Child => AllocSite::ChildCopy,
            ErrorPhase::Sync => AllocSite::Sync,
        }
    }
}

/// Makes the `nth` allocation at `phase` after `at_ns` fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorSpec {
    pub phase: ErrorPhase,
    #[serde(default = "one")]
    pub nth: u64,
    #[serde(default)]
    pub at_ns: Nanos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub engine: EngineKind,
    /// Async-fork child copy threads.
    pub workers: usize,
    /// Size of the key-value heap.
    pub instance_bytes: ByteSize,
    /// Number of equal VMAs the heap is split into.
    pub vmas: u64,
    /// Size of an extra VMA after the heap, fully mapped with zero pages.
    pub scratch_bytes: ByteSize,
    /// Map every heap page up front instead of on first write.
    pub prefault: bool,
    /// Bytes of simulated content per page.
    pub page_payload_bytes: usize,
    /// Physical frame budget; defaults to room for a full copy of memory.
    pub phys_capacity_pages: Option<u64>,
    /// An ODF leak detected by the coherence audit is not a failure.
    pub expected_leak: bool,
    /// Compare every dump against the fork-instant oracle.
    pub verify: bool,
    /// Snapshot (BGSAVE) trigger times.
    pub snapshots: Vec<Nanos>,
    pub output_dir: Option<PathBuf>,
    pub trace: bool,
    pub throughput_window_ns: Nanos,
    pub cost: CostModel,
    pub workload: WorkloadSpec,
    pub ops: Vec<OpSpec>,
    pub errors: Vec<ErrorSpec>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            engine: EngineKind::Async,
            workers: 8,
            instance_bytes: ByteSize(64 << 20),
            vmas: 8,
            scratch_bytes: ByteSize(0),
            prefault: false,
            page_payload_bytes: 64,
            phys_capacity_pages: None,
            expected_leak: false,
            verify: true,
            snapshots: Vec::new(),
            output_dir: None,
            trace: false,
            throughput_window_ns: 50_000_000,
            cost: CostModel::default(),
            workload: WorkloadSpec::default(),
            ops: Vec::new(),
            errors: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut c = Self::from_toml(&text)?;
        if let Some(dir) = &c.output_dir {
            if dir.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                c.output_dir = Some(base.join(dir));
            }
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn heap_pages(&self) -> u64 {
        self.instance_bytes.0 / PAGE_BYTES
    }

    pub fn scratch_pages(&self) -> u64 {
        self.scratch_bytes.0 / PAGE_BYTES
    }

    /// Heap VMA ranges followed by the scratch range (if any), in pages.
    pub fn layout(&self) -> (Vec<std::ops::Range<u64>>, Option<std::ops::Range<u64>>) {
        let n = self.heap_pages();
        let k = self.vmas.max(1).min(n.max(1));
        let per = n / k;
        let heap: Vec<_> = (0..k)
            .map(|i| {
                let end = if i + 1 == k { n } else { (i + 1) * per };
                i * per..end
            })
            .filter(|r| !r.is_empty())
            .collect();
        let scratch = (self.scratch_pages() > 0).then(|| {
            let start = n.div_ceil(512) * 512 + 512;
            start..start + self.scratch_pages()
        });
        (heap, scratch)
    }

    pub fn capacity_pages(&self) -> u64 {
        self.phys_capacity_pages.unwrap_or_else(|| {
            let pages = self.heap_pages() + self.scratch_pages();
            2 * pages + pages / 128 + 4096
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.cost.validate()?;
        if !self.instance_bytes.0.is_multiple_of(PAGE_BYTES) || !self.scratch_bytes.0.is_multiple_of(PAGE_BYTES) {
            return bad("instance_bytes and scratch_bytes must be multiples of 4096".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.vmas == 0 {
            return bad("vmas must be at least 1".into());
        }
        if self.throughput_window_ns == 0 {
            return bad("throughput_window_ns must be positive".into());
        }
        if self.workload.total_queries > 0 || self.workload.preload > 0 {
            self.workload.validate()?;
            if crate::kv::HEADER_BYTES + self.workload.value_bytes > self.page_payload_bytes {
                return bad(format!(
                    "a {}-byte value needs page_payload_bytes >= {}",
                    self.workload.value_bytes,
                    crate::kv::HEADER_BYTES + self.workload.value_bytes
                ));
            }
        }
        for op in &self.ops {
            let given =
                [op.key.is_some(), op.vpage.is_some(), op.scratch_page.is_some()].iter().filter(|b| **b).count();
            if given != 1 {
                return bad(format!("op at {} ns needs exactly one of key, vpage, scratch_page", op.at_ns));
            }
            if op.scratch_page.is_some() && self.scratch_pages() == 0 {
                return bad("scratch_page used without scratch_bytes".into());
            }
            if op.pages == 0 {
                return bad("op pages must be positive".into());
            }
        }
        if self.errors.iter().any(|e| e.nth == 0) {
            return bad("error nth counts from 1".into());
        }
        Ok(())
    }
}
