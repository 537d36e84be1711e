use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::ScenarioConfig;
use crate::clock::{Cause, Nanos, Trace};
use crate::engines::{EngineKind, Phase, RollbackCase};
use crate::error::SimError;
use crate::metrics::{Log2Histogram, Metrics, QueryClass};
use crate::vm::{Pid, WorldStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Every verified dump equals its oracle.
    Pass,
    /// An ODF dump differs from its oracle and the coherence audit caught
    /// the stale translation responsible.
    LeakDetected,
    /// A dump differs from its oracle with no excuse.
    Fail,
    /// Nothing was verified.
    Unchecked,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::LeakDetected => "leak_detected",
            Verdict::Fail => "fail",
            Verdict::Unchecked => "unchecked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RollbackReport {
    pub at_ns: Nanos,
    pub case: RollbackCase,
    pub restored_pmds: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionReport {
    pub id: usize,
    pub engine: EngineKind,
    pub phase: Phase,
    pub child: Option<Pid>,
    /// The child had exited (or never existed) when the run ended.
    pub child_exited: bool,
    pub fork_start_ns: Nanos,
    pub fork_return_ns: Nanos,
    pub fork_kernel_ns: Nanos,
    pub copy_end_ns: Option<Nanos>,
    /// Child copy duration (Async only).
    pub copy_span_ns: Option<Nanos>,
    pub persist_end_ns: Option<Nanos>,
    pub ended_ns: Option<Nanos>,
    pub child_copies: u64,
    pub syncs: u64,
    pub pmds_scanned: u64,
    pub exclusivity_violations: u64,
    pub rollbacks: Vec<RollbackReport>,
    pub dump_entries: Option<usize>,
    pub kv_mismatches: Option<usize>,
    pub memory_mismatches: Option<usize>,
    /// First few keys whose dumped value differs from the oracle.
    pub mismatched_keys: Vec<u64>,
}

impl SessionReport {
    pub fn consistent(&self) -> Option<bool> {
        Some(self.kv_mismatches? == 0 && self.memory_mismatches? == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ClassSummary {
    pub count: usize,
    pub p50_ns: Option<Nanos>,
    pub p99_ns: Option<Nanos>,
    pub max_ns: Option<Nanos>,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ScenarioConfig,
    pub metrics: Metrics,
    pub sessions: Vec<SessionReport>,
    pub trace: Trace,
    pub world: WorldStats,
    /// Distinct `(pid, vpage)` pairs whose TLB entry disagreed with a walk.
    pub coherence_violations: Vec<(Pid, u64)>,
    pub ops_failed: u64,
    pub parent_wp_pmds: usize,
    pub refcount_mismatches: Option<usize>,
    pub structural_error: Option<String>,
    pub end_ns: Nanos,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub engine: EngineKind,
    pub seed: u64,
    pub end_ns: Nanos,
    pub queries: BTreeMap<&'static str, ClassSummary>,
    pub out_of_service_ns: BTreeMap<&'static str, Nanos>,
    pub interruptions: BTreeMap<&'static str, usize>,
    /// `(lo_us, hi_us, count)` for each non-empty bucket.
    pub interruption_histogram: Vec<(u64, u64, u64)>,
    pub consistency: Verdict,
    pub coherence_violations: usize,
    pub sessions: Vec<SessionReport>,
    pub parent_wp_pmds: usize,
    pub ops_failed: u64,
    pub refcount_mismatches: Option<usize>,
    pub structural_error: Option<String>,
    pub world: WorldStats,
}

impl RunOutput {
    pub fn verdict(&self) -> Verdict {
        let mut checked = false;
        let mut leak = false;
        for s in &self.sessions {
            match s.consistent() {
                None => {}
                Some(true) => checked = true,
                Some(false) => {
                    if s.engine == EngineKind::Odf && !self.coherence_violations.is_empty() {
                        leak = true;
                        checked = true;
                    } else {
                        return Verdict::Fail;
                    }
                }
            }
        }
        match (checked, leak) {
            (_, true) => Verdict::LeakDetected,
            (true, false) => Verdict::Pass,
            (false, false) => Verdict::Unchecked,
        }
    }

    /// 0 on success, 2 when a snapshot came out inconsistent.
    pub fn exit_code(&self) -> i32 {
        match self.verdict() {
            Verdict::Fail => 2,
            Verdict::LeakDetected if !self.config.expected_leak => 2,
            _ => 0,
        }
    }

    pub fn class_summary(&self, class: QueryClass) -> ClassSummary {
        let sorted = self.metrics.sorted_latencies(class);
        let p = |q| crate::metrics::nearest_rank(&sorted, q);
        ClassSummary { count: sorted.len(), p50_ns: p(0.5), p99_ns: p(0.99), max_ns: p(1.0) }
    }

    /// Kernel episodes that copied page tables after fork returned.
    pub fn table_interruptions(&self) -> usize {
        self.metrics.interruptions.iter().filter(|e| e.cause.is_table_interruption()).count()
    }

    pub fn histogram(&self) -> Log2Histogram {
        self.metrics.interruption_histogram()
    }

    pub fn summary(&self) -> Summary {
        let mut queries = BTreeMap::new();
        for c in QueryClass::ALL {
            queries.insert(c.as_str(), self.class_summary(c));
        }
        let mut oos = BTreeMap::new();
        let mut counts = BTreeMap::new();
        oos.insert("total", self.metrics.out_of_service_total(None));
        counts.insert("total", self.metrics.interruption_count(None));
        counts.insert("table_copies", self.table_interruptions());
        for c in Cause::ALL {
            oos.insert(c.as_str(), self.metrics.out_of_service_total(Some(c)));
            counts.insert(c.as_str(), self.metrics.interruption_count(Some(c)));
        }
        Summary {
            engine: self.config.engine,
            seed: self.config.seed,
            end_ns: self.end_ns,
            queries,
            out_of_service_ns: oos,
            interruptions: counts,
            interruption_histogram: self.histogram().buckets(),
            consistency: self.verdict(),
            coherence_violations: self.coherence_violations.len(),
            sessions: self.sessions.clone(),
            parent_wp_pmds: self.parent_wp_pmds,
            ops_failed: self.ops_failed,
            refcount_mismatches: self.refcount_mismatches,
            structural_error: self.structural_error.clone(),
            world: self.world.clone(),
        }
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("summary serializes")
    }

    pub fn latencies_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["query_id", "class", "arrival_ns", "latency_ns"]).expect("in memory");
        let mut recs = self.metrics.latencies.clone();
        recs.sort_by_key(|r| r.query_id);
        for r in recs {
            w.write_record([
                r.query_id.to_string(),
                r.class.as_str().to_string(),
                r.arrival_ns.to_string(),
                r.latency_ns.to_string(),
            ])
            .expect("in memory");
        }
        String::from_utf8(w.into_inner().expect("in memory")).expect("ascii")
    }

    pub fn interruptions_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["start_ns", "duration_ns", "cause"]).expect("in memory");
        for e in &self.metrics.interruptions {
            w.write_record([e.start.to_string(), e.duration.to_string(), e.cause.as_str().to_string()])
                .expect("in memory");
        }
        String::from_utf8(w.into_inner().expect("in memory")).expect("ascii")
    }

    pub fn throughput_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["window_start_ns", "count"]).expect("in memory");
        for (start, n) in self.metrics.throughput_series(self.config.throughput_window_ns) {
            w.write_record([start.to_string(), n.to_string()]).expect("in memory");
        }
        String::from_utf8(w.into_inner().expect("in memory")).expect("ascii")
    }

    /// Writes the report files into `dir`; `trace.jsonl` only when `trace`.
    pub fn write_to(&self, dir: &Path, trace: bool) -> Result<Vec<PathBuf>, SimError> {
        std::fs::create_dir_all(dir).map_err(|source| SimError::Output { path: dir.to_path_buf(), source })?;
        let mut files = vec![
            ("latencies.csv", self.latencies_csv()),
            ("interruptions.csv", self.interruptions_csv()),
            ("throughput.csv", self.throughput_csv()),
            ("summary.json", self.summary_json()),
        ];
        if trace {
            files.push(("trace.jsonl", self.trace.to_jsonl()));
        }
        let mut out = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|source| SimError::Output { path: path.clone(), source })?;
            out.push(path);
        }
        Ok(out)
    }
}
