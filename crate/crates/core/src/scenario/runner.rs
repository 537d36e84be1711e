use std::collections::{BTreeSet, VecDeque};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::ops::Range;

use super::config::{OpKind, OpSpec, OpTarget, ScenarioConfig};
use super::report::{RollbackReport, RunOutput, SessionReport};
use crate::clock::{Nanos, ParentTimeline, Scheduler, Trace, TraceRecord};
use crate::engines::{Phase, Snapshots};
use crate::error::SimError;
use crate::kv::{snapshot_dump, Dump, KvError, KvStore};
use crate::metrics::{LatencyRecord, Metrics, QueryClass};
use crate::vm::{Pid, VmError, World};
use crate::workload::{fill_value, preload_value, Generator, Query, QueryKind};

#[derive(Debug, Clone, Copy)]
enum Ev {
    Arrival(Query),
    Snapshot,
    CpuFree,
    CopyCheck,
    PersistDone(usize),
    Op(usize),
    Arm(usize),
}

#[derive(Debug, Clone, Copy)]
enum Job {
    Query(Query),
    Fork,
}

/// Fork-instant reference state of one session.
struct Oracle {
    kv: Dump,
    memory: Vec<(u64, u64)>,
}

#[derive(Default)]
struct DumpCheck {
    entries: usize,
    kv_mismatches: usize,
    memory_mismatches: usize,
    keys: Vec<u64>,
}

fn page_hash(page: &[u8]) -> u64 {
    let mut h = DefaultHasher::new();
    page.hash(&mut h);
    h.finish()
}

/// `(vpage, content hash)` of every mapped page of `pid`, read from its
/// table.
fn memory_image(world: &World, pid: Pid) -> Vec<(u64, u64)> {
    world
        .mapped_vpages(pid)
        .into_iter()
        .filter_map(|v| {
            let f = world.pte(pid, v)?.phys()?;
            Some((v, page_hash(world.phys.payload(f))))
        })
        .collect()
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    world: World,
    kv: KvStore,
    parent: Pid,
    heap: Vec<Range<u64>>,
    scratch: Option<Range<u64>>,
    snaps: Snapshots,
    timeline: ParentTimeline,
    sched: Scheduler<Ev>,
    /// Arrivals are fed from the generator rather than the scheduler; they
    /// win ties, as if all had been scheduled first.
    arrivals: std::iter::Peekable<Generator>,
    queue: VecDeque<Job>,
    cpu_running: bool,
    latencies: Vec<(Query, Nanos)>,
    trace: Trace,
    oracles: Vec<Option<Oracle>>,
    checks: Vec<Option<DumpCheck>>,
    persist_scheduled: Vec<bool>,
    copy_check_at: Option<Nanos>,
    coherence: BTreeSet<(Pid, u64)>,
    coherence_order: Vec<(Pid, u64)>,
    ops_failed: u64,
    buf: Vec<u8>,
}

/// Runs a scenario to completion.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    Sim::new(cfg, Prepared::build(cfg)?)?.run()
}

/// The preloaded machine a scenario starts from. It depends only on the
/// layout, payload and preload settings, so many runs that differ in seed,
/// engine, workload rate or operations can share one.
#[derive(Debug, Clone)]
pub struct Prepared {
    key: String,
    world: World,
    kv: KvStore,
    parent: Pid,
    heap: Vec<Range<u64>>,
    scratch: Option<Range<u64>>,
}

fn layout_key(cfg: &ScenarioConfig) -> String {
    let w = &cfg.workload;
    format!(
        "{}/{}/{}/{}/{}/{}/{}/{}/{}",
        cfg.instance_bytes.0,
        cfg.vmas,
        cfg.scratch_bytes.0,
        cfg.prefault,
        cfg.page_payload_bytes,
        cfg.capacity_pages(),
        w.key_space,
        w.preload,
        w.value_bytes
    )
}

impl Prepared {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        Self::build(cfg)
    }

    fn build(cfg: &ScenarioConfig) -> Result<Self, SimError> {
        let (heap, scratch) = cfg.layout();
        let mut world = World::new(cfg.cost, cfg.page_payload_bytes, cfg.capacity_pages());
        let mut ranges = heap.clone();
        ranges.extend(scratch.clone());
        let parent = world.spawn(&ranges)?;
        let mut kv = KvStore::new(parent, heap.clone(), cfg.workload.key_space, cfg.page_payload_bytes);
        let w = &cfg.workload;
        if w.preload > 0 {
            kv.preload(&mut world, 0..w.preload, w.value_bytes, &mut |k, b| preload_value(k, b)).map_err(
                |e| match e {
                    KvError::HeapFull | KvError::Vm(VmError::OutOfPhysMem) => {
                        SimError::Config(crate::error::ConfigError::Invalid(format!("preload does not fit: {e}")))
                    }
                    e => e.into(),
                },
            )?;
        }
        let mut unmapped: Vec<Range<u64>> = Vec::new();
        if cfg.prefault {
            unmapped.extend(heap.iter().cloned());
        }
        unmapped.extend(scratch.clone());
        for r in unmapped {
            let mut v = r.start;
            while v < r.end {
                if world.pte(parent, v).is_some_and(|p| p.is_mapped()) {
                    v += 1;
                    continue;
                }
                let mut e = v;
                while e < r.end && !world.pte(parent, e).is_some_and(|p| p.is_mapped()) {
                    e += 1;
                }
                world.map_range(parent, v..e, &mut |_, _| {})?;
                v = e;
            }
        }
        world.take_charges();
        // room for copy-on-write frames, so runs rarely regrow the store
        let slots = world.phys.slots() as u64;
        let room = (slots / 4).max(1 << 16).min(world.phys.capacity().saturating_sub(slots));
        world.phys.reserve(room as usize);
        Ok(Self { key: layout_key(cfg), world, kv, parent, heap, scratch })
    }

    /// Runs `cfg` on a copy of this machine. `cfg` must have the same
    /// layout as the one this was prepared from.
    pub fn run(&self, cfg: &ScenarioConfig) -> Result<RunOutput, SimError> {
        cfg.validate()?;
        if layout_key(cfg) != self.key {
            return Err(
                crate::error::ConfigError::Invalid("scenario layout differs from the prepared one".into()).into()
            );
        }
        Sim::new(cfg, self.clone())?.run()
    }
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig, p: Prepared) -> Result<Self, SimError> {
        let Prepared { world, kv, parent, heap, scratch, .. } = p;
        let mut world = world;
        world.cost = cfg.cost;
        let w = &cfg.workload;
        let mut sched = Scheduler::new();
        let arrivals = w.generate(cfg.seed)?.peekable();
        for &t in &cfg.snapshots {
            sched.schedule(t, Ev::Snapshot).expect("future");
        }
        for (i, op) in cfg.ops.iter().enumerate() {
            sched.schedule(op.at_ns, Ev::Op(i)).expect("future");
        }
        for (i, e) in cfg.errors.iter().enumerate() {
            sched.schedule(e.at_ns, Ev::Arm(i)).expect("future");
        }
        Ok(Self {
            cfg,
            world,
            kv,
            parent,
            heap,
            scratch,
            snaps: Snapshots::new(),
            timeline: ParentTimeline::new(),
            sched,
            arrivals,
            queue: VecDeque::new(),
            cpu_running: false,
            latencies: Vec::new(),
            trace: Trace::default(),
            oracles: Vec::new(),
            checks: Vec::new(),
            persist_scheduled: Vec::new(),
            copy_check_at: None,
            coherence: BTreeSet::new(),
            coherence_order: Vec::new(),
            ops_failed: 0,
            buf: vec![0; cfg.workload.value_bytes],
        })
    }

    fn run(mut self) -> Result<RunOutput, SimError> {
        let mut end = 0;
        loop {
            let (t, ev) = match (self.arrivals.peek().map(|q| q.at), self.sched.peek_time()) {
                (Some(a), h) if h.is_none_or(|h| a <= h) => {
                    let q = self.arrivals.next().expect("peeked");
                    self.sched.advance_to(a);
                    (a, Ev::Arrival(q))
                }
                _ => match self.sched.pop() {
                    Some(next) => next,
                    None => break,
                },
            };
            end = t;
            self.snaps.set_now(t);
            self.snaps.advance(&mut self.world, t);
            match ev {
                Ev::Arrival(q) => self.enqueue(t, Job::Query(q))?,
                Ev::Snapshot => self.enqueue(t, Job::Fork)?,
                Ev::CpuFree => {
                    self.cpu_running = false;
                    if !self.queue.is_empty() {
                        self.start_next(t)?;
                    }
                }
                Ev::CopyCheck => {
                    if self.copy_check_at == Some(t) {
                        self.copy_check_at = None;
                    }
                }
                Ev::PersistDone(id) => self.persist_done(t, id),
                Ev::Op(i) => self.os_op(t, &self.cfg.ops[i].clone())?,
                Ev::Arm(i) => {
                    let e = self.cfg.errors[i];
                    self.world.arm_failure(e.phase.site(), e.nth);
                }
            }
            self.settle(t);
        }
        self.audit_coherence(end);
        self.finish(end)
    }

    fn enqueue(&mut self, t: Nanos, job: Job) -> Result<(), SimError> {
        self.queue.push_back(job);
        if !self.cpu_running {
            self.start_next(t)?;
        }
        Ok(())
    }

    fn start_next(&mut self, t: Nanos) -> Result<(), SimError> {
        let Some(job) = self.queue.pop_front() else { return Ok(()) };
        let t = t.max(self.timeline.busy_until());
        match job {
            Job::Query(q) => {
                match q.kind {
                    QueryKind::Set => {
                        fill_value(q.id, q.key, &mut self.buf);
                        self.kv.set(&mut self.world, q.key, &self.buf, &mut self.snaps)?;
                    }
                    QueryKind::Get => match self.kv.get(&mut self.world, q.key) {
                        Ok(_) | Err(KvError::KeyNotFound(_)) => {}
                        Err(e) => return Err(e.into()),
                    },
                }
                self.flush_snap_trace();
                self.drain(t);
                let (_, done) = self.timeline.run_user(t, self.world.cost.service_ns());
                self.latencies.push((q, done));
            }
            Job::Fork => {
                let oracle = self.cfg.verify.then(|| Oracle {
                    kv: self.kv.oracle(&self.world),
                    memory: memory_image(&self.world, self.parent),
                });
                let id = self.snaps.begin(&mut self.world, self.cfg.engine, self.parent, self.cfg.workers, t);
                debug_assert_eq!(id, self.oracles.len());
                self.oracles.push(oracle);
                self.checks.push(None);
                self.flush_snap_trace();
                self.drain(t);
            }
        }
        self.cpu_running = true;
        let free = self.timeline.busy_until().max(t);
        self.sched.schedule(free, Ev::CpuFree).expect("not in the past");
        Ok(())
    }

    /// Lays the world's pending kernel charges onto the parent's timeline.
    fn drain(&mut self, t: Nanos) {
        for c in self.world.take_charges() {
            if c.pid != self.parent {
                continue;
            }
            if let Some(ep) = self.timeline.charge_kernel(t, c.pid, c.ns, c.cause) {
                self.trace.push(TraceRecord::Kernel {
                    pid: c.pid,
                    start: ep.start,
                    duration: ep.duration,
                    cause: c.cause,
                    pmd: c.pmd,
                });
            }
        }
    }

    fn flush_snap_trace(&mut self) {
        for r in self.snaps.take_trace() {
            self.trace.push(r);
        }
    }

    /// Schedules persist completions and child-copy checks that became due.
    fn settle(&mut self, t: Nanos) {
        self.flush_snap_trace();
        self.persist_scheduled.resize(self.snaps.sessions().len(), false);
        for s in self.snaps.sessions() {
            if s.phase == Phase::Persist && !self.persist_scheduled[s.id] {
                self.persist_scheduled[s.id] = true;
                let at = s.persist_end.expect("persisting").max(t);
                self.sched.schedule(at, Ev::PersistDone(s.id)).expect("not in the past");
            }
        }
        if let Some(d) = self.snaps.next_copy_deadline(&self.world) {
            let d = d.max(t);
            if self.copy_check_at.is_none_or(|c| d < c) {
                self.copy_check_at = Some(d);
                self.sched.schedule(d, Ev::CopyCheck).expect("not in the past");
            }
        }
    }

    fn persist_done(&mut self, t: Nanos, id: usize) {
        self.audit_coherence(t);
        let s = self.snaps.session(id);
        if let (Some(child), Some(oracle)) = (s.child, self.oracles[id].as_ref()) {
            let dump = snapshot_dump(&self.world, child, &self.heap);
            let diff = dump.diff(&oracle.kv);
            let memory_mismatches = oracle
                .memory
                .iter()
                .filter(|&&(v, h)| self.world.peek(child, v).map_or(true, |p| page_hash(p) != h))
                .count();
            self.trace.push(TraceRecord::Dump {
                at: t,
                session: id,
                entries: dump.len(),
                matches_oracle: diff.is_empty() && memory_mismatches == 0,
            });
            self.checks[id] = Some(DumpCheck {
                entries: dump.len(),
                kv_mismatches: diff.len(),
                memory_mismatches,
                keys: diff.into_iter().take(16).collect(),
            });
        }
        self.snaps.complete(&mut self.world, id, t);
    }

    fn latest_child(&self) -> Option<Pid> {
        self.snaps.sessions().iter().rev().filter_map(|s| s.child).find(|&c| self.world.is_alive(c))
    }

    fn os_op(&mut self, t: Nanos, op: &OpSpec) -> Result<(), SimError> {
        let pid = match op.target {
            OpTarget::Parent => Some(self.parent),
            OpTarget::Child => self.latest_child(),
        };
        let vpage = match (op.key, op.vpage, op.scratch_page) {
            // a keyed write may create the key
            (Some(k), _, _) if op.kind == OpKind::Write => Some(self.kv.page_of(k).unwrap_or(0)),
            (Some(k), _, _) => self.kv.page_of(k),
            (_, Some(v), _) => Some(v),
            (_, _, Some(s)) => self.scratch.as_ref().map(|r| r.start + s),
            _ => None,
        };
        let (Some(pid), Some(vpage)) = (pid, vpage) else {
            self.ops_failed += 1;
            self.trace.push(TraceRecord::OsOp {
                at: t,
                op: format!("{}:skipped", op.kind.as_str()),
                vpage: 0,
                pages: 0,
            });
            return Ok(());
        };
        let w = &mut self.world;
        let hooks = &mut self.snaps;
        let result: Result<usize, SimError> = match op.kind {
            OpKind::Migrate => w.migrate_page(pid, vpage, hooks, &mut |_, _| {}).map(|_| 0).map_err(Into::into),
            OpKind::Oom => w.oom_reclaim(pid, vpage, hooks).map_err(Into::into),
            OpKind::Unmap => w.unmap_range(pid, vpage..vpage + op.pages, hooks).map_err(Into::into),
            OpKind::Protect => w.protect_range(pid, vpage..vpage + op.pages, hooks).map_err(Into::into),
            OpKind::Split => w.split_vma(pid, vpage, hooks).map_err(Into::into),
            OpKind::Merge => w.merge_vmas(pid, vpage, hooks).map_err(Into::into),
            OpKind::GetUserPage => w.get_user_page(pid, vpage, true, hooks).map_err(Into::into),
            OpKind::Read => w.read(pid, vpage).map(|_| 0).map_err(Into::into),
            OpKind::Write => match op.key {
                Some(k) if pid == self.parent => {
                    let v = vec![op.value; self.cfg.workload.value_bytes];
                    self.kv.set(w, k, &v, hooks).map(|o| o.syncs).map_err(Into::into)
                }
                _ => w.write(pid, vpage, 0, &[op.value], hooks).map(|o| o.syncs).map_err(Into::into),
            },
        };
        let name = match &result {
            Ok(_) => op.kind.as_str().to_string(),
            Err(SimError::Vm(VmError::OutOfPhysMem)) | Err(SimError::Kv(KvError::Vm(VmError::OutOfPhysMem))) => {
                return result.map(|_| ());
            }
            Err(_) => {
                self.ops_failed += 1;
                format!("{}:failed", op.kind.as_str())
            }
        };
        let vpage = match (op.kind, op.key) {
            (OpKind::Write, Some(k)) => self.kv.page_of(k).unwrap_or(vpage),
            _ => vpage,
        };
        self.trace.push(TraceRecord::OsOp { at: t, op: name, vpage, pages: op.pages });
        self.flush_snap_trace();
        self.drain(t);
        if !self.cpu_running && self.timeline.busy_until() > t {
            self.cpu_running = true;
            self.sched.schedule(self.timeline.busy_until(), Ev::CpuFree).expect("future");
        }
        self.audit_coherence(t);
        Ok(())
    }

    fn audit_coherence(&mut self, t: Nanos) {
        for (pid, vpage) in self.world.coherence_audit() {
            if self.coherence.insert((pid, vpage)) {
                self.coherence_order.push((pid, vpage));
                self.trace.push(TraceRecord::Coherence { at: t, pid, vpage });
            }
        }
    }

    fn finish(mut self, end: Nanos) -> Result<RunOutput, SimError> {
        self.flush_snap_trace();
        let windows: Vec<(Nanos, Nanos)> = self.snaps.sessions().iter().filter_map(|s| s.window()).collect();
        let mut metrics = Metrics::default();
        for (q, done) in &self.latencies {
            let snapshot = windows.iter().any(|&(a, b)| a <= q.at && q.at <= b);
            metrics.record(LatencyRecord {
                query_id: q.id,
                class: if snapshot { QueryClass::Snapshot } else { QueryClass::Normal },
                arrival_ns: q.at,
                latency_ns: done - q.at,
            });
        }
        metrics.interruptions = self.timeline.into_episodes();
        let sessions = self
            .snaps
            .sessions()
            .iter()
            .map(|s| {
                let check = self.checks[s.id].take();
                let stats = s.stats();
                SessionReport {
                    id: s.id,
                    engine: s.engine,
                    phase: s.phase,
                    child: s.child,
                    child_exited: s.child.is_none_or(|c| !self.world.is_alive(c)),
                    fork_start_ns: s.fork_start,
                    fork_return_ns: s.fork_return,
                    fork_kernel_ns: s.fork_cost.total_ns(&self.world.cost),
                    copy_end_ns: s.copy_end,
                    copy_span_ns: s.copy.as_ref().and(s.copy_end).map(|e| e - s.fork_return),
                    persist_end_ns: s.persist_end,
                    ended_ns: s.ended,
                    child_copies: stats.child_copies,
                    syncs: stats.syncs,
                    pmds_scanned: stats.pmds_scanned,
                    exclusivity_violations: stats.exclusivity_violations,
                    rollbacks: s
                        .rollbacks
                        .iter()
                        .map(|&(at_ns, case, restored_pmds)| RollbackReport { at_ns, case, restored_pmds })
                        .collect(),
                    dump_entries: check.as_ref().map(|c| c.entries),
                    kv_mismatches: check.as_ref().map(|c| c.kv_mismatches),
                    memory_mismatches: check.as_ref().map(|c| c.memory_mismatches),
                    mismatched_keys: check.map(|c| c.keys).unwrap_or_default(),
                }
            })
            .collect();
        let (refcount_mismatches, structural_error) = if self.cfg.verify {
            (Some(self.world.refcount_audit().len()), self.world.structural_audit().err())
        } else {
            (None, None)
        };
        Ok(RunOutput {
            config: self.cfg.clone(),
            metrics,
            sessions,
            trace: self.trace,
            world: self.world.stats.clone(),
            coherence_violations: self.coherence_order,
            ops_failed: self.ops_failed,
            parent_wp_pmds: self.world.wp_pmds(self.parent).len(),
            refcount_mismatches,
            structural_error,
            end_ns: end,
        })
    }
}
