use std::collections::BTreeSet;

use proptest::prelude::*;

use forksim::clock::{Cause, CostModel};
use forksim::engines::{fork_async_parent, fork_default, fork_odf, AsyncCopy, EngineKind, NoHooks};
use forksim::metrics::nearest_rank;
use forksim::scenario::{random_config, run, ByteSize, Prepared, ScenarioConfig};
use forksim::vm::{Pid, World};
use forksim::workload::{KeyDist, QueryKind, WorkloadSpec};

fn world(vmas: u64, pages_per: u64) -> (World, Pid) {
    let mut w = World::new(CostModel::default(), 8, 1 << 16);
    let ranges: Vec<_> = (0..vmas).map(|i| i * pages_per..(i + 1) * pages_per).collect();
    let p = w.spawn(&ranges).unwrap();
    (w, p)
}

#[derive(Debug, Clone)]
enum Step {
    Map(u64),
    Write { child: bool, vpage: u64, byte: u8 },
    Fork,
    ExitChild,
}

fn step(pages: u64) -> impl Strategy<Value = Step> {
    prop_oneof![
        1 => (0..pages).prop_map(Step::Map),
        4 => (any::<bool>(), 0..pages, any::<u8>()).prop_map(|(child, vpage, byte)| Step::Write { child, vpage, byte }),
        1 => Just(Step::Fork),
        1 => Just(Step::ExitChild),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Refcounts match the leaf mappings and the tables stay well formed
    /// after any mix of mapping, forking, writing and exiting.
    #[test]
    fn refcounts_conserved(odf in any::<bool>(), steps in prop::collection::vec(step(2048), 1..60)) {
        let (mut w, p) = world(2, 1024);
        let mut children: Vec<Pid> = Vec::new();
        for s in steps {
            match s {
                Step::Map(v) => {
                    let _ = w.map_range(p, v..v + 1, &mut |_, b| b[0] = 1);
                }
                Step::Write { child, vpage, byte } => {
                    let pid = if child { children.last().copied().unwrap_or(p) } else { p };
                    w.write(pid, vpage, 0, &[byte], &mut NoHooks).unwrap();
                }
                Step::Fork => {
                    let f = if odf { fork_odf(&mut w, p) } else { fork_default(&mut w, p) }.unwrap();
                    children.push(f.child);
                }
                Step::ExitChild => {
                    if let Some(c) = children.pop() {
                        w.exit(c);
                    }
                }
            }
            prop_assert!(w.refcount_audit().is_empty());
            prop_assert_eq!(w.structural_audit(), Ok(()));
        }
    }

    /// Under the async fork a parent PMD is write-protected exactly while
    /// its table has not reached the child.
    #[test]
    fn wp_flag_tracks_copy_progress(
        workers in 1usize..5,
        moves in prop::collection::vec((any::<bool>(), 0u64..16, 1u64..40_000), 1..30),
    ) {
        let (mut w, p) = world(4, 2048);
        w.map_range(p, 0..8192, &mut |v, b| b[0] = v as u8).unwrap();
        let (f, marked) = fork_async_parent(&mut w, p).unwrap();
        let mut copy = AsyncCopy::new(&w, p, f.child, marked, workers, 0);
        let mut now = 0;
        for (sync, pmd, dt) in moves {
            now += dt;
            copy.advance(&mut w, now);
            if sync && copy.is_uncopied(pmd) {
                copy.proactive_sync(&mut w, pmd, pmd << 9, now).unwrap();
            }
            let wp: BTreeSet<u64> = w.wp_pmds(p).into_iter().collect();
            prop_assert_eq!(&wp, copy.uncopied());
            prop_assert!(w.refcount_audit().is_empty());
        }
        prop_assert_eq!(copy.exclusivity_violations(), 0);
    }

    /// Nearest-rank percentiles never decrease with the rank and hit the
    /// extremes at the ends.
    #[test]
    fn percentiles_monotone(mut xs in prop::collection::vec(0u64..1_000_000, 1..400), a in 1e-6f64..=1.0, b in 1e-6f64..=1.0) {
        xs.sort_unstable();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(nearest_rank(&xs, lo).unwrap() <= nearest_rank(&xs, hi).unwrap());
        prop_assert_eq!(nearest_rank(&xs, 1.0), xs.last().copied());
        prop_assert_eq!(nearest_rank(&xs, 1e-9), xs.first().copied());
        prop_assert_eq!(nearest_rank(&xs, 0.0), None);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn set_get_ratio_holds(sets in 1u32..10, gets in 0u32..10, seed in any::<u64>()) {
        let spec = WorkloadSpec { set_get_ratio: (sets, gets), total_queries: 100_000, ..WorkloadSpec::default() };
        let n = spec.generate(seed).unwrap().filter(|q| q.kind == QueryKind::Set).count();
        let want = sets as f64 / (sets + gets) as f64;
        prop_assert!((n as f64 / 1e5 - want).abs() <= 0.01);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Whole runs: deterministic, conserving kernel time between the trace
    /// and the metrics, and consistent for the copying engines.
    #[test]
    fn random_runs(seed in 0u64..1_000_000, e in 0usize..3) {
        let engine = EngineKind::ALL[e];
        let cfg = random_config(seed, engine);
        let a = run(&cfg).unwrap();
        let b = Prepared::new(&cfg).unwrap().run(&cfg).unwrap();
        prop_assert_eq!(a.latencies_csv(), b.latencies_csv());
        prop_assert_eq!(a.interruptions_csv(), b.interruptions_csv());
        prop_assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl());
        prop_assert_eq!(a.trace.kernel_total(None), a.metrics.out_of_service_total(None));
        for c in Cause::ALL {
            prop_assert_eq!(a.trace.kernel_total(Some(c)), a.metrics.out_of_service_total(Some(c)));
        }
        prop_assert_eq!(a.refcount_mismatches, Some(0));
        if engine != EngineKind::Odf {
            prop_assert!(a.coherence_violations.is_empty());
            prop_assert!(a.verdict() != forksim::scenario::Verdict::Fail);
        }
    }
}

fn snapshot_cfg(engine: EngineKind, workload: WorkloadSpec) -> ScenarioConfig {
    ScenarioConfig {
        engine,
        workers: 1,
        instance_bytes: ByteSize(1 << 30),
        vmas: 8,
        page_payload_bytes: 32,
        verify: false,
        snapshots: vec![1_000],
        workload: WorkloadSpec { key_space: 1 << 18, preload: 1 << 18, ..workload },
        ..ScenarioConfig::default()
    }
}

#[test]
fn gaussian_keys_touch_fewer_tables() {
    let w = WorkloadSpec { total_queries: 2_000, ..WorkloadSpec::default() };
    let uni = snapshot_cfg(EngineKind::Odf, w.clone());
    let gauss =
        snapshot_cfg(EngineKind::Odf, WorkloadSpec { key_dist: KeyDist::Gaussian { mean: None, stddev: None }, ..w });
    let p = Prepared::new(&uni).unwrap();
    let (u, g) = (p.run(&uni).unwrap().table_interruptions(), p.run(&gauss).unwrap().table_interruptions());
    assert!(g < u, "gaussian {g} vs uniform {u}");
}

#[test]
fn gets_during_async_copy_do_not_interrupt() {
    let cfg = snapshot_cfg(
        EngineKind::Async,
        WorkloadSpec { set_get_ratio: (0, 1), total_queries: 5_000, ..WorkloadSpec::default() },
    );
    let out = run(&cfg).unwrap();
    let s = &out.sessions[0];
    let end = s.copy_end_ns.unwrap();
    assert!(out.metrics.latencies.iter().filter(|r| r.arrival_ns < end).count() > 100);
    assert_eq!(out.table_interruptions(), 0);
    assert_eq!(s.syncs, 0);
}
