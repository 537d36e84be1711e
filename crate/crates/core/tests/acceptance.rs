//! End-to-end acceptance checks. Each test prints one `criterion N` line
//! with its verdict, the evidence and the wall time against its budget.
//!
//! Tests take a shared lock so that timings are not inflated by the other
//! criteria running on the same cores.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use forksim::clock::{Cause, CostModel, Nanos};
use forksim::engines::{EngineKind, Phase, RollbackCase};
use forksim::metrics::QueryClass;
use forksim::scenario::{
    fork_profile, random_config, run, ByteSize, ErrorPhase, ErrorSpec, Prepared, ScenarioConfig, Verdict,
};
use forksim::scripted;
use forksim::vm::{table_shape, PAGE_BYTES};
use forksim::workload::WorkloadSpec;

const GIB: u64 = 1 << 30;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Runs `check` under the lock, prints the verdict line and fails the test
/// on a failed check or a blown budget.
fn criterion(n: u32, name: &str, budget: Duration, check: impl FnOnce() -> Result<String, String>) {
    let _g = serial();
    let t = Instant::now();
    let res = check();
    let took = t.elapsed();
    let (ok, detail) = match res {
        Ok(d) if took <= budget => (true, d),
        Ok(d) => (false, format!("{d}; over budget")),
        Err(d) => (false, d),
    };
    // straight to the handle: libtest only captures the print macros
    let line = format!(
        "criterion {n} {name}: {} ({detail}) [{:.2} s of {:.0} s]\n",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        budget.as_secs_f64()
    );
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn reference() -> &'static ScenarioConfig {
    static CFG: OnceLock<ScenarioConfig> = OnceLock::new();
    CFG.get_or_init(|| {
        let c = ScenarioConfig::load(&configs_dir().join("reference.toml")).expect("reference config");
        ScenarioConfig { verify: false, ..c }
    })
}

/// The reference instance is built once; every engine and seed starts
/// from a copy of it.
fn reference_prepared() -> &'static Prepared {
    static P: OnceLock<Prepared> = OnceLock::new();
    P.get_or_init(|| Prepared::new(reference()).expect("reference instance"))
}

/// What criteria 6 and 9 need from one reference run.
#[derive(Clone)]
struct Digest {
    fork_return: Nanos,
    copy_end: Nanos,
    persist_end: Nanos,
    /// Start times of table-copy interruptions.
    table_eps: Vec<Nanos>,
    p99: Nanos,
    max: Nanos,
}

fn reference_run(engine: EngineKind, seed: u64) -> Digest {
    static CACHE: OnceLock<Mutex<HashMap<(EngineKind, u64), Digest>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(d) = cache.lock().unwrap().get(&(engine, seed)) {
        return d.clone();
    }
    let cfg = ScenarioConfig { engine, seed, ..reference().clone() };
    let out = reference_prepared().run(&cfg).expect("reference run");
    let s = &out.sessions[0];
    let snap = out.class_summary(QueryClass::Snapshot);
    let d = Digest {
        fork_return: s.fork_return_ns,
        copy_end: s.copy_end_ns.expect("copy finished"),
        persist_end: s.persist_end_ns.expect("persisted"),
        table_eps: out
            .metrics
            .interruptions
            .iter()
            .filter(|e| e.cause.is_table_interruption())
            .map(|e| e.start)
            .collect(),
        p99: snap.p99_ns.expect("snapshot queries"),
        max: snap.max_ns.expect("snapshot queries"),
    };
    cache.lock().unwrap().insert((engine, seed), d.clone());
    d
}

#[test]
fn c01_shape_arithmetic() {
    criterion(1, "shape arithmetic", Duration::from_secs(1), || {
        let s = table_shape(8 * GIB, PAGE_BYTES).map_err(|e| e.to_string())?;
        let got = (s.pgd_entries, s.pud_entries, s.pmd_entries, s.pte_entries);
        ensure(got == (1, 8, 4096, 2_097_152), || format!("8 GiB shape {got:?}"))?;
        Ok(format!("8 GiB -> {got:?}"))
    });
}

#[test]
fn c02_cost_characterization() {
    criterion(2, "cost characterization", Duration::from_secs(8), || {
        let cost = CostModel::default();
        let mut detail = String::new();
        for g in [1u64, 2, 4, 8, 16, 32, 64] {
            let t = Instant::now();
            let p = fork_profile(g * GIB, EngineKind::Default, cost).map_err(|e| e.to_string())?;
            let took = t.elapsed();
            ensure(took < Duration::from_secs(1), || format!("{g} GiB profile took {took:?}"))?;
            ensure(p.page_table_share >= 0.97, || format!("{g} GiB page-table share {:.4}", p.page_table_share))?;
            if g == 8 {
                let ms = p.kernel_ns as f64 / 1e6;
                ensure((ms - 72.1).abs() <= 72.1 * 0.15, || format!("8 GiB fork {ms:.3} ms"))?;
                let nl = p.nonleaf_ns as f64 / 1e6;
                ensure((nl - 2.05).abs() <= 2.05 * 0.05, || format!("8 GiB non-leaf {nl:.3} ms"))?;
                detail = format!("8 GiB fork {ms:.2} ms, non-leaf {nl:.3} ms");
            }
        }
        Ok(format!("{detail}, page-table share >= 0.97 for 1..64 GiB"))
    });
}

#[test]
fn c03_async_parent_phase() {
    criterion(3, "async parent phase", Duration::from_secs(2), || {
        let p = fork_profile(64 * GIB, EngineKind::Async, CostModel::default()).map_err(|e| e.to_string())?;
        let ms = p.kernel_ns as f64 / 1e6;
        ensure((0.55..=0.70).contains(&ms), || format!("64 GiB parent phase {ms:.4} ms"))?;
        Ok(format!("64 GiB parent phase {ms:.4} ms"))
    });
}

#[test]
fn c04_consistency_property() {
    criterion(4, "consistency property", Duration::from_secs(300), || {
        let mut per_engine: HashMap<EngineKind, [usize; 4]> = HashMap::new();
        for seed in 0..1000u64 {
            let engine = EngineKind::ALL[(seed % 3) as usize];
            let cfg = random_config(seed, engine);
            let out = run(&cfg).map_err(|e| format!("seed {seed}: {e}"))?;
            let v = out.verdict();
            let slot = match v {
                Verdict::Pass => 0,
                Verdict::Unchecked => 1,
                Verdict::LeakDetected => 2,
                Verdict::Fail => 3,
            };
            per_engine.entry(engine).or_default()[slot] += 1;
            if engine != EngineKind::Odf {
                ensure(v != Verdict::Fail && v != Verdict::LeakDetected, || {
                    format!("seed {seed} {engine:?}: verdict {v:?}, keys {:?}", out.sessions)
                })?;
                ensure(out.coherence_violations.is_empty(), || format!("seed {seed}: coherence violations"))?;
            }
            ensure(out.refcount_mismatches == Some(0), || format!("seed {seed}: refcount audit"))?;
            ensure(out.structural_error.is_none(), || format!("seed {seed}: {:?}", out.structural_error))?;
        }
        let fmt = |e: EngineKind| {
            let c = per_engine.get(&e).copied().unwrap_or_default();
            format!("{} {}/{} verified consistent", e.as_str(), c[0], c[0] + c[2] + c[3])
        };
        let checked: usize =
            [EngineKind::Default, EngineKind::Async].iter().map(|e| per_engine.get(e).map_or(0, |c| c[0])).sum();
        ensure(checked > 0, || "no run was verified".into())?;
        Ok(format!("{}, {}, {}", fmt(EngineKind::Default), fmt(EngineKind::Async), fmt(EngineKind::Odf)))
    });
}

type Row = [&'static str; 4];

fn columns(r: &scripted::Replay) -> Vec<[String; 4]> {
    r.steps
        .iter()
        .map(|s| [s.parent.tlb.clone(), s.parent.pte.clone(), s.child.tlb.clone(), s.child.pte.clone()])
        .collect()
}

fn same(got: &[[String; 4]], want: &[Row]) -> bool {
    got.len() == want.len() && got.iter().zip(want).all(|(g, w)| g.iter().zip(w).all(|(a, b)| a == b))
}

#[test]
fn c05_leakage_reproduction() {
    criterion(5, "leakage reproduction", Duration::from_secs(1), || {
        const ODF: [Row; 6] = [
            ["V->X", "V->X", "V->X", "V->X"],
            ["V->X", "V->N", "V->X", "V->N"],
            ["N/A", "V->N", "V->X", "V->N"],
            ["N/A", "V->N", "V->X", "V->N"],
            ["N/A", "V->Y", "V->X", "V->Y"],
            ["V->Y", "V->Y", "V->X", "V->Y"],
        ];
        const ASYNC: [Row; 6] = [
            ["V->X", "V->X", "N/A", "N/A"],
            ["V->X", "V->N", "N/A", "N/A"],
            ["N/A", "V->N", "N/A", "N/A"],
            ["N/A", "V->Y", "N/A", "N/A"],
            ["N/A", "V->Y", "N/A", "V->Y"],
            ["V->Y", "V->Y", "V->Y", "V->Y"],
        ];
        let t1 = scripted::table1().map_err(|e| e.to_string())?;
        ensure(same(&columns(&t1), &ODF), || format!("odf steps differ:\n{}", t1.render()))?;
        ensure(t1.coherence_violations.len() == 1, || format!("odf violations {:?}", t1.coherence_violations))?;
        ensure(t1.child_frame == "X" && !t1.mismatched_keys.is_empty(), || {
            format!("odf child read frame {} keys {:?}", t1.child_frame, t1.mismatched_keys)
        })?;
        ensure(t1.dump != t1.oracle, || "odf dump matches the oracle".into())?;

        let t4 = scripted::table4().map_err(|e| e.to_string())?;
        ensure(same(&columns(&t4), &ASYNC), || format!("async steps differ:\n{}", t4.render()))?;
        ensure(t4.coherence_violations.is_empty(), || format!("async violations {:?}", t4.coherence_violations))?;
        ensure(t4.child_frame == "Y" && t4.mismatched_keys.is_empty(), || {
            format!("async child read frame {} keys {:?}", t4.child_frame, t4.mismatched_keys)
        })?;
        ensure(t4.dump == t4.oracle, || "async dump differs from the oracle".into())?;
        Ok(format!(
            "odf: 6/6 steps, 1 violation, stale key {:?}; async: 6/6 steps, 0 violations, migrated frame read",
            t1.mismatched_keys
        ))
    });
}

#[test]
fn c06_interruption_containment() {
    criterion(6, "interruption containment and dominance", Duration::from_secs(60), || {
        let (mut total_async, mut total_odf) = (0, 0);
        for seed in 0..100 {
            let a = reference_run(EngineKind::Async, seed);
            let o = reference_run(EngineKind::Odf, seed);
            ensure(a.table_eps.iter().all(|&t| a.fork_return <= t && t <= a.copy_end), || {
                format!("seed {seed}: async interruption outside [{}, {}]", a.fork_return, a.copy_end)
            })?;
            ensure(o.table_eps.iter().all(|&t| o.fork_return <= t && t <= o.persist_end), || {
                format!("seed {seed}: odf interruption outside the persist window")
            })?;
            let last = o.table_eps.iter().max().copied().unwrap_or(0);
            ensure(last > a.copy_end, || {
                format!("seed {seed}: odf interruptions stop at {last}, async copy ends {}", a.copy_end)
            })?;
            ensure(a.table_eps.len() < o.table_eps.len(), || {
                format!("seed {seed}: async {} >= odf {}", a.table_eps.len(), o.table_eps.len())
            })?;
            total_async += a.table_eps.len();
            total_odf += o.table_eps.len();
        }
        Ok(format!("seeds 0-99: async {total_async} vs odf {total_odf} table-copy interruptions"))
    });
}

#[test]
fn c07_worker_scaling() {
    criterion(7, "worker scaling", Duration::from_secs(10), || {
        let base = ScenarioConfig {
            engine: EngineKind::Async,
            instance_bytes: ByteSize(GIB),
            vmas: 8,
            prefault: true,
            page_payload_bytes: 32,
            verify: false,
            snapshots: vec![1_000],
            workload: WorkloadSpec { set_get_ratio: (0, 1), total_queries: 1, key_space: 1, ..WorkloadSpec::default() },
            ..ScenarioConfig::default()
        };
        let prepared = Prepared::new(&base).map_err(|e| e.to_string())?;
        let mut spans = Vec::new();
        for k in [1usize, 2, 4, 8] {
            let out = prepared.run(&ScenarioConfig { workers: k, ..base.clone() }).map_err(|e| e.to_string())?;
            spans.push((k, out.sessions[0].copy_span_ns.ok_or("no copy span")?));
        }
        let one = spans[0].1 as f64;
        for &(k, s) in &spans {
            ensure(s as f64 <= one / k as f64 * 1.2, || format!("span({k}) = {s} ns vs span(1) = {one} ns"))?;
        }
        let list: Vec<String> = spans.iter().map(|(k, s)| format!("{k}:{:.2}ms", *s as f64 / 1e6)).collect();
        Ok(format!("1 GiB over 8 VMAs, spans {}", list.join(" ")))
    });
}

#[test]
fn c08_rollback_totality() {
    criterion(8, "rollback totality", Duration::from_secs(10), || {
        let mut detail = Vec::new();
        for (phase, case) in [
            (ErrorPhase::Parent, RollbackCase::ParentPhase),
            (ErrorPhase::Child, RollbackCase::ChildPhase),
            (ErrorPhase::Sync, RollbackCase::SyncPhase),
        ] {
            let cfg = ScenarioConfig {
                engine: EngineKind::Async,
                workers: 1,
                instance_bytes: ByteSize(64 << 20),
                vmas: 8,
                prefault: true,
                page_payload_bytes: 32,
                snapshots: vec![1_000_000],
                errors: vec![ErrorSpec { phase, nth: 3, at_ns: 0 }],
                workload: WorkloadSpec {
                    rate: 50_000.0,
                    key_space: 16_384,
                    preload: 16_384,
                    total_queries: 12_000,
                    ..WorkloadSpec::default()
                },
                ..ScenarioConfig::default()
            };
            let out = run(&cfg).map_err(|e| e.to_string())?;
            let s = &out.sessions[0];
            let rb = s.rollbacks.first().ok_or_else(|| format!("{phase:?}: no rollback"))?;
            ensure(rb.case == case, || format!("{phase:?}: rollback {:?}", rb.case))?;
            let at = rb.at_ns;
            ensure(out.parent_wp_pmds == 0 && out.world.stale_wp_faults == 0, || {
                format!("{phase:?}: wp census {} stale faults {}", out.parent_wp_pmds, out.world.stale_wp_faults)
            })?;
            let after = out.metrics.latencies.iter().filter(|r| r.arrival_ns > at).count();
            ensure(after >= 10_000, || format!("{phase:?}: only {after} queries after the rollback"))?;
            let late = out
                .metrics
                .interruptions
                .iter()
                .filter(|e| e.start > at && matches!(e.cause, Cause::ProactiveSync | Cause::ForkCall))
                .count();
            ensure(late == 0, || format!("{phase:?}: {late} async kernel episodes after the rollback"))?;
            if phase != ErrorPhase::Parent {
                ensure(s.phase == Phase::Aborted && s.child.is_some() && s.child_exited, || {
                    format!("{phase:?}: session {:?} child exited {}", s.phase, s.child_exited)
                })?;
            } else {
                ensure(s.phase == Phase::Aborted && s.child.is_none(), || {
                    format!("parent phase session {:?}", s.phase)
                })?;
            }
            detail.push(format!("{}: {} pmds restored, {after} queries after", phase_name(phase), rb.restored_pmds));
        }
        Ok(detail.join("; "))
    });
}

fn phase_name(p: ErrorPhase) -> &'static str {
    match p {
        ErrorPhase::Parent => "parent",
        ErrorPhase::Child => "child",
        ErrorPhase::Sync => "sync",
    }
}

#[test]
fn c09_latency_ordering() {
    criterion(9, "latency ordering", Duration::from_secs(60), || {
        let ms = |n: Nanos| n as f64 / 1e6;
        for seed in 0..20 {
            let a = reference_run(EngineKind::Async, seed);
            let o = reference_run(EngineKind::Odf, seed);
            let d = reference_run(EngineKind::Default, seed);
            ensure(a.p99 < o.p99 && o.p99 < d.p99, || {
                format!("seed {seed}: p99 {:.3} / {:.3} / {:.3} ms", ms(a.p99), ms(o.p99), ms(d.p99))
            })?;
            ensure(a.max < o.max && o.max < d.max, || {
                format!("seed {seed}: max {:.3} / {:.3} / {:.3} ms", ms(a.max), ms(o.max), ms(d.max))
            })?;
        }
        let (a, o, d) = (
            reference_run(EngineKind::Async, 0),
            reference_run(EngineKind::Odf, 0),
            reference_run(EngineKind::Default, 0),
        );
        Ok(format!(
            "seeds 0-19; seed 0 p99 {:.3} < {:.3} < {:.3} ms, max {:.3} < {:.3} < {:.3} ms",
            ms(a.p99),
            ms(o.p99),
            ms(d.p99),
            ms(a.max),
            ms(o.max),
            ms(d.max)
        ))
    });
}

#[test]
fn c10_determinism() {
    criterion(10, "determinism", Duration::from_secs(30), || {
        let mut cfgs: Vec<ScenarioConfig> = Vec::new();
        for seed in [3u64, 17, 256] {
            for e in EngineKind::ALL {
                cfgs.push(random_config(seed, e));
            }
        }
        for name in ["fig5.toml", "table1_odf.toml"] {
            cfgs.push(ScenarioConfig::load(&configs_dir().join(name)).map_err(|e| e.to_string())?);
        }
        cfgs.push(ScenarioConfig { engine: EngineKind::Odf, ..reference().clone() });
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        for (i, c) in cfgs.iter().enumerate() {
            let mut files = Vec::new();
            for round in 0..2 {
                let out = run(c).map_err(|e| e.to_string())?;
                let d = dir.path().join(format!("{i}-{round}"));
                out.write_to(&d, true).map_err(|e| e.to_string())?;
                files.push(d);
            }
            for f in ["latencies.csv", "interruptions.csv", "throughput.csv", "trace.jsonl"] {
                let a = std::fs::read(files[0].join(f)).map_err(|e| e.to_string())?;
                let b = std::fs::read(files[1].join(f)).map_err(|e| e.to_string())?;
                ensure(a == b, || format!("scenario {i} ({:?} seed {}): {f} differs", c.engine, c.seed))?;
            }
        }
        Ok(format!("{} scenarios re-run, report files byte-identical", cfgs.len()))
    });
}
