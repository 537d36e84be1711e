use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ByteSize, ErrorPhase, ErrorSpec, OpKind, OpSpec, OpTarget, ScenarioConfig};
use crate::clock::CostModel;
use crate::engines::EngineKind;
use crate::workload::{KeyDist, WorkloadSpec};

/// A small write-heavy scenario with randomized shape, workload, snapshot
/// times, OS operations and (sometimes) allocation failures.
///
/// KV pages are only migrated, reclaimed or read through the child; range
/// operations touch the scratch area. ODF scenarios get no migrations.
pub fn random_config(seed: u64, engine: EngineKind) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f0f0);
    let heap_pages: u64 = rng.random_range(64..=16_384);
    let scratch_pages: u64 = rng.random_range(16..=600);
    let payload = [32usize, 48, 64][rng.random_range(0..3)];
    let value_bytes = rng.random_range(1..=payload - crate::kv::HEADER_BYTES);
    let per_page = (payload / (crate::kv::HEADER_BYTES + value_bytes)) as u64;
    let capacity_keys = heap_pages * per_page;
    let key_space = rng.random_range(capacity_keys / 4..=capacity_keys / 2).max(1);
    let preload = rng.random_range(0..=key_space);
    let rate = rng.random_range(20_000.0..200_000.0);
    let total_queries = rng.random_range(100..=3000);
    let span = (total_queries as f64 * 1e9 / rate) as u64;
    let ratio = [(1, 0), (4, 1), (1, 1), (9, 1)][rng.random_range(0..4)];
    let key_dist = if rng.random_bool(0.5) { KeyDist::Uniform } else { KeyDist::Gaussian { mean: None, stddev: None } };

    let snapshots: Vec<u64> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..span.max(1))).collect();
    let mut ops = Vec::new();
    for _ in 0..rng.random_range(0..=12) {
        let at_ns = rng.random_range(0..span.max(1) * 2);
        let kind = match rng.random_range(0..9) {
            0 if engine != EngineKind::Odf => OpKind::Migrate,
            0 | 1 => OpKind::Oom,
            2 => OpKind::Unmap,
            3 => OpKind::Protect,
            4 => OpKind::Split,
            5 => OpKind::Merge,
            6 => OpKind::GetUserPage,
            7 => OpKind::Write,
            _ => OpKind::Read,
        };
        let on_key = matches!(kind, OpKind::Migrate | OpKind::Oom | OpKind::Read) && rng.random_bool(0.6);
        let target = if kind == OpKind::Read && rng.random_bool(0.7) { OpTarget::Child } else { OpTarget::Parent };
        let (key, scratch_page) = if on_key && preload > 0 {
            (Some(rng.random_range(0..preload)), None)
        } else if matches!(kind, OpKind::Split | OpKind::Merge) {
            // a coarse grid so that merges can find earlier splits
            (None, Some(rng.random_range(1..scratch_pages.div_ceil(16).max(2)) * 16 % scratch_pages))
        } else {
            (None, Some(rng.random_range(0..scratch_pages)))
        };
        let pages = rng.random_range(1..=64).min(scratch_pages - scratch_page.unwrap_or(0)).max(1);
        ops.push(OpSpec { at_ns, kind, target, key, vpage: None, scratch_page, pages, value: rng.random() });
    }
    let mut errors = Vec::new();
    if rng.random_bool(0.15) {
        let phase = match engine {
            EngineKind::Async => [ErrorPhase::Parent, ErrorPhase::Child, ErrorPhase::Sync][rng.random_range(0..3)],
            _ => ErrorPhase::Parent,
        };
        errors.push(ErrorSpec { phase, nth: rng.random_range(1..=8), at_ns: 0 });
    }

    ScenarioConfig {
        seed,
        engine,
        workers: rng.random_range(1..=8),
        instance_bytes: ByteSize(heap_pages * 4096),
        vmas: rng.random_range(1..=8),
        scratch_bytes: ByteSize(scratch_pages * 4096),
        prefault: rng.random_bool(0.3),
        page_payload_bytes: payload,
        verify: true,
        snapshots,
        // slow table copies stretch the async copy phase over many queries
        cost: CostModel {
            c_pte_ns: rng.random_range(33.4..3_000.0),
            service_time_ns: 10_000.0,
            persist_per_page_ns: 2_000.0,
            ..CostModel::default()
        },
        workload: WorkloadSpec {
            rate,
            set_get_ratio: ratio,
            key_space,
            key_dist,
            value_bytes,
            clients: rng.random_range(1..=50),
            total_queries,
            preload,
            ..WorkloadSpec::default()
        },
        ops,
        errors,
        ..ScenarioConfig::default()
    }
}
