//! Latency, throughput and interruption accounting.

use serde::Serialize;
use thiserror::Error;

use crate::clock::{Cause, Episode, Nanos};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryClass {
    Normal,
    Snapshot,
}

impl QueryClass {
    pub const ALL: [QueryClass; 2] = [QueryClass::Normal, QueryClass::Snapshot];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryClass::Normal => "normal",
            QueryClass::Snapshot => "snapshot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyRecord {
    pub query_id: u64,
    pub class: QueryClass,
    pub arrival_ns: Nanos,
    pub latency_ns: Nanos,
}

impl LatencyRecord {
    pub fn completion_ns(&self) -> Nanos {
        self.arrival_ns + self.latency_ns
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no latency records in class {0:?}")]
    EmptyClass(QueryClass),
    #[error("percentile {0} outside (0, 1]")]
    BadPercentile(u32),
}

/// Nearest-rank percentile of an ascending slice; `p = 1.0` is the maximum.
pub fn nearest_rank(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() || !(p > 0.0 && p <= 1.0) {
        return None;
    }
    let rank = (p * sorted.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

/// Power-of-two microsecond buckets: bucket 0 is `[0, 1]` µs and bucket
/// `k > 0` is `[2^k, 2^(k+1) - 1]` µs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Log2Histogram {
    counts: Vec<u64>,
}

impl Log2Histogram {
    pub fn bucket_of(ns: Nanos) -> usize {
        let us = ns / 1000;
        if us < 2 {
            0
        } else {
            63 - us.leading_zeros() as usize
        }
    }

    pub fn bounds_us(k: usize) -> (u64, u64) {
        if k == 0 {
            (0, 1)
        } else {
            (1 << k, (1 << (k + 1)) - 1)
        }
    }

    pub fn add(&mut self, ns: Nanos) {
        let k = Self::bucket_of(ns);
        if self.counts.len() <= k {
            self.counts.resize(k + 1, 0);
        }
        self.counts[k] += 1;
    }

    pub fn count(&self, k: usize) -> u64 {
        self.counts.get(k).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Non-empty buckets as `(lo_us, hi_us, count)`.
    pub fn buckets(&self) -> Vec<(u64, u64, u64)> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(k, &c)| {
                let (lo, hi) = Self::bounds_us(k);
                (lo, hi, c)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Metrics {
    pub latencies: Vec<LatencyRecord>,
    pub interruptions: Vec<Episode>,
}

impl Metrics {
    pub fn record(&mut self, r: LatencyRecord) {
        self.latencies.push(r);
    }

    pub fn sorted_latencies(&self, class: QueryClass) -> Vec<u64> {
        let mut v: Vec<u64> = self.latencies.iter().filter(|r| r.class == class).map(|r| r.latency_ns).collect();
        v.sort_unstable();
        v
    }

    pub fn percentile(&self, class: QueryClass, p: f64) -> Result<Nanos, MetricsError> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(MetricsError::BadPercentile((p * 100.0) as u32));
        }
        nearest_rank(&self.sorted_latencies(class), p).ok_or(MetricsError::EmptyClass(class))
    }

    pub fn count(&self, class: QueryClass) -> usize {
        self.latencies.iter().filter(|r| r.class == class).count()
    }

    pub fn interruption_histogram(&self) -> Log2Histogram {
        let mut h = Log2Histogram::default();
        for e in &self.interruptions {
            h.add(e.duration);
        }
        h
    }

    /// `(window_start, completed)` for consecutive windows from 0 through
    /// the last completion.
    pub fn throughput_series(&self, window_ns: Nanos) -> Vec<(Nanos, u64)> {
        assert!(window_ns > 0, "window must be positive");
        let Some(last) = self.latencies.iter().map(LatencyRecord::completion_ns).max() else {
            return Vec::new();
        };
        let mut bins = vec![0u64; (last / window_ns + 1) as usize];
        for r in &self.latencies {
            bins[(r.completion_ns() / window_ns) as usize] += 1;
        }
        bins.into_iter().enumerate().map(|(i, c)| (i as Nanos * window_ns, c)).collect()
    }

    pub fn out_of_service_total(&self, cause: Option<Cause>) -> Nanos {
        self.interruptions.iter().filter(|e| cause.is_none_or(|c| e.cause == c)).map(|e| e.duration).sum()
    }

    pub fn interruption_count(&self, cause: Option<Cause>) -> usize {
        self.interruptions.iter().filter(|e| cause.is_none_or(|c| e.cause == c)).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::Pid;

    fn lat(id: u64, ms: u64) -> LatencyRecord {
        LatencyRecord { query_id: id, class: QueryClass::Normal, arrival_ns: 0, latency_ns: ms * 1_000_000 }
    }

    #[test]
    fn nearest_rank_examples() {
        let mut m = Metrics::default();
        for i in 1..=100 {
            m.record(lat(i, i));
        }
        assert_eq!(m.percentile(QueryClass::Normal, 0.99), Ok(99_000_000));
        assert_eq!(m.percentile(QueryClass::Normal, 1.0), Ok(100_000_000));
        assert_eq!(m.percentile(QueryClass::Normal, 0.5), Ok(50_000_000));
        assert_eq!(m.percentile(QueryClass::Snapshot, 0.5), Err(MetricsError::EmptyClass(QueryClass::Snapshot)));
    }

    #[test]
    fn single_record_is_every_percentile() {
        let mut m = Metrics::default();
        m.record(lat(0, 7));
        for p in [0.01, 0.5, 0.99, 1.0] {
            assert_eq!(m.percentile(QueryClass::Normal, p), Ok(7_000_000));
        }
    }

    #[test]
    fn histogram_buckets() {
        assert_eq!(Log2Histogram::bucket_of(17_601), 4);
        assert_eq!(Log2Histogram::bounds_us(4), (16, 31));
        assert_eq!(Log2Histogram::bounds_us(Log2Histogram::bucket_of(40_000)), (32, 63));
        assert_eq!(Log2Histogram::bucket_of(999), 0);
        assert_eq!(Log2Histogram::bucket_of(2_000), 1);
        assert_eq!(Metrics::default().interruption_histogram().total(), 0);
    }

    #[test]
    fn uniform_throughput() {
        let mut m = Metrics::default();
        for i in 0..500u64 {
            m.record(LatencyRecord {
                query_id: i,
                class: QueryClass::Normal,
                arrival_ns: i * 1_000_000,
                latency_ns: 1,
            });
        }
        let s = m.throughput_series(50_000_000);
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|&(_, c)| c == 50));
        assert_eq!(s.iter().map(|x| x.1).sum::<u64>(), 500);
    }

    #[test]
    fn out_of_service_partitions() {
        let mut m = Metrics::default();
        let pid = Pid(1);
        for (i, cause) in Cause::ALL.into_iter().enumerate() {
            m.interruptions.push(Episode { pid, start: i as u64 * 100, duration: 10 + i as u64, cause });
        }
        let parts: u64 = Cause::ALL.iter().map(|&c| m.out_of_service_total(Some(c))).sum();
        assert_eq!(parts, m.out_of_service_total(None));
        assert_eq!(m.interruption_histogram().total(), m.interruption_count(None) as u64);
    }
}
