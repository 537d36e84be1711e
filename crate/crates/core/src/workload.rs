//! Open-loop query streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::clock::Nanos;
use crate::error::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KeyDist {
    Uniform,
    /// Defaults: mean `key_space / 2`, stddev `key_space / 6`.
    Gaussian {
        mean: Option<f64>,
        stddev: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrivals {
    Fixed,
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Queries per second.
    pub rate: f64,
    pub set_get_ratio: (u32, u32),
    pub key_space: u64,
    pub key_dist: KeyDist,
    pub value_bytes: usize,
    pub clients: u32,
    pub total_queries: u64,
    /// Keys `[0, preload)` exist before the run starts.
    pub preload: u64,
    pub arrivals: Arrivals,
    pub start_ns: Nanos,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            rate: 50_000.0,
            set_get_ratio: (1, 0),
            key_space: 1 << 16,
            key_dist: KeyDist::Uniform,
            value_bytes: 16,
            clients: 50,
            total_queries: 10_000,
            preload: 0,
            arrivals: Arrivals::Fixed,
            start_ns: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(format!("workload: {m}")));
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return bad("rate must be positive");
        }
        if self.set_get_ratio.0 as u64 + self.set_get_ratio.1 as u64 == 0 {
            return bad("set_get_ratio must not be 0:0");
        }
        if self.key_space == 0 {
            return bad("key_space must be positive");
        }
        if self.clients == 0 {
            return bad("clients must be positive");
        }
        if self.preload > self.key_space {
            return bad("preload exceeds key_space");
        }
        if let KeyDist::Gaussian { stddev: Some(s), .. } = self.key_dist {
            if !(s.is_finite() && s > 0.0) {
                return bad("gaussian stddev must be positive");
            }
        }
        Ok(())
    }

    /// Fixed-mode spacing between consecutive arrivals.
    pub fn interarrival_ns(&self) -> f64 {
        1e9 / self.rate
    }

    pub fn generate(&self, seed: u64) -> Result<Generator, ConfigError> {
        self.validate()?;
        let ks = self.key_space as f64;
        let normal = match self.key_dist {
            KeyDist::Uniform => None,
            KeyDist::Gaussian { mean, stddev } => Some(
                Normal::new(mean.unwrap_or(ks / 2.0), stddev.unwrap_or(ks / 6.0))
                    .map_err(|e| ConfigError::Invalid(format!("workload: {e}")))?,
            ),
        };
        Ok(Generator {
            spec: self.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            next: 0,
            t: self.start_ns as f64,
            normal,
            exp: Exp::new(self.rate / 1e9).expect("positive rate"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Set,
    Get,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub id: u64,
    pub at: Nanos,
    pub client: u32,
    pub kind: QueryKind,
    pub key: u64,
}

/// Deterministic stream of `total_queries` queries.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    next: u64,
    t: f64,
    normal: Option<Normal<f64>>,
    exp: Exp<f64>,
}

impl Iterator for Generator {
    type Item = Query;

    fn next(&mut self) -> Option<Query> {
        let s = &self.spec;
        if self.next >= s.total_queries {
            return None;
        }
        let id = self.next;
        self.next += 1;
        let at = match s.arrivals {
            Arrivals::Fixed => s.start_ns + (id as f64 * 1e9 / s.rate).floor() as Nanos,
            Arrivals::Poisson => {
                if id > 0 {
                    self.t += self.exp.sample(&mut self.rng);
                }
                self.t.floor() as Nanos
            }
        };
        let (sets, gets) = s.set_get_ratio;
        let kind = if self.rng.random_range(0..sets as u64 + gets as u64) < sets as u64 {
            QueryKind::Set
        } else {
            QueryKind::Get
        };
        let key = match &self.normal {
            None => self.rng.random_range(0..s.key_space),
            Some(n) => n.sample(&mut self.rng).round().clamp(0.0, (s.key_space - 1) as f64) as u64,
        };
        Some(Query { id, at, client: (id % s.clients as u64) as u32, kind, key })
    }
}

/// Value bytes written by query `id`. Distinct queries write distinct
/// values, so a dump shows which write it captured.
pub fn fill_value(id: u64, key: u64, buf: &mut [u8]) {
    let mut x = id.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ key.rotate_left(29);
    for chunk in buf.chunks_mut(8) {
        x ^= x >> 33;
        x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
        chunk.copy_from_slice(&x.to_le_bytes()[..chunk.len()]);
    }
}

/// Value bytes of a preloaded key: the key itself, repeated.
pub fn preload_value(key: u64, buf: &mut [u8]) {
    let k = key.to_le_bytes();
    for chunk in buf.chunks_mut(8) {
        chunk.copy_from_slice(&k[..chunk.len()]);
    }
}
