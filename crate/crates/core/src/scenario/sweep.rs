use std::str::FromStr;

use serde::Serialize;

use super::config::{ByteSize, ScenarioConfig};
use super::report::RunOutput;
use super::runner::run;
use crate::engines::EngineKind;
use crate::error::{ConfigError, SimError};
use crate::metrics::QueryClass;
use crate::vm::parse_bytes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    InstanceBytes,
    Workers,
    Rate,
    Clients,
}

impl FromStr for SweepAxis {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "instance_bytes" => Ok(SweepAxis::InstanceBytes),
            "workers" => Ok(SweepAxis::Workers),
            "rate" => Ok(SweepAxis::Rate),
            "clients" => Ok(SweepAxis::Clients),
            _ => Err(ConfigError::Invalid(format!(
                "unknown sweep axis {s:?} (expected instance_bytes, workers, rate or clients)"
            ))),
        }
    }
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::InstanceBytes => "instance_bytes",
            SweepAxis::Workers => "workers",
            SweepAxis::Rate => "rate",
            SweepAxis::Clients => "clients",
        }
    }

    /// A copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &ScenarioConfig, value: &str) -> Result<ScenarioConfig, ConfigError> {
        let bad = || ConfigError::Invalid(format!("bad {} value {value:?}", self.as_str()));
        let mut c = base.clone();
        match self {
            SweepAxis::InstanceBytes => c.instance_bytes = ByteSize(parse_bytes(value).ok_or_else(bad)?),
            SweepAxis::Workers => c.workers = value.parse().map_err(|_| bad())?,
            SweepAxis::Rate => c.workload.rate = value.parse().map_err(|_| bad())?,
            SweepAxis::Clients => c.workload.clients = value.parse().map_err(|_| bad())?,
        }
        c.validate()?;
        Ok(c)
    }
}

/// One line of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub engine: EngineKind,
    pub fork_kernel_ns: u64,
    pub copy_span_ns: Option<u64>,
    pub out_of_service_ns: u64,
    pub table_interruptions: usize,
    pub p99_normal_ns: Option<u64>,
    pub p99_snapshot_ns: Option<u64>,
    pub max_snapshot_ns: Option<u64>,
    pub consistency: &'static str,
}

impl SweepRow {
    fn new(axis: SweepAxis, value: &str, out: &RunOutput) -> Self {
        let first = out.sessions.first();
        let normal = out.class_summary(QueryClass::Normal);
        let snap = out.class_summary(QueryClass::Snapshot);
        Self {
            axis,
            value: value.to_string(),
            engine: out.config.engine,
            fork_kernel_ns: first.map_or(0, |s| s.fork_kernel_ns),
            copy_span_ns: first.and_then(|s| s.copy_span_ns),
            out_of_service_ns: out.metrics.out_of_service_total(None),
            table_interruptions: out.table_interruptions(),
            p99_normal_ns: normal.p99_ns,
            p99_snapshot_ns: snap.p99_ns,
            max_snapshot_ns: snap.max_ns,
            consistency: out.verdict().as_str(),
        }
    }
}

/// Runs `base` once per value of `axis`, in parallel, keeping input order.
pub fn sweep(
    base: &ScenarioConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<(SweepRow, RunOutput)>, SimError> {
    let configs = values.iter().map(|v| axis.apply(base, v)).collect::<Result<Vec<_>, _>>()?;
    let results: Vec<Result<RunOutput, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run(c))).collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    });
    values.iter().zip(results).map(|(v, r)| r.map(|out| (SweepRow::new(axis, v, &out), out))).collect()
}

/// `sweep.csv` body.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in memory");
    }
    String::from_utf8(w.into_inner().expect("in memory")).expect("ascii")
}
