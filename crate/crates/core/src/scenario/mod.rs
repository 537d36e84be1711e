//! Scenario configuration, the event-driven run loop and its reports.

mod config;
mod profile;
mod random;
mod report;
mod runner;
mod sweep;

pub use config::{ByteSize, ErrorPhase, ErrorSpec, OpKind, OpSpec, OpTarget, ScenarioConfig};
pub use profile::{fork_profile, ForkProfile};
pub use random::random_config;
pub use report::{ClassSummary, RollbackReport, RunOutput, SessionReport, Summary, Verdict};
pub use runner::{run, Prepared};
pub use sweep::{sweep, sweep_csv, SweepAxis, SweepRow};
