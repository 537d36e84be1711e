//! Simulated time: the event scheduler, the nanosecond cost model and the
//! parent's user/kernel mode timeline.

mod cost;
mod sched;
mod timeline;
mod trace;

pub use cost::{CostModel, ForkCost};
pub use sched::{Nanos, ScheduleError, Scheduler};
pub use timeline::{Cause, Episode, ParentTimeline};
pub use trace::{Trace, TraceRecord};
