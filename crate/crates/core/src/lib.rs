//! Deterministic discrete-event simulator of fork-based snapshotting for
//! in-memory key-value stores.

// `spawn(&[a..b])` is a one-VMA process, not a mistaken range array
#![allow(clippy::single_range_in_vec_init)]

pub mod clock;
pub mod engines;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod scenario;
pub mod scripted;
pub mod vm;
pub mod workload;
