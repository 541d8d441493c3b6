//! fsync-latency covert channel and storage side-channel toolkit.
//!
//! Contention between fsync calls on a shared storage stack makes one
//! process's fsync latency depend on another's activity. This crate provides
//! the pieces to measure that, exploit it as an on-off keyed covert channel
//! and use it as a side channel against co-located workloads:
//!
//! - [`probe`]: timed fsync probes on a real file.
//! - [`sim`]: a seeded, virtual-clock contention simulator.
//! - [`modem`]: sender and threshold receiver with frame synchronization.
//! - [`metrics`]: bit error rates and channel capacity.
//! - [`analyzer`]: episode extraction, rate estimation, split detection,
//!   k-NN fingerprinting and keystroke timing.

pub mod analyzer;
pub mod bits;
pub mod cli;
pub mod config;
pub mod frame;
pub mod metrics;
pub mod modem;
pub mod probe;
pub mod sim;
pub mod trace;

pub use bits::BitStream;
pub use config::{ChannelConfig, DecisionRule, ProbeMode};
pub use frame::{encode_frames, find_frame_start, Frame};
pub use trace::{LatencySample, LatencyTrace};
