//! Distributed query-shuffle engine with hybrid parallelism.
//!
//! Inside a node, queries run morsel-driven over a pool of workers with
//! NUMA-region-aware work stealing; between nodes, decoupled exchange
//! operators hand pooled messages to a per-node communication multiplexer
//! that shuffles them over a pluggable transport, optionally following a
//! conflict-free round-robin schedule.
//!
//! Modules:
//! - [`codec`]: schema-driven binary tuple serialization (the wire format)
//! - [`hash`]: CRC32-C hashing and hash partitioning
//! - [`exchange`]: decoupled exchange operators, message pools, retain counts
//! - [`schedule`]: round-robin phase schedules and the sync protocol
//! - [`transport`]: switch-contention simulator, in-process channels, sockets
//! - [`engine`]: relational operators, pipelines, workers, the multiplexer
//! - [`analysis`]: closed-form connection/buffer/skew model
//! - [`harness`]: experiment runners and CSV reports behind the CLI

pub mod analysis;
pub mod codec;
pub mod engine;
pub mod exchange;
pub mod harness;
pub mod hash;
pub mod schedule;
pub mod transport;
