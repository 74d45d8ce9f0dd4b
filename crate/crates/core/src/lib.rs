//! A write-optimized distributed B+Tree over a simulated disaggregated-memory
//! fabric, plus an FG+-style comparison tree and a benchmark harness.
//!
//! The crate is organized around the simulated fabric:
//!
//! * [`fabric`] — memory servers with host and NIC on-chip regions, reliable
//!   queue pairs executing one-sided commands in post order, virtual-time
//!   accounting for round trips and atomic bucket serialization.
//! * [`allocator`] — two-stage memory management: 8 MiB chunks handed out by
//!   per-server memory threads, node-grained bump allocation at clients.
//! * [`hocl`] — hierarchical on-chip lock: on-chip global lock tables plus
//!   per-compute-server local lock tables with FIFO wait queues and bounded
//!   lock handover.
//! * [`node`] / [`tree`] — byte-exact node layouts with two-level versions and
//!   the Sherman engine (lock-free reads, entry-grained write-back, command
//!   combination).
//! * [`cache`] — compute-server index cache with two-choice eviction.
//! * [`baseline`] — the FG+ engine: sorted leaves, node-level versions only,
//!   four-round-trip writes, host-memory spin locks.
//! * [`bench`] — workload generation, concurrent driver, metrics reporting.

pub mod allocator;
pub mod baseline;
pub mod bench;
pub mod cache;
pub mod client;
pub mod fabric;
pub mod hocl;
pub mod node;
pub mod tree;

pub use client::ClientCtx;
pub use fabric::{Fabric, FabricConfig, FabricError, GlobalAddress, Region};

/// Mixes the bits of `x` so that nearby inputs map to unrelated outputs.
///
/// Used for lock-table hashing and key scrambling; must stay stable across
/// runs because lock coordinates are a pure function of node addresses.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
