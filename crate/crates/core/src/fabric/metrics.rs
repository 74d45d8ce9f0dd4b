//! Per-client fabric accounting.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Shared atomic counters, one set per registered client.
#[derive(Debug, Default)]
pub struct ClientCounters {
    pub round_trips: AtomicU64,
    pub bytes_written: AtomicU64,
    pub lock_release_bytes: AtomicU64,
    pub atomic_retries: AtomicU64,
    pub chunk_rpcs: AtomicU64,
    pub sim_time: AtomicU64,
}

impl ClientCounters {
    pub fn snapshot(&self) -> MetricsRecord {
        MetricsRecord {
            round_trips: self.round_trips.load(Ordering::Relaxed),
            bytes_written: self.bytes_written.load(Ordering::Relaxed),
            lock_release_bytes: self.lock_release_bytes.load(Ordering::Relaxed),
            atomic_retries: self.atomic_retries.load(Ordering::Relaxed),
            chunk_rpcs: self.chunk_rpcs.load(Ordering::Relaxed),
            sim_time: self.sim_time.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.round_trips.store(0, Ordering::Relaxed);
        self.bytes_written.store(0, Ordering::Relaxed);
        self.lock_release_bytes.store(0, Ordering::Relaxed);
        self.atomic_retries.store(0, Ordering::Relaxed);
        self.chunk_rpcs.store(0, Ordering::Relaxed);
    }
}

/// Cumulative per-client accounting: round trips are post calls, bytes are
/// data-write payloads (lock releases reported separately), atomic retries
/// are CAS/masked-CAS attempts whose compare failed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round_trips: u64,
    pub bytes_written: u64,
    pub lock_release_bytes: u64,
    pub atomic_retries: u64,
    pub chunk_rpcs: u64,
    pub sim_time: u64,
}
