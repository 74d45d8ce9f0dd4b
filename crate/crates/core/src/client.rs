//! Per-thread client context: virtual clock, queue pairs, fabric counters,
//! node allocator cursor, and per-operation scratch statistics.

use std::collections::HashMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::allocator::NodeAllocator;
use crate::fabric::metrics::ClientCounters;
use crate::fabric::{Fabric, FabricError, GlobalAddress, MetricsRecord, QueuePair};
use crate::mix64;

/// Counters the index engines bump while an operation runs; the bench driver
/// snapshots deltas around each op.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpStats {
    /// Leaf re-reads forced by version mismatches or the wraparound rule.
    pub read_retries: u64,
    /// Sideways hops over sibling pointers.
    pub sibling_hops: u64,
    /// Node splits performed.
    pub splits: u64,
    /// Lock acquisitions satisfied by a local handover.
    pub handover_acquires: u64,
    /// Traversals restarted after invalidating a stale cache entry.
    pub cache_invalidations: u64,
}

/// Owned by exactly one client thread. All virtual-time accounting for the
/// thread funnels through here.
pub struct ClientCtx {
    fabric: Arc<Fabric>,
    id: u64,
    cs_id: u16,
    clock: u64,
    qps: HashMap<u16, QueuePair>,
    counters: Arc<ClientCounters>,
    rng: ChaCha8Rng,
    alloc: Option<NodeAllocator>,
    pub stats: OpStats,
}

impl ClientCtx {
    pub(crate) fn new(
        fabric: Arc<Fabric>,
        id: u64,
        cs_id: u16,
        counters: Arc<ClientCounters>,
    ) -> Self {
        let seed = mix64(fabric.config().seed ^ mix64(id.wrapping_add(1)));
        ClientCtx {
            fabric,
            id,
            cs_id,
            clock: 0,
            qps: HashMap::new(),
            counters,
            rng: ChaCha8Rng::seed_from_u64(seed),
            alloc: None,
            stats: OpStats::default(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn cs_id(&self) -> u16 {
        self.cs_id
    }

    pub fn fabric(&self) -> Arc<Fabric> {
        self.fabric.clone()
    }

    pub fn now(&self) -> u64 {
        self.clock
    }

    pub(crate) fn advance_to(&mut self, t: u64) {
        self.clock = self.clock.max(t);
        self.counters.sim_time.fetch_max(self.clock, Ordering::Relaxed);
    }

    /// Jumps the clock forward to `t` if `t` is later; used when a lock grant
    /// carries the granter's time.
    pub fn sync_to(&mut self, t: u64) {
        self.advance_to(t);
    }

    /// Adds local (non-network) virtual time, e.g. spin polls.
    pub fn spend(&mut self, ticks: u64) {
        self.advance_to(self.clock + ticks);
    }

    /// Rewinds or sets the clock; used by wave reads and by the bench driver
    /// when it re-bases clients after warm-up.
    pub fn set_now(&mut self, t: u64) {
        self.clock = t;
    }

    pub(crate) fn counters(&self) -> &ClientCounters {
        &self.counters
    }

    pub(crate) fn draw_f64(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Lazily opened queue pair to `ms_id`; one per (thread, MS).
    pub fn qp(&mut self, ms_id: u16) -> Result<QueuePair, FabricError> {
        if let Some(qp) = self.qps.get(&ms_id) {
            return Ok(*qp);
        }
        let qp = self.fabric.open_qp(self.id, ms_id)?;
        self.qps.insert(ms_id, qp);
        Ok(qp)
    }

    /// Allocates one node-sized block. Bump-allocates inside the thread's
    /// current chunk; fetches a fresh chunk over RPC only when the current
    /// one is full, cycling memory servers round-robin.
    pub fn alloc_node(&mut self, node_size: u64) -> Result<GlobalAddress, FabricError> {
        if self.alloc.as_ref().map(|a| a.node_size()) != Some(node_size) {
            let n_ms = self.fabric.num_servers();
            let start = (self.id % n_ms as u64) as u16;
            self.alloc = Some(NodeAllocator::new(node_size, n_ms, start));
        }
        if let Some(addr) = self.alloc.as_mut().unwrap().bump() {
            return Ok(addr);
        }
        let ms = self.alloc.as_ref().unwrap().next_ms();
        let fabric = self.fabric.clone();
        let base = fabric.request_chunk(self, ms)?;
        let a = self.alloc.as_mut().unwrap();
        a.install_chunk(base);
        Ok(a.bump().expect("fresh chunk has room"))
    }

    pub fn metrics(&self) -> MetricsRecord {
        self.counters.snapshot()
    }

    pub fn reset_metrics(&self) {
        self.counters.reset();
    }
}
