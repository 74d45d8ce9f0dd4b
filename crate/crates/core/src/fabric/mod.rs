//! Simulated disaggregated-memory fabric.
//!
//! A [`Fabric`] owns a set of memory servers, each with a host region and a
//! small NIC on-chip region. Client threads open reliable queue pairs and post
//! one-sided commands ([`Verb::Read`], [`Verb::Write`], CAS, masked CAS, FAA),
//! either singly or as a [`CombineList`] that executes in list order and costs
//! exactly one round trip.
//!
//! Time is a virtual clock in abstract ticks (1 tick = 1 ns by convention).
//! Every post advances the issuing client's clock by the round-trip latency;
//! host-region atomics additionally queue behind per-bucket service windows,
//! modelling the NIC-internal serialization of atomics whose target addresses
//! share their low bits.
//!
//! Torn reads are opt-in: reads assemble their result in `atomicity_unit`
//! chunks in increasing address order, and only release the region between
//! chunks when `torn_interleave_probability` says so (or when a scripted
//! read hook is installed). Writes apply atomically at a single linearization
//! point while `read_after_write_ordering` is true, which models the PCIe
//! read-after-write ordering that keeps in-flight node writes from being
//! observed out of order on real NICs.

mod addr;
mod command;
mod config;
pub(crate) mod metrics;

pub use addr::{GlobalAddress, Region};
pub use command::{CombineList, Command, Completion, CompletionValue, Verb, WriteKind};
pub use config::FabricConfig;
pub use metrics::MetricsRecord;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use dashmap::DashMap;
use parking_lot::{Mutex, MutexGuard};
use thiserror::Error;

use crate::client::ClientCtx;
use metrics::ClientCounters;

/// Size of the chunks the per-server memory thread hands out over RPC.
pub const CHUNK_BYTES: u64 = 8 * 1024 * 1024;

/// Host-region offset where the root pointer block of a tree lives (MS 0).
pub const ROOT_BLOCK_OFFSET: u64 = 0;
/// Host-region base of the per-server 64-bit spin-lock table used by the
/// baseline engine (131,072 slots of 8 bytes).
pub const HOST_LOCK_TABLE_OFFSET: u64 = 4096;
/// Number of lock slots per memory server, host table and on-chip table alike.
pub const LOCKS_PER_MS: usize = 131_072;
/// First host offset available to the chunk allocator; everything below is
/// reserved for the control page and the host lock table.
pub const CHUNK_AREA_OFFSET: u64 = 2 * 1024 * 1024;

const OFFSET_BITS: u64 = 48;

#[derive(Debug, Error)]
pub enum FabricError {
    #[error("unknown memory server {0}")]
    UnknownMs(u16),
    #[error("access [{offset}, {offset}+{len}) out of bounds for {region:?} region of MS {ms_id} (capacity {capacity})")]
    OutOfBounds {
        ms_id: u16,
        region: Region,
        offset: u64,
        len: u64,
        capacity: u64,
    },
    #[error("offset {0:#x} exceeds the 48-bit address space")]
    AddressWidth(u64),
    #[error("atomic target {0:#x} is not 8-byte aligned")]
    Misaligned(u64),
    #[error("masked CAS must stay within one aligned 8-byte word")]
    MaskSpan,
    #[error("combine list command targets MS {cmd} but the list is bound to MS {list}")]
    CrossMs { list: u16, cmd: u16 },
    #[error("combine list is empty")]
    EmptyList,
    #[error("queue pair is bound to MS {qp} but the list targets MS {list}")]
    QpMismatch { qp: u16, list: u16 },
    #[error("MS {0} has no free chunks")]
    Exhausted(u16),
    #[error("invalid fabric config: {0}")]
    Config(String),
}

/// A reliable-connected queue pair between one client thread and one MS.
///
/// Handles are `Copy`; the per-QP bookkeeping (post tickets, order assertion)
/// lives server-side. A QP must not be shared between client threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueuePair {
    pub id: u64,
    pub client_id: u64,
    pub ms_id: u16,
}

/// Context handed to a scripted-read hook between chunks of an in-flight read.
pub struct ReadStep {
    pub addr: GlobalAddress,
    pub len: usize,
    /// Index of the chunk about to be copied (the previous ones are already
    /// in the reader's buffer).
    pub next_chunk: usize,
    pub total_chunks: usize,
}

type ReadHook = Box<dyn FnMut(&ReadStep) + Send>;

struct RegionStore {
    bytes: Vec<u8>,
}

struct MemoryThread {
    next_chunk_base: u64,
    capacity: u64,
}

struct MemoryServer {
    host: Mutex<RegionStore>,
    onchip: Mutex<RegionStore>,
    /// Virtual-time service windows for host-region atomics, one per bucket.
    bucket_busy_until: Vec<AtomicU64>,
    /// Highest arrival time of any mutation applied to this MS. Reads sample
    /// it at their first and last chunk; the difference is the read's
    /// assembly window, used by the version-wraparound rule.
    mutation_clock: AtomicU64,
    qp_last_ticket: Mutex<HashMap<u64, u64>>,
    memory_thread: Mutex<MemoryThread>,
}

impl MemoryServer {
    fn region(&self, region: Region) -> &Mutex<RegionStore> {
        match region {
            Region::Host => &self.host,
            Region::OnChip => &self.onchip,
        }
    }
}

/// The shared fabric. Safe for concurrent use from many client threads; each
/// thread owns its queue pairs and its [`ClientCtx`] exclusively.
pub struct Fabric {
    cfg: FabricConfig,
    servers: Vec<MemoryServer>,
    global_clock: AtomicU64,
    post_count: AtomicU64,
    next_client_id: AtomicU64,
    next_qp_id: AtomicU64,
    clients: DashMap<u64, Arc<ClientCounters>>,
    /// Shadow owner map for exclusive-lock audits: slot key -> owner token.
    /// Maintained by the lock layers, shared here so it spans compute servers.
    lock_audit: DashMap<(u16, u64), u64>,
    read_hook: Mutex<Option<ReadHook>>,
}

impl Fabric {
    /// Builds a fabric of `n_memory_servers` servers, each with a
    /// zero-initialized host region and on-chip region.
    pub fn new(n_memory_servers: u16, cfg: FabricConfig) -> Result<Arc<Self>, FabricError> {
        cfg.validate()?;
        if n_memory_servers == 0 {
            return Err(FabricError::Config(
                "need at least one memory server".into(),
            ));
        }
        let servers = (0..n_memory_servers)
            .map(|_| MemoryServer {
                host: Mutex::new(RegionStore {
                    bytes: vec![0u8; cfg.host_region_bytes as usize],
                }),
                onchip: Mutex::new(RegionStore {
                    bytes: vec![0u8; cfg.onchip_region_bytes as usize],
                }),
                bucket_busy_until: (0..cfg.atomic_bucket_count)
                    .map(|_| AtomicU64::new(0))
                    .collect(),
                mutation_clock: AtomicU64::new(0),
                qp_last_ticket: Mutex::new(HashMap::new()),
                memory_thread: Mutex::new(MemoryThread {
                    next_chunk_base: CHUNK_AREA_OFFSET,
                    capacity: cfg.host_region_bytes,
                }),
            })
            .collect();
        Ok(Arc::new(Fabric {
            cfg,
            servers,
            global_clock: AtomicU64::new(0),
            post_count: AtomicU64::new(0),
            next_client_id: AtomicU64::new(0),
            next_qp_id: AtomicU64::new(0),
            clients: DashMap::new(),
            lock_audit: DashMap::new(),
            read_hook: Mutex::new(None),
        }))
    }

    pub fn config(&self) -> &FabricConfig {
        &self.cfg
    }

    pub fn num_servers(&self) -> u16 {
        self.servers.len() as u16
    }

    /// Total number of post calls across all clients, for conservation checks.
    pub fn total_posts(&self) -> u64 {
        self.post_count.load(Ordering::Relaxed)
    }

    /// Registers a client thread and returns its context (virtual clock,
    /// metrics, queue pairs, node allocator cursor).
    pub fn register_client(self: &Arc<Self>, cs_id: u16) -> ClientCtx {
        let id = self.next_client_id.fetch_add(1, Ordering::Relaxed);
        let counters = Arc::new(ClientCounters::default());
        self.clients.insert(id, counters.clone());
        ClientCtx::new(self.clone(), id, cs_id, counters)
    }

    /// Opens a reliable-connected queue pair from `client` to `ms_id`.
    pub fn open_qp(&self, client_id: u64, ms_id: u16) -> Result<QueuePair, FabricError> {
        if ms_id as usize >= self.servers.len() {
            return Err(FabricError::UnknownMs(ms_id));
        }
        let id = self.next_qp_id.fetch_add(1, Ordering::Relaxed);
        self.servers[ms_id as usize]
            .qp_last_ticket
            .lock()
            .insert(id, 0);
        Ok(QueuePair {
            id,
            client_id,
            ms_id,
        })
    }

    /// Installs a hook invoked between chunks of every multi-chunk read.
    ///
    /// The hook runs with all region locks released, so it may issue commands
    /// through other queue pairs; this is the scripted schedule driver used by
    /// the torn-read and wraparound tests.
    pub fn install_read_hook(&self, hook: ReadHook) {
        *self.read_hook.lock() = Some(hook);
    }

    pub fn clear_read_hook(&self) {
        *self.read_hook.lock() = None;
    }

    /// Snapshot of a client's cumulative fabric metrics.
    pub fn metrics(&self, client_id: u64) -> MetricsRecord {
        self.clients
            .get(&client_id)
            .map(|c| c.snapshot())
            .unwrap_or_default()
    }

    pub fn reset_metrics(&self, client_id: u64) {
        if let Some(c) = self.clients.get(&client_id) {
            c.reset();
        }
    }

    /// Current value of the fabric-wide virtual clock high-water mark.
    pub fn global_time(&self) -> u64 {
        self.global_clock.load(Ordering::Relaxed)
    }

    fn server(&self, ms_id: u16) -> Result<&MemoryServer, FabricError> {
        self.servers
            .get(ms_id as usize)
            .ok_or(FabricError::UnknownMs(ms_id))
    }

    fn region_capacity(&self, region: Region) -> u64 {
        match region {
            Region::Host => self.cfg.host_region_bytes,
            Region::OnChip => self.cfg.onchip_region_bytes,
        }
    }

    fn check_bounds(&self, addr: GlobalAddress, len: u64) -> Result<(), FabricError> {
        if addr.offset >= 1 << OFFSET_BITS {
            return Err(FabricError::AddressWidth(addr.offset));
        }
        let capacity = self.region_capacity(addr.region);
        if addr.offset.checked_add(len).map_or(true, |end| end > capacity) {
            return Err(FabricError::OutOfBounds {
                ms_id: addr.ms_id,
                region: addr.region,
                offset: addr.offset,
                len,
                capacity,
            });
        }
        Ok(())
    }

    fn validate_command(&self, cmd: &Command) -> Result<(), FabricError> {
        match &cmd.verb {
            Verb::Read { len } => self.check_bounds(cmd.addr, *len as u64),
            Verb::Write { payload, .. } => self.check_bounds(cmd.addr, payload.len() as u64),
            Verb::Cas { .. } | Verb::Faa { .. } | Verb::MaskedCas { .. } => {
                if cmd.addr.offset % 8 != 0 {
                    return Err(FabricError::Misaligned(cmd.addr.offset));
                }
                self.check_bounds(cmd.addr, 8)
            }
        }
    }

    /// Posts a combine list on `qp`. Commands execute at the MS in list
    /// order; the call costs exactly one round trip regardless of length.
    /// Returns one completion per signaled command.
    pub fn post(
        &self,
        ctx: &mut ClientCtx,
        qp: QueuePair,
        list: CombineList,
    ) -> Result<Vec<Completion>, FabricError> {
        if list.is_empty() {
            return Err(FabricError::EmptyList);
        }
        if list.ms_id() != qp.ms_id {
            return Err(FabricError::QpMismatch {
                qp: qp.ms_id,
                list: list.ms_id(),
            });
        }
        let server = self.server(qp.ms_id)?;
        let cmds = list.into_commands();
        for cmd in &cmds {
            self.validate_command(cmd)?;
            if cmd.addr.ms_id != qp.ms_id {
                return Err(FabricError::CrossMs {
                    list: qp.ms_id,
                    cmd: cmd.addr.ms_id,
                });
            }
        }

        // Per-QP in-order delivery assertion: tickets must be issued and
        // applied monotonically.
        let ticket = {
            let mut map = server.qp_last_ticket.lock();
            let t = map.entry(qp.id).or_insert(0);
            *t += 1;
            *t
        };

        self.post_count.fetch_add(1, Ordering::Relaxed);
        ctx.counters().round_trips.fetch_add(1, Ordering::Relaxed);

        let issued_at = ctx.now();
        let arrival = issued_at + self.cfg.round_trip_latency / 2;
        let mut extra_cost = 0u64;
        let mut completions = Vec::new();

        for cmd in cmds {
            let (value, window) = match cmd.verb {
                Verb::Read { len } => {
                    let (bytes, start_mark, end_mark) =
                        self.exec_read(ctx, server, cmd.addr, len)?;
                    (CompletionValue::Bytes(bytes), (start_mark, end_mark))
                }
                Verb::Write { payload, kind } => {
                    let n = payload.len() as u64;
                    match kind {
                        WriteKind::Data => {
                            ctx.counters().bytes_written.fetch_add(n, Ordering::Relaxed)
                        }
                        WriteKind::LockRelease => ctx
                            .counters()
                            .lock_release_bytes
                            .fetch_add(n, Ordering::Relaxed),
                    };
                    self.exec_write(ctx, server, cmd.addr, &payload, arrival)?;
                    (CompletionValue::None, (0, 0))
                }
                Verb::Cas { compare, swap } => {
                    let (orig, cost) =
                        self.exec_atomic(ctx, server, cmd.addr, arrival + extra_cost, |word| {
                            if word == compare {
                                (swap, word == compare)
                            } else {
                                (word, false)
                            }
                        })?;
                    if orig != compare {
                        ctx.counters().atomic_retries.fetch_add(1, Ordering::Relaxed);
                    }
                    extra_cost += cost;
                    (CompletionValue::Word(orig), (0, 0))
                }
                Verb::MaskedCas {
                    compare,
                    swap,
                    mask,
                } => {
                    let (orig, cost) =
                        self.exec_atomic(ctx, server, cmd.addr, arrival + extra_cost, |word| {
                            if word & mask == compare & mask {
                                ((word & !mask) | (swap & mask), true)
                            } else {
                                (word, false)
                            }
                        })?;
                    if orig & mask != compare & mask {
                        ctx.counters().atomic_retries.fetch_add(1, Ordering::Relaxed);
                    }
                    extra_cost += cost;
                    (CompletionValue::Word(orig), (0, 0))
                }
                Verb::Faa { delta } => {
                    let (orig, cost) =
                        self.exec_atomic(ctx, server, cmd.addr, arrival + extra_cost, |word| {
                            (word.wrapping_add(delta), true)
                        })?;
                    extra_cost += cost;
                    (CompletionValue::Word(orig), (0, 0))
                }
            };
            if cmd.signaled {
                completions.push(Completion {
                    ticket,
                    value,
                    issued_at,
                    assembly_start: window.0,
                    assembly_end: window.1,
                    sim_time: 0, // patched below once the post cost is known
                });
            }
        }

        let done = issued_at + self.cfg.round_trip_latency + extra_cost;
        for c in &mut completions {
            c.sim_time = done;
        }
        ctx.advance_to(done);
        self.global_clock.fetch_max(done, Ordering::Relaxed);
        Ok(completions)
    }

    /// Chunked read. Returns the bytes plus the MS mutation-clock samples at
    /// the first and last chunk; their difference is the assembly window.
    fn exec_read(
        &self,
        ctx: &mut ClientCtx,
        server: &MemoryServer,
        addr: GlobalAddress,
        len: usize,
    ) -> Result<(Vec<u8>, u64, u64), FabricError> {
        let unit = self.cfg.atomicity_unit as u64;
        let start = addr.offset;
        let end = start + len as u64;
        // Chunk grid is aligned to the atomicity unit, not to the read base.
        let mut boundaries = vec![start];
        let mut b = (start / unit + 1) * unit;
        while b < end {
            boundaries.push(b);
            b += unit;
        }
        boundaries.push(end);
        let total_chunks = boundaries.len() - 1;

        let mut out = vec![0u8; len];
        let mut guard: Option<MutexGuard<'_, RegionStore>> = Some(server.region(addr.region).lock());
        let start_mark = server.mutation_clock.load(Ordering::Acquire);
        let mut end_mark = start_mark;
        for i in 0..total_chunks {
            if guard.is_none() {
                guard = Some(server.region(addr.region).lock());
            }
            let g = guard.as_ref().unwrap();
            let (lo, hi) = (boundaries[i] as usize, boundaries[i + 1] as usize);
            out[lo - start as usize..hi - start as usize].copy_from_slice(&g.bytes[lo..hi]);
            end_mark = server.mutation_clock.load(Ordering::Acquire);
            let last = i + 1 == total_chunks;
            if last {
                break;
            }
            let hooked = self.read_hook.lock().is_some();
            let interleave = hooked
                || (self.cfg.torn_interleave_probability > 0.0
                    && ctx.draw_f64() < self.cfg.torn_interleave_probability);
            if interleave {
                guard = None;
                if hooked {
                    // Take the hook out while it runs so commands it issues
                    // do not recurse into it.
                    let mut h = self.read_hook.lock().take();
                    if let Some(hook) = h.as_mut() {
                        hook(&ReadStep {
                            addr,
                            len,
                            next_chunk: i + 1,
                            total_chunks,
                        });
                    }
                    let mut slot = self.read_hook.lock();
                    if slot.is_none() {
                        *slot = h;
                    }
                } else {
                    std::thread::yield_now();
                }
            }
        }
        drop(guard);
        Ok((out, start_mark, end_mark))
    }

    fn exec_write(
        &self,
        ctx: &mut ClientCtx,
        server: &MemoryServer,
        addr: GlobalAddress,
        payload: &[u8],
        arrival: u64,
    ) -> Result<(), FabricError> {
        let region = server.region(addr.region);
        let lo = addr.offset as usize;
        if self.cfg.read_after_write_ordering {
            // Whole-command linearization point.
            let mut g = region.lock();
            g.bytes[lo..lo + payload.len()].copy_from_slice(payload);
            server.mutation_clock.fetch_max(arrival, Ordering::AcqRel);
        } else {
            // Unordered NIC model: the write lands chunk by chunk and may be
            // observed partially applied.
            let unit = self.cfg.atomicity_unit as u64;
            let start = addr.offset;
            let end = start + payload.len() as u64;
            let mut b = start;
            while b < end {
                let next = ((b / unit + 1) * unit).min(end);
                let mut g = region.lock();
                g.bytes[b as usize..next as usize]
                    .copy_from_slice(&payload[(b - start) as usize..(next - start) as usize]);
                server.mutation_clock.fetch_max(arrival, Ordering::AcqRel);
                drop(g);
                if next < end
                    && self.cfg.torn_interleave_probability > 0.0
                    && ctx.draw_f64() < self.cfg.torn_interleave_probability
                {
                    std::thread::yield_now();
                }
                b = next;
            }
        }
        Ok(())
    }

    /// Word-grained atomic. Host-region atomics serialize per bucket and pay
    /// `host_atomic_cost`; on-chip atomics pay `onchip_atomic_cost` with no
    /// bucket queueing. Returns the original word and the virtual-time cost
    /// beyond the base round trip.
    fn exec_atomic(
        &self,
        _ctx: &mut ClientCtx,
        server: &MemoryServer,
        addr: GlobalAddress,
        arrival: u64,
        op: impl FnOnce(u64) -> (u64, bool),
    ) -> Result<(u64, u64), FabricError> {
        let cost = match addr.region {
            Region::Host => {
                let shift = self.cfg.bucket_key_bits;
                let bucket =
                    (addr.offset & ((1u64 << shift) - 1)) as usize % self.cfg.atomic_bucket_count;
                let slot = &server.bucket_busy_until[bucket];
                // Claim a service window at max(arrival, bucket busy-until).
                let mut cur = slot.load(Ordering::Relaxed);
                let service_end = loop {
                    let start = cur.max(arrival);
                    let end = start + self.cfg.host_atomic_cost;
                    match slot.compare_exchange_weak(cur, end, Ordering::Relaxed, Ordering::Relaxed)
                    {
                        Ok(_) => break end,
                        Err(now) => cur = now,
                    }
                };
                service_end - arrival
            }
            Region::OnChip => self.cfg.onchip_atomic_cost,
        };
        let region = server.region(addr.region);
        let mut g = region.lock();
        let lo = addr.offset as usize;
        let mut word_bytes = [0u8; 8];
        word_bytes.copy_from_slice(&g.bytes[lo..lo + 8]);
        let word = u64::from_le_bytes(word_bytes);
        let (new, _applied) = op(word);
        g.bytes[lo..lo + 8].copy_from_slice(&new.to_le_bytes());
        server.mutation_clock.fetch_max(arrival, Ordering::AcqRel);
        Ok((word, cost))
    }

    // Single-command convenience wrappers. Each is one post, hence one round
    // trip.

    pub fn read(
        &self,
        ctx: &mut ClientCtx,
        qp: QueuePair,
        addr: GlobalAddress,
        len: usize,
    ) -> Result<(Vec<u8>, Completion), FabricError> {
        let mut list = CombineList::new(addr.ms_id);
        list.push(Command::read(addr, len))?;
        let mut comps = self.post(ctx, qp, list)?;
        let comp = comps.pop().expect("read is signaled");
        match &comp.value {
            CompletionValue::Bytes(b) => Ok((b.clone(), comp)),
            _ => unreachable!("read completion carries bytes"),
        }
    }

    pub fn write(
        &self,
        ctx: &mut ClientCtx,
        qp: QueuePair,
        addr: GlobalAddress,
        payload: Vec<u8>,
    ) -> Result<Completion, FabricError> {
        let mut list = CombineList::new(addr.ms_id);
        list.push(Command::write(addr, payload))?;
        let mut comps = self.post(ctx, qp, list)?;
        Ok(comps.pop().expect("write is signaled"))
    }

    pub fn cas(
        &self,
        ctx: &mut ClientCtx,
        qp: QueuePair,
        addr: GlobalAddress,
        compare: u64,
        swap: u64,
    ) -> Result<u64, FabricError> {
        let mut list = CombineList::new(addr.ms_id);
        list.push(Command::cas(addr, compare, swap))?;
        let mut comps = self.post(ctx, qp, list)?;
        match comps.pop().expect("cas is signaled").value {
            CompletionValue::Word(w) => Ok(w),
            _ => unreachable!("cas completion carries a word"),
        }
    }

    pub fn masked_cas(
        &self,
        ctx: &mut ClientCtx,
        qp: QueuePair,
        addr: GlobalAddress,
        compare: u64,
        swap: u64,
        mask: u64,
    ) -> Result<u64, FabricError> {
        let mut list = CombineList::new(addr.ms_id);
        list.push(Command::masked_cas(addr, compare, swap, mask))?;
        let mut comps = self.post(ctx, qp, list)?;
        match comps.pop().expect("masked cas is signaled").value {
            CompletionValue::Word(w) => Ok(w),
            _ => unreachable!("masked cas completion carries a word"),
        }
    }

    pub fn faa(
        &self,
        ctx: &mut ClientCtx,
        qp: QueuePair,
        addr: GlobalAddress,
        delta: u64,
    ) -> Result<u64, FabricError> {
        let mut list = CombineList::new(addr.ms_id);
        list.push(Command::faa(addr, delta))?;
        let mut comps = self.post(ctx, qp, list)?;
        match comps.pop().expect("faa is signaled").value {
            CompletionValue::Word(w) => Ok(w),
            _ => unreachable!("faa completion carries a word"),
        }
    }

    /// Issues one read per address as parallel posts: every read is its own
    /// round trip for accounting, but the client clock advances as one wave.
    pub fn read_batch(
        &self,
        ctx: &mut ClientCtx,
        addrs: &[GlobalAddress],
        len: usize,
    ) -> Result<Vec<(Vec<u8>, Completion)>, FabricError> {
        let t0 = ctx.now();
        let mut out = Vec::with_capacity(addrs.len());
        let mut wave_end = t0;
        for &addr in addrs {
            ctx.set_now(t0);
            let qp = ctx.qp(addr.ms_id)?;
            let r = self.read(ctx, qp, addr, len)?;
            wave_end = wave_end.max(ctx.now());
            out.push(r);
        }
        ctx.set_now(wave_end);
        Ok(out)
    }

    /// Chunk-allocation RPC served by the MS memory thread; serialized per MS
    /// and charged one round trip of virtual time, but not counted as a
    /// one-sided round trip.
    pub fn request_chunk(
        &self,
        ctx: &mut ClientCtx,
        ms_id: u16,
    ) -> Result<GlobalAddress, FabricError> {
        let server = self.server(ms_id)?;
        let base = {
            let mut mt = server.memory_thread.lock();
            if mt.next_chunk_base + CHUNK_BYTES > mt.capacity {
                return Err(FabricError::Exhausted(ms_id));
            }
            let b = mt.next_chunk_base;
            mt.next_chunk_base += CHUNK_BYTES;
            b
        };
        ctx.counters().chunk_rpcs.fetch_add(1, Ordering::Relaxed);
        let done = ctx.now() + self.cfg.round_trip_latency;
        ctx.advance_to(done);
        self.global_clock.fetch_max(done, Ordering::Relaxed);
        Ok(GlobalAddress::host(ms_id, base))
    }

    // Shadow lock-audit hooks used by the lock layers.

    pub fn audit_acquire(&self, key: (u16, u64), owner: u64) {
        if !self.cfg.shadow_lock_audit {
            return;
        }
        if let Some(prev) = self.lock_audit.insert(key, owner) {
            panic!(
                "lock audit: slot {key:?} acquired by {owner} while held by {prev}"
            );
        }
    }

    pub fn audit_transfer(&self, key: (u16, u64), from: u64, to: u64) {
        if !self.cfg.shadow_lock_audit {
            return;
        }
        match self.lock_audit.insert(key, to) {
            Some(prev) if prev == from => {}
            other => panic!(
                "lock audit: slot {key:?} handed from {from} to {to} but holder was {other:?}"
            ),
        }
    }

    pub fn audit_release(&self, key: (u16, u64), owner: u64) {
        if !self.cfg.shadow_lock_audit {
            return;
        }
        match self.lock_audit.remove(&key) {
            Some((_, prev)) if prev == owner => {}
            other => panic!(
                "lock audit: slot {key:?} released by {owner} but holder was {other:?}"
            ),
        }
    }
}
