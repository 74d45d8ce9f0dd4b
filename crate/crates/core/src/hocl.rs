//! Hierarchical on-chip lock (HOCL).
//!
//! Each memory server keeps a global lock table (GLT) of 131,072 16-bit slots
//! packed four per 64-bit word in its on-chip region: value 0 means free,
//! anything else is the 16-bit compute-server id holding the lock. Slots are
//! acquired with a masked CAS (so one slot never perturbs its word
//! neighbours) and released with a 16-bit write of zero that rides in the
//! caller's combine list.
//!
//! Each compute server shadows every GLT slot with a local lock. Conflicting
//! acquisitions from the same CS queue on the local lock's FIFO wait queue
//! and issue no remote commands while waiting. On release, the holder may
//! hand the lock to the queue head directly; the global slot keeps storing
//! the CS id, so the receiver pays zero round trips. Consecutive handovers
//! are capped at 4 to avoid starving other compute servers, after which the
//! slot is released remotely and the next local waiter re-acquires it with a
//! CAS.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use dashmap::DashMap;
use parking_lot::{Condvar, Mutex};

use crate::client::ClientCtx;
use crate::fabric::{CombineList, Command, Fabric, FabricError, GlobalAddress, LOCKS_PER_MS};
use crate::mix64;

/// Maximum consecutive handovers on one slot before a remote release.
pub const MAX_HANDOVER_DEPTH: u32 = 4;

/// Virtual ticks a waiter burns per local poll of the wait queue.
const LOCAL_POLL_TICKS: u64 = 50;

/// Names one global lock slot and its shadow local lock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LockCoordinate {
    pub ms_id: u16,
    pub idx: u32,
}

/// Pure function of the node address; the lock always lives on the node's MS.
pub fn lock_coordinate(addr: GlobalAddress) -> LockCoordinate {
    LockCoordinate {
        ms_id: addr.ms_id,
        idx: (mix64(addr.to_raw()) % LOCKS_PER_MS as u64) as u32,
    }
}

impl LockCoordinate {
    /// Address of the aligned 8-byte word containing this 16-bit slot.
    pub fn word_addr(&self) -> GlobalAddress {
        GlobalAddress::on_chip(self.ms_id, (self.idx as u64 / 4) * 8)
    }

    /// Address of the 16-bit slot itself (for the release write).
    pub fn slot_addr(&self) -> GlobalAddress {
        GlobalAddress::on_chip(self.ms_id, self.idx as u64 * 2)
    }

    /// Bit mask selecting this slot inside its word (little-endian packing).
    pub fn mask(&self) -> u64 {
        0xFFFFu64 << (16 * (self.idx as u64 % 4))
    }

    fn audit_key(&self) -> (u16, u64) {
        (self.ms_id, self.idx as u64)
    }
}

/// The 16-bit value a compute server stores in a held slot. CS ids start at
/// zero, so they are offset by one to keep 0 meaning "free".
pub fn slot_value(cs_id: u16) -> u64 {
    cs_id as u64 + 1
}

enum Grant {
    /// Receiver owns the global slot already; zero remote commands needed.
    Handover { granter_time: u64 },
    /// Receiver owns the local lock and must acquire the global slot by CAS.
    Remote { granter_time: u64 },
}

struct Waiter {
    grant: Mutex<Option<Grant>>,
    cv: Condvar,
    ticket: u64,
}

struct LockState {
    held: bool,
    queue: VecDeque<Arc<Waiter>>,
    handover_depth: u32,
    next_ticket: u64,
    next_grant: u64,
}

struct LocalLock {
    state: Mutex<LockState>,
}

impl Default for LocalLock {
    fn default() -> Self {
        LocalLock {
            state: Mutex::new(LockState {
                held: false,
                queue: VecDeque::new(),
                handover_depth: 0,
                next_ticket: 0,
                next_grant: 0,
            }),
        }
    }
}

/// Per-CS table of local locks, one per (MS, GLT index), allocated lazily.
pub struct LocalLockTable {
    cs_id: u16,
    entries: DashMap<LockCoordinate, Arc<LocalLock>>,
    /// When set, the local layer is bypassed entirely: every acquisition
    /// spins on the remote slot. Control knob for the retry-suppression
    /// ablation.
    disable_llt: bool,
    /// Extra virtual ticks per failed remote CAS (bench backoff knob).
    cas_backoff_ticks: u64,
    pub handovers: AtomicU64,
    pub remote_acquisitions: AtomicU64,
}

impl LocalLockTable {
    pub fn new(cs_id: u16) -> Self {
        LocalLockTable {
            cs_id,
            entries: DashMap::new(),
            disable_llt: false,
            cas_backoff_ticks: 0,
            handovers: AtomicU64::new(0),
            remote_acquisitions: AtomicU64::new(0),
        }
    }

    pub fn with_llt_disabled(mut self) -> Self {
        self.disable_llt = true;
        self
    }

    pub fn with_cas_backoff(mut self, ticks: u64) -> Self {
        self.cas_backoff_ticks = ticks;
        self
    }

    pub fn cs_id(&self) -> u16 {
        self.cs_id
    }

    fn entry(&self, coord: LockCoordinate) -> Arc<LocalLock> {
        self.entries.entry(coord).or_default().clone()
    }

    /// Number of threads currently queued on a coordinate (test hook).
    pub fn queue_len(&self, coord: LockCoordinate) -> usize {
        self.entries
            .get(&coord)
            .map(|e| e.state.lock().queue.len())
            .unwrap_or(0)
    }
}

/// Linear token for one held lock: must be passed back to [`unlock`] exactly
/// once.
pub struct LockGuard {
    coord: LockCoordinate,
    owner: u64,
    released: bool,
}

impl LockGuard {
    pub fn coordinate(&self) -> LockCoordinate {
        self.coord
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        if !self.released && !std::thread::panicking() {
            panic!("lock guard for {:?} dropped without unlock", self.coord);
        }
    }
}

thread_local! {
    static HELD: std::cell::Cell<u32> = const { std::cell::Cell::new(0) };
}

/// Acquires the HOCL lock protecting `addr`. Blocks while a same-CS holder
/// exists; issues remote masked-CAS retries only when this thread is the one
/// representing its CS at the slot. A write operation holds at most one tree
/// node lock at a time.
pub fn lock(
    llt: &LocalLockTable,
    fabric: &Fabric,
    ctx: &mut ClientCtx,
    addr: GlobalAddress,
) -> Result<LockGuard, FabricError> {
    let coord = lock_coordinate(addr);
    HELD.with(|h| {
        assert_eq!(h.get(), 0, "a client thread locks at most one node at a time");
        h.set(1);
    });

    if llt.disable_llt {
        remote_acquire(llt, fabric, ctx, coord)?;
        llt.remote_acquisitions.fetch_add(1, Ordering::Relaxed);
        fabric.audit_acquire(coord.audit_key(), ctx.id());
        return Ok(LockGuard {
            coord,
            owner: ctx.id(),
            released: false,
        });
    }

    let entry = llt.entry(coord);
    let acquired_kind = {
        let mut st = entry.state.lock();
        if !st.held && st.queue.is_empty() {
            st.held = true;
            None // fall through to the remote CAS
        } else {
            let w = Arc::new(Waiter {
                grant: Mutex::new(None),
                cv: Condvar::new(),
                ticket: st.next_ticket,
            });
            st.next_ticket += 1;
            st.queue.push_back(w.clone());
            drop(st);
            let mut g = w.grant.lock();
            while g.is_none() {
                w.cv.wait(&mut g);
            }
            Some(g.take().unwrap())
        }
    };

    match acquired_kind {
        None => {
            remote_acquire(llt, fabric, ctx, coord)?;
            llt.remote_acquisitions.fetch_add(1, Ordering::Relaxed);
            fabric.audit_acquire(coord.audit_key(), ctx.id());
        }
        Some(Grant::Handover { granter_time }) => {
            ctx.sync_to(granter_time);
            ctx.spend(LOCAL_POLL_TICKS);
            ctx.stats.handover_acquires += 1;
            llt.handovers.fetch_add(1, Ordering::Relaxed);
            // The granter parked the shadow entry under the sentinel owner;
            // claim it now that the receiver's identity is known.
            fabric.audit_transfer(coord.audit_key(), u64::MAX, ctx.id());
        }
        Some(Grant::Remote { granter_time }) => {
            ctx.sync_to(granter_time);
            remote_acquire(llt, fabric, ctx, coord)?;
            llt.remote_acquisitions.fetch_add(1, Ordering::Relaxed);
            fabric.audit_acquire(coord.audit_key(), ctx.id());
        }
    }

    Ok(LockGuard {
        coord,
        owner: ctx.id(),
        released: false,
    })
}

fn remote_acquire(
    llt: &LocalLockTable,
    fabric: &Fabric,
    ctx: &mut ClientCtx,
    coord: LockCoordinate,
) -> Result<(), FabricError> {
    let qp = ctx.qp(coord.ms_id)?;
    let word = coord.word_addr();
    let mask = coord.mask();
    let want = slot_value(llt.cs_id) << (16 * (coord.idx as u64 % 4));
    loop {
        let orig = fabric.masked_cas(ctx, qp, word, 0, want, mask)?;
        if orig & mask == 0 {
            return Ok(());
        }
        if llt.cas_backoff_ticks > 0 {
            ctx.spend(llt.cas_backoff_ticks);
        }
        std::thread::yield_now();
    }
}

/// Releases the lock. If a same-CS waiter exists and the handover budget
/// allows, the lock is handed over locally and no release command is
/// emitted; otherwise a 16-bit write of zero to the GLT slot is appended to
/// `combine_list`. The (possibly extended) list is posted as one round trip,
/// and the local lock is passed on last, so a handover receiver never races
/// ahead of the data write-back.
pub fn unlock(
    llt: &LocalLockTable,
    fabric: &Fabric,
    ctx: &mut ClientCtx,
    guard: LockGuard,
    mut combine_list: CombineList,
) -> Result<(), FabricError> {
    let mut guard = guard;
    let coord = guard.coord;
    debug_assert_eq!(guard.owner, ctx.id());

    if llt.disable_llt {
        combine_list
            .push(Command::lock_release(coord.slot_addr(), vec![0u8, 0u8]))
            .expect("release targets the lock's MS");
        let qp = ctx.qp(coord.ms_id)?;
        fabric.audit_release(coord.audit_key(), ctx.id());
        fabric.post(ctx, qp, combine_list)?;
        finish_guard(&mut guard);
        return Ok(());
    }

    let entry = llt.entry(coord);

    // Decide handover vs remote release; the release write must be in the
    // list before it is posted.
    let hand_over = {
        let mut st = entry.state.lock();
        debug_assert!(st.held);
        if !st.queue.is_empty() {
            st.handover_depth += 1;
            if st.handover_depth <= MAX_HANDOVER_DEPTH {
                true
            } else {
                st.handover_depth = 0;
                false
            }
        } else {
            st.handover_depth = 0;
            false
        }
    };

    if !hand_over {
        combine_list
            .push(Command::lock_release(coord.slot_addr(), vec![0u8, 0u8]))
            .expect("release targets the lock's MS");
        fabric.audit_release(coord.audit_key(), ctx.id());
    }

    if !combine_list.is_empty() {
        let qp = ctx.qp(coord.ms_id)?;
        fabric.post(ctx, qp, combine_list)?;
    }

    // Pass the local lock on.
    {
        let mut st = entry.state.lock();
        if hand_over {
            let w = st.queue.pop_front().expect("waiters never dequeue themselves");
            assert_eq!(w.ticket, st.next_grant, "grants follow enqueue order");
            st.next_grant += 1;
            fabric.audit_transfer(coord.audit_key(), ctx.id(), u64::MAX);
            *w.grant.lock() = Some(Grant::Handover {
                granter_time: ctx.now(),
            });
            w.cv.notify_one();
        } else if let Some(w) = st.queue.pop_front() {
            // Depth budget exhausted (or the waiter arrived during the
            // post): local ownership transfers, the slot is re-acquired
            // remotely.
            assert_eq!(w.ticket, st.next_grant, "grants follow enqueue order");
            st.next_grant += 1;
            *w.grant.lock() = Some(Grant::Remote {
                granter_time: ctx.now(),
            });
            w.cv.notify_one();
        } else {
            st.held = false;
        }
    }

    finish_guard(&mut guard);
    Ok(())
}

fn finish_guard(guard: &mut LockGuard) {
    guard.released = true;
    HELD.with(|h| h.set(0));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::FabricConfig;

    #[test]
    fn coordinate_is_stable_and_colocated() {
        let a = GlobalAddress::host(3, 0x20_0000);
        let c1 = lock_coordinate(a);
        let c2 = lock_coordinate(a);
        assert_eq!(c1, c2);
        assert_eq!(c1.ms_id, 3);
        assert!((c1.idx as usize) < LOCKS_PER_MS);
    }

    #[test]
    fn slot_mask_isolates_neighbours() {
        for idx in 0..4u32 {
            let c = LockCoordinate { ms_id: 0, idx };
            assert_eq!(c.mask().count_ones(), 16);
            assert_eq!(c.word_addr().offset, 0);
            assert_eq!(c.slot_addr().offset, idx as u64 * 2);
        }
    }

    #[test]
    fn uncontended_lock_is_one_remote_cas() {
        let fabric = Fabric::new(1, FabricConfig::default()).unwrap();
        let llt = LocalLockTable::new(0);
        let mut ctx = fabric.register_client(0);
        let addr = GlobalAddress::host(0, 0x20_0000);
        let guard = lock(&llt, &fabric, &mut ctx, addr).unwrap();
        let m = ctx.metrics();
        assert_eq!(m.round_trips, 1);
        assert_eq!(m.atomic_retries, 0);
        unlock(&llt, &fabric, &mut ctx, guard, CombineList::new(0)).unwrap();
        let m = ctx.metrics();
        assert_eq!(m.round_trips, 2);
        assert_eq!(m.lock_release_bytes, 2);
    }
}
