//! The FG+ comparison engine.
//!
//! Same fabric, same internal-node format and index cache as the
//! write-optimized engine, but with the classic one-sided write path: sorted
//! leaves protected by node-level versions only, host-memory spin locks
//! acquired by CAS and released by a plain write (or FAA in the original
//! flavour), and four sequential posts per non-split write: lock, read,
//! whole-node write-back, release. No local lock table, no handover, no
//! command combination.

use std::sync::Arc;

use crate::cache::RootInfo;
use crate::client::ClientCtx;
use crate::fabric::{
    CombineList, Command, Fabric, GlobalAddress, Region, HOST_LOCK_TABLE_OFFSET, LOCKS_PER_MS,
};
use crate::mix64;
use crate::node::{self, NodeHeader, FENCE_MAX};
use crate::tree::{
    validate_key, ComputeServer, LeafCheck, TreeBase, TreeConfig, TreeError, TreeResult,
    WriteProbe,
};

/// The lock word (64-bit, host region) guarding a node: same hash as the
/// on-chip table, but the slots live in host memory and full-word CAS is
/// used, so they are subject to NIC bucket serialization.
pub fn host_lock_addr(node: GlobalAddress) -> GlobalAddress {
    let idx = mix64(node.to_raw()) % LOCKS_PER_MS as u64;
    GlobalAddress {
        ms_id: node.ms_id,
        offset: HOST_LOCK_TABLE_OFFSET + idx * 8,
        region: Region::Host,
    }
}

fn audit_key(lock: GlobalAddress) -> (u16, u64) {
    // Disambiguated from the on-chip slot keyspace by the top bit.
    (lock.ms_id, (1 << 63) | lock.offset)
}

struct HostGuard {
    lock: GlobalAddress,
    value: u64,
}

pub struct BaselineTree {
    pub(crate) base: TreeBase,
    /// Release with FAA instead of a plain write (the unoptimized flavour).
    faa_release: bool,
    write_probe: Option<WriteProbe>,
}

impl BaselineTree {
    pub fn create(
        fabric: Arc<Fabric>,
        cs: Arc<ComputeServer>,
        cfg: TreeConfig,
        ctx: &mut ClientCtx,
    ) -> TreeResult<Self> {
        // The empty bootstrap is a bulkload of nothing: one empty leaf plus
        // the root block.
        let tree = BaselineTree {
            base: TreeBase::new(fabric, cs, cfg),
            faa_release: false,
            write_probe: None,
        };
        tree.bulkload(ctx, &[], 1.0)?;
        Ok(tree)
    }

    pub fn attach(fabric: Arc<Fabric>, cs: Arc<ComputeServer>, cfg: TreeConfig) -> Self {
        BaselineTree {
            base: TreeBase::new(fabric, cs, cfg),
            faa_release: false,
            write_probe: None,
        }
    }

    /// Switches the unlock verb to fetch-and-add.
    pub fn with_faa_release(mut self) -> Self {
        self.faa_release = true;
        self
    }

    pub fn set_write_probe(&mut self, probe: WriteProbe) {
        self.write_probe = Some(probe);
    }

    pub fn compute_server(&self) -> &Arc<ComputeServer> {
        &self.base.cs
    }

    fn probe(&self, key: u64, value: Option<u64>) {
        if let Some(p) = &self.write_probe {
            p(key, value);
        }
    }

    /// Spins on the host lock word until the CAS from 0 lands. Every failed
    /// attempt is a full round trip; nothing suppresses retries.
    fn lock(&self, ctx: &mut ClientCtx, node_addr: GlobalAddress) -> TreeResult<HostGuard> {
        let lock = host_lock_addr(node_addr);
        let value = self.base.cs.cs_id() as u64 + 1;
        let qp = ctx.qp(lock.ms_id)?;
        loop {
            let orig = self.base.fabric.cas(ctx, qp, lock, 0, value)?;
            if orig == 0 {
                self.base.fabric.audit_acquire(audit_key(lock), ctx.id());
                return Ok(HostGuard { lock, value });
            }
            std::thread::yield_now();
        }
    }

    /// Releases with a plain 8-byte write of zero, or FAA of the negated
    /// value in the original flavour. One round trip either way.
    fn unlock(&self, ctx: &mut ClientCtx, guard: HostGuard) -> TreeResult<()> {
        let qp = ctx.qp(guard.lock.ms_id)?;
        self.base
            .fabric
            .audit_release(audit_key(guard.lock), ctx.id());
        if self.faa_release {
            let orig = self
                .base
                .fabric
                .faa(ctx, qp, guard.lock, guard.value.wrapping_neg())?;
            debug_assert_eq!(orig, guard.value);
        } else {
            let mut list = CombineList::new(guard.lock.ms_id);
            list.push(Command::lock_release(guard.lock, vec![0u8; 8]))?;
            self.base.fabric.post(ctx, qp, list)?;
        }
        Ok(())
    }

    /// Four sequential round trips when no split happens: lock, read, write
    /// back the whole (sorted) node, release.
    pub fn insert(&self, ctx: &mut ClientCtx, key: u64, value: u64) -> TreeResult<()> {
        validate_key(key)?;
        let b = &self.base;
        for _ in 0..b.cfg.retry_budget {
            let mut leaf = b.descend(ctx, key, 0, true)?;
            'hop: for _ in 0..b.cfg.retry_budget {
                let guard = self.lock(ctx, leaf)?;
                let (mut img, _) = match b.read_node(ctx, leaf) {
                    Ok(r) => r,
                    Err(e) => {
                        self.unlock(ctx, guard)?;
                        return Err(e);
                    }
                };
                let h = node::header(&img);
                if !h.live || h.level != 0 || key < h.low_fence {
                    self.unlock(ctx, guard)?;
                    b.on_stale_route(ctx, key);
                    break 'hop;
                }
                if key >= h.high_fence {
                    self.unlock(ctx, guard)?;
                    match GlobalAddress::from_raw(h.sibling) {
                        Some(s) => {
                            ctx.stats.sibling_hops += 1;
                            leaf = s;
                            continue 'hop;
                        }
                        None => {
                            b.on_stale_route(ctx, key);
                            break 'hop;
                        }
                    }
                }

                let node_size = b.cfg.node_size;
                let cap = node::baseline_capacity(node_size);
                let n = node::baseline_live_count(&img, node_size);
                match node::baseline_search(&img, node_size, key) {
                    Ok(slot) => {
                        // Update in place, still a whole-node write-back.
                        node::set_baseline_entry(&mut img, slot, key, value);
                        node::bump_node_versions(&mut img);
                        self.write_back(ctx, leaf, img, guard, key, value)?;
                        return Ok(());
                    }
                    Err(pos) if n < cap => {
                        // Shift the tail right and slot the new entry in.
                        for i in (pos..n).rev() {
                            let (k, v) = node::baseline_entry(&img, i);
                            node::set_baseline_entry(&mut img, i + 1, k, v);
                        }
                        node::set_baseline_entry(&mut img, pos, key, value);
                        node::bump_node_versions(&mut img);
                        self.write_back(ctx, leaf, img, guard, key, value)?;
                        return Ok(());
                    }
                    Err(_) => {
                        // Split: move the upper half to a fresh sibling.
                        let sibling_addr = match ctx.alloc_node(node_size as u64) {
                            Ok(a) => a,
                            Err(e) => {
                                self.unlock(ctx, guard)?;
                                return Err(e.into());
                            }
                        };
                        let mut entries: Vec<(u64, u64)> =
                            (0..n).map(|i| node::baseline_entry(&img, i)).collect();
                        let pos = entries.partition_point(|(k, _)| *k < key);
                        entries.insert(pos, (key, value));
                        let mid = entries.len() / 2;
                        let split_key = entries[mid].0;

                        let mut sib_img =
                            node::new_node(node_size, 0, split_key, h.high_fence, h.sibling);
                        for (i, (k, v)) in entries[mid..].iter().enumerate() {
                            node::set_baseline_entry(&mut sib_img, i, *k, *v);
                        }
                        img[node::HEADER_LEN..node_size - 1].fill(0);
                        for (i, (k, v)) in entries[..mid].iter().enumerate() {
                            node::set_baseline_entry(&mut img, i, *k, *v);
                        }
                        node::set_header(
                            &mut img,
                            &NodeHeader {
                                high_fence: split_key,
                                sibling: sibling_addr.to_raw(),
                                ..h
                            },
                        );
                        node::bump_node_versions(&mut img);

                        ctx.stats.splits += 1;
                        // No command combination: every write is its own post.
                        let sqp = ctx.qp(sibling_addr.ms_id)?;
                        b.fabric.write(ctx, sqp, sibling_addr, sib_img)?;
                        self.write_back(ctx, leaf, img, guard, key, value)?;
                        self.insert_internal(ctx, split_key, sibling_addr, 1)?;
                        return Ok(());
                    }
                }
            }
        }
        Err(TreeError::RetryBudget {
            op: "baseline insert",
        })
    }

    fn write_back(
        &self,
        ctx: &mut ClientCtx,
        addr: GlobalAddress,
        img: Vec<u8>,
        guard: HostGuard,
        key: u64,
        value: u64,
    ) -> TreeResult<()> {
        let qp = ctx.qp(addr.ms_id)?;
        self.base.fabric.write(ctx, qp, addr, img)?;
        self.probe(key, Some(value));
        self.unlock(ctx, guard)
    }

    fn insert_internal(
        &self,
        ctx: &mut ClientCtx,
        key: u64,
        child: GlobalAddress,
        level: u8,
    ) -> TreeResult<()> {
        let b = &self.base;
        for _ in 0..b.cfg.retry_budget {
            let ri = b.root_info(ctx)?;
            if level >= ri.height {
                if self.try_grow_root(ctx, key, child, level)? {
                    return Ok(());
                }
                b.cs.cache.flush_upper();
                let _ = b.refresh_root_info(ctx);
                continue;
            }
            let mut target = b.descend(ctx, key, level, false)?;
            'hop: for _ in 0..b.cfg.retry_budget {
                let guard = self.lock(ctx, target)?;
                let (mut img, _) = match b.read_node(ctx, target) {
                    Ok(r) => r,
                    Err(e) => {
                        self.unlock(ctx, guard)?;
                        return Err(e);
                    }
                };
                let h = node::header(&img);
                if !h.live || h.level != level || key < h.low_fence {
                    self.unlock(ctx, guard)?;
                    b.on_stale_route(ctx, key);
                    break 'hop;
                }
                if key >= h.high_fence {
                    self.unlock(ctx, guard)?;
                    match GlobalAddress::from_raw(h.sibling) {
                        Some(s) => {
                            ctx.stats.sibling_hops += 1;
                            target = s;
                            continue 'hop;
                        }
                        None => {
                            b.on_stale_route(ctx, key);
                            break 'hop;
                        }
                    }
                }

                if node::internal_insert_pair(&mut img, b.cfg.node_size, key, child.to_raw()) {
                    node::bump_node_versions(&mut img);
                    let qp = ctx.qp(target.ms_id)?;
                    b.fabric.write(ctx, qp, target, img)?;
                    self.unlock(ctx, guard)?;
                    return Ok(());
                }

                // Internal split mirrors the main engine's but with
                // sequential posts.
                let sibling_addr = match ctx.alloc_node(b.cfg.node_size as u64) {
                    Ok(a) => a,
                    Err(e) => {
                        self.unlock(ctx, guard)?;
                        return Err(e.into());
                    }
                };
                let n = node::internal_count(&img);
                let pairs: Vec<(u64, u64)> =
                    (0..n).map(|i| node::internal_pair(&img, i)).collect();
                let leftmost = node::internal_leftmost(&img);
                let mid = n / 2;
                let (promote_key, right_leftmost) = pairs[mid];

                let mut sib_img =
                    node::new_node(b.cfg.node_size, level, promote_key, h.high_fence, h.sibling);
                node::set_internal_leftmost(&mut sib_img, right_leftmost);
                for (i, (k, c)) in pairs[mid + 1..].iter().enumerate() {
                    node::set_internal_pair(&mut sib_img, i, *k, *c);
                }
                node::set_internal_count(&mut sib_img, n - mid - 1);

                img[node::HEADER_LEN..b.cfg.node_size - 1].fill(0);
                node::set_internal_leftmost(&mut img, leftmost);
                for (i, (k, c)) in pairs[..mid].iter().enumerate() {
                    node::set_internal_pair(&mut img, i, *k, *c);
                }
                node::set_internal_count(&mut img, mid);
                node::set_header(
                    &mut img,
                    &NodeHeader {
                        high_fence: promote_key,
                        sibling: sibling_addr.to_raw(),
                        ..h
                    },
                );
                node::bump_node_versions(&mut img);
                if key < promote_key {
                    assert!(node::internal_insert_pair(
                        &mut img,
                        b.cfg.node_size,
                        key,
                        child.to_raw()
                    ));
                } else {
                    assert!(node::internal_insert_pair(
                        &mut sib_img,
                        b.cfg.node_size,
                        key,
                        child.to_raw()
                    ));
                }

                ctx.stats.splits += 1;
                let sqp = ctx.qp(sibling_addr.ms_id)?;
                b.fabric.write(ctx, sqp, sibling_addr, sib_img)?;
                let qp = ctx.qp(target.ms_id)?;
                b.fabric.write(ctx, qp, target, img)?;
                self.unlock(ctx, guard)?;
                return self.insert_internal(ctx, promote_key, sibling_addr, level + 1);
            }
        }
        Err(TreeError::RetryBudget {
            op: "baseline insert_internal",
        })
    }

    fn try_grow_root(
        &self,
        ctx: &mut ClientCtx,
        key: u64,
        child: GlobalAddress,
        level: u8,
    ) -> TreeResult<bool> {
        let b = &self.base;
        let guard = self.lock(ctx, b.root_block)?;
        let outcome = (|| -> TreeResult<bool> {
            let ri = b.refresh_root_info(ctx)?;
            if ri.height != level {
                return Ok(false);
            }
            let new_root = ctx.alloc_node(b.cfg.node_size as u64)?;
            let mut img = node::new_node(b.cfg.node_size, level, 0, FENCE_MAX, 0);
            node::set_internal_leftmost(&mut img, ri.root_raw);
            node::set_internal_pair(&mut img, 0, key, child.to_raw());
            node::set_internal_count(&mut img, 1);
            let qp = ctx.qp(new_root.ms_id)?;
            b.fabric.write(ctx, qp, new_root, img)?;
            b.write_root_block(
                ctx,
                RootInfo {
                    root_raw: new_root.to_raw(),
                    height: level + 1,
                },
            )?;
            Ok(true)
        })();
        self.unlock(ctx, guard)?;
        let grew = outcome?;
        if grew {
            b.cs.cache.flush_upper();
        }
        Ok(grew)
    }

    /// Single read plus binary search; retry on node-version mismatch or an
    /// over-long assembly window.
    pub fn lookup(&self, ctx: &mut ClientCtx, key: u64) -> TreeResult<Option<u64>> {
        validate_key(key)?;
        let b = &self.base;
        for _ in 0..b.cfg.retry_budget {
            let mut leaf = b.descend(ctx, key, 0, true)?;
            'leaf: for _ in 0..b.cfg.retry_budget {
                let (img, comp) = b.read_node(ctx, leaf)?;
                match b.check_leaf(&img, &comp, key) {
                    LeafCheck::Stale => {
                        b.on_stale_route(ctx, key);
                        break 'leaf;
                    }
                    LeafCheck::Hop(s) => {
                        ctx.stats.sibling_hops += 1;
                        leaf = s;
                        continue 'leaf;
                    }
                    LeafCheck::Torn => {
                        ctx.stats.read_retries += 1;
                        continue 'leaf;
                    }
                    LeafCheck::Ok => {
                        return Ok(node::baseline_search(&img, b.cfg.node_size, key)
                            .ok()
                            .map(|slot| node::baseline_entry(&img, slot).1));
                    }
                }
            }
        }
        Err(TreeError::RetryBudget {
            op: "baseline lookup",
        })
    }

    /// Shift-based removal with a whole-node write-back; leaves stay
    /// underfull (no merging in this engine).
    pub fn delete(&self, ctx: &mut ClientCtx, key: u64) -> TreeResult<bool> {
        validate_key(key)?;
        let b = &self.base;
        for _ in 0..b.cfg.retry_budget {
            let mut leaf = b.descend(ctx, key, 0, true)?;
            'hop: for _ in 0..b.cfg.retry_budget {
                let guard = self.lock(ctx, leaf)?;
                let (mut img, _) = match b.read_node(ctx, leaf) {
                    Ok(r) => r,
                    Err(e) => {
                        self.unlock(ctx, guard)?;
                        return Err(e);
                    }
                };
                let h = node::header(&img);
                if !h.live || h.level != 0 || key < h.low_fence {
                    self.unlock(ctx, guard)?;
                    b.on_stale_route(ctx, key);
                    break 'hop;
                }
                if key >= h.high_fence {
                    self.unlock(ctx, guard)?;
                    match GlobalAddress::from_raw(h.sibling) {
                        Some(s) => {
                            ctx.stats.sibling_hops += 1;
                            leaf = s;
                            continue 'hop;
                        }
                        None => {
                            b.on_stale_route(ctx, key);
                            break 'hop;
                        }
                    }
                }

                let node_size = b.cfg.node_size;
                let n = node::baseline_live_count(&img, node_size);
                match node::baseline_search(&img, node_size, key) {
                    Ok(slot) => {
                        for i in slot + 1..n {
                            let (k, v) = node::baseline_entry(&img, i);
                            node::set_baseline_entry(&mut img, i - 1, k, v);
                        }
                        node::set_baseline_entry(&mut img, n - 1, 0, 0);
                        node::bump_node_versions(&mut img);
                        let qp = ctx.qp(leaf.ms_id)?;
                        b.fabric.write(ctx, qp, leaf, img)?;
                        self.probe(key, None);
                        self.unlock(ctx, guard)?;
                        return Ok(true);
                    }
                    Err(_) => {
                        self.unlock(ctx, guard)?;
                        return Ok(false);
                    }
                }
            }
        }
        Err(TreeError::RetryBudget {
            op: "baseline delete",
        })
    }

    /// Parallel-wave range query over the sorted leaves.
    pub fn range(&self, ctx: &mut ClientCtx, low: u64, high: u64) -> TreeResult<Vec<(u64, u64)>> {
        let node_size = self.base.cfg.node_size;
        self.base.range_with(ctx, low, high, |img, lo, hi| {
            let n = node::baseline_live_count(img, node_size);
            let start = match node::baseline_search(img, node_size, lo) {
                Ok(i) => i,
                Err(i) => i,
            };
            let mut out = Vec::new();
            for i in start..n {
                let (k, v) = node::baseline_entry(img, i);
                if k > hi {
                    break;
                }
                out.push((k, v));
            }
            Some(out)
        })
    }

    pub fn bulkload(
        &self,
        ctx: &mut ClientCtx,
        pairs: &[(u64, u64)],
        fill_factor: f64,
    ) -> TreeResult<()> {
        let node_size = self.base.cfg.node_size;
        self.base.bulkload_with(
            ctx,
            pairs,
            fill_factor,
            node::baseline_capacity(node_size),
            |chunk, low, high, sibling| {
                let mut img = node::new_node(node_size, 0, low, high, sibling);
                for (slot, (k, v)) in chunk.iter().enumerate() {
                    node::set_baseline_entry(&mut img, slot, *k, *v);
                }
                img
            },
        )
    }

    pub fn warm_cache(&self, ctx: &mut ClientCtx) -> TreeResult<usize> {
        self.base.warm_cache(ctx)
    }
}
