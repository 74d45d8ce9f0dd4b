//! The write-optimized B-link tree engine.
//!
//! Reads are lock-free: a lookup fetches the candidate leaf with a single
//! read and validates the free bit, node level, fence keys, node-level
//! version pair and, for the matched entry, the entry-level version pair,
//! retrying on any mismatch. A read whose assembly window spans 15 or more
//! minimum write cycles retries even when the 4-bit nibbles match, closing
//! the version-wraparound hole.
//!
//! Writes lock exactly one node at a time through [`hocl`]. An insert or
//! delete that fits in place writes back only the touched 17-byte entry,
//! combined with the lock release into a single round trip. Splits write
//! whole nodes, combining the sibling write-back, the node write-back and
//! the release into one post when the fresh sibling landed on the same
//! memory server.

use std::sync::Arc;

use thiserror::Error;

use crate::allocator;
use crate::cache::{IndexCache, RootInfo};
use crate::client::ClientCtx;
use crate::fabric::{
    CombineList, Command, Completion, Fabric, FabricError, GlobalAddress, ROOT_BLOCK_OFFSET,
};
use crate::hocl::{self, LocalLockTable};
use crate::node::{self, LeafEntry, NodeHeader, FENCE_MAX, NULL_KEY};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("{op} exceeded the retry budget (possible livelock)")]
    RetryBudget { op: &'static str },
    #[error("key {0:#x} is reserved")]
    InvalidKey(u64),
    #[error("bulkload input must be strictly ascending (offending key {0:#x})")]
    BulkloadOrder(u64),
    #[error("tree has no root block; create it first")]
    NotBootstrapped,
}

pub type TreeResult<T> = Result<T, TreeError>;

/// Observer invoked inside the leaf lock scope for every applied write:
/// `(key, Some(value))` for insert/update, `(key, None)` for delete. Used by
/// the linearization tests to record per-leaf write order.
pub type WriteProbe = Arc<dyn Fn(u64, Option<u64>) + Send + Sync>;

#[derive(Debug, Clone)]
pub struct TreeConfig {
    pub node_size: usize,
    /// Merge a leaf into its left sibling when occupancy falls below this
    /// fraction and the pair fits; otherwise leave it underfull.
    pub merge_threshold: f64,
    /// Test instrumentation: skip node/entry version checks and the
    /// wraparound rule (structural checks stay on).
    pub disable_version_checks: bool,
    /// Attempts before an operation reports livelock; diagnostic only.
    pub retry_budget: u32,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            node_size: 1024,
            merge_threshold: 0.25,
            disable_version_checks: false,
            retry_budget: 10_000,
        }
    }
}

/// Per-compute-server shared state: the local lock table and the index cache.
pub struct ComputeServer {
    cs_id: u16,
    pub llt: LocalLockTable,
    pub cache: IndexCache,
}

impl ComputeServer {
    pub fn new(cs_id: u16, node_size: usize, cache_capacity_bytes: u64, seed: u64) -> Arc<Self> {
        Arc::new(ComputeServer {
            cs_id,
            llt: LocalLockTable::new(cs_id),
            cache: IndexCache::new(node_size, cache_capacity_bytes, seed),
        })
    }

    pub fn new_with_llt_disabled(
        cs_id: u16,
        node_size: usize,
        cache_capacity_bytes: u64,
        seed: u64,
    ) -> Arc<Self> {
        Arc::new(ComputeServer {
            cs_id,
            llt: LocalLockTable::new(cs_id).with_llt_disabled(),
            cache: IndexCache::new(node_size, cache_capacity_bytes, seed),
        })
    }

    pub fn cs_id(&self) -> u16 {
        self.cs_id
    }
}

/// Root block layout (16 bytes at MS 0, offset 0): version nibbles bracket
/// the root pointer and height so a reader detects a concurrent root swap.
const ROOT_BLOCK_LEN: usize = 16;

fn encode_root_block(ver: u8, info: RootInfo) -> Vec<u8> {
    let mut b = vec![0u8; ROOT_BLOCK_LEN];
    b[0] = (ver & 0x0F) << 4;
    b[1..9].copy_from_slice(&info.root_raw.to_be_bytes());
    b[9] = info.height;
    b[15] = ver & 0x0F;
    b
}

fn decode_root_block(b: &[u8]) -> Option<(u8, RootInfo)> {
    if b[0] >> 4 != b[15] & 0x0F {
        return None;
    }
    Some((
        b[0] >> 4,
        RootInfo {
            root_raw: u64::from_be_bytes(b[1..9].try_into().unwrap()),
            height: b[9],
        },
    ))
}

/// Result of validating a fetched leaf image against the key it should hold.
pub(crate) enum LeafCheck {
    Ok,
    /// Key lies right of this node; follow the sibling pointer.
    Hop(GlobalAddress),
    /// Freed node, wrong level, or key below the low fence: the route that
    /// led here is stale.
    Stale,
    /// Version mismatch or wraparound window exceeded: re-read.
    Torn,
}

/// Machinery shared by both engines: root bootstrap, descent through the
/// (identically laid out) internal nodes, and the leaf-check discipline.
pub(crate) struct TreeBase {
    pub fabric: Arc<Fabric>,
    pub cs: Arc<ComputeServer>,
    pub cfg: TreeConfig,
    pub root_block: GlobalAddress,
}

impl TreeBase {
    pub fn new(fabric: Arc<Fabric>, cs: Arc<ComputeServer>, cfg: TreeConfig) -> Self {
        assert!(
            cfg.node_size % fabric.config().atomicity_unit == 0
                || fabric.config().atomicity_unit >= cfg.node_size,
            "atomicity unit must divide the node size"
        );
        TreeBase {
            fabric,
            cs,
            cfg,
            root_block: GlobalAddress::host(0, ROOT_BLOCK_OFFSET),
        }
    }

    pub fn read_node(
        &self,
        ctx: &mut ClientCtx,
        addr: GlobalAddress,
    ) -> TreeResult<(Vec<u8>, Completion)> {
        let qp = ctx.qp(addr.ms_id)?;
        Ok(self.fabric.read(ctx, qp, addr, self.cfg.node_size)?)
    }

    /// Unlocks with an empty data list (the release alone, or a handover).
    pub fn unlock_plain(
        &self,
        ctx: &mut ClientCtx,
        guard: hocl::LockGuard,
        ms_id: u16,
    ) -> TreeResult<()> {
        hocl::unlock(&self.cs.llt, &self.fabric, ctx, guard, CombineList::new(ms_id))?;
        Ok(())
    }

    pub fn root_info(&self, ctx: &mut ClientCtx) -> TreeResult<RootInfo> {
        if let Some(ri) = self.cs.cache.root_info() {
            return Ok(ri);
        }
        self.refresh_root_info(ctx)
    }

    pub fn refresh_root_info(&self, ctx: &mut ClientCtx) -> TreeResult<RootInfo> {
        let qp = ctx.qp(0)?;
        for _ in 0..self.cfg.retry_budget {
            let (bytes, _) = self.fabric.read(ctx, qp, self.root_block, ROOT_BLOCK_LEN)?;
            if let Some((_, info)) = decode_root_block(&bytes) {
                if info.root_raw == 0 {
                    return Err(TreeError::NotBootstrapped);
                }
                self.cs.cache.set_root_info(info);
                return Ok(info);
            }
        }
        Err(TreeError::RetryBudget {
            op: "root block read",
        })
    }

    /// Versioned read-modify-write of the root block. Callers serialize via
    /// a lock on the root block address.
    pub fn write_root_block(&self, ctx: &mut ClientCtx, info: RootInfo) -> TreeResult<()> {
        let qp0 = ctx.qp(0)?;
        let (cur, _) = self.fabric.read(ctx, qp0, self.root_block, ROOT_BLOCK_LEN)?;
        let ver = decode_root_block(&cur).map(|(v, _)| v).unwrap_or(0);
        self.fabric.write(
            ctx,
            qp0,
            self.root_block,
            encode_root_block((ver + 1) & 0x0F, info),
        )?;
        self.cs.cache.set_root_info(info);
        Ok(())
    }

    pub fn on_stale_route(&self, ctx: &mut ClientCtx, key: u64) {
        self.cs.cache.invalidate(key);
        self.cs.cache.flush_upper();
        ctx.stats.cache_invalidations += 1;
    }

    /// Descends to the node at `target_level` covering `key`. With
    /// `use_l1_cache` and `target_level == 0`, a level-1 cache hit answers
    /// without any internal-node read.
    pub fn descend(
        &self,
        ctx: &mut ClientCtx,
        key: u64,
        target_level: u8,
        use_l1_cache: bool,
    ) -> TreeResult<GlobalAddress> {
        'restart: for _ in 0..self.cfg.retry_budget {
            if target_level == 0 && use_l1_cache {
                if let Some(leaf_raw) = self.cs.cache.find(key) {
                    if let Some(addr) = GlobalAddress::from_raw(leaf_raw) {
                        return Ok(addr);
                    }
                }
            }
            let ri = self.root_info(ctx)?;
            debug_assert!(target_level < ri.height);
            let mut cur = GlobalAddress::from_raw(ri.root_raw).expect("root is non-null");
            let mut level = ri.height - 1;
            if level == target_level {
                return Ok(cur);
            }
            loop {
                // Top two levels come from the always-cached copies.
                let cached_upper = level + 2 >= ri.height;
                let img: Arc<Vec<u8>> = if cached_upper {
                    match self.cs.cache.upper_node(cur.to_raw()) {
                        Some(im) => im,
                        None => {
                            let (fresh, _) = self.read_node(ctx, cur)?;
                            self.cs.cache.put_upper_node(cur.to_raw(), fresh.clone());
                            Arc::new(fresh)
                        }
                    }
                } else {
                    Arc::new(self.read_node(ctx, cur)?.0)
                };
                let h = node::header(&img);
                let torn = !self.cfg.disable_version_checks && !node::node_versions_match(&img);
                if !h.live || h.level != level || key < h.low_fence || torn {
                    self.on_stale_route(ctx, key);
                    let _ = self.refresh_root_info(ctx);
                    continue 'restart;
                }
                if key >= h.high_fence {
                    match GlobalAddress::from_raw(h.sibling) {
                        Some(s) => {
                            ctx.stats.sibling_hops += 1;
                            cur = s;
                            continue;
                        }
                        None => {
                            self.on_stale_route(ctx, key);
                            continue 'restart;
                        }
                    }
                }
                if level == 1 && target_level == 0 {
                    self.cs.cache.insert(cur.to_raw(), img.as_ref().clone());
                }
                match GlobalAddress::from_raw(node::internal_child_for(&img, key)) {
                    Some(child) => cur = child,
                    None => {
                        self.on_stale_route(ctx, key);
                        continue 'restart;
                    }
                }
                level -= 1;
                if level == target_level {
                    return Ok(cur);
                }
            }
        }
        Err(TreeError::RetryBudget { op: "descend" })
    }

    /// Shared range-query skeleton. `extract(img, low, high)` pulls the
    /// in-range entries out of a validated leaf image, or returns `None` to
    /// force a re-read (torn entry versions).
    pub fn range_with<F>(
        &self,
        ctx: &mut ClientCtx,
        low: u64,
        high: u64,
        extract: F,
    ) -> TreeResult<Vec<(u64, u64)>>
    where
        F: Fn(&[u8], u64, u64) -> Option<Vec<(u64, u64)>>,
    {
        validate_key(low)?;
        validate_key(high)?;
        assert!(low <= high, "range bounds must be ordered");
        let mut out = Vec::new();
        let mut cursor = low;
        'advance: for _ in 0..self.cfg.retry_budget {
            if cursor > high {
                return Ok(out);
            }

            // Single-leaf trees have no level-1 nodes: scan the root chain.
            if self.root_info(ctx)?.height == 1 {
                let addr = self.descend(ctx, cursor, 0, false)?;
                match self.scan_leaf_chain(ctx, addr, cursor, high, u64::MAX, &extract)? {
                    Some(entries) => {
                        out.extend(entries);
                        return Ok(out);
                    }
                    None => {
                        self.on_stale_route(ctx, cursor);
                        continue 'advance;
                    }
                }
            }

            // Plan the wave from the level-1 node covering the cursor.
            let l1 = match self.cs.cache.find_node(cursor) {
                Some(e) => e,
                None => {
                    let addr = self.descend(ctx, cursor, 1, false)?;
                    let (img, _) = self.read_node(ctx, addr)?;
                    let h = node::header(&img);
                    if !h.live
                        || h.level != 1
                        || !node::node_versions_match(&img)
                        || !h.covers(cursor)
                    {
                        self.on_stale_route(ctx, cursor);
                        continue 'advance;
                    }
                    self.cs.cache.insert(addr.to_raw(), img);
                    match self.cs.cache.find_node(cursor) {
                        Some(e) => e,
                        None => continue 'advance, // evicted immediately
                    }
                }
            };
            let l1_high = l1.high_fence;
            let span_high = high.saturating_add(1).min(l1_high);

            // Children of the level-1 node overlapping [cursor, high], each
            // with the bound its own chain walk must reach.
            let n = node::internal_count(&l1.image);
            let mut bounds: Vec<u64> = Vec::with_capacity(n + 2);
            let mut kids: Vec<u64> = Vec::with_capacity(n + 1);
            bounds.push(l1.low_fence);
            kids.push(node::internal_leftmost(&l1.image));
            for i in 0..n {
                let (k, c) = node::internal_pair(&l1.image, i);
                bounds.push(k);
                kids.push(c);
            }
            bounds.push(l1_high);
            let mut children: Vec<(u64, u64, GlobalAddress)> = Vec::new(); // (low, expected high, addr)
            for (i, kid) in kids.iter().enumerate() {
                let (lo, hi) = (bounds[i], bounds[i + 1]);
                if hi > cursor && lo < span_high {
                    match GlobalAddress::from_raw(*kid) {
                        Some(a) => children.push((lo.max(cursor), hi.min(span_high), a)),
                        None => {
                            self.on_stale_route(ctx, cursor);
                            continue 'advance;
                        }
                    }
                }
            }
            if children.is_empty() {
                self.on_stale_route(ctx, cursor);
                continue 'advance;
            }

            let addrs: Vec<GlobalAddress> = children.iter().map(|(_, _, a)| *a).collect();
            let wave = self.fabric.read_batch(ctx, &addrs, self.cfg.node_size)?;

            for ((child_low, child_high, child_addr), (img, comp)) in
                children.into_iter().zip(wave)
            {
                match self.walk_chain(
                    ctx, child_addr, img, comp, child_low, child_high, low, high, &extract,
                )? {
                    Some(entries) => out.extend(entries),
                    None => {
                        self.on_stale_route(ctx, child_low);
                        cursor = cursor.max(child_low);
                        continue 'advance;
                    }
                }
            }
            if l1_high > high {
                return Ok(out);
            }
            cursor = l1_high;
        }
        Err(TreeError::RetryBudget { op: "range" })
    }

    /// Reads the leaf at `addr` and walks siblings until fences cover
    /// `chain_high` (exclusive), collecting entries in `[low, high]`.
    fn scan_leaf_chain<F>(
        &self,
        ctx: &mut ClientCtx,
        addr: GlobalAddress,
        chain_low: u64,
        high: u64,
        chain_high: u64,
        extract: &F,
    ) -> TreeResult<Option<Vec<(u64, u64)>>>
    where
        F: Fn(&[u8], u64, u64) -> Option<Vec<(u64, u64)>>,
    {
        let (img, comp) = self.read_node(ctx, addr)?;
        self.walk_chain(
            ctx,
            addr,
            img,
            comp,
            chain_low,
            high.saturating_add(1).min(chain_high),
            chain_low,
            high,
            extract,
        )
    }

    /// Chain walk over one fetched leaf image plus any right siblings needed
    /// to cover `[chain_low, chain_high)`. Collection is clipped to the
    /// chain's claimed span so overlapping walks (possible after merges)
    /// never produce duplicates. Returns None when the route was stale
    /// (caller re-plans); torn leaves are re-read in place.
    #[allow(clippy::too_many_arguments)]
    fn walk_chain<F>(
        &self,
        ctx: &mut ClientCtx,
        start_addr: GlobalAddress,
        mut img: Vec<u8>,
        mut comp: Completion,
        chain_low: u64,
        chain_high: u64,
        low: u64,
        high: u64,
        extract: &F,
    ) -> TreeResult<Option<Vec<(u64, u64)>>>
    where
        F: Fn(&[u8], u64, u64) -> Option<Vec<(u64, u64)>>,
    {
        let clip_low = low.max(chain_low);
        let clip_high = high.min(chain_high.saturating_sub(1));
        if clip_low > clip_high {
            return Ok(Some(Vec::new()));
        }
        let mut out = Vec::new();
        let mut span_cursor = chain_low;
        let mut addr = start_addr;
        let mut leaf_retries = 0u32;
        loop {
            let h = node::header(&img);
            if !h.live || h.level != 0 || span_cursor < h.low_fence {
                return Ok(None);
            }
            let version_ok = self.cfg.disable_version_checks
                || (node::node_versions_match(&img)
                    && comp.assembly_window() < self.fabric.config().wraparound_window);
            let extracted = if version_ok {
                extract(&img, clip_low, clip_high)
            } else {
                None
            };
            let Some(entries) = extracted else {
                ctx.stats.read_retries += 1;
                leaf_retries += 1;
                if leaf_retries > self.cfg.retry_budget {
                    return Err(TreeError::RetryBudget { op: "range" });
                }
                let fresh = self.read_node(ctx, addr)?;
                img = fresh.0;
                comp = fresh.1;
                continue;
            };
            out.extend(entries);
            if h.high_fence >= chain_high {
                return Ok(Some(out));
            }
            // A split moved part of the span right; follow the chain.
            let Some(next) = GlobalAddress::from_raw(h.sibling) else {
                return Ok(None);
            };
            ctx.stats.sibling_hops += 1;
            span_cursor = h.high_fence;
            addr = next;
            let fresh = self.read_node(ctx, addr)?;
            img = fresh.0;
            comp = fresh.1;
        }
    }

    /// Shared bottom-up bulkload. `build_leaf(chunk, low, high, sibling)`
    /// produces the engine's leaf image; the internal levels are common.
    pub fn bulkload_with<F>(
        &self,
        ctx: &mut ClientCtx,
        pairs: &[(u64, u64)],
        fill_factor: f64,
        leaf_cap: usize,
        build_leaf: F,
    ) -> TreeResult<()>
    where
        F: Fn(&[(u64, u64)], u64, u64, u64) -> Vec<u8>,
    {
        assert!((0.0..=1.0).contains(&fill_factor));
        for w in pairs.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(TreeError::BulkloadOrder(w[1].0));
            }
        }
        if let Some((k, _)) = pairs.first() {
            validate_key(*k)?;
        }
        if let Some((k, _)) = pairs.last() {
            validate_key(*k)?;
        }

        let node_size = self.cfg.node_size;
        let per_leaf = ((leaf_cap as f64 * fill_factor) as usize).clamp(1, leaf_cap);
        let mut writer = BulkWriter::new(self, 32);

        let chunks: Vec<&[(u64, u64)]> = if pairs.is_empty() {
            vec![&[][..]]
        } else {
            pairs.chunks(per_leaf).collect()
        };
        let mut addrs = Vec::with_capacity(chunks.len());
        for _ in 0..chunks.len() {
            addrs.push(ctx.alloc_node(node_size as u64)?);
        }
        let mut level_nodes: Vec<(GlobalAddress, u64)> = Vec::new(); // (addr, low fence)
        for (i, chunk) in chunks.iter().enumerate() {
            let low = if i == 0 { 0 } else { chunk[0].0 };
            let high = if i + 1 == chunks.len() {
                FENCE_MAX
            } else {
                chunks[i + 1][0].0
            };
            let sibling = if i + 1 == chunks.len() {
                0
            } else {
                addrs[i + 1].to_raw()
            };
            writer.push(ctx, addrs[i], build_leaf(chunk, low, high, sibling))?;
            level_nodes.push((addrs[i], low));
        }

        // Internal levels bottom-up; `per_node + 1` children per node.
        let internal_cap = node::internal_capacity(node_size);
        let per_node = ((internal_cap as f64 * fill_factor) as usize).clamp(1, internal_cap);
        let mut level = 0u8;
        while level_nodes.len() > 1 {
            level += 1;
            let groups: Vec<&[(GlobalAddress, u64)]> = level_nodes.chunks(per_node + 1).collect();
            let mut gaddrs = Vec::with_capacity(groups.len());
            for _ in 0..groups.len() {
                gaddrs.push(ctx.alloc_node(node_size as u64)?);
            }
            let mut next: Vec<(GlobalAddress, u64)> = Vec::new();
            for (i, group) in groups.iter().enumerate() {
                let low = if i == 0 { 0 } else { group[0].1 };
                let high = if i + 1 == groups.len() {
                    FENCE_MAX
                } else {
                    groups[i + 1][0].1
                };
                let sibling = if i + 1 == groups.len() {
                    0
                } else {
                    gaddrs[i + 1].to_raw()
                };
                let mut img = node::new_node(node_size, level, low, high, sibling);
                node::set_internal_leftmost(&mut img, group[0].0.to_raw());
                for (slot, (addr, child_low)) in group[1..].iter().enumerate() {
                    node::set_internal_pair(&mut img, slot, *child_low, addr.to_raw());
                }
                node::set_internal_count(&mut img, group.len() - 1);
                writer.push(ctx, gaddrs[i], img)?;
                next.push((gaddrs[i], low));
            }
            level_nodes = next;
        }
        writer.flush(ctx)?;

        let info = RootInfo {
            root_raw: level_nodes[0].0.to_raw(),
            height: level + 1,
        };
        let qp0 = ctx.qp(0)?;
        let (cur, _) = self.fabric.read(ctx, qp0, self.root_block, ROOT_BLOCK_LEN)?;
        let ver = decode_root_block(&cur).map(|(v, _)| v).unwrap_or(0);
        self.fabric.write(
            ctx,
            qp0,
            self.root_block,
            encode_root_block((ver + 1) & 0x0F, info),
        )?;
        self.cs.cache.set_root_info(info);
        self.cs.cache.flush_upper();
        Ok(())
    }

    /// Walks the level-1 ring and caches every level-1 node.
    pub fn warm_cache(&self, ctx: &mut ClientCtx) -> TreeResult<usize> {
        let ri = self.root_info(ctx)?;
        if ri.height < 2 {
            return Ok(0);
        }
        let mut count = 0;
        let mut cursor = 1u64; // smallest valid key
        loop {
            let addr = self.descend(ctx, cursor, 1, false)?;
            let (img, _) = self.read_node(ctx, addr)?;
            let h = node::header(&img);
            if !h.live || h.level != 1 || !node::node_versions_match(&img) {
                return Ok(count); // tree is being mutated; good enough
            }
            let high = h.high_fence;
            self.cs.cache.insert(addr.to_raw(), img);
            count += 1;
            if high == FENCE_MAX {
                return Ok(count);
            }
            cursor = high;
        }
    }

    /// Validation discipline for a fetched leaf image: free bit first (a
    /// freed node's version nibbles are garbage by contract), then versions
    /// and the wraparound window, then level and fences.
    pub fn check_leaf(&self, img: &[u8], comp: &Completion, key: u64) -> LeafCheck {
        let h = node::header(img);
        if !h.live {
            return LeafCheck::Stale;
        }
        if !self.cfg.disable_version_checks {
            if !node::node_versions_match(img) {
                return LeafCheck::Torn;
            }
            if comp.assembly_window() >= self.fabric.config().wraparound_window {
                return LeafCheck::Torn;
            }
        }
        if h.level != 0 || key < h.low_fence {
            return LeafCheck::Stale;
        }
        if key >= h.high_fence {
            return match GlobalAddress::from_raw(h.sibling) {
                Some(s) => LeafCheck::Hop(s),
                None => LeafCheck::Stale,
            };
        }
        LeafCheck::Ok
    }
}

pub(crate) fn validate_key(key: u64) -> TreeResult<()> {
    if key == NULL_KEY || key == FENCE_MAX {
        return Err(TreeError::InvalidKey(key));
    }
    Ok(())
}

/// The write-optimized engine handle for one compute server. Shareable
/// across the CS's client threads; all mutable state lives in fabric memory,
/// the lock table, or the per-thread [`ClientCtx`].
pub struct ShermanTree {
    pub(crate) base: TreeBase,
    write_probe: Option<WriteProbe>,
}

impl ShermanTree {
    /// Bootstraps a fresh tree: an empty root leaf plus the root block.
    pub fn create(
        fabric: Arc<Fabric>,
        cs: Arc<ComputeServer>,
        cfg: TreeConfig,
        ctx: &mut ClientCtx,
    ) -> TreeResult<Self> {
        let base = TreeBase::new(fabric, cs, cfg);
        let root = ctx.alloc_node(base.cfg.node_size as u64)?;
        let img = node::new_node(base.cfg.node_size, 0, 0, FENCE_MAX, 0);
        let qp = ctx.qp(root.ms_id)?;
        base.fabric.write(ctx, qp, root, img)?;
        let info = RootInfo {
            root_raw: root.to_raw(),
            height: 1,
        };
        let qp0 = ctx.qp(0)?;
        base.fabric
            .write(ctx, qp0, base.root_block, encode_root_block(1, info))?;
        base.cs.cache.set_root_info(info);
        Ok(ShermanTree {
            base,
            write_probe: None,
        })
    }

    /// Attaches to an existing tree (some other CS bootstrapped it).
    pub fn attach(fabric: Arc<Fabric>, cs: Arc<ComputeServer>, cfg: TreeConfig) -> Self {
        ShermanTree {
            base: TreeBase::new(fabric, cs, cfg),
            write_probe: None,
        }
    }

    pub fn set_write_probe(&mut self, probe: WriteProbe) {
        self.write_probe = Some(probe);
    }

    pub fn config(&self) -> &TreeConfig {
        &self.base.cfg
    }

    pub fn compute_server(&self) -> &Arc<ComputeServer> {
        &self.base.cs
    }

    fn probe(&self, key: u64, value: Option<u64>) {
        if let Some(p) = &self.write_probe {
            p(key, value);
        }
    }

    /// Inserts or updates in place when the leaf has a matching key or a
    /// free slot, writing back exactly the touched 17-byte entry combined
    /// with the lock release; splits otherwise.
    pub fn insert(&self, ctx: &mut ClientCtx, key: u64, value: u64) -> TreeResult<()> {
        validate_key(key)?;
        let b = &self.base;
        for _ in 0..b.cfg.retry_budget {
            let mut leaf = b.descend(ctx, key, 0, true)?;
            'hop: for _ in 0..b.cfg.retry_budget {
                let guard = hocl::lock(&b.cs.llt, &b.fabric, ctx, leaf)?;
                let (mut img, _) = match b.read_node(ctx, leaf) {
                    Ok(r) => r,
                    Err(e) => {
                        b.unlock_plain(ctx, guard, leaf.ms_id)?;
                        return Err(e);
                    }
                };
                let h = node::header(&img);
                // We hold the only write lock, so the image is quiescent.
                debug_assert!(node::node_versions_match(&img) || !h.live);
                if !h.live || h.level != 0 || key < h.low_fence {
                    b.unlock_plain(ctx, guard, leaf.ms_id)?;
                    b.on_stale_route(ctx, key);
                    break 'hop;
                }
                if key >= h.high_fence {
                    b.unlock_plain(ctx, guard, leaf.ms_id)?;
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

                let cap = node::leaf_capacity(b.cfg.node_size);
                let mut slot = None;
                let mut first_empty = None;
                for i in 0..cap {
                    let e = node::leaf_entry(&img, i);
                    if e.key == key {
                        slot = Some(i);
                        break;
                    }
                    if e.is_empty() && first_empty.is_none() {
                        first_empty = Some(i);
                    }
                }
                if let Some(i) = slot.or(first_empty) {
                    // Entry-grained in-place write: bump both entry versions
                    // and write back the 17-byte span with the unlock.
                    let old = node::leaf_entry(&img, i);
                    let e = LeafEntry {
                        fev: (old.fev + 1) & 0x0F,
                        key,
                        value,
                        rev: (old.rev + 1) & 0x0F,
                    };
                    node::set_leaf_entry(&mut img, i, &e);
                    let mut list = CombineList::new(leaf.ms_id);
                    list.push(Command::write(
                        leaf.add(node::leaf_entry_offset(i) as u64),
                        node::encode_leaf_entry(&e).to_vec(),
                    ))?;
                    self.probe(key, Some(value));
                    hocl::unlock(&b.cs.llt, &b.fabric, ctx, guard, list)?;
                    return Ok(());
                }

                // Full leaf: sort, move the upper half to a fresh sibling,
                // link it, and write whole nodes under node-level versions.
                let sibling_addr = match ctx.alloc_node(b.cfg.node_size as u64) {
                    Ok(a) => a,
                    Err(e) => {
                        b.unlock_plain(ctx, guard, leaf.ms_id)?;
                        return Err(e.into());
                    }
                };
                let mut entries = node::leaf_live_entries(&img, b.cfg.node_size);
                entries.push(LeafEntry {
                    fev: 1,
                    key,
                    value,
                    rev: 1,
                });
                entries.sort_by_key(|e| e.key);
                let mid = entries.len() / 2;
                let split_key = entries[mid].key;

                let mut sib_img =
                    node::new_node(b.cfg.node_size, 0, split_key, h.high_fence, h.sibling);
                for (i, e) in entries[mid..].iter().enumerate() {
                    node::set_leaf_entry(&mut sib_img, i, e);
                }

                img[node::HEADER_LEN..b.cfg.node_size - 1].fill(0);
                for (i, e) in entries[..mid].iter().enumerate() {
                    node::set_leaf_entry(&mut img, i, e);
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
                let mut list = CombineList::new(leaf.ms_id);
                if sibling_addr.ms_id == leaf.ms_id {
                    // Sibling write-back, node write-back and lock release
                    // combine into one post.
                    list.push(Command::write_unsignaled(sibling_addr, sib_img))?;
                } else {
                    let sqp = ctx.qp(sibling_addr.ms_id)?;
                    b.fabric.write(ctx, sqp, sibling_addr, sib_img)?;
                }
                list.push(Command::write_unsignaled(leaf, img))?;
                self.probe(key, Some(value));
                hocl::unlock(&b.cs.llt, &b.fabric, ctx, guard, list)?;

                self.insert_internal(ctx, split_key, sibling_addr, 1)?;
                return Ok(());
            }
        }
        Err(TreeError::RetryBudget { op: "insert" })
    }

    /// Propagates a split key into the covering node at `level`, growing a
    /// new root when the split happened at the top.
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
                let guard = hocl::lock(&b.cs.llt, &b.fabric, ctx, target)?;
                let (mut img, _) = match b.read_node(ctx, target) {
                    Ok(r) => r,
                    Err(e) => {
                        b.unlock_plain(ctx, guard, target.ms_id)?;
                        return Err(e);
                    }
                };
                let h = node::header(&img);
                if !h.live || h.level != level || key < h.low_fence {
                    b.unlock_plain(ctx, guard, target.ms_id)?;
                    b.on_stale_route(ctx, key);
                    break 'hop;
                }
                if key >= h.high_fence {
                    b.unlock_plain(ctx, guard, target.ms_id)?;
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
                    let mut list = CombineList::new(target.ms_id);
                    list.push(Command::write_unsignaled(target, img))?;
                    hocl::unlock(&b.cs.llt, &b.fabric, ctx, guard, list)?;
                    return Ok(());
                }

                // Internal split: promote the median separator.
                let sibling_addr = match ctx.alloc_node(b.cfg.node_size as u64) {
                    Ok(a) => a,
                    Err(e) => {
                        b.unlock_plain(ctx, guard, target.ms_id)?;
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

                // The pending pair goes to whichever half covers it.
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
                let mut list = CombineList::new(target.ms_id);
                if sibling_addr.ms_id == target.ms_id {
                    list.push(Command::write_unsignaled(sibling_addr, sib_img))?;
                } else {
                    let sqp = ctx.qp(sibling_addr.ms_id)?;
                    b.fabric.write(ctx, sqp, sibling_addr, sib_img)?;
                }
                list.push(Command::write_unsignaled(target, img))?;
                hocl::unlock(&b.cs.llt, &b.fabric, ctx, guard, list)?;

                return self.insert_internal(ctx, promote_key, sibling_addr, level + 1);
            }
        }
        Err(TreeError::RetryBudget {
            op: "insert_internal",
        })
    }

    /// Installs a new root above the current one. Serialized by the HOCL
    /// lock on the root block; returns false when another client grew the
    /// tree first.
    fn try_grow_root(
        &self,
        ctx: &mut ClientCtx,
        key: u64,
        child: GlobalAddress,
        level: u8,
    ) -> TreeResult<bool> {
        let b = &self.base;
        let guard = hocl::lock(&b.cs.llt, &b.fabric, ctx, b.root_block)?;
        let qp0 = ctx.qp(0)?;
        let (bytes, _) = b.fabric.read(ctx, qp0, b.root_block, ROOT_BLOCK_LEN)?;
        let (ver, cur) = decode_root_block(&bytes).expect("root block quiescent under its lock");
        if cur.height != level {
            b.unlock_plain(ctx, guard, 0)?;
            return Ok(false);
        }
        let new_root = match ctx.alloc_node(b.cfg.node_size as u64) {
            Ok(a) => a,
            Err(e) => {
                b.unlock_plain(ctx, guard, 0)?;
                return Err(e.into());
            }
        };
        let mut img = node::new_node(b.cfg.node_size, level, 0, FENCE_MAX, 0);
        node::set_internal_leftmost(&mut img, cur.root_raw);
        node::set_internal_pair(&mut img, 0, key, child.to_raw());
        node::set_internal_count(&mut img, 1);
        let qp = ctx.qp(new_root.ms_id)?;
        b.fabric.write(ctx, qp, new_root, img)?;

        let info = RootInfo {
            root_raw: new_root.to_raw(),
            height: level + 1,
        };
        let mut list = CombineList::new(0);
        list.push(Command::write(
            b.root_block,
            encode_root_block((ver + 1) & 0x0F, info),
        ))?;
        hocl::unlock(&b.cs.llt, &b.fabric, ctx, guard, list)?;
        b.cs.cache.set_root_info(info);
        b.cs.cache.flush_upper();
        Ok(true)
    }

    /// Lock-free lookup under the two-level version discipline.
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
                        // Unsorted leaf: scan every occupied slot.
                        for i in 0..node::leaf_capacity(b.cfg.node_size) {
                            let e = node::leaf_entry(&img, i);
                            if e.key == key {
                                if !b.cfg.disable_version_checks && !e.versions_match() {
                                    ctx.stats.read_retries += 1;
                                    continue 'leaf;
                                }
                                return Ok(Some(e.value));
                            }
                        }
                        return Ok(None);
                    }
                }
            }
        }
        Err(TreeError::RetryBudget { op: "lookup" })
    }

    /// Deletes by nulling the entry key (17-byte write combined with the
    /// unlock); may trigger a best-effort merge into the left sibling.
    pub fn delete(&self, ctx: &mut ClientCtx, key: u64) -> TreeResult<bool> {
        validate_key(key)?;
        let b = &self.base;
        for _ in 0..b.cfg.retry_budget {
            let mut leaf = b.descend(ctx, key, 0, true)?;
            'hop: for _ in 0..b.cfg.retry_budget {
                let guard = hocl::lock(&b.cs.llt, &b.fabric, ctx, leaf)?;
                let (mut img, _) = match b.read_node(ctx, leaf) {
                    Ok(r) => r,
                    Err(e) => {
                        b.unlock_plain(ctx, guard, leaf.ms_id)?;
                        return Err(e);
                    }
                };
                let h = node::header(&img);
                if !h.live || h.level != 0 || key < h.low_fence {
                    b.unlock_plain(ctx, guard, leaf.ms_id)?;
                    b.on_stale_route(ctx, key);
                    break 'hop;
                }
                if key >= h.high_fence {
                    b.unlock_plain(ctx, guard, leaf.ms_id)?;
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

                let cap = node::leaf_capacity(b.cfg.node_size);
                let slot = (0..cap).find(|&i| node::leaf_entry(&img, i).key == key);
                let Some(i) = slot else {
                    b.unlock_plain(ctx, guard, leaf.ms_id)?;
                    return Ok(false);
                };
                let old = node::leaf_entry(&img, i);
                let e = LeafEntry {
                    fev: (old.fev + 1) & 0x0F,
                    key: NULL_KEY,
                    value: 0,
                    rev: (old.rev + 1) & 0x0F,
                };
                node::set_leaf_entry(&mut img, i, &e);
                let remaining = node::leaf_live_count(&img, b.cfg.node_size);
                let mut list = CombineList::new(leaf.ms_id);
                list.push(Command::write(
                    leaf.add(node::leaf_entry_offset(i) as u64),
                    node::encode_leaf_entry(&e).to_vec(),
                ))?;
                self.probe(key, None);
                hocl::unlock(&b.cs.llt, &b.fabric, ctx, guard, list)?;

                if (remaining as f64) < b.cfg.merge_threshold * cap as f64 {
                    // Best effort: needs a left sibling under the same parent
                    // with enough room; otherwise the leaf stays underfull.
                    self.try_merge_leaf(ctx, leaf, h.low_fence)?;
                }
                return Ok(true);
            }
        }
        Err(TreeError::RetryBudget { op: "delete" })
    }

    /// Merges `victim` into its left sibling: mark the victim dead under its
    /// lock, move its live entries left under the left sibling's lock, then
    /// drop its routing entry from the parent. One lock scope at a time;
    /// readers that race into the dead window retry off the free bit.
    fn try_merge_leaf(
        &self,
        ctx: &mut ClientCtx,
        victim: GlobalAddress,
        victim_low: u64,
    ) -> TreeResult<()> {
        let b = &self.base;
        let ri = b.root_info(ctx)?;
        if ri.height < 2 {
            return Ok(()); // the root leaf never merges
        }

        // Locate the left neighbour under the same parent.
        let parent = b.descend(ctx, victim_low.max(1), 1, false)?;
        let (pimg, _) = b.read_node(ctx, parent)?;
        let ph = node::header(&pimg);
        if !ph.live || ph.level != 1 || !node::node_versions_match(&pimg) {
            return Ok(()); // parent unstable; leave the leaf underfull
        }
        let n = node::internal_count(&pimg);
        let mut left_raw = None;
        for i in 0..n {
            let (k, c) = node::internal_pair(&pimg, i);
            if c == victim.to_raw() && k == victim_low {
                left_raw = Some(if i == 0 {
                    node::internal_leftmost(&pimg)
                } else {
                    node::internal_pair(&pimg, i - 1).1
                });
                break;
            }
        }
        let Some(left_raw) = left_raw else {
            return Ok(()); // leftmost child or stale parent: no merge
        };
        let Some(mut left) = GlobalAddress::from_raw(left_raw) else {
            return Ok(());
        };

        // Step 1: mark the victim dead and capture its payload.
        let guard = hocl::lock(&b.cs.llt, &b.fabric, ctx, victim)?;
        let (mut vimg, _) = b.read_node(ctx, victim)?;
        let vh = node::header(&vimg);
        let cap = node::leaf_capacity(b.cfg.node_size);
        let live_count = node::leaf_live_count(&vimg, b.cfg.node_size);
        let still_underfull = (live_count as f64) < b.cfg.merge_threshold * cap as f64;
        if !vh.live || vh.low_fence != victim_low || !still_underfull {
            b.unlock_plain(ctx, guard, victim.ms_id)?;
            return Ok(());
        }
        let moved = node::leaf_live_entries(&vimg, b.cfg.node_size);
        let saved_vimg = vimg.clone();
        vimg[0] &= 0xF0; // clear the free bit
        node::bump_node_versions(&mut vimg);
        let mut list = CombineList::new(victim.ms_id);
        list.push(Command::write_unsignaled(victim, vimg))?;
        hocl::unlock(&b.cs.llt, &b.fabric, ctx, guard, list)?;

        // Step 2: fold the payload into the left sibling.
        let mut merged = false;
        for _ in 0..b.cfg.retry_budget {
            let guard = hocl::lock(&b.cs.llt, &b.fabric, ctx, left)?;
            let (mut limg, _) = b.read_node(ctx, left)?;
            let lh = node::header(&limg);
            if !lh.live {
                b.unlock_plain(ctx, guard, left.ms_id)?;
                break;
            }
            if lh.sibling != victim.to_raw() {
                // The left neighbour split meanwhile; walk right toward the
                // node that still links to the victim.
                b.unlock_plain(ctx, guard, left.ms_id)?;
                match GlobalAddress::from_raw(lh.sibling) {
                    Some(next) if next != victim => {
                        left = next;
                        continue;
                    }
                    _ => break,
                }
            }
            let left_live = node::leaf_live_count(&limg, b.cfg.node_size);
            if left_live + moved.len() > cap {
                b.unlock_plain(ctx, guard, left.ms_id)?;
                break;
            }
            let free_slots: Vec<usize> = (0..cap)
                .filter(|&i| node::leaf_entry(&limg, i).is_empty())
                .collect();
            for (e, &i) in moved.iter().zip(&free_slots) {
                node::set_leaf_entry(&mut limg, i, e);
            }
            node::set_header(
                &mut limg,
                &NodeHeader {
                    high_fence: vh.high_fence,
                    sibling: vh.sibling,
                    ..lh
                },
            );
            node::bump_node_versions(&mut limg);
            let mut list = CombineList::new(left.ms_id);
            list.push(Command::write_unsignaled(left, limg))?;
            hocl::unlock(&b.cs.llt, &b.fabric, ctx, guard, list)?;
            merged = true;
            break;
        }

        if !merged {
            // Merge aborted after the victim was marked dead: revive it.
            let guard = hocl::lock(&b.cs.llt, &b.fabric, ctx, victim)?;
            let mut restored = saved_vimg;
            node::bump_node_versions(&mut restored);
            node::bump_node_versions(&mut restored); // stay ahead of the dead image
            let mut list = CombineList::new(victim.ms_id);
            list.push(Command::write_unsignaled(victim, restored))?;
            hocl::unlock(&b.cs.llt, &b.fabric, ctx, guard, list)?;
            return Ok(());
        }

        // Step 3: drop the victim's routing entry from the parent.
        let mut parent = parent;
        for _ in 0..b.cfg.retry_budget {
            let guard = hocl::lock(&b.cs.llt, &b.fabric, ctx, parent)?;
            let (mut pimg, _) = match b.read_node(ctx, parent) {
                Ok(r) => r,
                Err(e) => {
                    b.unlock_plain(ctx, guard, parent.ms_id)?;
                    return Err(e);
                }
            };
            let ph = node::header(&pimg);
            if !ph.live || ph.level != 1 {
                b.unlock_plain(ctx, guard, parent.ms_id)?;
                parent = b.descend(ctx, victim_low.max(1), 1, false)?;
                continue;
            }
            if victim_low >= ph.high_fence {
                b.unlock_plain(ctx, guard, parent.ms_id)?;
                match GlobalAddress::from_raw(ph.sibling) {
                    Some(s) => {
                        parent = s;
                        continue;
                    }
                    None => break,
                }
            }
            if node::internal_remove_child(&mut pimg, victim.to_raw()).is_some() {
                node::bump_node_versions(&mut pimg);
                let mut list = CombineList::new(parent.ms_id);
                list.push(Command::write_unsignaled(parent, pimg))?;
                hocl::unlock(&b.cs.llt, &b.fabric, ctx, guard, list)?;
            } else {
                b.unlock_plain(ctx, guard, parent.ms_id)?;
            }
            break;
        }
        b.cs.cache.invalidate(victim_low);
        b.cs.cache.flush_upper();

        // Step 4: deallocate (idempotent re-clear of the free bit).
        allocator::free_node(&b.fabric, ctx, victim)?;
        Ok(())
    }

    /// Range query over `[low, high]`, inclusive. Leaf reads for one level-1
    /// node go out as one parallel wave; each leaf validates and retries
    /// individually. Not atomic with concurrent writes; result order is
    /// unspecified.
    pub fn range(&self, ctx: &mut ClientCtx, low: u64, high: u64) -> TreeResult<Vec<(u64, u64)>> {
        let checks = !self.base.cfg.disable_version_checks;
        let node_size = self.base.cfg.node_size;
        self.base.range_with(ctx, low, high, |img, lo, hi| {
            let mut out = Vec::new();
            for i in 0..node::leaf_capacity(node_size) {
                let e = node::leaf_entry(img, i);
                if e.is_empty() || e.key < lo || e.key > hi {
                    continue;
                }
                if checks && !e.versions_match() {
                    return None; // torn entry: caller re-reads this leaf
                }
                out.push((e.key, e.value));
            }
            Some(out)
        })
    }

    /// Bottom-up bulkload of a fresh tree; each leaf is filled to
    /// `fill_factor` of capacity. Rejects unsorted or duplicated keys.
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
            node::leaf_capacity(node_size),
            |chunk, low, high, sibling| {
                let mut img = node::new_node(node_size, 0, low, high, sibling);
                for (slot, (k, v)) in chunk.iter().enumerate() {
                    node::set_leaf_entry(
                        &mut img,
                        slot,
                        &LeafEntry {
                            fev: 1,
                            key: *k,
                            value: *v,
                            rev: 1,
                        },
                    );
                }
                img
            },
        )
    }

    /// Walks the level-1 ring into the CS cache; used after bulkload.
    pub fn warm_cache(&self, ctx: &mut ClientCtx) -> TreeResult<usize> {
        self.base.warm_cache(ctx)
    }
}

/// Groups bulkload node writes into per-MS combine lists.
struct BulkWriter<'a> {
    base: &'a TreeBase,
    max_per_post: usize,
    pending: Vec<(u16, CombineList)>,
}

impl<'a> BulkWriter<'a> {
    fn new(base: &'a TreeBase, max_per_post: usize) -> Self {
        BulkWriter {
            base,
            max_per_post,
            pending: Vec::new(),
        }
    }

    fn push(&mut self, ctx: &mut ClientCtx, addr: GlobalAddress, img: Vec<u8>) -> TreeResult<()> {
        let idx = match self.pending.iter().position(|(ms, _)| *ms == addr.ms_id) {
            Some(i) => i,
            None => {
                self.pending.push((addr.ms_id, CombineList::new(addr.ms_id)));
                self.pending.len() - 1
            }
        };
        self.pending[idx].1.push(Command::write(addr, img))?;
        if self.pending[idx].1.len() >= self.max_per_post {
            let (ms, full) = {
                let (ms, l) = &mut self.pending[idx];
                (*ms, std::mem::replace(l, CombineList::new(*ms)))
            };
            let qp = ctx.qp(ms)?;
            self.base.fabric.post(ctx, qp, full)?;
        }
        Ok(())
    }

    fn flush(&mut self, ctx: &mut ClientCtx) -> TreeResult<()> {
        for (ms, list) in self.pending.drain(..) {
            if !list.is_empty() {
                let qp = ctx.qp(ms)?;
                self.base.fabric.post(ctx, qp, list)?;
            }
        }
        Ok(())
    }
}
