//! Compute-server index cache.
//!
//! Two kinds of copies are kept, mirroring their roles in traversal:
//!
//! * the root pointer block and the highest two levels of internal nodes are
//!   always cached and refreshed wholesale when a validation fails;
//! * level-1 internal nodes (the parents of leaves) live in a
//!   capacity-bounded ordered map keyed by their low fence. Eviction samples
//!   two resident entries uniformly and drops the least recently used of the
//!   pair.
//!
//! Staleness is safe by construction: a stale hit costs extra round trips
//! (fence-check failures, sibling hops) but never a wrong result, because
//! leaves are always fetched from the fabric and validated.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::node;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RootInfo {
    pub root_raw: u64,
    pub height: u8,
}

pub struct CacheEntry {
    pub low_fence: u64,
    pub high_fence: u64,
    pub node_addr: u64,
    pub image: Vec<u8>,
    last_access: AtomicU64,
}

/// Index cache shared by all client threads of one compute server. Readers
/// take the map read lock briefly and clone an `Arc`, so they never observe
/// a partially updated entry.
pub struct IndexCache {
    node_size: usize,
    capacity_bytes: u64,
    /// Level-1 images keyed by low fence.
    level1: RwLock<BTreeMap<u64, Arc<CacheEntry>>>,
    /// Root block plus top-two-level node images, keyed by raw address.
    upper: RwLock<UpperCache>,
    access_clock: AtomicU64,
    evict_rng: Mutex<ChaCha8Rng>,
    pub hits: AtomicU64,
    pub misses: AtomicU64,
}

#[derive(Default)]
struct UpperCache {
    root: Option<RootInfo>,
    nodes: HashMap<u64, Arc<Vec<u8>>>,
}

impl IndexCache {
    pub fn new(node_size: usize, capacity_bytes: u64, seed: u64) -> Self {
        IndexCache {
            node_size,
            capacity_bytes,
            level1: RwLock::new(BTreeMap::new()),
            upper: RwLock::new(UpperCache::default()),
            access_clock: AtomicU64::new(0),
            evict_rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    fn tick(&self) -> u64 {
        self.access_clock.fetch_add(1, Ordering::Relaxed)
    }

    /// Looks up the cached level-1 node covering `key` and routes to the
    /// leaf. A returned address is a candidate only; callers validate the
    /// fetched leaf and call [`invalidate`](Self::invalidate) if it lies.
    pub fn find(&self, key: u64) -> Option<u64> {
        let map = self.level1.read();
        let covering = map
            .range(..=key)
            .next_back()
            .filter(|(_, e)| key < e.high_fence);
        match covering {
            Some((_, entry)) => {
                entry.last_access.store(self.tick(), Ordering::Relaxed);
                let leaf = node::internal_child_for(&entry.image, key);
                self.hits.fetch_add(1, Ordering::Relaxed);
                Some(leaf)
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    /// The cached level-1 node image covering `key`, for range planning.
    pub fn find_node(&self, key: u64) -> Option<Arc<CacheEntry>> {
        let map = self.level1.read();
        let (_, entry) = map.range(..=key).next_back()?;
        if key >= entry.high_fence {
            return None;
        }
        entry.last_access.store(self.tick(), Ordering::Relaxed);
        Some(entry.clone())
    }

    /// Inserts (or replaces) a level-1 node image. Evicts with two random
    /// choices when over capacity.
    pub fn insert(&self, node_addr: u64, image: Vec<u8>) {
        let h = node::header(&image);
        debug_assert_eq!(h.level, 1, "only level-1 nodes are cached here");
        let entry = Arc::new(CacheEntry {
            low_fence: h.low_fence,
            high_fence: h.high_fence,
            node_addr,
            image,
            last_access: AtomicU64::new(self.tick()),
        });
        let mut map = self.level1.write();
        map.insert(h.low_fence, entry);
        let max_resident = (self.capacity_bytes / self.node_size as u64).max(1) as usize;
        while map.len() > max_resident {
            // Two distinct random residents; evict the least recently used
            // of the pair.
            let victim = {
                let mut rng = self.evict_rng.lock();
                let i = rng.random_range(0..map.len());
                let j = if map.len() > 1 {
                    loop {
                        let j = rng.random_range(0..map.len());
                        if j != i {
                            break j;
                        }
                    }
                } else {
                    i
                };
                let stamp = |n: usize| {
                    map.iter()
                        .nth(n)
                        .map(|(k, e)| (*k, e.last_access.load(Ordering::Relaxed)))
                        .unwrap()
                };
                let (ka, ta) = stamp(i);
                let (kb, tb) = stamp(j);
                if ta <= tb {
                    ka
                } else {
                    kb
                }
            };
            map.remove(&victim);
        }
    }

    /// Drops the level-1 entry a [`find`](Self::find) for `key` would have
    /// used, if any.
    pub fn invalidate(&self, key: u64) {
        let mut map = self.level1.write();
        if let Some((&low, entry)) = map.range(..=key).next_back() {
            if key < entry.high_fence {
                map.remove(&low);
            }
        }
    }

    pub fn resident(&self) -> usize {
        self.level1.read().len()
    }

    pub fn resident_bytes(&self) -> u64 {
        self.resident() as u64 * self.node_size as u64
    }

    pub fn hit_rate(&self) -> f64 {
        let h = self.hits.load(Ordering::Relaxed) as f64;
        let m = self.misses.load(Ordering::Relaxed) as f64;
        if h + m == 0.0 {
            0.0
        } else {
            h / (h + m)
        }
    }

    pub fn reset_counters(&self) {
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
    }

    // Upper cache: root block and the top two node levels.

    pub fn root_info(&self) -> Option<RootInfo> {
        self.upper.read().root
    }

    pub fn set_root_info(&self, info: RootInfo) {
        self.upper.write().root = Some(info);
    }

    pub fn upper_node(&self, addr_raw: u64) -> Option<Arc<Vec<u8>>> {
        self.upper.read().nodes.get(&addr_raw).cloned()
    }

    pub fn put_upper_node(&self, addr_raw: u64, image: Vec<u8>) {
        self.upper.write().nodes.insert(addr_raw, Arc::new(image));
    }

    /// Wholesale refresh after a failed validation: drop the root info and
    /// every top-level image so the next traversal re-reads them.
    pub fn flush_upper(&self) {
        let mut up = self.upper.write();
        up.root = None;
        up.nodes.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::node::FENCE_MAX;

    fn l1_image(low: u64, high: u64, child: u64) -> Vec<u8> {
        let mut img = node::new_node(1024, 1, low, high, 0);
        node::set_internal_leftmost(&mut img, child);
        img
    }

    #[test]
    fn find_routes_to_child() {
        let cache = IndexCache::new(1024, 1 << 20, 7);
        cache.insert(0x1000, l1_image(10, 20, 0xAA));
        cache.insert(0x2000, l1_image(20, FENCE_MAX, 0xBB));
        assert_eq!(cache.find(15), Some(0xAA));
        assert_eq!(cache.find(25), Some(0xBB));
        assert_eq!(cache.find(5), None); // below every cached range
        assert_eq!(cache.hits.load(Ordering::Relaxed), 2);
        assert_eq!(cache.misses.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn capacity_bound_holds_and_mru_survives_two_choice_eviction() {
        // Room for exactly 8 images.
        let cache = IndexCache::new(1024, 8 * 1024, 7);
        for i in 0..8u64 {
            cache.insert(i, l1_image(i * 10 + 1, (i + 1) * 10 + 1, i));
        }
        assert_eq!(cache.resident(), 8);
        for round in 0..50u64 {
            let low = 1000 + round * 10;
            cache.insert(100 + round, l1_image(low + 1, low + 5, round));
            assert!(cache.resident() <= 8);
            assert!(cache.resident_bytes() <= 8 * 1024);
            // The fresh insert is the global MRU; a pair of two distinct
            // samples always evicts its older member, so the MRU survives.
            assert!(
                cache.find(low + 2).is_some(),
                "most recent entry evicted in round {round}"
            );
        }
    }

    #[test]
    fn reinsert_replaces_image() {
        let cache = IndexCache::new(1024, 1 << 20, 7);
        cache.insert(0x1000, l1_image(10, 20, 0xAA));
        cache.insert(0x1000, l1_image(10, 20, 0xCC));
        assert_eq!(cache.find(12), Some(0xCC));
        assert_eq!(cache.resident(), 1);
    }

    #[test]
    fn invalidate_removes_covering_entry() {
        let cache = IndexCache::new(1024, 1 << 20, 7);
        cache.insert(0x1000, l1_image(10, 20, 0xAA));
        cache.invalidate(15);
        assert_eq!(cache.find(15), None);
        cache.invalidate(15); // absent: no-op
    }
}
