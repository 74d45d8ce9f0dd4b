//! Differential tests of both engines against an in-memory reference map,
//! plus the structural walks that check fence and level discipline.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use shermansim::baseline::BaselineTree;
use shermansim::fabric::{Fabric, FabricConfig, GlobalAddress};
use shermansim::node;
use shermansim::tree::{ComputeServer, ShermanTree, TreeConfig, TreeError};
use shermansim::ClientCtx;

fn test_fabric(n_ms: u16) -> Arc<Fabric> {
    let mut cfg = FabricConfig::default();
    cfg.host_region_bytes = 32 * 1024 * 1024;
    Fabric::new(n_ms, cfg).unwrap()
}

fn sherman(fabric: &Arc<Fabric>, ctx: &mut ClientCtx) -> ShermanTree {
    let cs = ComputeServer::new(0, 1024, 8 * 1024 * 1024, 1);
    ShermanTree::create(fabric.clone(), cs, TreeConfig::default(), ctx).unwrap()
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Insert(u64, u64),
    Delete(u64),
    Lookup(u64),
}

fn random_history(rng: &mut StdRng, ops: usize, key_space: u64) -> Vec<Op> {
    (0..ops)
        .map(|_| {
            let key = rng.random_range(1..=key_space);
            match rng.random_range(0..10) {
                0..=4 => Op::Insert(key, rng.random::<u64>()),
                5..=6 => Op::Delete(key),
                _ => Op::Lookup(key),
            }
        })
        .collect()
}

enum Engine {
    S(ShermanTree),
    B(BaselineTree),
}

impl Engine {
    fn insert(&self, ctx: &mut ClientCtx, k: u64, v: u64) {
        match self {
            Engine::S(t) => t.insert(ctx, k, v).unwrap(),
            Engine::B(t) => t.insert(ctx, k, v).unwrap(),
        }
    }
    fn lookup(&self, ctx: &mut ClientCtx, k: u64) -> Option<u64> {
        match self {
            Engine::S(t) => t.lookup(ctx, k).unwrap(),
            Engine::B(t) => t.lookup(ctx, k).unwrap(),
        }
    }
    fn delete(&self, ctx: &mut ClientCtx, k: u64) -> bool {
        match self {
            Engine::S(t) => t.delete(ctx, k).unwrap(),
            Engine::B(t) => t.delete(ctx, k).unwrap(),
        }
    }
    fn range(&self, ctx: &mut ClientCtx, lo: u64, hi: u64) -> Vec<(u64, u64)> {
        match self {
            Engine::S(t) => t.range(ctx, lo, hi).unwrap(),
            Engine::B(t) => t.range(ctx, lo, hi).unwrap(),
        }
    }
}

/// Runs a history against an engine and the reference map, checking every
/// lookup and the final contents.
fn check_history(engine: &Engine, ctx: &mut ClientCtx, history: &[Op], key_space: u64) {
    let mut oracle = BTreeMap::new();
    for op in history {
        match *op {
            Op::Insert(k, v) => {
                engine.insert(ctx, k, v);
                oracle.insert(k, v);
            }
            Op::Delete(k) => {
                let existed = engine.delete(ctx, k);
                assert_eq!(existed, oracle.remove(&k).is_some(), "delete({k})");
            }
            Op::Lookup(k) => {
                assert_eq!(engine.lookup(ctx, k), oracle.get(&k).copied(), "lookup({k})");
            }
        }
    }
    for k in 1..=key_space {
        assert_eq!(
            engine.lookup(ctx, k),
            oracle.get(&k).copied(),
            "final lookup({k})"
        );
    }
    let mut scanned = engine.range(ctx, 1, key_space);
    scanned.sort();
    let expected: Vec<(u64, u64)> = oracle.iter().map(|(k, v)| (*k, *v)).collect();
    assert_eq!(scanned, expected, "final range scan");
}

#[test]
fn sherman_matches_reference_map_across_histories() {
    let mut rng = StdRng::seed_from_u64(0xC0FFEE);
    for round in 0..60 {
        let key_space = [8u64, 64, 512][round % 3];
        let ops = 500;
        let history = random_history(&mut rng, ops, key_space);
        let fabric = test_fabric(2);
        let mut ctx = fabric.register_client(0);
        let tree = Engine::S(sherman(&fabric, &mut ctx));
        check_history(&tree, &mut ctx, &history, key_space);
    }
}

#[test]
fn baseline_matches_reference_map_across_histories() {
    let mut rng = StdRng::seed_from_u64(0xBEEF);
    for round in 0..30 {
        let key_space = [8u64, 64, 512][round % 3];
        let history = random_history(&mut rng, 500, key_space);
        let fabric = test_fabric(2);
        let mut ctx = fabric.register_client(0);
        let cs = ComputeServer::new(0, 1024, 8 * 1024 * 1024, 1);
        let tree = Engine::B(
            BaselineTree::create(fabric.clone(), cs, TreeConfig::default(), &mut ctx).unwrap(),
        );
        check_history(&tree, &mut ctx, &history, key_space);
    }
}

#[test]
fn engines_agree_on_identical_histories() {
    let mut rng = StdRng::seed_from_u64(7);
    let history = random_history(&mut rng, 2_000, 256);
    let fabric_a = test_fabric(2);
    let fabric_b = test_fabric(2);
    let mut ctx_a = fabric_a.register_client(0);
    let mut ctx_b = fabric_b.register_client(0);
    let a = sherman(&fabric_a, &mut ctx_a);
    let cs_b = ComputeServer::new(0, 1024, 8 * 1024 * 1024, 1);
    let b = BaselineTree::create(fabric_b.clone(), cs_b, TreeConfig::default(), &mut ctx_b).unwrap();
    for op in &history {
        match *op {
            Op::Insert(k, v) => {
                a.insert(&mut ctx_a, k, v).unwrap();
                b.insert(&mut ctx_b, k, v).unwrap();
            }
            Op::Delete(k) => {
                assert_eq!(a.delete(&mut ctx_a, k).unwrap(), b.delete(&mut ctx_b, k).unwrap());
            }
            Op::Lookup(k) => {
                assert_eq!(a.lookup(&mut ctx_a, k).unwrap(), b.lookup(&mut ctx_b, k).unwrap());
            }
        }
    }
    let mut ra = a.range(&mut ctx_a, 1, 256).unwrap();
    let mut rb = b.range(&mut ctx_b, 1, 256).unwrap();
    ra.sort();
    rb.sort();
    assert_eq!(ra, rb);
}

#[test]
fn bulkload_then_full_verification() {
    let fabric = test_fabric(2);
    let mut ctx = fabric.register_client(0);
    let tree = sherman(&fabric, &mut ctx);
    let n = 100_000u64;
    let pairs: Vec<(u64, u64)> = (1..=n).map(|k| (k, k.wrapping_mul(31))).collect();
    tree.bulkload(&mut ctx, &pairs, 0.8).unwrap();
    for k in (1..=n).step_by(997) {
        assert_eq!(tree.lookup(&mut ctx, k).unwrap(), Some(k.wrapping_mul(31)));
    }
    assert_eq!(tree.lookup(&mut ctx, n + 1).unwrap(), None);
    let r = tree.range(&mut ctx, 500, 699).unwrap();
    assert_eq!(r.len(), 200);
}

#[test]
fn bulkload_rejects_unsorted_and_empty_is_valid() {
    let fabric = test_fabric(1);
    let mut ctx = fabric.register_client(0);
    let tree = sherman(&fabric, &mut ctx);
    match tree.bulkload(&mut ctx, &[(5, 1), (5, 2)], 0.8) {
        Err(TreeError::BulkloadOrder(5)) => {}
        other => panic!("expected order rejection, got {other:?}"),
    }

    let fabric2 = test_fabric(1);
    let mut ctx2 = fabric2.register_client(0);
    let tree2 = sherman(&fabric2, &mut ctx2);
    tree2.bulkload(&mut ctx2, &[], 0.8).unwrap();
    assert_eq!(tree2.lookup(&mut ctx2, 42).unwrap(), None);
}

#[test]
fn full_fill_factor_splits_on_first_insert() {
    let fabric = test_fabric(1);
    let mut ctx = fabric.register_client(0);
    let tree = sherman(&fabric, &mut ctx);
    let cap = node::leaf_capacity(1024) as u64;
    let pairs: Vec<(u64, u64)> = (1..=cap * 3).map(|k| (k, k)).collect();
    tree.bulkload(&mut ctx, &pairs, 1.0).unwrap();
    ctx.stats = Default::default();
    tree.insert(&mut ctx, cap * 3 + 10, 1).unwrap();
    assert_eq!(ctx.stats.splits, 1, "a full leaf must split immediately");
}

/// Walks every reachable node checking fence containment, sibling fence
/// continuity, level discipline, and sortedness of internal nodes.
#[test]
fn fence_and_level_discipline_after_mixed_ops() {
    let fabric = test_fabric(2);
    let mut ctx = fabric.register_client(0);
    let tree = sherman(&fabric, &mut ctx);
    let mut rng = StdRng::seed_from_u64(99);
    for _ in 0..4_000 {
        let k = rng.random_range(1..=2_000u64);
        match rng.random_range(0..3) {
            0 | 1 => tree.insert(&mut ctx, k, k ^ 0xAB).unwrap(),
            _ => {
                tree.delete(&mut ctx, k).unwrap();
            }
        }
    }

    // Read the root block by hand and walk each level's sibling ring.
    let (root_raw, height) = {
        let qp = ctx.qp(0).unwrap();
        let (b, _) = fabric
            .read(&mut ctx, qp, GlobalAddress::host(0, 0), 16)
            .unwrap();
        (
            u64::from_be_bytes(b[1..9].try_into().unwrap()),
            b[9],
        )
    };
    let mut level_head = GlobalAddress::from_raw(root_raw).unwrap();
    for expected_level in (0..height).rev() {
        let mut cur = Some(level_head);
        let mut prev_high: Option<u64> = None;
        let mut next_head = None;
        while let Some(addr) = cur {
            let qp = ctx.qp(addr.ms_id).unwrap();
            let (img, _) = fabric.read(&mut ctx, qp, addr, 1024).unwrap();
            let h = node::header(&img);
            assert!(h.live, "reachable node must be live");
            assert_eq!(h.level, expected_level);
            assert!(node::node_versions_match(&img), "quiescent node");
            if let Some(ph) = prev_high {
                assert_eq!(ph, h.low_fence, "sibling low fence continues the ring");
            }
            if expected_level > 0 {
                let n = node::internal_count(&img);
                let mut last = None;
                for i in 0..n {
                    let (k, c) = node::internal_pair(&img, i);
                    assert!(k >= h.low_fence && k < h.high_fence, "separator in fences");
                    assert_ne!(c, 0);
                    if let Some(l) = last {
                        assert!(k > l, "internal keys strictly increasing");
                    }
                    last = Some(k);
                }
                if next_head.is_none() {
                    next_head = Some(GlobalAddress::from_raw(node::internal_leftmost(&img)).unwrap());
                }
            } else {
                for e in node::leaf_live_entries(&img, 1024) {
                    assert!(
                        e.key >= h.low_fence && e.key < h.high_fence,
                        "leaf key {} in [{}, {})",
                        e.key,
                        h.low_fence,
                        h.high_fence
                    );
                    assert!(e.versions_match());
                }
            }
            prev_high = Some(h.high_fence);
            cur = GlobalAddress::from_raw(h.sibling);
        }
        assert_eq!(prev_high, Some(u64::MAX), "ring ends at the max fence");
        if expected_level > 0 {
            level_head = next_head.expect("non-leaf level has children");
        }
    }
}

#[test]
fn delete_merge_clears_victim_and_bumps_versions() {
    // Two-leaf tree: bulkload two leaves, drain the right one, and inspect.
    let fabric = test_fabric(1);
    let mut ctx = fabric.register_client(0);
    let tree = sherman(&fabric, &mut ctx);
    let cap = node::leaf_capacity(1024) as u64;
    let pairs: Vec<(u64, u64)> = (1..=cap * 2).map(|k| (k, k)).collect();
    tree.bulkload(&mut ctx, &pairs, 1.0).unwrap();

    // Find the two leaves.
    let (root_raw, height) = {
        let qp = ctx.qp(0).unwrap();
        let (b, _) = fabric
            .read(&mut ctx, qp, GlobalAddress::host(0, 0), 16)
            .unwrap();
        (u64::from_be_bytes(b[1..9].try_into().unwrap()), b[9])
    };
    assert_eq!(height, 2);
    let qp = ctx.qp(0).unwrap();
    let (root_img, _) = fabric
        .read(&mut ctx, qp, GlobalAddress::from_raw(root_raw).unwrap(), 1024)
        .unwrap();
    let left = GlobalAddress::from_raw(node::internal_leftmost(&root_img)).unwrap();
    let (split_key, right_raw) = node::internal_pair(&root_img, 0);
    let right = GlobalAddress::from_raw(right_raw).unwrap();

    let (left_before, _) = fabric.read(&mut ctx, qp, left, 1024).unwrap();
    let left_fnv_before = node::header(&left_before).fnv;

    // Make room on the left so the merged pair fits, then drain the right
    // leaf below the occupancy threshold, leaving two keys for the merge to
    // move.
    for k in 1..cap / 2 {
        tree.delete(&mut ctx, k).unwrap();
    }
    for k in (split_key + 2)..=(cap * 2) {
        tree.delete(&mut ctx, k).unwrap();
    }

    let (vimg, _) = fabric.read(&mut ctx, qp, right, 1024).unwrap();
    assert!(!node::header(&vimg).live, "victim free bit cleared");
    let (limg, _) = fabric.read(&mut ctx, qp, left, 1024).unwrap();
    let lh = node::header(&limg);
    assert!(lh.live);
    assert_ne!(lh.fnv, left_fnv_before, "left node versions bumped");
    assert_eq!(lh.high_fence, u64::MAX, "left absorbed the victim's range");
    assert_eq!(lh.sibling, 0, "left absorbed the victim's sibling pointer");
    // The surviving keys moved left and still resolve.
    assert_eq!(tree.lookup(&mut ctx, split_key).unwrap(), Some(split_key));
    assert_eq!(
        tree.lookup(&mut ctx, split_key + 1).unwrap(),
        Some(split_key + 1)
    );
    assert_eq!(tree.lookup(&mut ctx, split_key + 2).unwrap(), None);
}

#[test]
fn stale_cache_entry_heals_with_one_sibling_hop() {
    let fabric = test_fabric(1);
    let mut ctx = fabric.register_client(0);
    let tree = sherman(&fabric, &mut ctx);
    let cap = node::leaf_capacity(1024) as u64;
    let pairs: Vec<(u64, u64)> = (1..=cap * 2).map(|k| (k * 2, k)).collect();
    tree.bulkload(&mut ctx, &pairs, 1.0).unwrap();
    assert_eq!(tree.warm_cache(&mut ctx).unwrap(), 1);

    // Split the first leaf; the cached level-1 image is now stale.
    tree.insert(&mut ctx, 3, 3).unwrap();

    // A key that moved to the new right sibling: the stale route lands on
    // the old leaf and recovers with exactly one sibling hop.
    ctx.stats = Default::default();
    let hot = cap * 2 - 2; // upper half of the split leaf's old range
    assert_eq!(tree.lookup(&mut ctx, hot).unwrap(), Some(hot / 2));
    assert_eq!(ctx.stats.sibling_hops, 1);
    assert_eq!(ctx.stats.read_retries, 0);
}

#[test]
fn reserved_keys_rejected() {
    let fabric = test_fabric(1);
    let mut ctx = fabric.register_client(0);
    let tree = sherman(&fabric, &mut ctx);
    assert!(matches!(
        tree.insert(&mut ctx, 0, 1),
        Err(TreeError::InvalidKey(0))
    ));
    assert!(matches!(
        tree.lookup(&mut ctx, u64::MAX),
        Err(TreeError::InvalidKey(_))
    ));
}
