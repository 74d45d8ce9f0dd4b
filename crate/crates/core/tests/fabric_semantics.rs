//! Fabric-level semantics: command execution, ordering, torn-read
//! interleaving, atomic bucket serialization, and round-trip accounting.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use shermansim::fabric::{
    CombineList, Command, CompletionValue, Fabric, FabricConfig, FabricError, GlobalAddress,
};

fn fabric_with(f: impl FnOnce(&mut FabricConfig)) -> Arc<Fabric> {
    let mut cfg = FabricConfig::default();
    cfg.host_region_bytes = 16 * 1024 * 1024;
    f(&mut cfg);
    Fabric::new(2, cfg).unwrap()
}

#[test]
fn write_then_read_round_trips() {
    let fabric = fabric_with(|_| {});
    let mut ctx = fabric.register_client(0);
    let qp = ctx.qp(0).unwrap();
    let addr = GlobalAddress::host(0, 4096);
    fabric.write(&mut ctx, qp, addr, vec![7u8; 100]).unwrap();
    let (bytes, _) = fabric.read(&mut ctx, qp, addr, 100).unwrap();
    assert_eq!(bytes, vec![7u8; 100]);
}

#[test]
fn unknown_ms_and_bounds_errors() {
    let fabric = fabric_with(|_| {});
    let mut ctx = fabric.register_client(0);
    assert!(matches!(ctx.qp(99), Err(FabricError::UnknownMs(99))));
    let qp = ctx.qp(0).unwrap();
    let end = fabric.config().host_region_bytes;
    match fabric.read(&mut ctx, qp, GlobalAddress::host(0, end - 4), 8) {
        Err(FabricError::OutOfBounds { .. }) => {}
        other => panic!("expected bounds error, got {other:?}"),
    }
    match fabric.cas(&mut ctx, qp, GlobalAddress::host(0, 4097), 0, 1) {
        Err(FabricError::Misaligned(_)) => {}
        other => panic!("expected misalignment, got {other:?}"),
    }
}

#[test]
fn combine_list_is_one_round_trip_and_ordered() {
    let fabric = fabric_with(|_| {});
    let mut ctx = fabric.register_client(0);
    let qp = ctx.qp(0).unwrap();
    let node = GlobalAddress::host(0, 8192);
    let lock = GlobalAddress::host(0, 4096);
    // Pretend the lock is held.
    fabric.write(&mut ctx, qp, lock, vec![1u8; 8]).unwrap();
    let before = ctx.metrics();

    let mut list = CombineList::new(0);
    list.push(Command::write_unsignaled(node, vec![0xAB; 1024]))
        .unwrap();
    list.push(Command::lock_release(lock, vec![0u8; 8])).unwrap();
    fabric.post(&mut ctx, qp, list).unwrap();

    let after = ctx.metrics();
    assert_eq!(after.round_trips - before.round_trips, 1);
    assert_eq!(after.bytes_written - before.bytes_written, 1024);
    assert_eq!(after.lock_release_bytes - before.lock_release_bytes, 8);

    // Lock observed free implies the node bytes are visible (list order).
    let (lock_img, _) = fabric.read(&mut ctx, qp, lock, 8).unwrap();
    assert_eq!(lock_img, vec![0u8; 8]);
    let (node_img, _) = fabric.read(&mut ctx, qp, node, 1024).unwrap();
    assert!(node_img.iter().all(|&b| b == 0xAB));
}

#[test]
fn three_writes_combine_into_one_post() {
    let fabric = fabric_with(|_| {});
    let mut ctx = fabric.register_client(0);
    let qp = ctx.qp(0).unwrap();
    let before = ctx.metrics().round_trips;
    let mut list = CombineList::new(0);
    for i in 0..3u64 {
        list.push(Command::write_unsignaled(
            GlobalAddress::host(0, 8192 + i * 2048),
            vec![i as u8; 1024],
        ))
        .unwrap();
    }
    fabric.post(&mut ctx, qp, list).unwrap();
    assert_eq!(ctx.metrics().round_trips - before, 1);
}

#[test]
fn cross_ms_lists_rejected() {
    let mut list = CombineList::new(0);
    assert!(matches!(
        list.push(Command::write(GlobalAddress::host(1, 0), vec![0])),
        Err(FabricError::CrossMs { .. })
    ));
    let fabric = fabric_with(|_| {});
    let mut ctx = fabric.register_client(0);
    let qp0 = ctx.qp(0).unwrap();
    assert!(matches!(
        fabric.post(&mut ctx, qp0, CombineList::new(1)),
        Err(FabricError::QpMismatch { .. }) | Err(FabricError::EmptyList)
    ));
}

#[test]
fn cas_semantics_and_retry_accounting() {
    let fabric = fabric_with(|_| {});
    let mut ctx = fabric.register_client(0);
    let qp = ctx.qp(0).unwrap();
    let w = GlobalAddress::host(0, 4096);
    assert_eq!(fabric.cas(&mut ctx, qp, w, 0, 5).unwrap(), 0);
    assert_eq!(fabric.cas(&mut ctx, qp, w, 0, 9).unwrap(), 5); // fails
    assert_eq!(ctx.metrics().atomic_retries, 1);
    let (img, _) = fabric.read(&mut ctx, qp, w, 8).unwrap();
    assert_eq!(u64::from_le_bytes(img.try_into().unwrap()), 5);
}

#[test]
fn masked_cas_isolates_slots_exhaustively() {
    let fabric = fabric_with(|_| {});
    let mut ctx = fabric.register_client(0);
    let qp = ctx.qp(0).unwrap();
    let w = GlobalAddress::on_chip(0, 0);
    for slot in 0..4u64 {
        // Distinct garbage in the other three slots each round.
        let others: u64 = (0..4)
            .filter(|s| *s != slot)
            .map(|s| (0x1100 + s) << (16 * s))
            .sum();
        fabric
            .write(&mut ctx, qp, w, others.to_le_bytes().to_vec())
            .unwrap();
        let mask = 0xFFFFu64 << (16 * slot);
        let val = 3u64 << (16 * slot);
        let orig = fabric.masked_cas(&mut ctx, qp, w, 0, val, mask).unwrap();
        assert_eq!(orig & mask, 0, "slot {slot} was free");
        let (img, _) = fabric.read(&mut ctx, qp, w, 8).unwrap();
        let now = u64::from_le_bytes(img.try_into().unwrap());
        assert_eq!(now & !mask, others, "slot {slot} must not perturb others");
        assert_eq!(now & mask, val);
    }
}

#[test]
fn masked_cas_with_full_mask_is_cas() {
    let fabric = fabric_with(|_| {});
    let mut ctx = fabric.register_client(0);
    let qp = ctx.qp(0).unwrap();
    let w = GlobalAddress::host(0, 4096);
    assert_eq!(
        fabric.masked_cas(&mut ctx, qp, w, 0, 77, u64::MAX).unwrap(),
        0
    );
    let (img, _) = fabric.read(&mut ctx, qp, w, 8).unwrap();
    assert_eq!(u64::from_le_bytes(img.try_into().unwrap()), 77);
}

#[test]
fn faa_wraps_modulo_2_64() {
    let fabric = fabric_with(|_| {});
    let mut ctx = fabric.register_client(0);
    let qp = ctx.qp(0).unwrap();
    let w = GlobalAddress::host(0, 4096);
    fabric
        .write(&mut ctx, qp, w, u64::MAX.to_le_bytes().to_vec())
        .unwrap();
    assert_eq!(fabric.faa(&mut ctx, qp, w, 1).unwrap(), u64::MAX);
    let (img, _) = fabric.read(&mut ctx, qp, w, 8).unwrap();
    assert_eq!(u64::from_le_bytes(img.try_into().unwrap()), 0);
}

#[test]
fn faa_lock_round_trip_returns_to_zero() {
    // The baseline's original-flavour unlock: CAS in, FAA of the negated
    // value out.
    let fabric = fabric_with(|_| {});
    let mut ctx = fabric.register_client(0);
    let qp = ctx.qp(0).unwrap();
    let w = GlobalAddress::host(0, 4096);
    let owner = 7u64;
    assert_eq!(fabric.cas(&mut ctx, qp, w, 0, owner).unwrap(), 0);
    assert_eq!(fabric.faa(&mut ctx, qp, w, owner.wrapping_neg()).unwrap(), owner);
    let (img, _) = fabric.read(&mut ctx, qp, w, 8).unwrap();
    assert_eq!(u64::from_le_bytes(img.try_into().unwrap()), 0);
}

#[test]
fn host_atomics_to_one_bucket_serialize_in_virtual_time() {
    let fabric = fabric_with(|_| {});
    let cost = fabric.config().host_atomic_cost;
    let rtt = fabric.config().round_trip_latency;
    // 100 clients fire one CAS each at addresses sharing the low 12 bits,
    // all issued at virtual time zero.
    let mut ends = Vec::new();
    for i in 0..100u64 {
        let mut ctx = fabric.register_client(0);
        let qp = ctx.qp(0).unwrap();
        let addr = GlobalAddress::host(0, 4096 + i * (1 << 12));
        assert_eq!(addr.offset & 0xFFF, 4096 & 0xFFF);
        fabric.cas(&mut ctx, qp, addr, 0, 1).unwrap();
        ends.push(ctx.now());
    }
    let makespan = ends.iter().max().unwrap() - 0;
    assert!(
        makespan >= 100 * cost,
        "bucket-serialized atomics must span at least 100 service times (got {makespan})"
    );
    // On-chip atomics to distinct words do not serialize.
    let mut onchip_ends = Vec::new();
    for i in 0..100u64 {
        let mut ctx = fabric.register_client(0);
        let qp = ctx.qp(0).unwrap();
        let addr = GlobalAddress::on_chip(0, i * 8);
        fabric.cas(&mut ctx, qp, addr, 0, 1).unwrap();
        onchip_ends.push(ctx.now());
    }
    let onchip_makespan = *onchip_ends.iter().max().unwrap();
    assert_eq!(onchip_makespan, rtt + fabric.config().onchip_atomic_cost);
}

#[test]
fn torn_read_with_forced_interleave_produces_mixed_image() {
    let fabric = fabric_with(|c| c.torn_interleave_probability = 1.0);
    let mut writer = fabric.register_client(0);
    let wqp = writer.qp(0).unwrap();
    let addr = GlobalAddress::host(0, 8192);
    fabric.write(&mut writer, wqp, addr, vec![0u8; 1024]).unwrap();

    // Scripted schedule: between the reader's chunks, overwrite the whole
    // node once at a chosen boundary.
    let fabric2 = fabric.clone();
    let fired = Arc::new(AtomicUsize::new(0));
    let fired2 = fired.clone();
    fabric.install_read_hook(Box::new(move |step| {
        if step.next_chunk == 8 && fired2.fetch_add(1, Ordering::SeqCst) == 0 {
            let mut w = fabric2.register_client(1);
            let qp = w.qp(0).unwrap();
            fabric2.write(&mut w, qp, addr, vec![1u8; 1024]).unwrap();
        }
    }));

    let mut reader = fabric.register_client(0);
    let rqp = reader.qp(0).unwrap();
    let (img, comp) = fabric.read(&mut reader, rqp, addr, 1024).unwrap();
    fabric.clear_read_hook();
    assert_eq!(fired.load(Ordering::SeqCst) >= 1, true);
    assert!(img[..512].iter().all(|&b| b == 0), "prefix is the old image");
    assert!(img[512..].iter().any(|&b| b == 1), "suffix saw the new image");
    assert!(comp.assembly_window() > 0, "the tear is visible in the window");
}

#[test]
fn whole_node_atomicity_unit_prevents_tears() {
    // atomicity_unit >= node size makes node reads single-chunk: the hook
    // never fires and no tear can happen.
    let fabric = fabric_with(|c| {
        c.atomicity_unit = 1024;
        c.torn_interleave_probability = 1.0;
    });
    let addr = GlobalAddress::host(0, 8192);
    let fabric2 = fabric.clone();
    let fired = Arc::new(AtomicUsize::new(0));
    let fired2 = fired.clone();
    fabric.install_read_hook(Box::new(move |_| {
        fired2.fetch_add(1, Ordering::SeqCst);
        let _ = &fabric2;
    }));
    let mut ctx = fabric.register_client(0);
    let qp = ctx.qp(0).unwrap();
    fabric.write(&mut ctx, qp, addr, vec![9u8; 1024]).unwrap();
    let (img, comp) = fabric.read(&mut ctx, qp, addr, 1024).unwrap();
    fabric.clear_read_hook();
    assert!(img.iter().all(|&b| b == 9));
    assert_eq!(fired.load(Ordering::SeqCst), 0, "single-chunk reads have no boundaries");
    assert_eq!(comp.assembly_window(), 0);
}

#[test]
fn zero_interleave_probability_keeps_commands_atomic() {
    let fabric = fabric_with(|c| c.torn_interleave_probability = 0.0);
    let addr = GlobalAddress::host(0, 8192);
    let stop = Arc::new(AtomicUsize::new(0));
    let f2 = fabric.clone();
    let s2 = stop.clone();
    // A racing writer alternating two full-node images.
    let writer = std::thread::spawn(move || {
        let mut ctx = f2.register_client(1);
        let qp = ctx.qp(0).unwrap();
        let mut flip = false;
        while s2.load(Ordering::Relaxed) == 0 {
            let b = if flip { 0xFFu8 } else { 0x00u8 };
            f2.write(&mut ctx, qp, addr, vec![b; 1024]).unwrap();
            flip = !flip;
        }
    });
    let mut ctx = fabric.register_client(0);
    let qp = ctx.qp(0).unwrap();
    for _ in 0..2_000 {
        let (img, _) = fabric.read(&mut ctx, qp, addr, 1024).unwrap();
        let first = img[0];
        assert!(
            img.iter().all(|&b| b == first),
            "p=0 reads must be whole-command atomic"
        );
    }
    stop.store(1, Ordering::Relaxed);
    writer.join().unwrap();
}

#[test]
fn per_qp_posts_apply_in_order() {
    let fabric = fabric_with(|_| {});
    let mut ctx = fabric.register_client(0);
    let qp = ctx.qp(0).unwrap();
    let addr = GlobalAddress::host(0, 4096);
    for i in 0..100u64 {
        fabric
            .write(&mut ctx, qp, addr, i.to_le_bytes().to_vec())
            .unwrap();
    }
    let (img, comp) = fabric.read(&mut ctx, qp, addr, 8).unwrap();
    assert_eq!(u64::from_le_bytes(img.try_into().unwrap()), 99);
    assert_eq!(comp.ticket, 101, "tickets count posts on this QP");
}

#[test]
fn read_batch_counts_per_read_but_advances_clock_once() {
    let fabric = fabric_with(|_| {});
    let mut ctx = fabric.register_client(0);
    let addrs: Vec<GlobalAddress> = (0..10u64)
        .map(|i| GlobalAddress::host(i as u16 % 2, 8192 + i * 2048))
        .collect();
    let rt0 = ctx.metrics().round_trips;
    let t0 = ctx.now();
    fabric.read_batch(&mut ctx, &addrs, 1024).unwrap();
    assert_eq!(ctx.metrics().round_trips - rt0, 10);
    assert_eq!(ctx.now() - t0, fabric.config().round_trip_latency);
}

#[test]
fn completion_values_match_verbs() {
    let fabric = fabric_with(|_| {});
    let mut ctx = fabric.register_client(0);
    let qp = ctx.qp(0).unwrap();
    let mut list = CombineList::new(0);
    list.push(Command::read(GlobalAddress::host(0, 0), 8)).unwrap();
    let comps = fabric.post(&mut ctx, qp, list).unwrap();
    assert_eq!(comps.len(), 1);
    match &comps[0].value {
        CompletionValue::Bytes(b) => assert_eq!(b.len(), 8),
        other => panic!("read returns bytes, got {other:?}"),
    }
}

#[test]
fn config_round_trip_from_file() {
    let dir = std::env::temp_dir().join(format!("fabcfg-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("fabric.conf");
    std::fs::write(
        &path,
        "round_trip_latency = 5000\natomicity_unit = 128\ntorn_interleave_probability = 0.5\n",
    )
    .unwrap();
    let cfg = FabricConfig::from_path(&path).unwrap();
    assert_eq!(cfg.round_trip_latency, 5000);
    assert_eq!(cfg.atomicity_unit, 128);
    assert!((cfg.torn_interleave_probability - 0.5).abs() < 1e-12);
    std::fs::remove_dir_all(&dir).unwrap();
}
