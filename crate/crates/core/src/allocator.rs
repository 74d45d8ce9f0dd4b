//! Two-stage memory management.
//!
//! Memory-server memory threads hand out fixed 8 MiB chunks over a serialized
//! RPC endpoint (see [`Fabric::request_chunk`]); client threads then
//! bump-allocate node-sized blocks locally inside their current chunk, so the
//! common allocation takes no network round trip at all. Chunk requests cycle
//! memory servers round-robin.
//!
//! Deallocation clears the free bit in the node header with a one-byte
//! one-sided write; later readers of the node observe the cleared bit and
//! treat the node as garbage. Freed blocks are not recycled within a run.

use crate::client::ClientCtx;
use crate::fabric::{Fabric, FabricError, GlobalAddress, CHUNK_BYTES};

/// One 8 MiB chunk owned by a single client thread.
#[derive(Debug, Clone, Copy)]
pub struct Chunk {
    pub base: GlobalAddress,
    pub cursor: u64,
}

/// Bump-allocation state for one client thread. Passive: [`ClientCtx`] owns
/// one and drives RPCs through the fabric when a chunk fills up.
#[derive(Debug)]
pub struct NodeAllocator {
    node_size: u64,
    n_ms: u16,
    next_ms: u16,
    current: Option<Chunk>,
}

impl NodeAllocator {
    pub fn new(node_size: u64, n_ms: u16, start_ms: u16) -> Self {
        assert!(node_size > 0 && node_size <= CHUNK_BYTES);
        NodeAllocator {
            node_size,
            n_ms,
            next_ms: start_ms % n_ms.max(1),
            current: None,
        }
    }

    pub fn node_size(&self) -> u64 {
        self.node_size
    }

    /// The MS the next chunk request goes to.
    pub fn next_ms(&self) -> u16 {
        self.next_ms
    }

    /// Allocates from the current chunk, or returns `None` if a new chunk is
    /// needed.
    pub fn bump(&mut self) -> Option<GlobalAddress> {
        let chunk = self.current.as_mut()?;
        if chunk.cursor + self.node_size > CHUNK_BYTES {
            return None;
        }
        let addr = chunk.base.add(chunk.cursor);
        chunk.cursor += self.node_size;
        Some(addr)
    }

    pub fn install_chunk(&mut self, base: GlobalAddress) {
        self.current = Some(Chunk { base, cursor: 0 });
        self.next_ms = (self.next_ms + 1) % self.n_ms.max(1);
    }
}

/// Clears the free bit of the node at `addr` (byte 0 of the header) with a
/// one-byte write. Idempotent; the freed node's version nibbles are garbage
/// by contract, readers must check the free bit first.
pub fn free_node(
    fabric: &Fabric,
    ctx: &mut ClientCtx,
    addr: GlobalAddress,
) -> Result<(), FabricError> {
    let qp = ctx.qp(addr.ms_id)?;
    fabric.write(ctx, qp, addr, vec![0u8])?;
    Ok(())
}
