//! Global addressing: 16-bit memory-server id, 48-bit offset, region tag.

use serde::{Deserialize, Serialize};

/// Which region of a memory server an address refers to.
///
/// The on-chip region models NIC device memory: small, and atomics on it skip
/// the receiver-side PCIe bucket serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Host,
    OnChip,
}

/// Address of a byte range in disaggregated memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GlobalAddress {
    pub ms_id: u16,
    pub offset: u64,
    pub region: Region,
}

impl GlobalAddress {
    pub fn host(ms_id: u16, offset: u64) -> Self {
        GlobalAddress {
            ms_id,
            offset,
            region: Region::Host,
        }
    }

    pub fn on_chip(ms_id: u16, offset: u64) -> Self {
        GlobalAddress {
            ms_id,
            offset,
            region: Region::OnChip,
        }
    }

    pub fn add(self, delta: u64) -> Self {
        GlobalAddress {
            offset: self.offset + delta,
            ..self
        }
    }

    /// Packs a host address into the 64-bit pointer format used inside tree
    /// nodes: 16-bit MS id in the top bits, 48-bit offset below. Raw value 0
    /// is reserved as the null pointer (no node ever lives at offset 0).
    pub fn to_raw(self) -> u64 {
        debug_assert_eq!(self.region, Region::Host, "only host addresses are pointed to");
        debug_assert!(self.offset < 1 << 48);
        ((self.ms_id as u64) << 48) | self.offset
    }

    pub fn from_raw(raw: u64) -> Option<Self> {
        if raw == 0 {
            None
        } else {
            Some(GlobalAddress::host(
                (raw >> 48) as u16,
                raw & ((1u64 << 48) - 1),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip() {
        let a = GlobalAddress::host(7, 0x1234_5678_9abc);
        assert_eq!(GlobalAddress::from_raw(a.to_raw()), Some(a));
        assert_eq!(GlobalAddress::from_raw(0), None);
    }
}
