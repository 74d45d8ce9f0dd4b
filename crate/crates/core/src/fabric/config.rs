//! Fabric configuration, loadable from `key = value` text.

use serde::{Deserialize, Serialize};

use super::FabricError;

/// All virtual-time values are in ticks; 1 tick = 1 ns by convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FabricConfig {
    /// Completion latency of a single post, regardless of list length.
    pub round_trip_latency: u64,
    /// Granularity at which reads (and unordered writes) assemble; a span
    /// inside one unit is always consistent.
    pub atomicity_unit: usize,
    /// Probability, per chunk boundary, that an in-flight read lets
    /// concurrent commands interleave. 0 makes every command atomic.
    pub torn_interleave_probability: f64,
    /// Number of NIC-internal buckets serializing host-region atomics.
    pub atomic_bucket_count: usize,
    /// Atomics whose target addresses share these low bits land in the same
    /// bucket and serialize.
    pub bucket_key_bits: u32,
    /// Service time of an on-chip atomic (no bucket queueing).
    pub onchip_atomic_cost: u64,
    /// Service time of a host-region atomic (queues per bucket).
    pub host_atomic_cost: u64,
    /// When true, a write command applies at a single linearization point, so
    /// no read ever observes a partially applied write. Models PCIe
    /// read-after-write ordering at the receiver.
    pub read_after_write_ordering: bool,
    /// Host region capacity per memory server.
    pub host_region_bytes: u64,
    /// On-chip region capacity per memory server; at least 256 KiB.
    pub onchip_region_bytes: u64,
    /// Reads whose assembly window is at least this long are retried by the
    /// version layer even when version nibbles match: a 4-bit version can
    /// wrap silently only if the read straddled 16 or more increments, and
    /// 16 increments span at least 15 minimum write cycles (one round trip
    /// each).
    pub wraparound_window: u64,
    /// Maintain the shadow lock-owner map and panic on double acquisition.
    pub shadow_lock_audit: bool,
    /// Seed for per-client interleave draws.
    pub seed: u64,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            round_trip_latency: 2_000,
            atomicity_unit: 64,
            torn_interleave_probability: 0.0,
            atomic_bucket_count: 4096,
            bucket_key_bits: 12,
            onchip_atomic_cost: 80,
            host_atomic_cost: 240,
            read_after_write_ordering: true,
            host_region_bytes: 256 * 1024 * 1024,
            onchip_region_bytes: 256 * 1024,
            wraparound_window: 15 * 2_000,
            shadow_lock_audit: true,
            seed: 0,
        }
    }
}

impl FabricConfig {
    pub fn validate(&self) -> Result<(), FabricError> {
        if self.atomicity_unit == 0 || self.atomicity_unit % 8 != 0 {
            return Err(FabricError::Config(
                "atomicity_unit must be a positive multiple of 8".into(),
            ));
        }
        if self.onchip_region_bytes < 256 * 1024 {
            return Err(FabricError::Config(
                "onchip_region_bytes must be at least 256 KiB".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.torn_interleave_probability) {
            return Err(FabricError::Config(
                "torn_interleave_probability must be in [0, 1]".into(),
            ));
        }
        if self.atomic_bucket_count == 0 {
            return Err(FabricError::Config(
                "atomic_bucket_count must be positive".into(),
            ));
        }
        if self.host_region_bytes < super::CHUNK_AREA_OFFSET + super::CHUNK_BYTES {
            return Err(FabricError::Config(
                "host_region_bytes must cover the reserved area plus one chunk".into(),
            ));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys error.
    pub fn from_kv_text(text: &str) -> Result<Self, FabricError> {
        let mut cfg = FabricConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                FabricError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |e: &dyn std::fmt::Display| {
                FabricError::Config(format!("line {}: {key}: {e}", lineno + 1))
            };
            match key {
                "round_trip_latency" => cfg.round_trip_latency = value.parse().map_err(|e| bad(&e))?,
                "atomicity_unit" => cfg.atomicity_unit = value.parse().map_err(|e| bad(&e))?,
                "torn_interleave_probability" => {
                    cfg.torn_interleave_probability = value.parse().map_err(|e| bad(&e))?
                }
                "atomic_bucket_count" => {
                    cfg.atomic_bucket_count = value.parse().map_err(|e| bad(&e))?
                }
                "bucket_key_bits" => cfg.bucket_key_bits = value.parse().map_err(|e| bad(&e))?,
                "onchip_atomic_cost" => cfg.onchip_atomic_cost = value.parse().map_err(|e| bad(&e))?,
                "host_atomic_cost" => cfg.host_atomic_cost = value.parse().map_err(|e| bad(&e))?,
                "read_after_write_ordering" => {
                    cfg.read_after_write_ordering = value.parse().map_err(|e| bad(&e))?
                }
                "host_region_bytes" => cfg.host_region_bytes = value.parse().map_err(|e| bad(&e))?,
                "onchip_region_bytes" => {
                    cfg.onchip_region_bytes = value.parse().map_err(|e| bad(&e))?
                }
                "wraparound_window" => cfg.wraparound_window = value.parse().map_err(|e| bad(&e))?,
                "shadow_lock_audit" => cfg.shadow_lock_audit = value.parse().map_err(|e| bad(&e))?,
                "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
                other => {
                    return Err(FabricError::Config(format!(
                        "line {}: unknown key `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, FabricError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FabricError::Config(format!("{}: {e}", path.display())))?;
        Self::from_kv_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parse_round_trip() {
        let cfg = FabricConfig::from_kv_text(
            "round_trip_latency = 1000\n# comment\natomicity_unit=128\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.round_trip_latency, 1000);
        assert_eq!(cfg.atomicity_unit, 128);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(FabricConfig::from_kv_text("frobnicate = 1").is_err());
    }

    #[test]
    fn onchip_floor_enforced() {
        let mut cfg = FabricConfig::default();
        cfg.onchip_region_bytes = 1024;
        assert!(cfg.validate().is_err());
    }
}
