//! Byte-exact node layouts.
//!
//! All node kinds share a 26-byte header and a 1-byte trailer:
//!
//! ```text
//! offset  size  field
//! 0       1     bits 7..4: FNV (front node version, 4-bit)
//!               bit 0:     free bit (1 = in use; cleared to 0 on dealloc)
//! 1       1     level (0 = leaf)
//! 2       8     low fence key, big-endian
//! 10      8     high fence key, big-endian (u64::MAX = unbounded)
//! 18      8     sibling pointer, big-endian raw global address (0 = null)
//! size-1  1     bits 3..0: RNV (rear node version, 4-bit)
//! ```
//!
//! A leaf stores UNSORTED 17-byte entries starting at offset 26. Each entry
//! packs, in bit order: a 4-bit front entry version, the 8-byte key, the
//! 8-byte value, and a 4-bit rear entry version, so the two version nibbles
//! physically bracket the payload and a torn entry image is detectable.
//! Empty slots are encoded by the reserved all-zero key.
//!
//! An internal node stores a sorted pair array with the leftmost-child
//! convention: a 2-byte big-endian pair count at offset 26, the leftmost
//! child pointer at 28, then `{key, child}` pairs of 16 bytes from offset 36.
//!
//! The baseline leaf stores SORTED 16-byte `{key, value}` entries from offset
//! 26 (no entry versions); live entries form a prefix, zero-key slots the
//! suffix.
//!
//! Key 0 is the reserved null encoding and key `u64::MAX` is reserved as the
//! unbounded fence, so valid keys live in `1..=u64::MAX-1`.

/// Shared header length in bytes.
pub const HEADER_LEN: usize = 26;
/// Leaf entry span for 8-byte keys and values: 16 payload bytes plus one
/// byte shared by the two 4-bit entry versions.
pub const LEAF_ENTRY_LEN: usize = 17;
/// Internal `{key, child}` pair span.
pub const INTERNAL_PAIR_LEN: usize = 16;
/// Baseline `{key, value}` entry span.
pub const BASELINE_ENTRY_LEN: usize = 16;
/// Reserved empty-slot key encoding.
pub const NULL_KEY: u64 = 0;
/// Reserved unbounded-fence encoding; not a valid key.
pub const FENCE_MAX: u64 = u64::MAX;

const COUNT_OFFSET: usize = HEADER_LEN;
const LEFTMOST_OFFSET: usize = HEADER_LEN + 2;
const PAIRS_OFFSET: usize = HEADER_LEN + 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeHeader {
    pub fnv: u8,
    pub live: bool,
    pub level: u8,
    pub low_fence: u64,
    pub high_fence: u64,
    pub sibling: u64,
}

impl NodeHeader {
    pub fn covers(&self, key: u64) -> bool {
        key >= self.low_fence && key < self.high_fence
    }
}

pub fn header(img: &[u8]) -> NodeHeader {
    NodeHeader {
        fnv: img[0] >> 4,
        live: img[0] & 1 == 1,
        level: img[1],
        low_fence: u64::from_be_bytes(img[2..10].try_into().unwrap()),
        high_fence: u64::from_be_bytes(img[10..18].try_into().unwrap()),
        sibling: u64::from_be_bytes(img[18..26].try_into().unwrap()),
    }
}

pub fn set_header(img: &mut [u8], h: &NodeHeader) {
    img[0] = (h.fnv << 4) | u8::from(h.live);
    img[1] = h.level;
    img[2..10].copy_from_slice(&h.low_fence.to_be_bytes());
    img[10..18].copy_from_slice(&h.high_fence.to_be_bytes());
    img[18..26].copy_from_slice(&h.sibling.to_be_bytes());
}

pub fn rnv(img: &[u8]) -> u8 {
    img[img.len() - 1] & 0x0F
}

pub fn set_rnv(img: &mut [u8], v: u8) {
    let last = img.len() - 1;
    img[last] = v & 0x0F;
}

/// Increments FNV and RNV together (mod 16); used on split/merge writes.
pub fn bump_node_versions(img: &mut [u8]) {
    let h = (img[0] >> 4).wrapping_add(1) & 0x0F;
    img[0] = (h << 4) | (img[0] & 0x0F);
    let v = (rnv(img) + 1) & 0x0F;
    set_rnv(img, v);
}

pub fn node_versions_match(img: &[u8]) -> bool {
    img[0] >> 4 == rnv(img)
}

/// A blank in-use node image with matching versions.
pub fn new_node(node_size: usize, level: u8, low: u64, high: u64, sibling: u64) -> Vec<u8> {
    let mut img = vec![0u8; node_size];
    set_header(
        &mut img,
        &NodeHeader {
            fnv: 1,
            live: true,
            level,
            low_fence: low,
            high_fence: high,
            sibling,
        },
    );
    set_rnv(&mut img, 1);
    img
}

// ---------------------------------------------------------------- leaf ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeafEntry {
    pub fev: u8,
    pub key: u64,
    pub value: u64,
    pub rev: u8,
}

impl LeafEntry {
    pub fn is_empty(&self) -> bool {
        self.key == NULL_KEY
    }

    pub fn versions_match(&self) -> bool {
        self.fev == self.rev
    }
}

pub fn leaf_capacity(node_size: usize) -> usize {
    (node_size - HEADER_LEN - 1) / LEAF_ENTRY_LEN
}

pub fn leaf_entry_offset(i: usize) -> usize {
    HEADER_LEN + i * LEAF_ENTRY_LEN
}

/// Packs an entry into its 17-byte wire form: 34 nibbles, version nibbles at
/// both ends bracketing the big-endian key and value.
pub fn encode_leaf_entry(e: &LeafEntry) -> [u8; LEAF_ENTRY_LEN] {
    let mut nibbles = [0u8; 2 * LEAF_ENTRY_LEN];
    nibbles[0] = e.fev & 0x0F;
    for (i, b) in e.key.to_be_bytes().iter().enumerate() {
        nibbles[1 + 2 * i] = b >> 4;
        nibbles[2 + 2 * i] = b & 0x0F;
    }
    for (i, b) in e.value.to_be_bytes().iter().enumerate() {
        nibbles[17 + 2 * i] = b >> 4;
        nibbles[18 + 2 * i] = b & 0x0F;
    }
    nibbles[33] = e.rev & 0x0F;
    let mut out = [0u8; LEAF_ENTRY_LEN];
    for (i, o) in out.iter_mut().enumerate() {
        *o = (nibbles[2 * i] << 4) | nibbles[2 * i + 1];
    }
    out
}

pub fn decode_leaf_entry(raw: &[u8]) -> LeafEntry {
    let mut nibbles = [0u8; 2 * LEAF_ENTRY_LEN];
    for (i, b) in raw[..LEAF_ENTRY_LEN].iter().enumerate() {
        nibbles[2 * i] = b >> 4;
        nibbles[2 * i + 1] = b & 0x0F;
    }
    let mut key = [0u8; 8];
    let mut value = [0u8; 8];
    for i in 0..8 {
        key[i] = (nibbles[1 + 2 * i] << 4) | nibbles[2 + 2 * i];
        value[i] = (nibbles[17 + 2 * i] << 4) | nibbles[18 + 2 * i];
    }
    LeafEntry {
        fev: nibbles[0],
        key: u64::from_be_bytes(key),
        value: u64::from_be_bytes(value),
        rev: nibbles[33],
    }
}

pub fn leaf_entry(img: &[u8], i: usize) -> LeafEntry {
    let off = leaf_entry_offset(i);
    decode_leaf_entry(&img[off..off + LEAF_ENTRY_LEN])
}

pub fn set_leaf_entry(img: &mut [u8], i: usize, e: &LeafEntry) {
    let off = leaf_entry_offset(i);
    img[off..off + LEAF_ENTRY_LEN].copy_from_slice(&encode_leaf_entry(e));
}

/// Occupied entries in slot order (leaves are unsorted by design).
pub fn leaf_live_entries(img: &[u8], node_size: usize) -> Vec<LeafEntry> {
    (0..leaf_capacity(node_size))
        .map(|i| leaf_entry(img, i))
        .filter(|e| !e.is_empty())
        .collect()
}

pub fn leaf_live_count(img: &[u8], node_size: usize) -> usize {
    (0..leaf_capacity(node_size))
        .filter(|&i| !leaf_entry(img, i).is_empty())
        .count()
}

// ------------------------------------------------------------ internal ----

pub fn internal_capacity(node_size: usize) -> usize {
    (node_size - PAIRS_OFFSET - 1) / INTERNAL_PAIR_LEN
}

pub fn internal_count(img: &[u8]) -> usize {
    u16::from_be_bytes(img[COUNT_OFFSET..COUNT_OFFSET + 2].try_into().unwrap()) as usize
}

pub fn set_internal_count(img: &mut [u8], n: usize) {
    img[COUNT_OFFSET..COUNT_OFFSET + 2].copy_from_slice(&(n as u16).to_be_bytes());
}

pub fn internal_leftmost(img: &[u8]) -> u64 {
    u64::from_be_bytes(
        img[LEFTMOST_OFFSET..LEFTMOST_OFFSET + 8]
            .try_into()
            .unwrap(),
    )
}

pub fn set_internal_leftmost(img: &mut [u8], child: u64) {
    img[LEFTMOST_OFFSET..LEFTMOST_OFFSET + 8].copy_from_slice(&child.to_be_bytes());
}

pub fn internal_pair(img: &[u8], i: usize) -> (u64, u64) {
    let off = PAIRS_OFFSET + i * INTERNAL_PAIR_LEN;
    (
        u64::from_be_bytes(img[off..off + 8].try_into().unwrap()),
        u64::from_be_bytes(img[off + 8..off + 16].try_into().unwrap()),
    )
}

pub fn set_internal_pair(img: &mut [u8], i: usize, key: u64, child: u64) {
    let off = PAIRS_OFFSET + i * INTERNAL_PAIR_LEN;
    img[off..off + 8].copy_from_slice(&key.to_be_bytes());
    img[off + 8..off + 16].copy_from_slice(&child.to_be_bytes());
}

/// Routing: the child whose subtree covers `key` (strictly-increasing keys,
/// leftmost-child convention).
pub fn internal_child_for(img: &[u8], key: u64) -> u64 {
    let n = internal_count(img);
    let mut lo = 0usize;
    let mut hi = n;
    while lo < hi {
        let mid = (lo + hi) / 2;
        if internal_pair(img, mid).0 <= key {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    if lo == 0 {
        internal_leftmost(img)
    } else {
        internal_pair(img, lo - 1).1
    }
}

/// Sorted insert; returns false when the node is full.
pub fn internal_insert_pair(img: &mut [u8], node_size: usize, key: u64, child: u64) -> bool {
    let n = internal_count(img);
    if n >= internal_capacity(node_size) {
        return false;
    }
    let mut pos = n;
    for i in 0..n {
        let (k, _) = internal_pair(img, i);
        debug_assert_ne!(k, key, "separator keys are unique");
        if k > key {
            pos = i;
            break;
        }
    }
    for i in (pos..n).rev() {
        let (k, c) = internal_pair(img, i);
        set_internal_pair(img, i + 1, k, c);
    }
    set_internal_pair(img, pos, key, child);
    set_internal_count(img, n + 1);
    true
}

/// Removes the pair routing to `child`; returns the separator key, or None
/// if no pair points at it.
pub fn internal_remove_child(img: &mut [u8], child: u64) -> Option<u64> {
    let n = internal_count(img);
    for i in 0..n {
        let (k, c) = internal_pair(img, i);
        if c == child {
            for j in i + 1..n {
                let (k2, c2) = internal_pair(img, j);
                set_internal_pair(img, j - 1, k2, c2);
            }
            set_internal_pair(img, n - 1, 0, 0);
            set_internal_count(img, n - 1);
            return Some(k);
        }
    }
    None
}

// ------------------------------------------------------------ baseline ----

pub fn baseline_capacity(node_size: usize) -> usize {
    (node_size - HEADER_LEN - 1) / BASELINE_ENTRY_LEN
}

pub fn baseline_entry_offset(i: usize) -> usize {
    HEADER_LEN + i * BASELINE_ENTRY_LEN
}

pub fn baseline_entry(img: &[u8], i: usize) -> (u64, u64) {
    let off = baseline_entry_offset(i);
    (
        u64::from_be_bytes(img[off..off + 8].try_into().unwrap()),
        u64::from_be_bytes(img[off + 8..off + 16].try_into().unwrap()),
    )
}

pub fn set_baseline_entry(img: &mut [u8], i: usize, key: u64, value: u64) {
    let off = baseline_entry_offset(i);
    img[off..off + 8].copy_from_slice(&key.to_be_bytes());
    img[off + 8..off + 16].copy_from_slice(&value.to_be_bytes());
}

/// Length of the sorted live prefix.
pub fn baseline_live_count(img: &[u8], node_size: usize) -> usize {
    let cap = baseline_capacity(node_size);
    (0..cap)
        .find(|&i| baseline_entry(img, i).0 == NULL_KEY)
        .unwrap_or(cap)
}

/// Binary search over the live prefix; Ok(slot) on match, Err(slot) gives
/// the insertion point.
pub fn baseline_search(img: &[u8], node_size: usize, key: u64) -> Result<usize, usize> {
    let n = baseline_live_count(img, node_size);
    let mut lo = 0usize;
    let mut hi = n;
    while lo < hi {
        let mid = (lo + hi) / 2;
        match baseline_entry(img, mid).0.cmp(&key) {
            std::cmp::Ordering::Less => lo = mid + 1,
            std::cmp::Ordering::Greater => hi = mid,
            std::cmp::Ordering::Equal => return Ok(mid),
        }
    }
    Err(lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_entry_span_is_17_bytes() {
        assert_eq!(LEAF_ENTRY_LEN, 17);
        assert_eq!(leaf_capacity(1024), 58);
    }

    #[test]
    fn leaf_entry_codec_round_trips() {
        let e = LeafEntry {
            fev: 0xA,
            key: 0x0123_4567_89ab_cdef,
            value: 0xfedc_ba98_7654_3210,
            rev: 0xA,
        };
        let raw = encode_leaf_entry(&e);
        assert_eq!(decode_leaf_entry(&raw), e);
        // Version nibbles bracket the payload: first byte's high nibble and
        // last byte's low nibble.
        assert_eq!(raw[0] >> 4, 0xA);
        assert_eq!(raw[16] & 0x0F, 0xA);
    }

    #[test]
    fn header_round_trips() {
        let mut img = new_node(1024, 3, 10, 500, 0xdead);
        let h = header(&img);
        assert!(h.live);
        assert_eq!(h.level, 3);
        assert_eq!(h.low_fence, 10);
        assert_eq!(h.high_fence, 500);
        assert_eq!(h.sibling, 0xdead);
        assert!(node_versions_match(&img));
        bump_node_versions(&mut img);
        assert!(node_versions_match(&img));
        assert_eq!(header(&img).fnv, 2);
    }

    #[test]
    fn internal_routing() {
        let mut img = new_node(1024, 1, 0, FENCE_MAX, 0);
        set_internal_leftmost(&mut img, 100);
        assert!(internal_insert_pair(&mut img, 1024, 50, 200));
        assert!(internal_insert_pair(&mut img, 1024, 10, 150));
        assert_eq!(internal_child_for(&img, 5), 100);
        assert_eq!(internal_child_for(&img, 10), 150);
        assert_eq!(internal_child_for(&img, 49), 150);
        assert_eq!(internal_child_for(&img, 50), 200);
        assert_eq!(internal_child_for(&img, 5000), 200);
        assert_eq!(internal_remove_child(&mut img, 200), Some(50));
        assert_eq!(internal_child_for(&img, 5000), 150);
    }

    #[test]
    fn baseline_search_points() {
        let mut img = new_node(1024, 0, 0, FENCE_MAX, 0);
        for (i, k) in [10u64, 20, 30].iter().enumerate() {
            set_baseline_entry(&mut img, i, *k, k * 2);
        }
        assert_eq!(baseline_live_count(&img, 1024), 3);
        assert_eq!(baseline_search(&img, 1024, 20), Ok(1));
        assert_eq!(baseline_search(&img, 1024, 25), Err(2));
        assert_eq!(baseline_search(&img, 1024, 5), Err(0));
    }
}
