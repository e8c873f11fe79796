//! KV-cache memory management.
//!
//! The [`TilePool`] divides KV storage into `total_tiles` fixed-size tiles and
//! hands them to sequences on demand through a free index. A sequence's KV is
//! addressed through its [`BlockTable`], so the tiles backing one sequence need
//! not be adjacent. [`ContiguousPool`] implements the classic
//! reserve-max-length-up-front strategy for fragmentation comparisons; both
//! implement [`KvAllocator`].

mod contiguous;
mod pool;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use contiguous::ContiguousPool;
pub use pool::{BlockTable, PoolStats, SlotRef, TilePool, TilePoolConfig};

/// Default number of token slots per tile.
pub const DEFAULT_TILE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeqId(pub u64);

impl fmt::Display for SeqId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "seq#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileId(pub u32);

impl TileId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Number of tiles required to hold `token_count` tokens.
#[inline]
pub fn tiles_needed(token_count: usize, tile_size: usize) -> usize {
    debug_assert!(tile_size >= 1);
    token_count.div_ceil(tile_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocMode {
    Tiled,
    Contiguous,
}

impl fmt::Display for AllocMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AllocMode::Tiled => f.write_str("tiled"),
            AllocMode::Contiguous => f.write_str("contiguous"),
        }
    }
}

/// Slot-level accounting shared by both allocation modes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocSnapshot {
    pub live_sequences: usize,
    pub capacity_slots: usize,
    pub reserved_slots: usize,
    pub live_tokens: usize,
    /// Reserved slots not holding a token.
    pub waste_slots: usize,
    /// Largest run of adjacent free slots.
    pub largest_free_extent: usize,
}

/// Allocation interface over KV memory, used to run the same admission
/// workload against tiled and contiguous-reservation strategies.
pub trait KvAllocator {
    fn mode(&self) -> AllocMode;

    /// Whether a request with the given prompt and generation budget can be
    /// admitted while leaving `decode_reserve` tiles of headroom.
    fn can_admit_request(&self, prompt_len: usize, max_new_tokens: usize, decode_reserve: usize) -> bool;

    /// Reserve memory for a new sequence. Token count starts at zero.
    fn admit(&mut self, seq: SeqId, prompt_len: usize, max_new_tokens: usize) -> Result<()>;

    /// Account one more KV entry for `seq`.
    fn push_token(&mut self, seq: SeqId) -> Result<()>;

    /// Release everything held by `seq`, returning the number of units
    /// (tiles or slots) returned to the free space.
    fn release(&mut self, seq: SeqId) -> Result<usize>;

    fn snapshot(&self) -> AllocSnapshot;
}
