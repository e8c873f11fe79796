use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{tiles_needed, AllocMode, AllocSnapshot, KvAllocator, SeqId, TileId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePoolConfig {
    pub total_tiles: usize,
    /// Token slots per tile.
    pub tile_size: usize,
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl TilePoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_tiles == 0 {
            return Err(Error::InvalidConfig("total_tiles must be at least 1".into()));
        }
        if self.tile_size == 0 {
            return Err(Error::InvalidConfig("tile_size must be at least 1".into()));
        }
        if u32::try_from(self.total_tiles).is_err() {
            return Err(Error::InvalidConfig("total_tiles exceeds u32 range".into()));
        }
        if self.n_layers == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            return Err(Error::InvalidConfig(
                "n_layers, n_kv_heads and head_dim must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn capacity_tokens(&self) -> usize {
        self.total_tiles * self.tile_size
    }

    /// Scalars per token slot in one layer's K (or V) arena.
    pub fn slot_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }
}

/// Physical address of one token's KV entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlotRef {
    pub tile_id: TileId,
    pub offset: usize,
}

/// Logical-to-physical map for one sequence, shared by all layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockTable {
    seq_id: SeqId,
    tiles: Vec<TileId>,
    token_count: usize,
    tile_size: usize,
    prompt_tiles: usize,
}

impl BlockTable {
    pub fn seq_id(&self) -> SeqId {
        self.seq_id
    }

    pub fn tiles(&self) -> &[TileId] {
        &self.tiles
    }

    /// Number of positions whose KV has been written.
    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn tile_size(&self) -> usize {
        self.tile_size
    }

    /// Slots allocated to this sequence that do not (yet) hold a token.
    pub fn unused_slots(&self) -> usize {
        self.tiles.len() * self.tile_size - self.token_count
    }

    pub fn slot_ref(&self, position: usize) -> Result<SlotRef> {
        if position >= self.token_count {
            return Err(Error::PositionOutOfRange { position, token_count: self.token_count });
        }
        Ok(self.slot_unchecked(position))
    }

    #[inline]
    fn slot_unchecked(&self, position: usize) -> SlotRef {
        SlotRef { tile_id: self.tiles[position / self.tile_size], offset: position % self.tile_size }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStats {
    pub free_tiles: usize,
    pub used_tiles: usize,
    pub live_tokens: usize,
    /// Allocated slots minus live tokens.
    pub internal_waste_slots: usize,
    pub live_sequences: usize,
}

struct LayerArena {
    k: Vec<f32>,
    v: Vec<f32>,
}

/// Fixed arena of KV tiles plus the index of free ones.
///
/// A pool is owned by a single worker. It is `Send` so it can be moved onto
/// the worker's thread, but it does no internal synchronisation.
pub struct TilePool {
    config: TilePoolConfig,
    /// LIFO stack; the most recently released tile is handed out first.
    free_index: Vec<TileId>,
    owner: Vec<Option<SeqId>>,
    tables: HashMap<SeqId, BlockTable>,
    arenas: Vec<LayerArena>,
    kv_writes: u64,
}

impl std::fmt::Debug for TilePool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TilePool")
            .field("config", &self.config)
            .field("free_tiles", &self.free_index.len())
            .field("live_sequences", &self.tables.len())
            .finish()
    }
}

impl TilePool {
    pub fn new(config: TilePoolConfig) -> Result<Self> {
        config.validate()?;
        let layer_len = config.capacity_tokens() * config.slot_width();
        let arenas = (0..config.n_layers)
            .map(|_| LayerArena { k: vec![0.0; layer_len], v: vec![0.0; layer_len] })
            .collect();
        let free_index = (0..config.total_tiles as u32).rev().map(TileId).collect();
        Ok(Self {
            config,
            free_index,
            owner: vec![None; config.total_tiles],
            tables: HashMap::new(),
            arenas,
            kv_writes: 0,
        })
    }

    pub fn config(&self) -> &TilePoolConfig {
        &self.config
    }

    pub fn tile_size(&self) -> usize {
        self.config.tile_size
    }

    pub fn free_tiles(&self) -> usize {
        self.free_index.len()
    }

    pub fn used_tiles(&self) -> usize {
        self.config.total_tiles - self.free_index.len()
    }

    /// Free tile ids in the order they will be handed out.
    pub fn free_tile_ids(&self) -> impl Iterator<Item = TileId> + '_ {
        self.free_index.iter().rev().copied()
    }

    pub fn owner_of(&self, tile: TileId) -> Option<SeqId> {
        self.owner.get(tile.index()).copied().flatten()
    }

    pub fn can_admit(&self, prompt_len: usize, decode_reserve: usize) -> bool {
        self.free_tiles() >= tiles_needed(prompt_len, self.config.tile_size) + decode_reserve
    }

    /// Register `seq` and eagerly take the tiles its prompt will need.
    pub fn allocate_sequence(&mut self, seq: SeqId, prompt_len: usize) -> Result<&BlockTable> {
        if self.tables.contains_key(&seq) {
            return Err(Error::DuplicateSequence(seq));
        }
        let needed = tiles_needed(prompt_len, self.config.tile_size);
        if needed > self.free_index.len() {
            return Err(Error::OutOfTiles);
        }
        let mut tiles = Vec::with_capacity(needed + 1);
        for _ in 0..needed {
            let tile = self.free_index.pop().expect("free count checked above");
            self.owner[tile.index()] = Some(seq);
            tiles.push(tile);
        }
        let table = BlockTable {
            seq_id: seq,
            tiles,
            token_count: 0,
            tile_size: self.config.tile_size,
            prompt_tiles: needed,
        };
        Ok(self.tables.entry(seq).or_insert(table))
    }

    /// Extend `seq` by one position, taking a fresh tile when the current
    /// ones are full. On `OutOfTiles` the table is left unchanged.
    pub fn append_slot(&mut self, seq: SeqId) -> Result<SlotRef> {
        let tile_size = self.config.tile_size;
        let table = self.tables.get_mut(&seq).ok_or(Error::UnknownSequence(seq))?;
        if table.token_count == table.tiles.len() * tile_size {
            let tile = self.free_index.pop().ok_or(Error::OutOfTiles)?;
            self.owner[tile.index()] = Some(seq);
            table.tiles.push(tile);
        }
        let position = table.token_count;
        table.token_count += 1;
        Ok(table.slot_unchecked(position))
    }

    /// Return all of `seq`'s tiles to the free index.
    pub fn free_sequence(&mut self, seq: SeqId) -> Result<usize> {
        let table = self.tables.remove(&seq).ok_or(Error::UnknownSequence(seq))?;
        let released = table.tiles.len();
        // Reverse so the sequence's first tile is the next one handed out.
        for &tile in table.tiles.iter().rev() {
            self.owner[tile.index()] = None;
            self.free_index.push(tile);
        }
        Ok(released)
    }

    pub fn table(&self, seq: SeqId) -> Option<&BlockTable> {
        self.tables.get(&seq)
    }

    pub fn tables(&self) -> impl Iterator<Item = &BlockTable> {
        self.tables.values()
    }

    pub fn live_sequences(&self) -> usize {
        self.tables.len()
    }

    pub fn slot_ref(&self, seq: SeqId, position: usize) -> Result<SlotRef> {
        self.tables.get(&seq).ok_or(Error::UnknownSequence(seq))?.slot_ref(position)
    }

    pub fn pool_stats(&self) -> PoolStats {
        let (live_tokens, waste) = self
            .tables
            .values()
            .fold((0, 0), |(t, w), table| (t + table.token_count, w + table.unused_slots()));
        PoolStats {
            free_tiles: self.free_tiles(),
            used_tiles: self.used_tiles(),
            live_tokens,
            internal_waste_slots: waste,
            live_sequences: self.tables.len(),
        }
    }

    #[inline]
    fn slot_base(&self, slot: SlotRef) -> usize {
        debug_assert!(slot.offset < self.config.tile_size);
        (slot.tile_id.index() * self.config.tile_size + slot.offset) * self.config.slot_width()
    }

    /// Store one token's K and V rows (all heads) for `layer`.
    pub fn write_kv(&mut self, layer: usize, slot: SlotRef, key: &[f32], value: &[f32]) {
        let width = self.config.slot_width();
        assert_eq!(key.len(), width, "key row width");
        assert_eq!(value.len(), width, "value row width");
        let base = self.slot_base(slot);
        let arena = &mut self.arenas[layer];
        arena.k[base..base + width].copy_from_slice(key);
        arena.v[base..base + width].copy_from_slice(value);
        self.kv_writes += 1;
    }

    #[inline]
    pub fn key(&self, layer: usize, slot: SlotRef) -> &[f32] {
        let base = self.slot_base(slot);
        &self.arenas[layer].k[base..base + self.config.slot_width()]
    }

    #[inline]
    pub fn value(&self, layer: usize, slot: SlotRef) -> &[f32] {
        let base = self.slot_base(slot);
        &self.arenas[layer].v[base..base + self.config.slot_width()]
    }

    /// K and V rows of a whole tile for `layer`, `tile_size × slot_width` each.
    #[inline]
    pub fn tile_kv(&self, layer: usize, tile: TileId) -> (&[f32], &[f32]) {
        let len = self.config.tile_size * self.config.slot_width();
        let base = tile.index() * len;
        let arena = &self.arenas[layer];
        (&arena.k[base..base + len], &arena.v[base..base + len])
    }

    /// Total number of `write_kv` calls since creation.
    pub fn kv_writes(&self) -> u64 {
        self.kv_writes
    }

    /// Verify conservation, ownership and tightness. Cost is linear in the
    /// pool size.
    ///
    /// A table may hold more tiles than its token count needs only while its
    /// eagerly allocated prompt tiles are still being filled; otherwise it
    /// holds exactly `ceil(token_count / tile_size)` tiles, which bounds the
    /// unused slots of every settled sequence to less than one tile.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let total = self.config.total_tiles;
        let allocated: usize = self.tables.values().map(|t| t.tiles.len()).sum();
        if self.free_index.len() + allocated != total {
            return Err(format!(
                "conservation: free {} + allocated {} != total {}",
                self.free_index.len(),
                allocated,
                total
            ));
        }
        let mut seen = vec![false; total];
        for &tile in &self.free_index {
            if std::mem::replace(&mut seen[tile.index()], true) {
                return Err(format!("tile {} listed twice in the free index", tile.0));
            }
            if self.owner[tile.index()].is_some() {
                return Err(format!("free tile {} has an owner", tile.0));
            }
        }
        for table in self.tables.values() {
            for &tile in &table.tiles {
                if std::mem::replace(&mut seen[tile.index()], true) {
                    return Err(format!("tile {} held twice", tile.0));
                }
                if self.owner[tile.index()] != Some(table.seq_id) {
                    return Err(format!("tile {} owner mismatch", tile.0));
                }
            }
            let tight = tiles_needed(table.token_count, table.tile_size);
            if table.tiles.len() != tight.max(table.prompt_tiles) {
                return Err(format!(
                    "{} holds {} tiles for {} tokens (prompt allocation {})",
                    table.seq_id,
                    table.tiles.len(),
                    table.token_count,
                    table.prompt_tiles
                ));
            }
            if table.tiles.len() == tight && table.token_count > 0 && table.unused_slots() >= table.tile_size {
                return Err(format!("{} wastes a whole tile", table.seq_id));
            }
        }
        Ok(())
    }
}

impl KvAllocator for TilePool {
    fn mode(&self) -> AllocMode {
        AllocMode::Tiled
    }

    fn can_admit_request(&self, prompt_len: usize, _max_new_tokens: usize, decode_reserve: usize) -> bool {
        self.can_admit(prompt_len, decode_reserve)
    }

    fn admit(&mut self, seq: SeqId, prompt_len: usize, _max_new_tokens: usize) -> Result<()> {
        self.allocate_sequence(seq, prompt_len).map(|_| ())
    }

    fn push_token(&mut self, seq: SeqId) -> Result<()> {
        self.append_slot(seq).map(|_| ())
    }

    fn release(&mut self, seq: SeqId) -> Result<usize> {
        self.free_sequence(seq)
    }

    fn snapshot(&self) -> AllocSnapshot {
        let stats = self.pool_stats();
        let tile_size = self.config.tile_size;
        // Tiles are interchangeable, so any free tile extends any sequence.
        AllocSnapshot {
            live_sequences: stats.live_sequences,
            capacity_slots: self.config.capacity_tokens(),
            reserved_slots: stats.used_tiles * tile_size,
            live_tokens: stats.live_tokens,
            waste_slots: stats.internal_waste_slots,
            largest_free_extent: stats.free_tiles * tile_size,
        }
    }
}
