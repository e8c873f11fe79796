use std::collections::{BTreeMap, HashMap};

use super::{AllocMode, AllocSnapshot, KvAllocator, SeqId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Reservation {
    start: usize,
    len: usize,
    tokens: usize,
}

/// Baseline allocator that reserves `prompt_len + max_new_tokens` adjacent
/// slots per request at admission, placed first-fit in a linear slot space.
///
/// Unused tail slots of a reservation stay unavailable to other requests
/// until the owner finishes, and free space split into short extents cannot
/// serve a long reservation.
#[derive(Debug, Clone)]
pub struct ContiguousPool {
    capacity: usize,
    /// start -> length, non-overlapping and coalesced.
    free: BTreeMap<usize, usize>,
    reservations: HashMap<SeqId, Reservation>,
}

impl ContiguousPool {
    pub fn new(capacity_slots: usize) -> Result<Self> {
        if capacity_slots == 0 {
            return Err(Error::InvalidConfig("capacity must be at least one slot".into()));
        }
        Ok(Self { capacity: capacity_slots, free: BTreeMap::from([(0, capacity_slots)]), reservations: HashMap::new() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn first_fit(&self, len: usize) -> Option<usize> {
        self.free.iter().find(|(_, &extent)| extent >= len).map(|(&start, _)| start)
    }

    pub fn free_slots(&self) -> usize {
        self.free.values().sum()
    }

    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let reserved: usize = self.reservations.values().map(|r| r.len).sum();
        if reserved + self.free_slots() != self.capacity {
            return Err(format!("reserved {reserved} + free {} != capacity {}", self.free_slots(), self.capacity));
        }
        let mut extents: Vec<(usize, usize)> = self.free.iter().map(|(&s, &l)| (s, l)).collect();
        extents.extend(self.reservations.values().map(|r| (r.start, r.len)));
        extents.sort_unstable();
        let mut cursor = 0;
        for (start, len) in extents {
            if start < cursor {
                return Err(format!("overlapping extent at {start}"));
            }
            cursor = start + len;
        }
        Ok(())
    }
}

impl KvAllocator for ContiguousPool {
    fn mode(&self) -> AllocMode {
        AllocMode::Contiguous
    }

    fn can_admit_request(&self, prompt_len: usize, max_new_tokens: usize, _decode_reserve: usize) -> bool {
        self.first_fit(prompt_len + max_new_tokens).is_some()
    }

    fn admit(&mut self, seq: SeqId, prompt_len: usize, max_new_tokens: usize) -> Result<()> {
        if self.reservations.contains_key(&seq) {
            return Err(Error::DuplicateSequence(seq));
        }
        let len = prompt_len + max_new_tokens;
        let start = self.first_fit(len).ok_or(Error::OutOfTiles)?;
        let extent = self.free.remove(&start).expect("first_fit returned a free extent");
        if extent > len {
            self.free.insert(start + len, extent - len);
        }
        self.reservations.insert(seq, Reservation { start, len, tokens: 0 });
        Ok(())
    }

    fn push_token(&mut self, seq: SeqId) -> Result<()> {
        let r = self.reservations.get_mut(&seq).ok_or(Error::UnknownSequence(seq))?;
        if r.tokens == r.len {
            return Err(Error::OutOfTiles);
        }
        r.tokens += 1;
        Ok(())
    }

    fn release(&mut self, seq: SeqId) -> Result<usize> {
        let r = self.reservations.remove(&seq).ok_or(Error::UnknownSequence(seq))?;
        if r.len == 0 {
            return Ok(0);
        }
        let mut start = r.start;
        let mut len = r.len;
        if let Some((&prev_start, &prev_len)) = self.free.range(..start).next_back() {
            if prev_start + prev_len == start {
                self.free.remove(&prev_start);
                start = prev_start;
                len += prev_len;
            }
        }
        if let Some(next_len) = self.free.remove(&(start + len)) {
            len += next_len;
        }
        self.free.insert(start, len);
        Ok(r.len)
    }

    fn snapshot(&self) -> AllocSnapshot {
        let reserved: usize = self.reservations.values().map(|r| r.len).sum();
        let live: usize = self.reservations.values().map(|r| r.tokens).sum();
        AllocSnapshot {
            live_sequences: self.reservations.len(),
            capacity_slots: self.capacity,
            reserved_slots: reserved,
            live_tokens: live,
            waste_slots: reserved - live,
            largest_free_extent: self.free.values().copied().max().unwrap_or(0),
        }
    }
}
