use std::collections::{BTreeSet, HashMap};

use super::{EngineError, ExpertKey, IoEvent};

/// Outcome of re-tagging a resident expert with a fresh utility score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetagOutcome {
    Updated,
    Unchanged,
    /// Frozen experts keep their sentinel; the new score is dropped.
    IgnoredFrozen,
    /// The expert is not resident; the message is stale.
    NotResident,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Tag {
    score: u8,
    seq: u64,
}

/// GPU-resident experts ordered by utility score.
///
/// Each layer keeps a `(score, seq, expert)` ordered set so that eviction
/// below a threshold is a range walk. Scores run `0..=K`; `K + 1` marks a
/// frozen expert that is currently computing and cannot be evicted.
#[derive(Debug, Clone)]
pub struct ResidencyPool {
    max_score: u8,
    expert_bytes: u64,
    capacity_bytes: u64,
    total_bytes: u64,
    tags: HashMap<ExpertKey, Tag>,
    ordered: Vec<BTreeSet<(u8, u64, u32)>>,
    next_seq: u64,
}

impl ResidencyPool {
    pub fn new(n_layers: u32, max_score: u8, expert_bytes: u64, capacity_bytes: u64) -> Self {
        Self {
            max_score,
            expert_bytes,
            capacity_bytes,
            total_bytes: 0,
            tags: HashMap::new(),
            ordered: vec![BTreeSet::new(); n_layers as usize],
            next_seq: 0,
        }
    }

    pub fn frozen_score(&self) -> u8 {
        self.max_score + 1
    }

    pub fn max_score(&self) -> u8 {
        self.max_score
    }

    pub fn expert_bytes(&self) -> u64 {
        self.expert_bytes
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    pub fn free_bytes(&self) -> u64 {
        self.capacity_bytes - self.total_bytes
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn contains(&self, key: &ExpertKey) -> bool {
        self.tags.contains_key(key)
    }

    pub fn score(&self, key: &ExpertKey) -> Option<u8> {
        self.tags.get(key).map(|t| t.score)
    }

    pub fn is_frozen(&self, key: &ExpertKey) -> bool {
        self.score(key) == Some(self.frozen_score())
    }

    /// Bytes that could be freed by reclaiming dormant (score 0) experts.
    pub fn reclaimable_bytes(&self) -> u64 {
        let n: usize = self
            .ordered
            .iter()
            .map(|set| set.range((0, 0, 0)..(1, 0, 0)).count())
            .sum();
        n as u64 * self.expert_bytes
    }

    /// Resident experts of `layer` with their tags, lowest score first.
    pub fn residents(&self, layer: u32) -> impl Iterator<Item = (u32, u8)> + '_ {
        self.ordered[layer as usize].iter().map(|&(s, _, e)| (e, s))
    }

    pub fn all_residents(&self) -> impl Iterator<Item = (ExpertKey, u8)> + '_ {
        self.tags.iter().map(|(k, t)| (*k, t.score))
    }

    fn bump_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    fn set_tag(&mut self, key: ExpertKey, score: u8) {
        let seq = self.bump_seq();
        let set = &mut self.ordered[key.layer as usize];
        if let Some(old) = self.tags.insert(key, Tag { score, seq }) {
            set.remove(&(old.score, old.seq, key.expert));
        }
        set.insert((score, seq, key.expert));
    }

    /// Adds a newly loaded expert. Fails when it does not fit.
    pub fn insert(&mut self, key: ExpertKey, score: u8) -> Result<(), EngineError> {
        if self.contains(&key) {
            return Err(EngineError::AlreadyResident(key));
        }
        if score > self.max_score {
            return Err(EngineError::LevelOutOfRange {
                level: score,
                max: self.max_score,
            });
        }
        if self.free_bytes() < self.expert_bytes {
            return Err(EngineError::CapacityExceeded {
                needed: self.expert_bytes,
                free: self.free_bytes(),
            });
        }
        self.set_tag(key, score);
        self.total_bytes += self.expert_bytes;
        Ok(())
    }

    /// Drops an expert regardless of tag. Returns whether it was resident.
    pub fn remove(&mut self, key: &ExpertKey) -> bool {
        match self.tags.remove(key) {
            Some(t) => {
                self.ordered[key.layer as usize].remove(&(t.score, t.seq, key.expert));
                self.total_bytes -= self.expert_bytes;
                true
            }
            None => false,
        }
    }

    /// Evicts every non-frozen resident of `layer` scored below `tau`.
    pub fn apply_eviction(&mut self, layer: u32, tau: u8, now_ns: u64) -> Vec<IoEvent> {
        let cutoff = tau.min(self.frozen_score());
        let victims: Vec<u32> = self.ordered[layer as usize]
            .range(..(cutoff, 0, 0))
            .map(|&(_, _, e)| e)
            .collect();
        victims
            .into_iter()
            .map(|e| {
                let key = ExpertKey::new(layer, e);
                self.remove(&key);
                IoEvent::evict(key, now_ns)
            })
            .collect()
    }

    /// Evicts the oldest dormant (score 0) expert across all layers.
    pub fn reclaim_dormant(&mut self, now_ns: u64) -> Option<IoEvent> {
        let (seq, key) = self
            .ordered
            .iter()
            .enumerate()
            .filter_map(|(l, set)| {
                set.first()
                    .filter(|&&(s, _, _)| s == 0)
                    .map(|&(_, seq, e)| (seq, ExpertKey::new(l as u32, e)))
            })
            .min()?;
        debug_assert_eq!(self.tags[&key].seq, seq);
        self.remove(&key);
        Some(IoEvent::evict(key, now_ns))
    }

    pub fn freeze(&mut self, key: ExpertKey) -> Result<(), EngineError> {
        if !self.contains(&key) {
            return Err(EngineError::ResidencyViolation(key));
        }
        if !self.is_frozen(&key) {
            let f = self.frozen_score();
            self.set_tag(key, f);
        }
        Ok(())
    }

    /// Ends the compute window: the expert drops to score 0 so its slot is
    /// first to be reclaimed.
    pub fn thaw_and_recycle(&mut self, key: ExpertKey) -> Result<(), EngineError> {
        if !self.contains(&key) {
            return Err(EngineError::ResidencyViolation(key));
        }
        self.set_tag(key, 0);
        Ok(())
    }

    pub fn retag(&mut self, key: ExpertKey, score: u8) -> RetagOutcome {
        match self.tags.get(&key) {
            None => RetagOutcome::NotResident,
            Some(t) if t.score == self.frozen_score() => RetagOutcome::IgnoredFrozen,
            Some(t) if t.score == score.min(self.max_score) => RetagOutcome::Unchanged,
            Some(_) => {
                self.set_tag(key, score.min(self.max_score));
                RetagOutcome::Updated
            }
        }
    }
}
