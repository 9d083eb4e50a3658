use std::collections::{HashMap, VecDeque};

use super::{EngineError, ExpertKey};

/// Multi-level prefetch queue: one FIFO per utility level `1..=K`.
///
/// An expert is pending in at most one level. Re-enqueueing at a higher
/// level moves it there (to the back); re-enqueueing at the same or a lower
/// level is a no-op. Superseded slots are skipped lazily when draining.
#[derive(Debug, Clone)]
pub struct PrefetchQueues {
    max_score: u8,
    levels: Vec<VecDeque<(ExpertKey, u64)>>,
    pending: HashMap<ExpertKey, (u8, u64)>,
    next_seq: u64,
}

impl PrefetchQueues {
    pub fn new(max_score: u8) -> Self {
        Self {
            max_score,
            levels: vec![VecDeque::new(); usize::from(max_score)],
            pending: HashMap::new(),
            next_seq: 0,
        }
    }

    pub fn max_score(&self) -> u8 {
        self.max_score
    }

    pub fn enqueue(&mut self, key: ExpertKey, score: u8) -> Result<(), EngineError> {
        if score == 0 {
            return Err(EngineError::ColdPrefetch(key));
        }
        if score > self.max_score {
            return Err(EngineError::LevelOutOfRange {
                level: score,
                max: self.max_score,
            });
        }
        if let Some(&(level, _)) = self.pending.get(&key) {
            if level >= score {
                return Ok(());
            }
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.insert(key, (score, seq));
        self.levels[usize::from(score) - 1].push_back((key, seq));
        Ok(())
    }

    fn is_live(&self, level: u8, key: &ExpertKey, seq: u64) -> bool {
        self.pending.get(key) == Some(&(level, seq))
    }

    /// Oldest live request at `level`, discarding superseded slots.
    pub fn front(&mut self, level: u8) -> Option<ExpertKey> {
        let idx = usize::from(level).checked_sub(1)?;
        loop {
            let &(key, seq) = self.levels.get(idx)?.front()?;
            if self.is_live(level, &key, seq) {
                return Some(key);
            }
            self.levels[idx].pop_front();
        }
    }

    pub fn pop(&mut self, level: u8) -> Option<ExpertKey> {
        let key = self.front(level)?;
        self.levels[usize::from(level) - 1].pop_front();
        self.pending.remove(&key);
        Some(key)
    }

    pub fn level_of(&self, key: &ExpertKey) -> Option<u8> {
        self.pending.get(key).map(|&(l, _)| l)
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn clear(&mut self) {
        self.pending.clear();
        for l in &mut self.levels {
            l.clear();
        }
    }

    /// Pending requests in drain order: highest level first, FIFO within.
    pub fn drain_order(&self) -> Vec<(ExpertKey, u8)> {
        let mut out = Vec::with_capacity(self.pending.len());
        for level in (1..=self.max_score).rev() {
            for (key, seq) in &self.levels[usize::from(level) - 1] {
                if self.is_live(level, key, *seq) {
                    out.push((*key, level));
                }
            }
        }
        out
    }
}
