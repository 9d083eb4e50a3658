//! Utility-guided execution engine.
//!
//! Prefetching and eviction are driven by the same utility score: requests
//! wait in a multi-level queue keyed by score and drain from `K` down to the
//! layer threshold `tau`, while residents are kept in a score-ordered pool
//! from which everything below `tau` is dropped. Experts that are computing
//! are frozen at `K + 1` and recycled to 0 as soon as they finish.

mod pool;
mod queues;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pool::{ResidencyPool, RetagOutcome};
pub use queues::PrefetchQueues;

/// An expert identified by its layer and index within the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExpertKey {
    pub layer: u32,
    pub expert: u32,
}

impl ExpertKey {
    pub fn new(layer: u32, expert: u32) -> Self {
        Self { layer, expert }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("cold expert {0:?} cannot be prefetched")]
    ColdPrefetch(ExpertKey),
    #[error("level {level} outside [1, {max}]")]
    LevelOutOfRange { level: u8, max: u8 },
    #[error("expert {0:?} is not resident")]
    ResidencyViolation(ExpertKey),
    #[error("expert {0:?} is already resident")]
    AlreadyResident(ExpertKey),
    #[error("need {needed} bytes but only {free} are free")]
    CapacityExceeded { needed: u64, free: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IoKind {
    Load,
    Evict,
}

/// One entry of the simulated transfer timeline. Times are nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoEvent {
    pub kind: IoKind,
    pub layer: u32,
    pub expert: u32,
    /// Utility level the expert was loaded at (0 for evictions).
    pub level: u8,
    pub start_ns: u64,
    pub duration_ns: u64,
}

impl IoEvent {
    pub fn load(key: ExpertKey, level: u8, start_ns: u64, duration_ns: u64) -> Self {
        Self {
            kind: IoKind::Load,
            layer: key.layer,
            expert: key.expert,
            level,
            start_ns,
            duration_ns,
        }
    }

    pub fn evict(key: ExpertKey, at_ns: u64) -> Self {
        Self {
            kind: IoKind::Evict,
            layer: key.layer,
            expert: key.expert,
            level: 0,
            start_ns: at_ns,
            duration_ns: 0,
        }
    }

    pub fn key(&self) -> ExpertKey {
        ExpertKey::new(self.layer, self.expert)
    }
}

/// Issues loads from level `K` down to `tau`, FIFO within a level, until the
/// I/O budget or VRAM runs out. Space is reclaimed from dormant experts when
/// needed. Requests that do not fit stay queued.
pub fn drain_prefetch(
    queues: &mut PrefetchQueues,
    tau: u8,
    io_budget_ns: u64,
    io_unit_ns: u64,
    pool: &mut ResidencyPool,
    start_ns: u64,
) -> Vec<IoEvent> {
    drain_prefetch_with(queues, tau, io_budget_ns, io_unit_ns, pool, start_ns, |p, t| {
        p.reclaim_dormant(t)
    })
}

/// As [`drain_prefetch`], with a caller-chosen victim rule used whenever a
/// load needs space. `reclaim` returns `None` when nothing may be evicted.
pub fn drain_prefetch_with<F>(
    queues: &mut PrefetchQueues,
    tau: u8,
    io_budget_ns: u64,
    io_unit_ns: u64,
    pool: &mut ResidencyPool,
    start_ns: u64,
    mut reclaim: F,
) -> Vec<IoEvent>
where
    F: FnMut(&mut ResidencyPool, u64) -> Option<IoEvent>,
{
    let mut events = Vec::new();
    let mut used = 0u64;
    if tau == 0 || tau > queues.max_score() {
        return events;
    }
    for level in (tau..=queues.max_score()).rev() {
        while let Some(key) = queues.front(level) {
            if pool.contains(&key) {
                queues.pop(level);
                continue;
            }
            if used + io_unit_ns > io_budget_ns {
                return events;
            }
            while pool.free_bytes() < pool.expert_bytes() {
                match reclaim(pool, start_ns + used) {
                    Some(ev) => events.push(ev),
                    None => return events,
                }
            }
            queues.pop(level);
            pool.insert(key, level)
                .expect("free space and absence checked above");
            events.push(IoEvent::load(key, level, start_ns + used, io_unit_ns));
            used += io_unit_ns;
        }
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const K: u8 = 4;
    const IO: u64 = 100;

    fn key(e: u32) -> ExpertKey {
        ExpertKey::new(0, e)
    }

    fn loads(events: &[IoEvent]) -> Vec<u32> {
        events
            .iter()
            .filter(|e| e.kind == IoKind::Load)
            .map(|e| e.expert)
            .collect()
    }

    #[test]
    fn drain_respects_threshold_and_order() {
        let mut q = PrefetchQueues::new(K);
        let mut pool = ResidencyPool::new(1, K, 1, 100);
        for (e, s) in [(0, 4), (1, 2), (2, 4), (3, 3)] {
            q.enqueue(key(e), s).unwrap();
        }
        let ev = drain_prefetch(&mut q, 3, 10 * IO, IO, &mut pool, 0);
        assert_eq!(loads(&ev), vec![0, 2, 3]);
        assert_eq!(pool.score(&key(3)), Some(3));
        assert_eq!(q.level_of(&key(1)), Some(2));
        let starts: Vec<u64> = ev.iter().map(|e| e.start_ns).collect();
        assert_eq!(starts, vec![0, 100, 200]);
    }

    #[test]
    fn drain_stops_at_budget() {
        let mut q = PrefetchQueues::new(K);
        let mut pool = ResidencyPool::new(1, K, 1, 100);
        for (e, s) in [(0, 1), (1, 3), (2, 2)] {
            q.enqueue(key(e), s).unwrap();
        }
        let ev = drain_prefetch(&mut q, 1, 2 * IO, IO, &mut pool, 0);
        assert_eq!(loads(&ev), vec![1, 2]);
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn drain_above_max_does_nothing() {
        let mut q = PrefetchQueues::new(K);
        let mut pool = ResidencyPool::new(1, K, 1, 100);
        q.enqueue(key(0), 4).unwrap();
        assert!(drain_prefetch(&mut q, K + 1, 10 * IO, IO, &mut pool, 0).is_empty());
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn drain_with_full_vram_retains_requests() {
        let mut q = PrefetchQueues::new(K);
        let mut pool = ResidencyPool::new(1, K, 1, 2);
        pool.insert(key(10), 3).unwrap();
        pool.insert(key(11), 2).unwrap();
        q.enqueue(key(0), 4).unwrap();
        q.enqueue(key(1), 4).unwrap();
        let ev = drain_prefetch(&mut q, 1, 10 * IO, IO, &mut pool, 0);
        assert!(ev.is_empty());
        assert_eq!(q.len(), 2);
        // a recycled slot becomes available
        pool.thaw_and_recycle(key(11)).unwrap();
        let ev = drain_prefetch(&mut q, 1, 10 * IO, IO, &mut pool, 0);
        assert_eq!(ev[0].kind, IoKind::Evict);
        assert_eq!(loads(&ev), vec![0]);
        assert_eq!(pool.total_bytes(), 2);
    }

    #[test]
    fn stale_requests_are_skipped() {
        let mut q = PrefetchQueues::new(K);
        let mut pool = ResidencyPool::new(1, K, 1, 10);
        pool.insert(key(0), 4).unwrap();
        q.enqueue(key(0), 4).unwrap();
        q.enqueue(key(1), 4).unwrap();
        let ev = drain_prefetch(&mut q, 1, IO, IO, &mut pool, 0);
        assert_eq!(loads(&ev), vec![1]);
        assert!(q.is_empty());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Enqueue(u32, u8),
        Drain(u8, u8),
        Evict(u8),
        Freeze(u32),
        Thaw(u32),
        Retag(u32, u8),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u32..12, 1u8..=K).prop_map(|(e, s)| Op::Enqueue(e, s)),
            (1u8..=K, 0u8..6).prop_map(|(t, b)| Op::Drain(t, b)),
            (1u8..=K).prop_map(Op::Evict),
            (0u32..12).prop_map(Op::Freeze),
            (0u32..12).prop_map(Op::Thaw),
            (0u32..12, 0u8..=K).prop_map(|(e, s)| Op::Retag(e, s)),
        ]
    }

    proptest! {
        #[test]
        fn engine_invariants_hold(ops in proptest::collection::vec(op(), 1..200), cap in 1u64..8) {
            let mut q = PrefetchQueues::new(K);
            let mut pool = ResidencyPool::new(1, K, 3, cap * 3);
            let mut frozen = std::collections::HashSet::new();
            for op in ops {
                match op {
                    Op::Enqueue(e, s) => q.enqueue(key(e), s).unwrap(),
                    Op::Drain(tau, budget) => {
                        let ev = drain_prefetch(&mut q, tau, u64::from(budget) * IO, IO, &mut pool, 0);
                        let levels: Vec<u8> = ev.iter().filter(|e| e.kind == IoKind::Load).map(|e| e.level).collect();
                        prop_assert!(levels.windows(2).all(|w| w[0] >= w[1]));
                        prop_assert!(levels.iter().all(|&l| l >= tau));
                        for e in ev.iter().filter(|e| e.kind == IoKind::Evict) {
                            prop_assert!(!frozen.contains(&e.expert));
                        }
                    }
                    Op::Evict(tau) => {
                        pool.apply_eviction(0, tau, 0);
                        for (_, s) in pool.residents(0) {
                            prop_assert!(s >= tau);
                        }
                    }
                    Op::Freeze(e) => {
                        if pool.freeze(key(e)).is_ok() { frozen.insert(e); }
                    }
                    Op::Thaw(e) => {
                        if pool.thaw_and_recycle(key(e)).is_ok() { frozen.remove(&e); }
                    }
                    Op::Retag(e, s) => { pool.retag(key(e), s); }
                }
                prop_assert!(pool.total_bytes() <= pool.capacity_bytes());
                prop_assert_eq!(pool.total_bytes(), pool.len() as u64 * 3);
                for e in &frozen {
                    prop_assert!(pool.is_frozen(&key(*e)));
                }
            }
        }
    }
}
