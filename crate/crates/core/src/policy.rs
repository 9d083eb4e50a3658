//! Scheduling policies: the full utility-guided scheduler, its ablations,
//! and reactive baselines.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::ExpertKey;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown policy '{0}'")]
pub struct ParsePolicyError(pub String);

/// Policy selection. The textual names are used in configs and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PolicyKind {
    /// Utility estimation, online threshold balancing and the unified
    /// prefetch/evict engine.
    MoeSpac,
    /// Every activated expert is fetched when needed and dropped after use.
    OnDemandGpu,
    /// GPU-only execution over a least-recently-used expert cache.
    LruCache,
    /// Experts ranked by warm-up frequency are pinned; the rest run on CPU.
    StaticSplit,
    /// The full scheduler driven one token at a time.
    ArMode,
    /// The full scheduler with the threshold held constant.
    FixedTau(u8),
    /// The full scheduler with fluctuation boundaries held constant.
    FixedBoundaries { up: u32, down: u32 },
    /// The full scheduler with a single utility level.
    BinaryUtility,
    /// The full scheduler, but residents are kept until VRAM fills and then
    /// replaced in arrival order.
    FifoEvictor,
}

impl PolicyKind {
    /// Policies that use the utility estimator and the unified engine.
    pub fn uses_estimator(&self) -> bool {
        !matches!(
            self,
            PolicyKind::OnDemandGpu | PolicyKind::LruCache | PolicyKind::StaticSplit
        )
    }

    pub fn is_autoregressive(&self) -> bool {
        matches!(self, PolicyKind::ArMode)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::MoeSpac => f.write_str("moe_spac"),
            PolicyKind::OnDemandGpu => f.write_str("on_demand_gpu"),
            PolicyKind::LruCache => f.write_str("lru_cache"),
            PolicyKind::StaticSplit => f.write_str("static_split"),
            PolicyKind::ArMode => f.write_str("ar_mode"),
            PolicyKind::FixedTau(t) => write!(f, "fixed_tau:{t}"),
            PolicyKind::FixedBoundaries { up, down } => write!(f, "fixed_boundaries:{up},{down}"),
            PolicyKind::BinaryUtility => f.write_str("binary_utility"),
            PolicyKind::FifoEvictor => f.write_str("fifo_evictor"),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = ParsePolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParsePolicyError(s.to_string());
        let (name, args) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let kind = match (name, args) {
            ("moe_spac", None) => PolicyKind::MoeSpac,
            ("on_demand_gpu", None) => PolicyKind::OnDemandGpu,
            ("lru_cache", None) => PolicyKind::LruCache,
            ("static_split", None) => PolicyKind::StaticSplit,
            ("ar_mode", None) => PolicyKind::ArMode,
            ("binary_utility", None) => PolicyKind::BinaryUtility,
            ("fifo_evictor", None) => PolicyKind::FifoEvictor,
            ("fixed_tau", Some(a)) => {
                let t: u8 = a.trim().parse().map_err(|_| err())?;
                if t == 0 {
                    return Err(err());
                }
                PolicyKind::FixedTau(t)
            }
            ("fixed_boundaries", Some(a)) => {
                let (u, d) = a.split_once(',').ok_or_else(err)?;
                PolicyKind::FixedBoundaries {
                    up: u.trim().parse().map_err(|_| err())?,
                    down: d.trim().parse().map_err(|_| err())?,
                }
            }
            _ => return Err(err()),
        };
        Ok(kind)
    }
}

impl TryFrom<String> for PolicyKind {
    type Error = ParsePolicyError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PolicyKind> for String {
    fn from(p: PolicyKind) -> Self {
        p.to_string()
    }
}

/// Recency order for the LRU baseline, keyed on simulated time.
#[derive(Debug, Default, Clone)]
pub struct LruOrder {
    stamps: HashMap<ExpertKey, (u64, u64)>,
    order: BTreeSet<(u64, u64, ExpertKey)>,
    seq: u64,
}

impl LruOrder {
    pub fn touch(&mut self, key: ExpertKey, now_ns: u64) {
        let stamp = (now_ns, self.seq);
        self.seq += 1;
        if let Some(old) = self.stamps.insert(key, stamp) {
            self.order.remove(&(old.0, old.1, key));
        }
        self.order.insert((stamp.0, stamp.1, key));
    }

    pub fn remove(&mut self, key: &ExpertKey) {
        if let Some(old) = self.stamps.remove(key) {
            self.order.remove(&(old.0, old.1, *key));
        }
    }

    /// Least recently used key, excluding any in `protect`.
    pub fn victim(&self, protect: &dyn Fn(&ExpertKey) -> bool) -> Option<ExpertKey> {
        self.order
            .iter()
            .map(|&(_, _, k)| k)
            .find(|k| !protect(k))
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }
}

/// Picks the `slots` most frequently activated experts, over all layers,
/// from per-layer warm-up counts. Ties go to the lower (layer, expert).
pub fn static_pin_set(warmup_counts: &[Vec<u64>], slots: usize) -> BTreeSet<ExpertKey> {
    let mut all: Vec<(u64, ExpertKey)> = warmup_counts
        .iter()
        .enumerate()
        .flat_map(|(l, counts)| {
            counts
                .iter()
                .enumerate()
                .map(move |(e, &c)| (c, ExpertKey::new(l as u32, e as u32)))
        })
        .collect();
    all.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(slots).map(|(_, k)| k).collect()
}
