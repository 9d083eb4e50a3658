//! Discrete-event simulation of offloaded MoE decoding.
//!
//! A step starts with the drafting phase, then walks the layers in order.
//! For each layer the policy decides which experts should be on the GPU,
//! transfers are charged against the overlap window, and the layer's wall
//! time is the slower of the CPU and GPU streams plus any I/O stall. All
//! time is kept in integer nanoseconds so totals can be re-derived exactly
//! from the event log.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balancer::{
    count_prefetch, predicted_times, solve_threshold, update_ratio_estimates, BalancerError,
    BalancerInput, HardwareProfile, RatioEstimates, ThresholdDecision,
};
use crate::engine::{
    drain_prefetch, drain_prefetch_with, EngineError, ExpertKey, IoEvent, IoKind,
    PrefetchQueues, ResidencyPool,
};
use crate::estimator::{EstimatorConfig, EstimatorError, LayerEstimator};
use crate::policy::{static_pin_set, LruOrder, PolicyKind};
use crate::trace::{activation_frequencies, Trace, TraceMeta};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("the trace has no shape header")]
    MissingShape,
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Balancer(#[from] BalancerError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidConfig(msg.into())
}

/// Everything except the workload itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub profile: HardwareProfile,
    pub policy: PolicyKind,
    /// Utility upper bound `K`.
    pub max_score: u8,
    /// Forgetting factor of the boundary calibration.
    pub lambda: f64,
    /// Fraction of all expert weights that fits in the GPU cache.
    pub cache_ratio: f64,
    /// Whole steps run until this many tokens have been accepted.
    pub token_budget: u64,
    /// Weight of a new observation in the device-ratio estimates.
    pub ratio_smoothing: f64,
    /// Steps inspected up front to seed the ratio estimates and to rank
    /// experts for the static split.
    pub warmup_steps: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            profile: HardwareProfile::pcie4_default(),
            policy: PolicyKind::MoeSpac,
            max_score: 4,
            lambda: 0.1,
            cache_ratio: 0.17,
            token_budget: 512,
            ratio_smoothing: 0.2,
            warmup_steps: 32,
        }
    }
}

/// Timings and accounting of one layer within one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: u32,
    /// Threshold in effect; 0 for policies without one.
    pub tau: u8,
    pub fallback: bool,
    pub t_cpu_ns: u64,
    pub t_gpu_ns: u64,
    pub io_ns: u64,
    pub stall_ns: u64,
    pub wall_ns: u64,
    pub bubble_ns: u64,
    /// Activations served by resident experts.
    pub hits: u64,
    pub misses: u64,
    pub loads: u32,
    pub evictions: u32,
    /// Distinct experts activated in the window.
    pub distinct: u32,
    /// Experts whose predicted hot/cold class at threshold 1 matched whether
    /// they were activated.
    pub agree: u32,
    pub false_neg: u32,
    pub false_pos: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub start_ns: u64,
    pub draft_ns: u64,
    pub accepted_tokens: u32,
    pub n_experts: u32,
    pub layers: Vec<LayerReport>,
}

impl StepReport {
    pub fn total_ns(&self) -> u64 {
        self.draft_ns + self.layers.iter().map(|l| l.wall_ns).sum::<u64>()
    }

    /// Mean over layers of the per-layer classification agreement.
    pub fn accuracy(&self) -> f64 {
        if self.layers.is_empty() || self.n_experts == 0 {
            return 0.0;
        }
        let n = f64::from(self.n_experts);
        self.layers.iter().map(|l| f64::from(l.agree) / n).sum::<f64>() / self.layers.len() as f64
    }
}

/// Append-only timeline record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SimEvent {
    Draft {
        step: u64,
        start_ns: u64,
        duration_ns: u64,
    },
    Layer {
        step: u64,
        layer: u32,
        start_ns: u64,
        wall_ns: u64,
        t_cpu_ns: u64,
        t_gpu_ns: u64,
        stall_ns: u64,
    },
    Io(IoEvent),
}

/// Sum of the drafting and layer spans in an event log.
pub fn replay_time_ns(events: &[SimEvent]) -> u64 {
    events
        .iter()
        .map(|e| match e {
            SimEvent::Draft { duration_ns, .. } => *duration_ns,
            SimEvent::Layer { wall_ns, .. } => *wall_ns,
            SimEvent::Io(_) => 0,
        })
        .sum()
}

/// Whether the drafting and layer spans tile the timeline without gaps.
pub fn timeline_is_contiguous(events: &[SimEvent]) -> bool {
    let mut clock = 0u64;
    for e in events {
        let (start, dur) = match e {
            SimEvent::Draft {
                start_ns,
                duration_ns,
                ..
            } => (*start_ns, *duration_ns),
            SimEvent::Layer {
                start_ns, wall_ns, ..
            } => (*start_ns, *wall_ns),
            SimEvent::Io(_) => continue,
        };
        if start != clock {
            return false;
        }
        clock += dur;
    }
    true
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub policy: PolicyKind,
    pub reports: Vec<StepReport>,
    pub events: Vec<SimEvent>,
}

impl SimOutput {
    pub fn total_time_ns(&self) -> u64 {
        self.reports.iter().map(StepReport::total_ns).sum()
    }

    pub fn total_tokens(&self) -> u64 {
        self.reports.iter().map(|r| u64::from(r.accepted_tokens)).sum()
    }
}

fn secs_to_ns(s: f64) -> u64 {
    (s * 1e9).round().max(0.0) as u64
}

/// Per-policy state beyond the shared residency pool.
#[derive(Debug)]
enum PolicyState {
    Utility {
        estimators: Vec<LayerEstimator>,
        ratios: Vec<RatioEstimates>,
        b_prev: Vec<u32>,
        queues: PrefetchQueues,
        fifo: Option<FifoOrder>,
    },
    OnDemand,
    Lru(LruCache),
    Static(Vec<Vec<bool>>),
}

/// Per-layer LRU caches, each owning an equal share of the slots.
#[derive(Debug)]
struct LruCache {
    orders: Vec<LruOrder>,
    shares: Vec<usize>,
}

/// Arrival order for the FIFO-evictor ablation.
#[derive(Debug, Default)]
struct FifoOrder {
    order: VecDeque<(ExpertKey, u64)>,
    live: HashMap<ExpertKey, u64>,
    seq: u64,
}

impl FifoOrder {
    fn arrive(&mut self, key: ExpertKey) {
        self.live.insert(key, self.seq);
        self.order.push_back((key, self.seq));
        self.seq += 1;
    }

    fn reclaim(&mut self, pool: &mut ResidencyPool, now_ns: u64) -> Option<IoEvent> {
        while let Some((key, seq)) = self.order.pop_front() {
            if self.live.get(&key) != Some(&seq) {
                continue;
            }
            self.live.remove(&key);
            if pool.contains(&key) && !pool.is_frozen(&key) {
                pool.remove(&key);
                return Some(IoEvent::evict(key, now_ns));
            }
        }
        None
    }
}

/// Resumable simulation over a borrowed trace.
#[derive(Debug)]
pub struct Simulation<'t> {
    cfg: SimConfig,
    trace: &'t Trace,
    meta: TraceMeta,
    max_score: u8,
    pool: ResidencyPool,
    state: PolicyState,
    next_step: usize,
    next_token: u32,
    tokens_done: u64,
    step_index: u64,
    now_ns: u64,
    events: Vec<SimEvent>,
}

fn estimator_config(cfg: &SimConfig, gamma: u32) -> Result<EstimatorConfig, SimError> {
    let c = match cfg.policy {
        PolicyKind::ArMode => EstimatorConfig::new(1, cfg.lambda, 1)?,
        PolicyKind::BinaryUtility => EstimatorConfig::new(1, cfg.lambda, gamma)?,
        PolicyKind::FixedBoundaries { up, down } => {
            EstimatorConfig::new(cfg.max_score, cfg.lambda, gamma)?.with_fixed_boundaries(up, down)?
        }
        _ => EstimatorConfig::new(cfg.max_score, cfg.lambda, gamma)?,
    };
    Ok(c)
}

impl<'t> Simulation<'t> {
    pub fn new(cfg: SimConfig, trace: &'t Trace) -> Result<Self, SimError> {
        let meta = trace.meta.ok_or(SimError::MissingShape)?;
        cfg.profile.validate()?;
        if cfg.profile.n_layers != meta.n_layers {
            return Err(invalid(format!(
                "profile has {} layers but the trace has {}",
                cfg.profile.n_layers, meta.n_layers
            )));
        }
        if !(cfg.cache_ratio > 0.0 && cfg.cache_ratio <= 1.0) {
            return Err(invalid(format!("cache_ratio {} outside (0, 1]", cfg.cache_ratio)));
        }
        if !(0.0..=1.0).contains(&cfg.ratio_smoothing) {
            return Err(invalid("ratio_smoothing outside [0, 1]"));
        }
        let total = u64::from(meta.n_experts) * u64::from(meta.n_layers);
        let slots = (cfg.cache_ratio * total as f64 + 1e-9).floor() as u64;
        let capacity = slots * cfg.profile.expert_bytes;
        if capacity > cfg.profile.vram_capacity_bytes {
            return Err(invalid(format!(
                "cache of {slots} experts ({capacity} bytes) exceeds VRAM capacity {}",
                cfg.profile.vram_capacity_bytes
            )));
        }
        let (max_score, state) = if cfg.policy.uses_estimator() {
            let est_cfg = estimator_config(&cfg, meta.gamma)?;
            if let PolicyKind::FixedTau(t) = cfg.policy {
                if t > est_cfg.max_score() {
                    return Err(invalid(format!("fixed tau {t} above K = {}", est_cfg.max_score())));
                }
            }
            let k = est_cfg.max_score();
            let estimators = (0..meta.n_layers)
                .map(|_| LayerEstimator::new(meta.n_experts as usize, est_cfg))
                .collect::<Result<Vec<_>, _>>()?;
            let ratios = warmup_ratios(&cfg, trace, &meta, &est_cfg)?;
            let fifo = matches!(cfg.policy, PolicyKind::FifoEvictor).then(FifoOrder::default);
            (
                k,
                PolicyState::Utility {
                    estimators,
                    ratios,
                    b_prev: vec![meta.top_k; meta.n_layers as usize],
                    queues: PrefetchQueues::new(k),
                    fifo,
                },
            )
        } else {
            let state = match cfg.policy {
                PolicyKind::OnDemandGpu => PolicyState::OnDemand,
                PolicyKind::LruCache => {
                    let l = meta.n_layers as usize;
                    let slots = slots as usize;
                    PolicyState::Lru(LruCache {
                        orders: vec![LruOrder::default(); l],
                        shares: (0..l).map(|i| slots / l + usize::from(i < slots % l)).collect(),
                    })
                }
                _ => PolicyState::Static(static_pins(&cfg, trace, &meta, slots as usize)),
            };
            (cfg.max_score, state)
        };

        let mut pool = ResidencyPool::new(meta.n_layers, max_score, cfg.profile.expert_bytes, capacity);
        if let PolicyState::Static(pins) = &state {
            // Pinned experts are placed before the run and never move.
            for (l, row) in pins.iter().enumerate() {
                for (e, &p) in row.iter().enumerate() {
                    if p {
                        pool.insert(ExpertKey::new(l as u32, e as u32), max_score)?;
                    }
                }
            }
        }
        Ok(Self {
            cfg,
            trace,
            meta,
            max_score,
            pool,
            state,
            next_step: 0,
            next_token: 0,
            tokens_done: 0,
            step_index: 0,
            now_ns: 0,
            events: Vec::new(),
        })
    }

    pub fn pool(&self) -> &ResidencyPool {
        &self.pool
    }

    pub fn now_ns(&self) -> u64 {
        self.now_ns
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<SimEvent> {
        self.events
    }

    /// Runs one verification step (one token in autoregressive mode).
    /// Returns `None` once the token budget is met or the trace ends.
    pub fn run_step(&mut self) -> Result<Option<StepReport>, SimError> {
        if self.next_step >= self.trace.steps.len() {
            return Ok(None);
        }
        if self.next_token == 0 && self.tokens_done >= self.cfg.token_budget {
            return Ok(None);
        }
        let trace = self.trace;
        let sd_step = &trace.steps[self.next_step];
        let ar = self.cfg.policy.is_autoregressive();
        let (gamma, window, accepted, token_range) = if ar {
            let t = self.next_token as usize;
            self.next_token += 1;
            if self.next_token >= sd_step.accepted_count {
                self.next_token = 0;
                self.next_step += 1;
            }
            (0, 1, 1, t..t + 1)
        } else {
            self.next_step += 1;
            let w = self.meta.window();
            (self.meta.gamma, w, sd_step.accepted_count, 0..w as usize)
        };

        let draft_unit = self.cfg.profile.draft_unit_ns();
        let draft_ns = u64::from(gamma) * draft_unit;
        let credit_ns = u64::from(gamma) * draft_unit / u64::from(self.meta.n_layers);
        let step = self.step_index;
        let start_ns = self.now_ns;
        self.events.push(SimEvent::Draft {
            step,
            start_ns,
            duration_ns: draft_ns,
        });
        self.now_ns += draft_ns;

        let mut layers = Vec::with_capacity(self.meta.n_layers as usize);
        for l in 0..self.meta.n_layers {
            let tokens = &sd_step.layers[l as usize][token_range.clone()];
            let ctx = LayerCtx {
                layer: l,
                freqs: activation_frequencies(tokens, self.meta.n_experts as usize),
                gamma,
                window,
                credit_ns,
            };
            let report = match self.state {
                PolicyState::Utility { .. } => self.utility_layer(&ctx)?,
                PolicyState::OnDemand | PolicyState::Lru(_) => self.reactive_layer(&ctx)?,
                PolicyState::Static(_) => self.static_layer(&ctx),
            };
            self.events.push(SimEvent::Layer {
                step,
                layer: l,
                start_ns: self.now_ns,
                wall_ns: report.wall_ns,
                t_cpu_ns: report.t_cpu_ns,
                t_gpu_ns: report.t_gpu_ns,
                stall_ns: report.stall_ns,
            });
            self.now_ns += report.wall_ns;
            layers.push(report);
        }
        self.tokens_done += u64::from(accepted);
        self.step_index += 1;
        Ok(Some(StepReport {
            step,
            start_ns,
            draft_ns,
            accepted_tokens: accepted,
            n_experts: self.meta.n_experts,
            layers,
        }))
    }

    fn push_io(&mut self, events: Vec<IoEvent>) -> (u32, u32) {
        let mut loads = 0;
        let mut evicts = 0;
        for ev in events {
            match ev.kind {
                IoKind::Load => loads += 1,
                IoKind::Evict => evicts += 1,
            }
            self.events.push(SimEvent::Io(ev));
        }
        (loads, evicts)
    }

    fn utility_layer(&mut self, ctx: &LayerCtx) -> Result<LayerReport, SimError> {
        let n = self.meta.n_experts as usize;
        let layer = ctx.layer;
        let li = layer as usize;
        let profile = self.cfg.profile.clone();
        let f = &ctx.freqs;
        let b = f.iter().filter(|&&x| x > 0).count() as u32;
        let now = self.now_ns;
        let PolicyState::Utility {
            estimators,
            ratios,
            b_prev,
            queues,
            fifo,
        } = &mut self.state
        else {
            unreachable!("utility layer under a non-utility policy");
        };
        let pool = &mut self.pool;

        let scores = estimators[li].snapshot_scores();
        let resident: Vec<bool> = (0..n)
            .map(|e| pool.contains(&ExpertKey::new(layer, e as u32)))
            .collect();
        let vram_left = if fifo.is_some() {
            pool.capacity_bytes()
        } else {
            pool.free_bytes() + pool.reclaimable_bytes()
        };
        let input = BalancerInput {
            scores: &scores,
            resident: &resident,
            gamma: ctx.gamma,
            window: ctx.window,
            top_k: self.meta.top_k,
            b_est: b_prev[li],
            ratios: &ratios[li],
            profile: &profile,
            vram_left_bytes: vram_left,
            max_score: self.max_score,
        };
        let decision = match self.cfg.policy {
            PolicyKind::FixedTau(t) => {
                let (c, g) = predicted_times(t, &input)?;
                ThresholdDecision {
                    tau: t,
                    fallback: false,
                    predicted_t_cpu: c,
                    predicted_t_gpu: g,
                    n_prefetch: count_prefetch(t, &scores, &resident),
                }
            }
            _ => solve_threshold(&input)?,
        };
        let tau = decision.tau;

        let held: Vec<u32> = pool.residents(layer).map(|(e, _)| e).collect();
        for e in held {
            pool.retag(ExpertKey::new(layer, e), scores[e as usize]);
        }
        let mut io = Vec::new();
        if fifo.is_none() {
            io.extend(pool.apply_eviction(layer, tau, now));
        }
        queues.clear();
        for (e, &s) in scores.iter().enumerate() {
            let key = ExpertKey::new(layer, e as u32);
            if s >= 1 && !pool.contains(&key) {
                queues.enqueue(key, s)?;
            }
        }
        let budget = secs_to_ns(decision.predicted_t_cpu.max(decision.predicted_t_gpu)) + ctx.credit_ns;
        let io_unit = profile.io_unit_ns();
        let drained = match fifo {
            Some(order) => {
                let ev = drain_prefetch_with(queues, tau, budget, io_unit, pool, now, |p, t| {
                    order.reclaim(p, t)
                });
                for e in ev.iter().filter(|e| e.kind == IoKind::Load) {
                    order.arrive(e.key());
                }
                ev
            }
            None => drain_prefetch(queues, tau, budget, io_unit, pool, now),
        };
        io.extend(drained);

        let mut gpu_experts = 0u64;
        let mut cpu_acts = 0u64;
        let mut hits = 0u64;
        let (mut agree, mut fneg, mut fpos) = (0u32, 0u32, 0u32);
        for e in 0..n {
            let key = ExpertKey::new(layer, e as u32);
            let fe = u64::from(f[e]);
            let active = fe > 0;
            if active {
                if pool.contains(&key) {
                    gpu_experts += 1;
                    hits += fe;
                    pool.freeze(key)?;
                } else {
                    cpu_acts += fe;
                }
            }
            if (scores[e] >= 1) == active {
                agree += 1;
            }
            if scores[e] < tau && active {
                fneg += 1;
            }
            if scores[e] >= tau && !active {
                fpos += 1;
            }
        }
        let t_gpu = gpu_experts * profile.gpu_unit_ns();
        let t_cpu = cpu_acts * profile.cpu_unit_ns();
        for (e, &fe) in f.iter().enumerate() {
            let key = ExpertKey::new(layer, e as u32);
            if fe > 0 && pool.contains(&key) {
                pool.thaw_and_recycle(key)?;
            }
        }

        estimators[li].observe_step(f)?;
        let slots = f64::from(ctx.window) * f64::from(self.meta.top_k);
        let obs_c = cpu_acts as f64 / slots;
        let obs_g = if b == 0 { 0.0 } else { gpu_experts as f64 / f64::from(b) };
        ratios[li] = update_ratio_estimates(&ratios[li], tau, obs_c, obs_g, self.cfg.ratio_smoothing);
        b_prev[li] = b.max(1);

        let (loads, evictions) = self.push_io(io);
        let io_ns = u64::from(loads) * io_unit;
        let busy = t_cpu.max(t_gpu);
        let stall = io_ns.saturating_sub(busy + ctx.credit_ns);
        Ok(LayerReport {
            layer,
            tau,
            fallback: decision.fallback,
            t_cpu_ns: t_cpu,
            t_gpu_ns: t_gpu,
            io_ns,
            stall_ns: stall,
            wall_ns: busy + stall,
            bubble_ns: t_cpu.abs_diff(t_gpu) + stall,
            hits,
            misses: cpu_acts,
            loads,
            evictions,
            distinct: b,
            agree,
            false_neg: fneg,
            false_pos: fpos,
        })
    }

    /// GPU-only execution with blocking fetches; the I/O stream and the GPU
    /// stream overlap, and each fetched expert computes once it lands.
    fn reactive_layer(&mut self, ctx: &LayerCtx) -> Result<LayerReport, SimError> {
        let layer = ctx.layer;
        let now = self.now_ns;
        let f = &ctx.freqs;
        let profile = &self.cfg.profile;
        let (gpu_unit, io_unit) = (profile.gpu_unit_ns(), profile.io_unit_ns());
        let active: Vec<usize> = (0..f.len()).filter(|&e| f[e] > 0).collect();
        let mut io = Vec::new();
        let mut hit_experts = 0u64;
        let mut hits = 0u64;
        let mut misses = 0u64;
        let mut fetch = Vec::new();
        let mut agree = 0u32;
        let (mut fneg, mut fpos) = (0u32, 0u32);
        for (e, &fe) in f.iter().enumerate() {
            let key = ExpertKey::new(layer, e as u32);
            let resident = self.pool.contains(&key);
            if resident == (fe > 0) {
                agree += 1;
            }
            match (resident, fe > 0) {
                (true, true) => {
                    hit_experts += 1;
                    hits += u64::from(fe);
                }
                (false, true) => {
                    fneg += 1;
                    misses += u64::from(fe);
                    fetch.push(key);
                }
                (true, false) => fpos += 1,
                (false, false) => {}
            }
        }
        let layer_active = |k: &ExpertKey| k.layer == layer && f[k.expert as usize] > 0;
        let li = layer as usize;
        for (j, key) in fetch.iter().enumerate() {
            let t = now + j as u64 * io_unit;
            // On-demand fetches, and LRU fetches that find every slot of the
            // layer in use by this window, pass through a staging buffer
            // outside the expert cache.
            let keep = match &mut self.state {
                PolicyState::Lru(cache) => {
                    let order = &mut cache.orders[li];
                    let room = if order.len() < cache.shares[li] {
                        true
                    } else if let Some(v) = order.victim(&layer_active) {
                        order.remove(&v);
                        self.pool.remove(&v);
                        io.push(IoEvent::evict(v, t));
                        true
                    } else {
                        false
                    };
                    if room {
                        order.touch(*key, now);
                    }
                    room
                }
                _ => false,
            };
            if keep {
                self.pool.insert(*key, 0)?;
            }
            io.push(IoEvent::load(*key, 0, t, io_unit));
        }
        // GPU runs the hits first, then each fetched expert after its load.
        let mut gpu_free = hit_experts * gpu_unit;
        for j in 0..fetch.len() as u64 {
            gpu_free = gpu_free.max((j + 1) * io_unit) + gpu_unit;
        }
        if let PolicyState::Lru(cache) = &mut self.state {
            for &e in &active {
                let key = ExpertKey::new(layer, e as u32);
                if self.pool.contains(&key) {
                    cache.orders[li].touch(key, now);
                }
            }
        }
        let t_gpu = active.len() as u64 * gpu_unit;
        let stall = gpu_free - t_gpu;
        let (loads, evictions) = self.push_io(io);
        Ok(LayerReport {
            layer,
            tau: 0,
            fallback: false,
            t_cpu_ns: 0,
            t_gpu_ns: t_gpu,
            io_ns: u64::from(loads) * io_unit,
            stall_ns: stall,
            wall_ns: gpu_free,
            bubble_ns: stall,
            hits,
            misses,
            loads,
            evictions,
            distinct: active.len() as u32,
            agree,
            false_neg: fneg,
            false_pos: fpos,
        })
    }

    fn static_layer(&mut self, ctx: &LayerCtx) -> LayerReport {
        let PolicyState::Static(pins) = &self.state else {
            unreachable!("static layer under a dynamic policy");
        };
        let pinned = &pins[ctx.layer as usize];
        let f = &ctx.freqs;
        let (mut gpu_experts, mut hits, mut misses) = (0u64, 0u64, 0u64);
        let (mut agree, mut fneg, mut fpos) = (0u32, 0u32, 0u32);
        for (e, &fe) in f.iter().enumerate() {
            let active = fe > 0;
            if pinned[e] == active {
                agree += 1;
            }
            match (pinned[e], active) {
                (true, true) => {
                    gpu_experts += 1;
                    hits += u64::from(fe);
                }
                (false, true) => {
                    fneg += 1;
                    misses += u64::from(fe);
                }
                (true, false) => fpos += 1,
                (false, false) => {}
            }
        }
        let t_gpu = gpu_experts * self.cfg.profile.gpu_unit_ns();
        let t_cpu = misses * self.cfg.profile.cpu_unit_ns();
        LayerReport {
            layer: ctx.layer,
            tau: 0,
            fallback: false,
            t_cpu_ns: t_cpu,
            t_gpu_ns: t_gpu,
            io_ns: 0,
            stall_ns: 0,
            wall_ns: t_cpu.max(t_gpu),
            bubble_ns: t_cpu.abs_diff(t_gpu),
            hits,
            misses,
            loads: 0,
            evictions: 0,
            distinct: f.iter().filter(|&&x| x > 0).count() as u32,
            agree,
            false_neg: fneg,
            false_pos: fpos,
        }
    }
}

struct LayerCtx {
    layer: u32,
    freqs: Vec<u32>,
    gamma: u32,
    window: u32,
    credit_ns: u64,
}

/// Token windows the policy would see on the first `warmup_steps` steps.
fn warmup_windows<'a>(
    cfg: &SimConfig,
    trace: &'a Trace,
) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + 'a {
    let ar = cfg.policy.is_autoregressive();
    let window = trace.meta.map_or(1, |m| m.window() as usize);
    trace
        .steps
        .iter()
        .enumerate()
        .take(cfg.warmup_steps as usize)
        .flat_map(move |(i, s)| {
            let ranges: Vec<std::ops::Range<usize>> = if ar {
                (0..s.accepted_count as usize).map(|t| t..t + 1).collect()
            } else {
                std::iter::once(0..window).collect()
            };
            ranges.into_iter().map(move |r| (i, r))
        })
}

/// Seeds the device-ratio estimates by replaying the warm-up steps with a
/// fresh estimator, assuming every expert at or above each threshold were
/// resident.
fn warmup_ratios(
    cfg: &SimConfig,
    trace: &Trace,
    meta: &TraceMeta,
    est_cfg: &EstimatorConfig,
) -> Result<Vec<RatioEstimates>, SimError> {
    let k = est_cfg.max_score();
    let n = meta.n_experts as usize;
    let mut out = Vec::with_capacity(meta.n_layers as usize);
    for l in 0..meta.n_layers as usize {
        let mut est = LayerEstimator::new(n, *est_cfg)?;
        let mut sum_c = vec![0.0; usize::from(k)];
        let mut sum_g = vec![0.0; usize::from(k)];
        let mut samples = 0usize;
        for (i, range) in warmup_windows(cfg, trace) {
            let tokens = &trace.steps[i].layers[l][range];
            let f = activation_frequencies(tokens, n);
            let slots = (tokens.len() * meta.top_k as usize) as f64;
            let b = f.iter().filter(|&&x| x > 0).count() as f64;
            for tau in 1..=k {
                let (mut cold, mut hot) = (0u64, 0u64);
                for (e, &fe) in f.iter().enumerate() {
                    if est.score(e) >= tau {
                        hot += u64::from(fe > 0);
                    } else {
                        cold += u64::from(fe);
                    }
                }
                sum_c[usize::from(tau) - 1] += cold as f64 / slots;
                sum_g[usize::from(tau) - 1] += hot as f64 / b.max(1.0);
            }
            samples += 1;
            est.observe_step(&f)?;
        }
        if samples == 0 {
            out.push(RatioEstimates::linear_prior(k));
            continue;
        }
        let mut cpu: Vec<f64> = sum_c.iter().map(|s| s / samples as f64).collect();
        let mut gpu: Vec<f64> = sum_g.iter().map(|s| s / samples as f64).collect();
        for i in 1..cpu.len() {
            cpu[i] = cpu[i].max(cpu[i - 1]);
            gpu[i] = gpu[i].min(gpu[i - 1]);
        }
        out.push(RatioEstimates::new(cpu, gpu)?);
    }
    Ok(out)
}

fn static_pins(cfg: &SimConfig, trace: &Trace, meta: &TraceMeta, slots: usize) -> Vec<Vec<bool>> {
    let n = meta.n_experts as usize;
    let mut counts = vec![vec![0u64; n]; meta.n_layers as usize];
    for (i, range) in warmup_windows(cfg, trace) {
        for (l, row) in counts.iter_mut().enumerate() {
            for tok in &trace.steps[i].layers[l][range.clone()] {
                for &e in tok {
                    row[e as usize] += 1;
                }
            }
        }
    }
    let mut pins = vec![vec![false; n]; meta.n_layers as usize];
    for key in static_pin_set(&counts, slots) {
        pins[key.layer as usize][key.expert as usize] = true;
    }
    pins
}

/// Runs `cfg` over `trace` to the token budget.
pub fn run_experiment(cfg: &SimConfig, trace: &Trace) -> Result<SimOutput, SimError> {
    let mut sim = Simulation::new(cfg.clone(), trace)?;
    let mut reports = Vec::new();
    while let Some(r) = sim.run_step()? {
        reports.push(r);
    }
    Ok(SimOutput {
        policy: cfg.policy,
        reports,
        events: sim.into_events(),
    })
}
