//! Heterogeneous workload balancing.
//!
//! Per layer and per verification step, pick the integer threshold `tau` that
//! splits experts into hot (score `>= tau`, GPU) and cold (CPU) so that the
//! two devices finish at the same time, subject to the prefetch I/O fitting in
//! the compute window and the prefetched experts fitting in free VRAM.
//!
//! The CPU time is non-decreasing in `tau` and the GPU time non-increasing,
//! so `|t_cpu - t_gpu|` is unimodal. The solver bisects for the crossing of
//! the two curves and for the boundary of the monotone feasibility
//! predicates instead of scanning every `tau`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BalancerError {
    #[error("threshold {tau} outside [1, {max}]")]
    TauOutOfRange { tau: u8, max: u8 },
    #[error("ratio vectors must have {expected} entries, got cpu={cpu} gpu={gpu}")]
    RatioShape { expected: usize, cpu: usize, gpu: usize },
    #[error("cpu ratios must be non-decreasing and gpu ratios non-increasing in tau, within [0, 1]")]
    NonMonotoneRatios,
    #[error("invalid hardware profile: {0}")]
    InvalidProfile(&'static str),
    #[error("scores and residency flags differ in length ({scores} vs {resident})")]
    ResidencyShape { scores: usize, resident: usize },
}

/// Unit costs of the offload platform. Times are seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// One token-activation of one expert on the CPU.
    pub t_cpu_unit: f64,
    /// One expert on the GPU, all of its tokens batched.
    pub t_gpu_unit: f64,
    /// Moving one expert's weights host to device.
    pub t_io_unit: f64,
    /// One draft token.
    pub t_draft_unit: f64,
    pub expert_bytes: u64,
    pub n_layers: u32,
    pub vram_capacity_bytes: u64,
}

const NS_PER_SEC: f64 = 1e9;

fn to_ns(seconds: f64) -> u64 {
    (seconds * NS_PER_SEC).round() as u64
}

impl HardwareProfile {
    /// A PCIe 4.0 class offload box with 4.5 MiB experts: transfers run at
    /// about 32 GB/s, CPU expert passes are bound by roughly 100 GB/s of DRAM
    /// bandwidth, and loading a layer's experts takes ten times as long as
    /// computing them on the GPU.
    pub fn pcie4_default() -> Self {
        Self {
            t_cpu_unit: 47e-6,
            t_gpu_unit: 14.7e-6,
            t_io_unit: 147e-6,
            t_draft_unit: 1.5e-3,
            expert_bytes: 4_718_592,
            n_layers: 48,
            vram_capacity_bytes: 24 * (1 << 30),
        }
    }

    pub fn validate(&self) -> Result<(), BalancerError> {
        let times = [self.t_cpu_unit, self.t_gpu_unit, self.t_io_unit, self.t_draft_unit];
        if times.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(BalancerError::InvalidProfile("unit times must be positive"));
        }
        if self.expert_bytes == 0 || self.vram_capacity_bytes == 0 {
            return Err(BalancerError::InvalidProfile("byte sizes must be positive"));
        }
        if self.n_layers == 0 {
            return Err(BalancerError::InvalidProfile("at least one layer"));
        }
        Ok(())
    }

    pub fn cpu_unit_ns(&self) -> u64 {
        to_ns(self.t_cpu_unit)
    }

    pub fn gpu_unit_ns(&self) -> u64 {
        to_ns(self.t_gpu_unit)
    }

    pub fn io_unit_ns(&self) -> u64 {
        to_ns(self.t_io_unit)
    }

    pub fn draft_unit_ns(&self) -> u64 {
        to_ns(self.t_draft_unit)
    }
}

/// Estimated fraction of work on each device as a function of `tau`.
/// Index `tau - 1` holds the value for threshold `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimates {
    cpu: Vec<f64>,
    gpu: Vec<f64>,
}

impl RatioEstimates {
    pub fn new(cpu: Vec<f64>, gpu: Vec<f64>) -> Result<Self, BalancerError> {
        let r = Self { cpu, gpu };
        r.validate(r.cpu.len())?;
        Ok(r)
    }

    /// Neutral prior: everything that is hot runs on the GPU, linearly
    /// shifting to the CPU as the threshold rises.
    pub fn linear_prior(max_score: u8) -> Self {
        let k = f64::from(max_score);
        let cpu = (1..=max_score).map(|t| f64::from(t) / (k + 1.0)).collect();
        let gpu = (1..=max_score).map(|t| 1.0 - f64::from(t) / (k + 1.0)).collect();
        Self { cpu, gpu }
    }

    pub fn len(&self) -> usize {
        self.cpu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cpu.is_empty()
    }

    pub fn cpu(&self, tau: u8) -> f64 {
        self.cpu[usize::from(tau) - 1]
    }

    pub fn gpu(&self, tau: u8) -> f64 {
        self.gpu[usize::from(tau) - 1]
    }

    pub fn cpu_ratios(&self) -> &[f64] {
        &self.cpu
    }

    pub fn gpu_ratios(&self) -> &[f64] {
        &self.gpu
    }

    pub fn is_monotone(&self) -> bool {
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        self.cpu.iter().all(in_unit)
            && self.gpu.iter().all(in_unit)
            && self.cpu.windows(2).all(|w| w[0] <= w[1])
            && self.gpu.windows(2).all(|w| w[0] >= w[1])
    }

    fn validate(&self, expected: usize) -> Result<(), BalancerError> {
        if self.cpu.len() != expected || self.gpu.len() != expected || expected == 0 {
            return Err(BalancerError::RatioShape {
                expected,
                cpu: self.cpu.len(),
                gpu: self.gpu.len(),
            });
        }
        if !self.is_monotone() {
            return Err(BalancerError::NonMonotoneRatios);
        }
        Ok(())
    }
}

/// Everything the solver needs for one (step, layer) decision.
#[derive(Debug, Clone, Copy)]
pub struct BalancerInput<'a> {
    pub scores: &'a [u8],
    pub resident: &'a [bool],
    /// Draft length, which sets the drafting-phase I/O credit.
    pub gamma: u32,
    /// Tokens routed by the verification pass (`gamma + 1` under
    /// speculation, 1 for plain decoding).
    pub window: u32,
    pub top_k: u32,
    /// Estimated de-duplicated activated experts in the window.
    pub b_est: u32,
    pub ratios: &'a RatioEstimates,
    pub profile: &'a HardwareProfile,
    pub vram_left_bytes: u64,
    pub max_score: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDecision {
    pub tau: u8,
    pub fallback: bool,
    pub predicted_t_cpu: f64,
    pub predicted_t_gpu: f64,
    pub n_prefetch: u32,
}

impl ThresholdDecision {
    pub fn objective(&self) -> f64 {
        (self.predicted_t_cpu - self.predicted_t_gpu).abs()
    }
}

/// Predicted CPU and GPU expert time (seconds) at threshold `tau`.
pub fn predicted_times(tau: u8, input: &BalancerInput<'_>) -> Result<(f64, f64), BalancerError> {
    if tau == 0 || tau > input.max_score || usize::from(tau) > input.ratios.len() {
        return Err(BalancerError::TauOutOfRange {
            tau,
            max: input.max_score,
        });
    }
    let t_cpu = input.ratios.cpu(tau)
        * f64::from(input.window)
        * f64::from(input.top_k)
        * input.profile.t_cpu_unit;
    let t_gpu = input.ratios.gpu(tau) * f64::from(input.b_est) * input.profile.t_gpu_unit;
    Ok((t_cpu, t_gpu))
}

/// Hot experts (`score >= tau`) that are not yet resident.
pub fn count_prefetch(tau: u8, scores: &[u8], resident: &[bool]) -> u32 {
    scores
        .iter()
        .zip(resident)
        .filter(|(&s, &r)| s >= tau && !r)
        .count() as u32
}

/// Per-layer share of the drafting phase available for prefetch (seconds).
pub fn draft_credit(input: &BalancerInput<'_>) -> f64 {
    f64::from(input.gamma) * input.profile.t_draft_unit / f64::from(input.profile.n_layers)
}

/// Whether `tau` satisfies both the I/O window and the memory constraint.
pub fn is_feasible(tau: u8, input: &BalancerInput<'_>) -> Result<bool, BalancerError> {
    let (t_cpu, t_gpu) = predicted_times(tau, input)?;
    let n = count_prefetch(tau, input.scores, input.resident);
    Ok(io_fits(n, t_cpu.max(t_gpu), input) && mem_fits(n, input))
}

fn io_fits(n: u32, t_total: f64, input: &BalancerInput<'_>) -> bool {
    input.profile.t_io_unit * f64::from(n) <= t_total + draft_credit(input)
}

fn mem_fits(n: u32, input: &BalancerInput<'_>) -> bool {
    u128::from(input.profile.expert_bytes) * u128::from(n) <= u128::from(input.vram_left_bytes)
}

/// Memoising evaluator so each `tau` costs at most one time prediction.
struct Evaluator<'a, 'b> {
    input: &'a BalancerInput<'b>,
    times: Vec<Option<(f64, f64)>>,
    prefetch: Vec<Option<u32>>,
    evaluations: usize,
}

impl<'a, 'b> Evaluator<'a, 'b> {
    fn new(input: &'a BalancerInput<'b>) -> Self {
        let k = usize::from(input.max_score);
        Self {
            input,
            times: vec![None; k + 1],
            prefetch: vec![None; k + 2],
            evaluations: 0,
        }
    }

    fn times(&mut self, tau: u8) -> (f64, f64) {
        let slot = usize::from(tau);
        if let Some(t) = self.times[slot] {
            return t;
        }
        self.evaluations += 1;
        let t = predicted_times(tau, self.input).expect("tau range checked by caller");
        self.times[slot] = Some(t);
        t
    }

    fn diff(&mut self, tau: u8) -> f64 {
        let (c, g) = self.times(tau);
        c - g
    }

    fn n(&mut self, tau: u8) -> u32 {
        let slot = usize::from(tau);
        if let Some(n) = self.prefetch[slot] {
            return n;
        }
        let n = count_prefetch(tau, self.input.scores, self.input.resident);
        self.prefetch[slot] = Some(n);
        n
    }

    fn io_ok(&mut self, tau: u8) -> bool {
        let (c, g) = self.times(tau);
        let n = self.n(tau);
        io_fits(n, c.max(g), self.input)
    }

    fn decision(&mut self, tau: u8, fallback: bool) -> ThresholdDecision {
        let (c, g) = self.times(tau);
        ThresholdDecision {
            tau,
            fallback,
            predicted_t_cpu: c,
            predicted_t_gpu: g,
            n_prefetch: self.n(tau),
        }
    }
}

/// Smallest `t` in `[lo, hi]` where `pred` holds, assuming `pred` is
/// monotone (false then true). Returns `hi + 1` if it never holds.
fn first_true(lo: u8, hi: u8, mut pred: impl FnMut(u8) -> bool) -> u8 {
    let (mut lo, mut hi) = (u16::from(lo), u16::from(hi) + 1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pred(mid as u8) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo as u8
}

/// Threshold decision with the number of time predictions it needed.
pub fn solve_threshold_counted(input: &BalancerInput<'_>) -> Result<(ThresholdDecision, usize), BalancerError> {
    let k = input.max_score;
    if k == 0 {
        return Err(BalancerError::TauOutOfRange { tau: 0, max: 0 });
    }
    if input.scores.len() != input.resident.len() {
        return Err(BalancerError::ResidencyShape {
            scores: input.scores.len(),
            resident: input.resident.len(),
        });
    }
    input.ratios.validate(usize::from(k))?;
    let mut ev = Evaluator::new(input);

    // n(tau) is non-increasing, so the memory-feasible set is [tau_mem, K].
    let tau_mem = first_true(1, k, |t| mem_fits(ev.n(t), input));
    if tau_mem > k {
        let d = ev.decision(k, true);
        return Ok((d, ev.evaluations));
    }

    // First tau where the CPU is at least as slow as the GPU.
    let tau_cross = first_true(1, k, |t| ev.diff(t) >= 0.0);

    // At or above the crossing the window grows with tau while the prefetch
    // volume shrinks, so I/O feasibility is monotone there.
    let upper_lo = tau_cross.max(tau_mem);
    let upper = if upper_lo <= k {
        let t = first_true(upper_lo, k, |t| ev.io_ok(t));
        (t <= k).then_some(t)
    } else {
        None
    };

    // Below the crossing both sides of the I/O constraint shrink with tau, so
    // walk down from the crossing to the first feasible candidate.
    let mut lower = None;
    let mut t = tau_cross.min(k + 1);
    while t > tau_mem {
        t -= 1;
        if ev.io_ok(t) {
            lower = Some(t);
            break;
        }
    }

    let best = match (lower, upper) {
        (None, None) => None,
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(b),
        (Some(a), Some(b)) => {
            let fa = ev.diff(a).abs();
            let fb = ev.diff(b).abs();
            Some(if fb < fa { b } else { a })
        }
    };
    let d = match best {
        Some(tau) => ev.decision(tau, false),
        None => ev.decision(k, true),
    };
    Ok((d, ev.evaluations))
}

pub fn solve_threshold(input: &BalancerInput<'_>) -> Result<ThresholdDecision, BalancerError> {
    solve_threshold_counted(input).map(|(d, _)| d)
}

/// Blends an observed pair of ratios into the estimate at `tau_used`, then
/// clips the neighbours so the vectors stay monotone around the new value.
pub fn update_ratio_estimates(
    ratios: &RatioEstimates,
    tau_used: u8,
    observed_cpu: f64,
    observed_gpu: f64,
    smoothing: f64,
) -> RatioEstimates {
    let mut out = ratios.clone();
    let len = out.len();
    let idx = usize::from(tau_used).saturating_sub(1);
    if idx >= len {
        return out;
    }
    let a = smoothing.clamp(0.0, 1.0);
    let obs_c = observed_cpu.clamp(0.0, 1.0);
    let obs_g = observed_gpu.clamp(0.0, 1.0);
    out.cpu[idx] = (1.0 - a) * out.cpu[idx] + a * obs_c;
    out.gpu[idx] = (1.0 - a) * out.gpu[idx] + a * obs_g;
    let (c, g) = (out.cpu[idx], out.gpu[idx]);
    for i in 0..idx {
        out.cpu[i] = out.cpu[i].min(c);
        out.gpu[i] = out.gpu[i].max(g);
    }
    for i in idx + 1..len {
        out.cpu[i] = out.cpu[i].max(c);
        out.gpu[i] = out.gpu[i].min(g);
    }
    // Repair any violation already present away from the anchor.
    for i in 1..len {
        if out.cpu[i] < out.cpu[i - 1] {
            out.cpu[i] = out.cpu[i - 1];
        }
        if out.gpu[i] > out.gpu[i - 1] {
            out.gpu[i] = out.gpu[i - 1];
        }
    }
    out
}
