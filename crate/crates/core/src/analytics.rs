//! Closed-form speculative-decoding economics.
//!
//! Everything here is a pure function of its inputs: expected tokens per
//! verification step, wall-clock speedup, the expert-reuse break-even test,
//! and the information-theoretic quantities (entropy, SNR, safety margin)
//! that explain why a verification window is a better scheduling signal than
//! a single autoregressive token.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("acceptance probability {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("draft cost ratio {0} must be finite and non-negative")]
    InvalidCostRatio(f64),
    #[error("reuse coefficients must be positive (a = {a}, b = {b})")]
    InvalidReuse { a: f64, b: f64 },
    #[error("activation probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("window must hold at least one token")]
    EmptyWindow,
    #[error("the expected-token limit is unbounded at alpha = 1")]
    UnboundedLimit,
}

/// Draft length, per-token acceptance probability and draft/verify cost ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdParams {
    gamma: u32,
    alpha: f64,
    cost_ratio: f64,
}

impl SdParams {
    pub fn new(gamma: u32, alpha: f64, cost_ratio: f64) -> Result<Self, AnalyticsError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(AnalyticsError::InvalidAlpha(alpha));
        }
        if !cost_ratio.is_finite() || cost_ratio < 0.0 {
            return Err(AnalyticsError::InvalidCostRatio(cost_ratio));
        }
        Ok(Self {
            gamma,
            alpha,
            cost_ratio,
        })
    }

    /// Parameters with a free draft model (`c = 0`).
    pub fn zero_cost(gamma: u32, alpha: f64) -> Result<Self, AnalyticsError> {
        Self::new(gamma, alpha, 0.0)
    }

    pub fn gamma(&self) -> u32 {
        self.gamma
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn cost_ratio(&self) -> f64 {
        self.cost_ratio
    }
}

/// De-duplicated activation coefficients: `a` for a speculative window and
/// `b` for one autoregressive step. Only the ratio matters for break-even.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReuseCoefficients {
    a: f64,
    b: f64,
}

impl ReuseCoefficients {
    pub fn new(a: f64, b: f64) -> Result<Self, AnalyticsError> {
        if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) {
            return Err(AnalyticsError::InvalidReuse { a, b });
        }
        Ok(Self { a, b })
    }

    /// Coefficients normalised so that `b = 1`.
    pub fn from_ratio(ratio: f64) -> Result<Self, AnalyticsError> {
        Self::new(ratio, 1.0)
    }

    pub fn ratio(&self) -> f64 {
        self.a / self.b
    }
}

/// Per-expert demand over a verification window of `window` tokens, each
/// token independently routing to the expert with probability `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemandDistribution {
    p: f64,
    window: u32,
}

impl DemandDistribution {
    pub fn new(p: f64, window: u32) -> Result<Self, AnalyticsError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(AnalyticsError::InvalidProbability(p));
        }
        if window == 0 {
            return Err(AnalyticsError::EmptyWindow);
        }
        Ok(Self { p, window })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn window(&self) -> u32 {
        self.window
    }
}

/// Measured de-duplication ratios `a/b` against draft length at `alpha = 0.8`
/// (Qwen3-235B-A22B verifier, Qwen3-4B-FP8 drafter, MT-bench).
pub const MEASURED_REUSE_RATIOS: [(u32, f64); 11] = [
    (0, 1.0),
    (3, 2.24),
    (4, 2.72),
    (5, 3.20),
    (6, 3.52),
    (7, 3.80),
    (8, 4.13),
    (9, 4.50),
    (10, 4.83),
    (11, 5.90),
    (12, 6.32),
];

/// Acceptance probability the measured reuse ratios were collected at.
pub const MEASURED_REUSE_ALPHA: f64 = 0.8;

/// Expected number of tokens produced by one verification step,
/// `(1 - alpha^(gamma+1)) / (1 - alpha)`, or `gamma + 1` when every draft is
/// accepted.
pub fn expected_tokens(params: &SdParams) -> f64 {
    let window = f64::from(params.gamma) + 1.0;
    if params.alpha >= 1.0 {
        return window;
    }
    (1.0 - params.alpha.powi(params.gamma as i32 + 1)) / (1.0 - params.alpha)
}

/// Wall-clock speedup of speculative over autoregressive decoding.
pub fn speedup_factor(params: &SdParams) -> f64 {
    expected_tokens(params) / (f64::from(params.gamma) * params.cost_ratio + 1.0)
}

/// Supremum of the expected tokens as the draft length grows.
pub fn omega_limit(alpha: f64) -> Result<f64, AnalyticsError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AnalyticsError::InvalidAlpha(alpha));
    }
    if alpha >= 1.0 {
        return Err(AnalyticsError::UnboundedLimit);
    }
    Ok(1.0 / (1.0 - alpha))
}

/// Sufficient condition for speculative decoding to beat autoregressive
/// decoding on time per output token once expert reuse is accounted for:
/// `a/b < expected_tokens`. The draft cost term is treated as negligible.
pub fn reuse_breakeven(params: &SdParams, coeffs: &ReuseCoefficients) -> bool {
    coeffs.ratio() < expected_tokens(params)
}

/// Exact per-token comparison `a + gamma * T_D / Z < b * expected_tokens`,
/// where `draft_over_z` is the draft token time divided by the constant
/// per-window FFN cost `Z`.
pub fn reuse_breakeven_exact(params: &SdParams, coeffs: &ReuseCoefficients, draft_over_z: f64) -> bool {
    coeffs.a + f64::from(params.gamma) * draft_over_z < coeffs.b * expected_tokens(params)
}

/// Multiplicative SNR advantage of a `window`-token frequency signal over a
/// single Bernoulli indicator.
pub fn snr_gain(window: u32) -> Result<f64, AnalyticsError> {
    if window == 0 {
        return Err(AnalyticsError::EmptyWindow);
    }
    Ok(f64::from(window).sqrt())
}

/// Shannon entropy (bits) of `Binomial(window, p)` by exact summation.
pub fn demand_entropy(d: &DemandDistribution) -> f64 {
    let n = d.window;
    let (p, q) = (d.p, 1.0 - d.p);
    if p == 0.0 || q == 0.0 {
        return 0.0;
    }
    let mut coeff = 1.0_f64;
    let mut h = 0.0;
    for k in 0..=n {
        if k > 0 {
            coeff = coeff * f64::from(n - k + 1) / f64::from(k);
        }
        let pk = coeff * p.powi(k as i32) * q.powi((n - k) as i32);
        if pk > 0.0 {
            h -= pk * pk.log2();
        }
    }
    h
}

/// Distance between the true demand and the frequency threshold, i.e. the
/// estimation error the scheduler tolerates before misclassifying.
pub fn safety_margin(true_freq: u32, freq_threshold: f64) -> f64 {
    (f64::from(true_freq) - freq_threshold).abs()
}
