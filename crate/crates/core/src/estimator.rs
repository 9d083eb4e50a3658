//! Speculative utility estimation.
//!
//! Each expert carries a discrete utility score in `[0, K]`. A score moves by
//! at most one level per verification step, and only when the change in
//! activation frequency clears a per-expert fluctuation boundary. The
//! boundaries themselves track the typical size of upward and downward
//! fluctuations through a floored moving average.

use std::io::{BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("utility upper bound must be at least 1")]
    ZeroUpperBound,
    #[error("utility upper bound {max_score} exceeds draft length {gamma}")]
    UpperBoundAboveDraft { max_score: u8, gamma: u32 },
    #[error("forgetting factor {0} outside [0, 1]")]
    InvalidLambda(f64),
    #[error("draft length must be at least 1")]
    ZeroGamma,
    #[error("fixed boundaries must be at least 1 (up = {up}, down = {down})")]
    InvalidFixedBoundaries { up: u32, down: u32 },
    #[error("a layer needs at least one expert")]
    EmptyLayer,
    #[error("expected {expected} frequencies, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("state line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How fluctuation boundaries evolve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryMode {
    /// Floored moving average with the configured forgetting factor.
    Adaptive,
    /// Boundaries pinned at the given values for the whole run.
    Fixed { up: u32, down: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    max_score: u8,
    lambda: f64,
    gamma: u32,
    boundaries: BoundaryMode,
}

impl EstimatorConfig {
    pub fn new(max_score: u8, lambda: f64, gamma: u32) -> Result<Self, EstimatorError> {
        if max_score == 0 {
            return Err(EstimatorError::ZeroUpperBound);
        }
        if gamma == 0 {
            return Err(EstimatorError::ZeroGamma);
        }
        if u32::from(max_score) > gamma {
            return Err(EstimatorError::UpperBoundAboveDraft { max_score, gamma });
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(EstimatorError::InvalidLambda(lambda));
        }
        Ok(Self {
            max_score,
            lambda,
            gamma,
            boundaries: BoundaryMode::Adaptive,
        })
    }

    pub fn with_fixed_boundaries(mut self, up: u32, down: u32) -> Result<Self, EstimatorError> {
        if up == 0 || down == 0 {
            return Err(EstimatorError::InvalidFixedBoundaries { up, down });
        }
        self.boundaries = BoundaryMode::Fixed { up, down };
        Ok(self)
    }

    pub fn max_score(&self) -> u8 {
        self.max_score
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn gamma(&self) -> u32 {
        self.gamma
    }

    pub fn boundaries(&self) -> BoundaryMode {
        self.boundaries
    }

    fn initial_boundaries(&self) -> (u32, u32) {
        match self.boundaries {
            BoundaryMode::Adaptive => {
                let b = (self.gamma / 2).max(MIN_BOUNDARY);
                (b, b)
            }
            BoundaryMode::Fixed { up, down } => (up, down),
        }
    }
}

// A zero boundary would let a zero fluctuation trigger a transition.
const MIN_BOUNDARY: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertUtilityState {
    pub score: u8,
    pub up_boundary: u32,
    pub down_boundary: u32,
    pub last_freq: u32,
}

/// Utility state for every expert of one MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEstimator {
    config: EstimatorConfig,
    states: Vec<ExpertUtilityState>,
}

fn calibrate(boundary: u32, lambda: f64, magnitude: u32) -> u32 {
    let blended = (1.0 - lambda) * f64::from(boundary) + lambda * f64::from(magnitude);
    // Guard against 0.9 * 4 + 0.1 * 4 evaluating to 3.999...
    let floored = (blended + 1e-9).floor() as u32;
    floored.max(MIN_BOUNDARY)
}

impl LayerEstimator {
    pub fn new(n_experts: usize, config: EstimatorConfig) -> Result<Self, EstimatorError> {
        if n_experts == 0 {
            return Err(EstimatorError::EmptyLayer);
        }
        let (up, down) = config.initial_boundaries();
        let state = ExpertUtilityState {
            score: 0,
            up_boundary: up,
            down_boundary: down,
            last_freq: 0,
        };
        Ok(Self {
            config,
            states: vec![state; n_experts],
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[ExpertUtilityState] {
        &self.states
    }

    /// Advances every expert by one verification step given this step's
    /// per-expert activation counts.
    pub fn observe_step(&mut self, freqs: &[u32]) -> Result<(), EstimatorError> {
        if freqs.len() != self.states.len() {
            return Err(EstimatorError::ShapeMismatch {
                expected: self.states.len(),
                got: freqs.len(),
            });
        }
        let k = self.config.max_score;
        let adaptive = matches!(self.config.boundaries, BoundaryMode::Adaptive);
        let lambda = self.config.lambda;
        for (st, &f) in self.states.iter_mut().zip(freqs) {
            let delta = i64::from(f) - i64::from(st.last_freq);
            if delta >= i64::from(st.up_boundary) {
                st.score = (st.score + 1).min(k);
            } else if -delta >= i64::from(st.down_boundary) {
                st.score = st.score.saturating_sub(1);
            }
            if adaptive {
                let magnitude = delta.unsigned_abs() as u32;
                if delta > 0 {
                    st.up_boundary = calibrate(st.up_boundary, lambda, magnitude);
                } else if delta < 0 {
                    st.down_boundary = calibrate(st.down_boundary, lambda, magnitude);
                }
            }
            st.last_freq = f;
        }
        Ok(())
    }

    pub fn snapshot_scores(&self) -> Vec<u8> {
        self.states.iter().map(|s| s.score).collect()
    }

    pub fn score(&self, expert: usize) -> u8 {
        self.states[expert].score
    }

    /// Replaces the state of one expert, e.g. when restoring a checkpoint.
    pub fn set_state(&mut self, expert: usize, state: ExpertUtilityState) {
        let mut state = state;
        state.score = state.score.min(self.config.max_score);
        self.states[expert] = state;
    }
}

/// Writes one `layer expert score up down last_freq` line per expert.
pub fn dump_states<W: Write>(layers: &[LayerEstimator], mut out: W) -> Result<(), EstimatorError> {
    writeln!(out, "#moestate v1")?;
    for (l, est) in layers.iter().enumerate() {
        for (e, s) in est.states.iter().enumerate() {
            writeln!(
                out,
                "{l} {e} {} {} {} {}",
                s.score, s.up_boundary, s.down_boundary, s.last_freq
            )?;
        }
    }
    Ok(())
}

/// Restores states written by [`dump_states`] into already-shaped estimators.
pub fn load_states<R: BufRead>(layers: &mut [LayerEstimator], input: R) -> Result<(), EstimatorError> {
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |msg: &str| EstimatorError::Parse {
            line: lineno,
            msg: msg.to_string(),
        };
        let fields: Vec<u64> = trimmed
            .split_whitespace()
            .map(|t| t.parse::<u64>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(&e.to_string()))?;
        if fields.len() != 6 {
            return Err(err("expected 6 fields"));
        }
        let (l, e) = (fields[0] as usize, fields[1] as usize);
        let est = layers.get_mut(l).ok_or_else(|| err("layer out of range"))?;
        if e >= est.len() {
            return Err(err("expert out of range"));
        }
        if fields[2] > u64::from(est.config.max_score) {
            return Err(err("score above upper bound"));
        }
        let narrow = |v: u64| u32::try_from(v).map_err(|_| err("value out of range"));
        est.set_state(
            e,
            ExpertUtilityState {
                score: fields[2] as u8,
                up_boundary: narrow(fields[3])?,
                down_boundary: narrow(fields[4])?,
                last_freq: narrow(fields[5])?,
            },
        );
    }
    Ok(())
}
