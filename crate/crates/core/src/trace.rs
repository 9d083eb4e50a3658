//! Expert-activation workloads.
//!
//! A trace is a sequence of verification steps. Each step carries, for every
//! layer, the top-k expert ids chosen for each of the `gamma + 1` verified
//! tokens, plus the number of tokens accepted in that step. Synthetic traces
//! come from latent per-layer logits that drift as a Gaussian random walk,
//! with per-token Gumbel noise setting how sharply routing follows them.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const HEADER_TAG: &str = "#moetrace v1";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid trace config: {0}")]
    InvalidConfig(String),
    #[error("cannot open trace file {}: {source}", path.display())]
    Open {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("trace i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

fn parse_err(line: usize, msg: impl Into<String>) -> TraceError {
    TraceError::Parse {
        line,
        msg: msg.into(),
    }
}

/// Synthetic workload parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    pub n_layers: u32,
    pub n_experts: u32,
    pub top_k: u32,
    pub gamma: u32,
    pub alpha: f64,
    /// Standard deviation of the per-step random walk on latent logits.
    pub drift_scale: f64,
    /// Steps between full re-draws of the latent logits; 0 disables.
    pub shift_period: u32,
    pub seed: u64,
    /// Standard deviation of the initial latent logits.
    pub logit_scale: f64,
    /// Scale of the per-token Gumbel perturbation; 0 gives fully
    /// deterministic routing.
    pub gumbel_scale: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            n_layers: 48,
            n_experts: 128,
            top_k: 8,
            gamma: 8,
            alpha: 0.8,
            drift_scale: 0.02,
            shift_period: 0,
            seed: 7,
            logit_scale: 2.0,
            gumbel_scale: 1.1,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: String| Err(TraceError::InvalidConfig(m));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return bad(format!(
                "top_k = {} must lie in [1, n_experts = {}]",
                self.top_k, self.n_experts
            ));
        }
        if self.gamma == 0 {
            return bad("gamma must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha = {} outside [0, 1]", self.alpha));
        }
        for (name, v) in [
            ("drift_scale", self.drift_scale),
            ("logit_scale", self.logit_scale),
            ("gumbel_scale", self.gumbel_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> TraceMeta {
        TraceMeta {
            n_layers: self.n_layers,
            n_experts: self.n_experts,
            top_k: self.top_k,
            gamma: self.gamma,
        }
    }
}

/// Shape shared by every step of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub n_layers: u32,
    pub n_experts: u32,
    pub top_k: u32,
    pub gamma: u32,
}

impl TraceMeta {
    /// Verified tokens per step.
    pub fn window(&self) -> u32 {
        self.gamma + 1
    }
}

/// Routing decisions of one verification step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepActivations {
    /// `layers[l][t]` holds the expert ids chosen for token `t` at layer `l`.
    pub layers: Vec<Vec<Vec<u32>>>,
    pub accepted_count: u32,
}

impl StepActivations {
    pub fn tokens(&self, layer: usize) -> &[Vec<u32>] {
        &self.layers[layer]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    /// `None` only for a trace read from an empty file.
    pub meta: Option<TraceMeta>,
    pub steps: Vec<StepActivations>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_accepted(&self) -> u64 {
        self.steps.iter().map(|s| u64::from(s.accepted_count)).sum()
    }
}

/// Accepted tokens in one verification step: the leading run of accepted
/// drafts plus the token the verifier always contributes.
pub fn sample_accept_length<R: Rng + ?Sized>(alpha: f64, gamma: u32, rng: &mut R) -> u32 {
    let p = alpha.clamp(0.0, 1.0);
    let mut n = 1;
    for _ in 0..gamma {
        if !rng.random_bool(p) {
            break;
        }
        n += 1;
    }
    n
}

/// Per-expert counts of tokens in `tokens` that route to each expert.
pub fn activation_frequencies(tokens: &[Vec<u32>], n_experts: usize) -> Vec<u32> {
    let mut f = vec![0u32; n_experts];
    for tok in tokens {
        for &e in tok {
            f[e as usize] += 1;
        }
    }
    f
}

/// Stateful generator; steps must be produced in order.
#[derive(Debug, Clone)]
pub struct TraceGenerator {
    config: TraceConfig,
    rng: ChaCha8Rng,
    logits: Vec<Vec<f64>>,
    step: u64,
}

impl TraceGenerator {
    pub fn new(config: TraceConfig) -> Result<Self, TraceError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let logits = draw_logits(&config, &mut rng);
        Ok(Self {
            config,
            rng,
            logits,
            step: 0,
        })
    }

    pub fn config(&self) -> &TraceConfig {
        &self.config
    }

    /// Current latent logits of `layer`.
    pub fn logits(&self, layer: usize) -> &[f64] {
        &self.logits[layer]
    }

    pub fn generate_step(&mut self) -> StepActivations {
        let cfg = &self.config;
        if self.step > 0 {
            if cfg.shift_period > 0 && self.step.is_multiple_of(u64::from(cfg.shift_period)) {
                self.logits = draw_logits(cfg, &mut self.rng);
            } else if cfg.drift_scale > 0.0 {
                let walk = Normal::new(0.0, cfg.drift_scale).expect("validated scale");
                for layer in &mut self.logits {
                    for v in layer.iter_mut() {
                        *v += walk.sample(&mut self.rng);
                    }
                }
            }
        }
        self.step += 1;

        let gumbel = Gumbel::new(0.0, 1.0).expect("unit gumbel");
        let k = cfg.top_k as usize;
        let mut scratch = vec![0.0f64; cfg.n_experts as usize];
        let mut order: Vec<u32> = Vec::with_capacity(scratch.len());
        let mut layers = Vec::with_capacity(self.logits.len());
        for logits in &self.logits {
            let mut tokens = Vec::with_capacity(cfg.gamma as usize + 1);
            for _ in 0..=cfg.gamma {
                for (s, &l) in scratch.iter_mut().zip(logits) {
                    *s = if cfg.gumbel_scale > 0.0 {
                        l + cfg.gumbel_scale * gumbel.sample(&mut self.rng)
                    } else {
                        l
                    };
                }
                tokens.push(top_k(&scratch, k, &mut order));
            }
            layers.push(tokens);
        }
        let accepted_count = sample_accept_length(cfg.alpha, cfg.gamma, &mut self.rng);
        StepActivations {
            layers,
            accepted_count,
        }
    }
}

fn draw_logits(cfg: &TraceConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let dist = Normal::new(0.0, cfg.logit_scale).expect("validated scale");
    (0..cfg.n_layers)
        .map(|_| (0..cfg.n_experts).map(|_| dist.sample(rng)).collect())
        .collect()
}

/// Indices of the `k` largest values, ascending by id. Ties go to the lower id.
fn top_k(values: &[f64], k: usize, order: &mut Vec<u32>) -> Vec<u32> {
    order.clear();
    order.extend(0..values.len() as u32);
    let cmp = |a: &u32, b: &u32| {
        values[*b as usize]
            .total_cmp(&values[*a as usize])
            .then(a.cmp(b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    let mut out = order[..k].to_vec();
    out.sort_unstable();
    out
}

/// Generates `n_steps` steps from `config`.
pub fn generate(config: &TraceConfig, n_steps: usize) -> Result<Trace, TraceError> {
    let mut g = TraceGenerator::new(config.clone())?;
    let steps = (0..n_steps).map(|_| g.generate_step()).collect();
    Ok(Trace {
        meta: Some(config.meta()),
        steps,
    })
}

pub fn write_trace<W: Write>(trace: &Trace, out: W) -> Result<(), TraceError> {
    let mut out = BufWriter::new(out);
    let Some(meta) = trace.meta else {
        return Ok(());
    };
    writeln!(
        out,
        "{HEADER_TAG} layers={} experts={} k={} gamma={}",
        meta.n_layers, meta.n_experts, meta.top_k, meta.gamma
    )?;
    let mut line = String::new();
    for (si, step) in trace.steps.iter().enumerate() {
        for (li, tokens) in step.layers.iter().enumerate() {
            line.clear();
            write!(line, "{si} {li} {}", step.accepted_count).unwrap();
            for (ti, tok) in tokens.iter().enumerate() {
                write!(line, " {ti}:").unwrap();
                for (j, e) in tok.iter().enumerate() {
                    if j > 0 {
                        line.push(',');
                    }
                    write!(line, "{e}").unwrap();
                }
            }
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_trace_file(trace: &Trace, path: &Path) -> Result<(), TraceError> {
    let f = File::create(path).map_err(|source| TraceError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    write_trace(trace, f)
}

pub fn read_trace_file(path: &Path) -> Result<Trace, TraceError> {
    let f = File::open(path).map_err(|source| TraceError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    read_trace(BufReader::new(f))
}

fn parse_header(line: &str, no: usize) -> Result<TraceMeta, TraceError> {
    let rest = line
        .strip_prefix(HEADER_TAG)
        .ok_or_else(|| parse_err(no, "missing '#moetrace v1' header"))?;
    let mut fields = [None; 4];
    for kv in rest.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| parse_err(no, format!("bad header field '{kv}'")))?;
        let idx = match k {
            "layers" => 0,
            "experts" => 1,
            "k" => 2,
            "gamma" => 3,
            _ => return Err(parse_err(no, format!("unknown header field '{k}'"))),
        };
        let v: u32 = v
            .parse()
            .map_err(|_| parse_err(no, format!("bad value for '{k}'")))?;
        fields[idx] = Some(v);
    }
    let get = |i: usize, name: &str| fields[i].ok_or_else(|| parse_err(no, format!("header lacks '{name}'")));
    let meta = TraceMeta {
        n_layers: get(0, "layers")?,
        n_experts: get(1, "experts")?,
        top_k: get(2, "k")?,
        gamma: get(3, "gamma")?,
    };
    if meta.n_layers == 0 || meta.top_k == 0 || meta.top_k > meta.n_experts {
        return Err(parse_err(no, "inconsistent header shape"));
    }
    Ok(meta)
}

fn parse_num(tok: &str, no: usize, what: &str) -> Result<u32, TraceError> {
    tok.parse()
        .map_err(|_| parse_err(no, format!("bad {what} '{tok}'")))
}

/// Parses a trace. Every record is checked against the header shape.
pub fn read_trace<R: BufRead>(input: R) -> Result<Trace, TraceError> {
    let mut meta: Option<TraceMeta> = None;
    let mut steps: Vec<StepActivations> = Vec::new();
    let mut next = (0usize, 0usize);
    for (i, line) in input.lines().enumerate() {
        let no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(m) = meta else {
            meta = Some(parse_header(&line, no)?);
            continue;
        };
        let mut parts = line.split_whitespace();
        let mut field = |what: &str| {
            parts
                .next()
                .ok_or_else(|| parse_err(no, format!("missing {what}")))
                .and_then(|t| parse_num(t, no, what))
        };
        let step = field("step")? as usize;
        let layer = field("layer")? as usize;
        let accepted = field("accepted count")?;
        if (step, layer) != next {
            return Err(parse_err(
                no,
                format!("expected step {} layer {}, found step {step} layer {layer}", next.0, next.1),
            ));
        }
        if accepted == 0 || accepted > m.window() {
            return Err(parse_err(no, format!("accepted count {accepted} outside [1, {}]", m.window())));
        }
        let mut tokens = Vec::with_capacity(m.window() as usize);
        for (ti, tok) in parts.enumerate() {
            let (idx, ids) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(no, format!("bad token entry '{tok}'")))?;
            if parse_num(idx, no, "token index")? as usize != ti {
                return Err(parse_err(no, format!("token index {idx} out of order")));
            }
            let ids: Vec<u32> = ids
                .split(',')
                .map(|e| parse_num(e, no, "expert id"))
                .collect::<Result<_, _>>()?;
            if ids.len() != m.top_k as usize {
                return Err(parse_err(no, format!("token {ti} has {} experts, expected {}", ids.len(), m.top_k)));
            }
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != ids.len() || sorted.last().is_some_and(|&e| e >= m.n_experts) {
                return Err(parse_err(no, format!("token {ti} has repeated or out-of-range experts")));
            }
            tokens.push(ids);
        }
        if tokens.len() != m.window() as usize {
            return Err(parse_err(no, format!("{} tokens, expected {}", tokens.len(), m.window())));
        }
        if layer == 0 {
            steps.push(StepActivations {
                layers: Vec::with_capacity(m.n_layers as usize),
                accepted_count: accepted,
            });
        } else if steps[step].accepted_count != accepted {
            return Err(parse_err(no, "accepted count differs across layers of a step"));
        }
        steps[step].layers.push(tokens);
        next = if layer + 1 == m.n_layers as usize {
            (step + 1, 0)
        } else {
            (step, layer + 1)
        };
    }
    if next.1 != 0 {
        return Err(parse_err(0, format!("step {} ends after {} of its layers", next.0, next.1)));
    }
    Ok(Trace { meta, steps })
}
