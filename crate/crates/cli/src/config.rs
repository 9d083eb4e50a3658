//! Experiment configuration: a TOML file with `[workload]`, `[profile]`,
//! `[scheduler]` and `[run]` sections, plus `section.key=value` overrides.
//! Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use moesim::balancer::HardwareProfile;
use moesim::metrics::Format;
use moesim::policy::PolicyKind;
use moesim::sim::SimConfig;
use moesim::trace::{generate, read_trace_file, Trace, TraceConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Workload {
    pub n_layers: u32,
    pub n_experts: u32,
    pub top_k: u32,
    pub gamma: u32,
    pub alpha: f64,
    pub drift_scale: f64,
    pub shift_period: u32,
    pub seed: u64,
    pub logit_scale: f64,
    pub gumbel_scale: f64,
    /// Steps to generate; defaults to the token budget, which always
    /// suffices since every step yields at least one token.
    pub steps: Option<u64>,
    /// Replay this trace file instead of generating one. The file's header
    /// then fixes the model shape and draft length.
    pub trace: Option<PathBuf>,
}

impl Default for Workload {
    fn default() -> Self {
        let t = TraceConfig::default();
        Self {
            n_layers: t.n_layers,
            n_experts: t.n_experts,
            top_k: t.top_k,
            gamma: t.gamma,
            alpha: t.alpha,
            drift_scale: t.drift_scale,
            shift_period: t.shift_period,
            seed: t.seed,
            logit_scale: t.logit_scale,
            gumbel_scale: t.gumbel_scale,
            steps: None,
            trace: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Profile {
    /// Seconds per token-expert on the CPU.
    pub t_cpu_unit: f64,
    /// Seconds per expert pass on the GPU.
    pub t_gpu_unit: f64,
    /// Seconds to move one expert over the host link.
    pub t_io_unit: f64,
    /// Seconds per draft token.
    pub t_draft_unit: f64,
    pub expert_bytes: u64,
    pub vram_capacity_bytes: u64,
}

impl Default for Profile {
    fn default() -> Self {
        let p = HardwareProfile::pcie4_default();
        Self {
            t_cpu_unit: p.t_cpu_unit,
            t_gpu_unit: p.t_gpu_unit,
            t_io_unit: p.t_io_unit,
            t_draft_unit: p.t_draft_unit,
            expert_bytes: p.expert_bytes,
            vram_capacity_bytes: p.vram_capacity_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scheduler {
    pub policy: PolicyKind,
    pub max_score: u8,
    pub lambda: f64,
    pub cache_ratio: f64,
    pub ratio_smoothing: f64,
    pub warmup_steps: u32,
}

impl Default for Scheduler {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            policy: s.policy,
            max_score: s.max_score,
            lambda: s.lambda,
            cache_ratio: s.cache_ratio,
            ratio_smoothing: s.ratio_smoothing,
            warmup_steps: s.warmup_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub token_budget: u64,
    pub out_dir: PathBuf,
    pub format: Format,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            token_budget: SimConfig::default().token_budget,
            out_dir: PathBuf::from("moesim-out"),
            format: Format::Csv,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub workload: Workload,
    pub profile: Profile,
    pub scheduler: Scheduler,
    pub run: RunSection,
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string so `scheduler.policy=fixed_tau:2` works unquoted.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override '{assignment}' is not key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
        bail!("override key '{key}' must look like section.key");
    }
    let section = table
        .entry(parts[0])
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let Some(section) = section.as_table_mut() else {
        bail!("'{}' is not a section", parts[0]);
    };
    section.insert(parts[1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Config {
    /// Defaults, then the file (if any), then each override in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text)
                    .with_context(|| format!("cannot parse config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        cfg.trace_config().validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn trace_config(&self) -> TraceConfig {
        let w = &self.workload;
        TraceConfig {
            n_layers: w.n_layers,
            n_experts: w.n_experts,
            top_k: w.top_k,
            gamma: w.gamma,
            alpha: w.alpha,
            drift_scale: w.drift_scale,
            shift_period: w.shift_period,
            seed: w.seed,
            logit_scale: w.logit_scale,
            gumbel_scale: w.gumbel_scale,
        }
    }

    pub fn steps(&self) -> u64 {
        self.workload.steps.unwrap_or(self.run.token_budget).max(1)
    }

    /// Loads the configured trace file or generates the synthetic workload.
    pub fn trace(&self) -> Result<Trace> {
        match &self.workload.trace {
            Some(path) => Ok(read_trace_file(path)?),
            None => Ok(generate(&self.trace_config(), self.steps() as usize)?),
        }
    }

    /// Simulation settings; the layer count comes from `trace`.
    pub fn sim_config(&self, trace: &Trace) -> Result<SimConfig> {
        let meta = trace.meta.context("trace has no shape header")?;
        let p = &self.profile;
        let s = &self.scheduler;
        Ok(SimConfig {
            profile: HardwareProfile {
                t_cpu_unit: p.t_cpu_unit,
                t_gpu_unit: p.t_gpu_unit,
                t_io_unit: p.t_io_unit,
                t_draft_unit: p.t_draft_unit,
                expert_bytes: p.expert_bytes,
                n_layers: meta.n_layers,
                vram_capacity_bytes: p.vram_capacity_bytes,
            },
            policy: s.policy,
            max_score: s.max_score,
            lambda: s.lambda,
            cache_ratio: s.cache_ratio,
            token_budget: self.run.token_budget,
            ratio_smoothing: s.ratio_smoothing,
            warmup_steps: s.warmup_steps,
        })
    }
}
