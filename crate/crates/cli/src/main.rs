//! `moesim`: run scheduling experiments, sweep them, generate traces and
//! evaluate the speculative-decoding formulas.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use moesim::analytics::{
    demand_entropy, expected_tokens, omega_limit, reuse_breakeven, safety_margin, snr_gain,
    speedup_factor, DemandDistribution, ReuseCoefficients, SdParams,
};
use moesim::metrics::{emit, summarize, RunSummary};
use moesim::sim::run_experiment;
use moesim::trace::write_trace_file;
use rayon::prelude::*;

use config::Config;

#[derive(Parser)]
#[command(name = "moesim", version, about = "Offloaded MoE scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; built-in defaults are used when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set scheduler.cache_ratio=0.2`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct OutArgs {
    /// Output directory; takes precedence over `run.out_dir`.
    #[arg(long, env = "MOESIM_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metrics.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Shorthand for `--set scheduler.policy=...`.
        #[arg(long)]
        policy: Option<String>,
    },
    /// Run one experiment per point of an axis and write one row per point.
    Sweep {
        axis: Axis,
        /// Inclusive range `lo..hi`.
        range: String,
        #[arg(long)]
        step: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Write the configured synthetic workload as a trace file.
    GenTrace {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
        /// Number of steps; defaults to `workload.steps` or the token budget.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate an analytic quantity.
    Calc {
        #[command(subcommand)]
        what: Calc,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    #[value(name = "cache_ratio", alias = "cache-ratio")]
    CacheRatio,
    Gamma,
    #[value(name = "max_score", alias = "max-score")]
    MaxScore,
    Tokens,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::CacheRatio => "cache_ratio",
            Axis::Gamma => "gamma",
            Axis::MaxScore => "max_score",
            Axis::Tokens => "tokens",
        }
    }

    fn apply(self, cfg: &mut Config, v: f64) -> Result<()> {
        let int = || -> Result<u64> {
            if v < 0.0 || v.fract() != 0.0 {
                bail!("{} takes whole numbers, got {v}", self.name());
            }
            Ok(v as u64)
        };
        match self {
            Axis::CacheRatio => cfg.scheduler.cache_ratio = v,
            Axis::Gamma => {
                if cfg.workload.trace.is_some() {
                    bail!("a gamma sweep needs a generated workload, not a trace file");
                }
                cfg.workload.gamma = u32::try_from(int()?)?;
            }
            Axis::MaxScore => cfg.scheduler.max_score = u8::try_from(int()?)?,
            Axis::Tokens => cfg.run.token_budget = int()?,
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Calc {
    /// Expected tokens per verification step.
    Omega {
        #[arg(long)]
        gamma: u32,
        #[arg(long)]
        alpha: f64,
    },
    /// Wall-clock speedup over plain decoding.
    Speedup {
        #[arg(long)]
        gamma: u32,
        #[arg(long)]
        alpha: f64,
        /// Draft to verify cost ratio.
        #[arg(long)]
        cost_ratio: f64,
    },
    /// Expected tokens per step as the draft length grows without bound.
    Limit {
        #[arg(long)]
        alpha: f64,
    },
    /// Whether expert reuse amortizes loading at this draft length.
    Breakeven {
        #[arg(long)]
        gamma: u32,
        #[arg(long)]
        alpha: f64,
        /// De-duplication ratio a/b.
        #[arg(long)]
        ratio: f64,
    },
    /// Signal-to-noise gain of a verification window.
    Snr {
        #[arg(long)]
        window: u32,
    },
    /// Entropy in bits of the per-window activation count.
    Entropy {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        window: u32,
    },
    /// Distance between a true frequency and the threshold.
    Margin {
        #[arg(long)]
        freq: u32,
        #[arg(long)]
        threshold: f64,
    },
}

fn calc(what: &Calc) -> Result<String> {
    let v = match *what {
        Calc::Omega { gamma, alpha } => expected_tokens(&SdParams::zero_cost(gamma, alpha)?),
        Calc::Speedup {
            gamma,
            alpha,
            cost_ratio,
        } => speedup_factor(&SdParams::new(gamma, alpha, cost_ratio)?),
        Calc::Limit { alpha } => omega_limit(alpha)?,
        Calc::Breakeven { gamma, alpha, ratio } => {
            let ok = reuse_breakeven(&SdParams::zero_cost(gamma, alpha)?, &ReuseCoefficients::from_ratio(ratio)?);
            return Ok(ok.to_string());
        }
        Calc::Snr { window } => snr_gain(window)?,
        Calc::Entropy { p, window } => demand_entropy(&DemandDistribution::new(p, window)?),
        Calc::Margin { freq, threshold } => safety_margin(freq, threshold),
    };
    Ok(format!("{v:.8}"))
}

fn out_dir(cfg: &Config, out: &OutArgs) -> PathBuf {
    out.out_dir.clone().unwrap_or_else(|| cfg.run.out_dir.clone())
}

fn prepare_out_dir(dir: &Path, cfg: &Config) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let echo = dir.join("effective_config.toml");
    std::fs::write(&echo, cfg.to_toml()?).with_context(|| format!("cannot write {}", echo.display()))?;
    Ok(())
}

fn run_one(cfg: &Config) -> Result<RunSummary> {
    let trace = cfg.trace()?;
    let sim = cfg.sim_config(&trace)?;
    let out = run_experiment(&sim, &trace)?;
    let name = sim.policy.to_string();
    Ok(summarize(&name, &out.reports)?)
}

fn print_row(r: &RunSummary) {
    let axis = match r.axis_value {
        Some(v) => format!("{}={v} ", r.axis),
        None => String::new(),
    };
    println!(
        "{axis}{}: {:.3} tok/s, {} tokens in {:.4} s, hit rate {:.3}, bubble {:.3}, accuracy {:.3}",
        r.policy, r.tps, r.total_tokens, r.latency_s, r.hit_rate, r.bubble_ratio, r.mean_accuracy
    );
}

fn parse_range(range: &str, step: f64) -> Result<Vec<f64>> {
    let (lo, hi) = range
        .split_once("..")
        .with_context(|| format!("range '{range}' is not lo..hi"))?;
    let lo: f64 = lo.trim().parse().with_context(|| format!("bad range start '{lo}'"))?;
    let hi: f64 = hi.trim().parse().with_context(|| format!("bad range end '{hi}'"))?;
    if step.is_nan() || step <= 0.0 || !lo.is_finite() || !hi.is_finite() || hi < lo {
        bail!("need lo <= hi and a positive step");
    }
    let n = ((hi - lo) / step + 1e-9).floor() as u64 + 1;
    // Round away float noise so 0.09 + 3 * 0.02 reads as 0.15.
    Ok((0..n)
        .map(|i| ((lo + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { cfg, out, policy } => {
            let mut sets = cfg.overrides.clone();
            if let Some(p) = policy {
                sets.push(format!("scheduler.policy={p}"));
            }
            let conf = Config::load(cfg.config.as_deref(), &sets)?;
            let dir = out_dir(&conf, &out);
            let row = run_one(&conf)?;
            prepare_out_dir(&dir, &conf)?;
            let path = dir.join(format!("metrics.{}", conf.run.format.extension()));
            emit(std::slice::from_ref(&row), conf.run.format, &path)?;
            print_row(&row);
            println!("wrote {}", path.display());
        }
        Command::Sweep {
            axis,
            range,
            step,
            cfg,
            out,
        } => {
            let conf = Config::load(cfg.config.as_deref(), &cfg.overrides)?;
            let values = parse_range(&range, step)?;
            let dir = out_dir(&conf, &out);
            let points = values
                .iter()
                .map(|&v| {
                    let mut c = conf.clone();
                    axis.apply(&mut c, v)?;
                    Ok((v, c))
                })
                .collect::<Result<Vec<_>>>()?;
            // Points are independent; collect keeps axis order.
            let rows = points
                .par_iter()
                .map(|(v, c)| Ok(run_one(c)?.with_axis(axis.name(), *v)))
                .collect::<Result<Vec<RunSummary>>>()?;
            prepare_out_dir(&dir, &conf)?;
            let fmt = conf.run.format;
            let point_dir = dir.join("points");
            std::fs::create_dir_all(&point_dir)
                .with_context(|| format!("cannot create {}", point_dir.display()))?;
            for (i, r) in rows.iter().enumerate() {
                let p = point_dir.join(format!("{}_{i:03}.{}", axis.name(), fmt.extension()));
                emit(std::slice::from_ref(r), fmt, &p)?;
            }
            let path = dir.join(format!("sweep_{}.{}", axis.name(), fmt.extension()));
            emit(&rows, fmt, &path)?;
            for r in &rows {
                print_row(r);
            }
            println!("wrote {}", path.display());
        }
        Command::GenTrace { cfg, out, steps } => {
            let mut conf = Config::load(cfg.config.as_deref(), &cfg.overrides)?;
            conf.workload.trace = None;
            if let Some(s) = steps {
                conf.workload.steps = Some(s);
            }
            let trace = conf.trace()?;
            write_trace_file(&trace, &out)?;
            println!("wrote {} steps to {}", trace.steps.len(), out.display());
        }
        Command::Calc { what } => println!("{}", calc(&what)?),
    }
    Ok(())
}
