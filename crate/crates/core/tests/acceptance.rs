//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary exits non-zero if any criterion fails.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use moesim::analytics::{
    demand_entropy, expected_tokens, reuse_breakeven, snr_gain, DemandDistribution,
    ReuseCoefficients, SdParams, MEASURED_REUSE_ALPHA, MEASURED_REUSE_RATIOS,
};
use moesim::balancer::{solve_threshold, BalancerInput, HardwareProfile, RatioEstimates};
use moesim::engine::{drain_prefetch, ExpertKey, IoKind, PrefetchQueues, ResidencyPool};
use moesim::estimator::{EstimatorConfig, LayerEstimator};
use moesim::metrics::{emit, summarize, Format};
use moesim::policy::PolicyKind;
use moesim::sim::{replay_time_ns, run_experiment, timeline_is_contiguous, SimConfig, SimOutput};
use moesim::trace::{generate, Trace, TraceConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let took = started.elapsed();
    if took > limit {
        Err(format!("took {took:?}, limit {limit:?}"))
    } else {
        Ok(())
    }
}

fn c1_omega_monte_carlo() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trials = 1_000_000u32;
    let mut worst = 0.0f64;
    for gamma in [1u32, 2, 4, 8, 16] {
        for alpha in [0.1, 0.5, 0.8, 0.95] {
            let mut total = 0u64;
            for _ in 0..trials {
                let mut n = 1u64;
                for _ in 0..gamma {
                    if rng.random::<f64>() < alpha {
                        n += 1;
                    } else {
                        break;
                    }
                }
                total += n;
            }
            let mc = total as f64 / f64::from(trials);
            let omega = expected_tokens(&SdParams::zero_cost(gamma, alpha).unwrap());
            let rel = (mc - omega).abs() / omega;
            worst = worst.max(rel);
            if rel >= 0.01 {
                return Err(format!("gamma {gamma} alpha {alpha}: omega {omega} vs mc {mc}"));
            }
        }
    }
    within(Duration::from_secs(10), t0)?;
    Ok(format!("worst relative error {worst:.2e} in {:?}", t0.elapsed()))
}

fn c2_breakeven_table() -> Outcome {
    let mut got = Vec::new();
    for &(gamma, ratio) in MEASURED_REUSE_RATIOS.iter().filter(|(g, _)| *g >= 3) {
        let p = SdParams::zero_cost(gamma, MEASURED_REUSE_ALPHA).unwrap();
        let ok = reuse_breakeven(&p, &ReuseCoefficients::from_ratio(ratio).unwrap());
        let want = (3..=8).contains(&gamma);
        if ok != want {
            return Err(format!("gamma {gamma}: got {ok}, want {want}"));
        }
        got.push(gamma);
    }
    if got != (3..=12).collect::<Vec<_>>() {
        return Err(format!("table rows {got:?}"));
    }
    Ok("true for 3..=8, false for 9..=12".into())
}

/// Direct enumeration over every threshold with the same cost expressions.
fn brute_force(input: &BalancerInput<'_>) -> Option<(u8, f64)> {
    let mut best: Option<(u8, f64)> = None;
    for tau in 1..=input.max_score {
        let c = input.ratios.cpu(tau)
            * f64::from(input.window)
            * f64::from(input.top_k)
            * input.profile.t_cpu_unit;
        let g = input.ratios.gpu(tau) * f64::from(input.b_est) * input.profile.t_gpu_unit;
        let n = input
            .scores
            .iter()
            .zip(input.resident)
            .filter(|(&s, &r)| s >= tau && !r)
            .count() as u64;
        let credit = f64::from(input.gamma) * input.profile.t_draft_unit / f64::from(input.profile.n_layers);
        let io_ok = input.profile.t_io_unit * n as f64 <= c.max(g) + credit;
        let mem_ok = u128::from(input.profile.expert_bytes) * u128::from(n) <= u128::from(input.vram_left_bytes);
        if io_ok && mem_ok {
            let obj = (c - g).abs();
            if best.is_none_or(|(_, o)| obj < o) {
                best = Some((tau, obj));
            }
        }
    }
    best
}

fn monotone_ratios(rng: &mut ChaCha8Rng, k: u8) -> RatioEstimates {
    let mut cpu: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
    let mut gpu: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
    cpu.sort_by(f64::total_cmp);
    gpu.sort_by(|a, b| b.total_cmp(a));
    RatioEstimates::new(cpu, gpu).unwrap()
}

fn c3_solver_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut fallbacks, mut feasible) = (0, 0);
    for i in 0..1000 {
        let k: u8 = rng.random_range(2..=8);
        let n = rng.random_range(8..=128usize);
        let scores: Vec<u8> = (0..n).map(|_| rng.random_range(0..=k)).collect();
        let resident: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let ratios = monotone_ratios(&mut rng, k);
        let gamma = rng.random_range(1..=16u32);
        let top_k = rng.random_range(1..=8u32);
        let b_est = rng.random_range(1..=(gamma + 1) * top_k);
        let mut profile = HardwareProfile::pcie4_default();
        profile.t_cpu_unit = rng.random_range(1e-6..1e-4);
        profile.t_gpu_unit = rng.random_range(1e-6..1e-4);
        profile.t_draft_unit = rng.random_range(1e-5..5e-3);
        profile.n_layers = rng.random_range(1..=64);
        // Scale the transfer cost so roughly `n_hot / tightness` loads fit.
        let scale = (gamma + 1) as f64 * f64::from(top_k) * profile.t_cpu_unit;
        let n_hot = scores.iter().filter(|&&s| s >= 1).count().max(1) as f64;
        profile.t_io_unit = scale * rng.random_range(0.05..3.0) / n_hot;
        let vram_left = profile.expert_bytes * rng.random_range(0..=n as u64);
        let input = BalancerInput {
            scores: &scores,
            resident: &resident,
            gamma,
            window: gamma + 1,
            top_k,
            b_est,
            ratios: &ratios,
            profile: &profile,
            vram_left_bytes: vram_left,
            max_score: k,
        };
        let d = solve_threshold(&input).map_err(|e| format!("instance {i}: {e}"))?;
        match brute_force(&input) {
            None => {
                fallbacks += 1;
                if !d.fallback || d.tau != k {
                    return Err(format!("instance {i}: expected fallback, got tau {}", d.tau));
                }
            }
            Some((tau, obj)) => {
                feasible += 1;
                if d.fallback || d.objective() != obj {
                    return Err(format!(
                        "instance {i}: solver tau {} objective {} vs brute tau {tau} objective {obj}",
                        d.tau,
                        d.objective()
                    ));
                }
            }
        }
    }
    within(Duration::from_secs(5), t0)?;
    Ok(format!("{feasible} feasible, {fallbacks} fallback, {:?}", t0.elapsed()))
}

fn c4_estimator_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0u64;
    for run in 0..10_000 {
        let gamma = rng.random_range(1..=16u32);
        let k = rng.random_range(1..=gamma.min(8)) as u8;
        let lambda = if run % 4 == 0 { 0.0 } else { rng.random::<f64>() };
        let n = rng.random_range(1..=16usize);
        let cfg = EstimatorConfig::new(k, lambda, gamma).unwrap();
        let mut est = LayerEstimator::new(n, cfg).unwrap();
        let initial: Vec<(u32, u32)> = est.states().iter().map(|s| (s.up_boundary, s.down_boundary)).collect();
        let steps = rng.random_range(1..=40);
        for step in 0..steps {
            let before = est.states().to_vec();
            let quiet = rng.random_bool(0.3);
            let freqs: Vec<u32> = before
                .iter()
                .map(|s| {
                    if quiet {
                        // Stay strictly inside both boundaries.
                        let lo = i64::from(s.last_freq) - i64::from(s.down_boundary) + 1;
                        let hi = i64::from(s.last_freq) + i64::from(s.up_boundary) - 1;
                        rng.random_range(lo.max(0)..=hi.min(i64::from(gamma + 1))) as u32
                    } else {
                        rng.random_range(0..=gamma + 1)
                    }
                })
                .collect();
            est.observe_step(&freqs).unwrap();
            for (e, (old, new)) in before.iter().zip(est.states()).enumerate() {
                checked += 1;
                if new.score > k {
                    return Err(format!("run {run} step {step}: score {} above {k}", new.score));
                }
                if old.score.abs_diff(new.score) > 1 {
                    return Err(format!("run {run} step {step}: jump {} -> {}", old.score, new.score));
                }
                if quiet && old.score != new.score {
                    return Err(format!("run {run} step {step} expert {e}: sub-boundary change"));
                }
                if lambda == 0.0 && (new.up_boundary, new.down_boundary) != initial[e] {
                    return Err(format!("run {run}: boundaries moved with lambda 0"));
                }
            }
        }
    }
    Ok(format!("{checked} expert-steps, 0 violations"))
}

fn c5_engine_invariants() -> Outcome {
    const K: u8 = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let io = 100u64;
    let mut ops = 0u64;
    for run in 0..2000 {
        let cap = rng.random_range(1..=10u64);
        let mut pool = ResidencyPool::new(2, K, 7, cap * 7);
        let mut q = PrefetchQueues::new(K);
        let mut frozen: HashSet<ExpertKey> = HashSet::new();
        for _ in 0..200 {
            ops += 1;
            let key = ExpertKey::new(rng.random_range(0..2), rng.random_range(0..16));
            match rng.random_range(0..6) {
                0 => q.enqueue(key, rng.random_range(1..=K)).unwrap(),
                1 => {
                    let tau = rng.random_range(1..=K);
                    let budget = rng.random_range(0..8) * io;
                    let ev = drain_prefetch(&mut q, tau, budget, io, &mut pool, 0);
                    let levels: Vec<u8> = ev.iter().filter(|e| e.kind == IoKind::Load).map(|e| e.level).collect();
                    if levels.windows(2).any(|w| w[0] < w[1]) || levels.iter().any(|&l| l < tau) {
                        return Err(format!("run {run}: prefetch order {levels:?} at tau {tau}"));
                    }
                    if ev.iter().any(|e| e.kind == IoKind::Evict && frozen.contains(&e.key())) {
                        return Err(format!("run {run}: frozen expert reclaimed"));
                    }
                }
                2 => {
                    let tau = rng.random_range(1..=K);
                    let layer = key.layer;
                    let ev = pool.apply_eviction(layer, tau, 0);
                    if ev.iter().any(|e| frozen.contains(&e.key())) {
                        return Err(format!("run {run}: frozen expert evicted"));
                    }
                    if let Some((e, s)) = pool.residents(layer).find(|&(_, s)| s < tau) {
                        return Err(format!("run {run}: expert {e} kept at score {s} below {tau}"));
                    }
                }
                3 => {
                    if pool.freeze(key).is_ok() {
                        frozen.insert(key);
                    }
                }
                4 => {
                    if pool.thaw_and_recycle(key).is_ok() {
                        frozen.remove(&key);
                    }
                }
                _ => {
                    pool.retag(key, rng.random_range(0..=K));
                }
            }
            if pool.total_bytes() > pool.capacity_bytes() {
                return Err(format!("run {run}: capacity exceeded"));
            }
            if frozen.iter().any(|k| !pool.is_frozen(k)) {
                return Err(format!("run {run}: frozen tag lost"));
            }
        }
    }
    Ok(format!("{ops} operations, 0 violations"))
}

const POLICIES: [&str; 9] = [
    "moe_spac",
    "lru_cache",
    "on_demand_gpu",
    "ar_mode",
    "static_split",
    "fixed_tau:2",
    "fixed_boundaries:3,1",
    "binary_utility",
    "fifo_evictor",
];

fn default_trace() -> Trace {
    generate(&TraceConfig::default(), 200).unwrap()
}

fn tps(out: &SimOutput) -> f64 {
    out.total_tokens() as f64 * 1e9 / out.total_time_ns() as f64
}

fn c6_conservation(runs: &[SimOutput], trace: &Trace) -> Outcome {
    let n = trace.meta.unwrap().n_experts as usize;
    for out in runs {
        let name = out.policy.to_string();
        if replay_time_ns(&out.events) != out.total_time_ns() || !timeline_is_contiguous(&out.events) {
            return Err(format!("{name}: event log does not reproduce the total time"));
        }
        // Recount activations straight from the trace.
        let ar = out.policy.is_autoregressive();
        let mut want = 0u64;
        let mut step = 0usize;
        let mut tok = 0usize;
        for _ in &out.reports {
            let s = &trace.steps[step];
            let range = if ar { tok..tok + 1 } else { 0..s.layers[0].len() };
            for layer in &s.layers {
                let f = moesim::trace::activation_frequencies(&layer[range.clone()], n);
                want += f.iter().map(|&x| u64::from(x)).sum::<u64>();
            }
            if ar {
                tok += 1;
                if tok >= s.accepted_count as usize {
                    tok = 0;
                    step += 1;
                }
            } else {
                step += 1;
            }
        }
        let got: u64 = out
            .reports
            .iter()
            .flat_map(|r| &r.layers)
            .map(|l| l.hits + l.misses)
            .sum();
        if got != want {
            return Err(format!("{name}: hits + misses {got}, activations {want}"));
        }
    }
    Ok(format!("{} runs exact", runs.len()))
}

fn c7_policy_ordering(runs: &[SimOutput], elapsed: Duration) -> Outcome {
    let get = |p: &str| {
        let kind: PolicyKind = p.parse().unwrap();
        tps(runs.iter().find(|o| o.policy == kind).unwrap())
    };
    let (spac, lru, od, ar) = (get("moe_spac"), get("lru_cache"), get("on_demand_gpu"), get("ar_mode"));
    let report = format!(
        "moe_spac {spac:.2}, lru_cache {lru:.2}, on_demand_gpu {od:.2}, ar_mode {ar:.2} tok/s ({:.2}x ar)",
        spac / ar
    );
    let mut failed = Vec::new();
    if spac <= lru {
        failed.push("moe_spac > lru_cache");
    }
    if lru <= od {
        failed.push("lru_cache > on_demand_gpu");
    }
    if spac < 1.5 * ar {
        failed.push("moe_spac >= 1.5 x ar_mode");
    }
    if elapsed > Duration::from_secs(60) {
        failed.push("runtime < 60 s");
    }
    if failed.is_empty() {
        Ok(report)
    } else {
        Err(format!("{report}; violated: {}", failed.join(", ")))
    }
}

fn c8_accuracy() -> Outcome {
    let tc = TraceConfig {
        drift_scale: 0.005,
        gumbel_scale: 0.8,
        seed: 8,
        ..TraceConfig::default()
    };
    let trace = generate(&tc, 300).unwrap();
    let cfg = SimConfig {
        token_budget: 1200,
        ..SimConfig::default()
    };
    let out = run_experiment(&cfg, &trace).map_err(|e| e.to_string())?;
    let series: Vec<f64> = out.reports.iter().map(|r| r.accuracy()).collect();
    if series.len() <= 100 {
        return Err(format!("only {} steps", series.len()));
    }
    let steady = &series[100..];
    let mean = steady.iter().sum::<f64>() / steady.len() as f64;
    let first = series[0];
    let msg = format!("initial {first:.3}, steady mean {mean:.3} over {} steps", steady.len());
    if mean >= 0.75 && mean > first {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c9_snr_entropy() -> Outcome {
    // Squares of correctly rounded roots are exact for perfect squares and
    // within one rounding of the window otherwise.
    let mut exact = 0;
    for w in 1..=1024u32 {
        let g = snr_gain(w).unwrap();
        let wf = f64::from(w);
        if g != wf.sqrt() {
            return Err(format!("snr_gain({w}) = {g} is not the rounded root"));
        }
        let r = wf.sqrt().round();
        if r * r == wf {
            exact += 1;
            if g * g != wf {
                return Err(format!("snr_gain({w})^2 = {}", g * g));
            }
        } else if (g * g - wf).abs() > wf * f64::EPSILON {
            return Err(format!("snr_gain({w})^2 = {}", g * g));
        }
    }
    let mut checks = 0;
    for i in 1..=99 {
        let p = f64::from(i) / 100.0;
        let mut prev = -1.0;
        for w in 1..=32 {
            let h = demand_entropy(&DemandDistribution::new(p, w).unwrap());
            if h < prev {
                return Err(format!("entropy fell at p {p} window {w}"));
            }
            prev = h;
            checks += 1;
        }
    }
    Ok(format!("{exact} square windows exact, {checks} entropy points monotone"))
}

fn c10_determinism(trace: &Trace) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for attempt in 0..2 {
        let regenerated = default_trace();
        if regenerated.steps != trace.steps {
            return Err("trace generation is not reproducible".into());
        }
        let mut rows = Vec::new();
        for p in POLICIES {
            let cfg = SimConfig {
                policy: p.parse().unwrap(),
                ..SimConfig::default()
            };
            let out = run_experiment(&cfg, &regenerated).map_err(|e| e.to_string())?;
            rows.push(summarize(p, &out.reports).map_err(|e| e.to_string())?);
        }
        for f in [Format::Csv, Format::Jsonl] {
            let path = dir.path().join(format!("run{attempt}.{}", f.extension()));
            emit(&rows, f, &path).map_err(|e| e.to_string())?;
            files.push(std::fs::read(&path).map_err(|e| e.to_string())?);
        }
    }
    if files[0] == files[2] && files[1] == files[3] {
        Ok(format!("{} policies, csv and jsonl byte-identical", POLICIES.len()))
    } else {
        Err("metrics files differ between runs".into())
    }
}

fn main() {
    let trace = default_trace();
    let t0 = Instant::now();
    let runs: Vec<SimOutput> = ["moe_spac", "lru_cache", "on_demand_gpu", "ar_mode"]
        .iter()
        .map(|p| {
            let cfg = SimConfig {
                policy: p.parse().unwrap(),
                ..SimConfig::default()
            };
            run_experiment(&cfg, &trace).unwrap()
        })
        .collect();
    let c7_time = t0.elapsed();
    let mut all_runs = runs.clone();
    for p in &POLICIES[4..] {
        let cfg = SimConfig {
            policy: p.parse().unwrap(),
            ..SimConfig::default()
        };
        all_runs.push(run_experiment(&cfg, &trace).unwrap());
    }

    let results: Vec<(&str, Outcome)> = vec![
        ("1 expected tokens vs Monte-Carlo", c1_omega_monte_carlo()),
        ("2 reuse break-even table", c2_breakeven_table()),
        ("3 threshold solver vs brute force", c3_solver_oracle()),
        ("4 estimator invariants", c4_estimator_fuzz()),
        ("5 engine invariants", c5_engine_invariants()),
        ("6 time and activation conservation", c6_conservation(&all_runs, &trace)),
        ("7 policy ordering", c7_policy_ordering(&runs, c7_time)),
        ("8 hot/cold accuracy", c8_accuracy()),
        ("9 SNR and entropy", c9_snr_entropy()),
        ("10 determinism", c10_determinism(&trace)),
    ];
    let mut failures = 0;
    for (name, r) in &results {
        match r {
            Ok(msg) => println!("PASS criterion {name}: {msg}"),
            Err(msg) => {
                failures += 1;
                println!("FAIL criterion {name}: {msg}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failures, results.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
