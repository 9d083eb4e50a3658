//! Run summaries and their CSV / JSON-lines encodings.
//!
//! Both formats start with the schema line [`SCHEMA_HEADER`]. CSV has one
//! row per run in the column order of [`CSV_COLUMNS`]; the per-step accuracy
//! series is packed into a single `;`-separated field.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::StepReport;

pub const SCHEMA_HEADER: &str = "#moesim-metrics v1";

pub const CSV_COLUMNS: [&str; 17] = [
    "policy",
    "axis",
    "axis_value",
    "steps",
    "total_tokens",
    "total_time_ns",
    "tps",
    "latency_s",
    "mean_step_latency_s",
    "hit_rate",
    "bubble_ratio",
    "mean_accuracy",
    "fn_rate",
    "fp_rate",
    "fault_rate",
    "loads",
    "accuracy_series",
];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot summarize an empty run")]
    Empty,
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("bad metrics file: {0}")]
    Format(String),
}

/// Aggregates of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: String,
    /// Sweep axis name, empty for a single run.
    pub axis: String,
    pub axis_value: Option<f64>,
    pub steps: u64,
    pub total_tokens: u64,
    pub total_time_ns: u64,
    pub tps: f64,
    /// Wall time of the whole run in seconds.
    pub latency_s: f64,
    pub mean_step_latency_s: f64,
    pub hit_rate: f64,
    /// Bubble time over layer wall time.
    pub bubble_ratio: f64,
    pub mean_accuracy: f64,
    /// False negatives per expert-step.
    pub fn_rate: f64,
    /// False positives per expert-step.
    pub fp_rate: f64,
    pub fault_rate: f64,
    pub loads: u64,
    pub accuracy_series: Vec<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Folds a run's step reports into a [`RunSummary`].
pub fn summarize(policy: &str, reports: &[StepReport]) -> Result<RunSummary, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut tokens = 0u64;
    let mut time = 0u64;
    let (mut hits, mut misses, mut bubble, mut wall) = (0u64, 0u64, 0u64, 0u64);
    let (mut fneg, mut fpos, mut expert_steps, mut loads) = (0u64, 0u64, 0u64, 0u64);
    let mut series = Vec::with_capacity(reports.len());
    for r in reports {
        tokens += u64::from(r.accepted_tokens);
        time += r.total_ns();
        for l in &r.layers {
            hits += l.hits;
            misses += l.misses;
            bubble += l.bubble_ns;
            wall += l.wall_ns;
            fneg += u64::from(l.false_neg);
            fpos += u64::from(l.false_pos);
            loads += u64::from(l.loads);
            expert_steps += u64::from(r.n_experts);
        }
        series.push(r.accuracy());
    }
    let secs = time as f64 / 1e9;
    let fn_rate = ratio(fneg, expert_steps);
    let fp_rate = ratio(fpos, expert_steps);
    Ok(RunSummary {
        policy: policy.to_string(),
        axis: String::new(),
        axis_value: None,
        steps: reports.len() as u64,
        total_tokens: tokens,
        total_time_ns: time,
        tps: if time == 0 { 0.0 } else { tokens as f64 * 1e9 / time as f64 },
        latency_s: secs,
        mean_step_latency_s: secs / reports.len() as f64,
        hit_rate: ratio(hits, hits + misses),
        bubble_ratio: ratio(bubble, wall),
        mean_accuracy: series.iter().sum::<f64>() / series.len() as f64,
        fn_rate,
        fp_rate,
        fault_rate: ratio(fneg + fpos, expert_steps),
        loads,
        accuracy_series: series,
    })
}

impl RunSummary {
    pub fn with_axis(mut self, axis: &str, value: f64) -> Self {
        self.axis = axis.to_string();
        self.axis_value = Some(value);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    pub fn extension(&self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for Format {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" | "json-lines" => Ok(Format::Jsonl),
            other => Err(MetricsError::Format(format!("unknown format '{other}'"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    policy: String,
    axis: String,
    axis_value: Option<f64>,
    steps: u64,
    total_tokens: u64,
    total_time_ns: u64,
    tps: f64,
    latency_s: f64,
    mean_step_latency_s: f64,
    hit_rate: f64,
    bubble_ratio: f64,
    mean_accuracy: f64,
    fn_rate: f64,
    fp_rate: f64,
    fault_rate: f64,
    loads: u64,
    accuracy_series: String,
}

impl From<&RunSummary> for CsvRow {
    fn from(s: &RunSummary) -> Self {
        let series: Vec<String> = s.accuracy_series.iter().map(f64::to_string).collect();
        Self {
            policy: s.policy.clone(),
            axis: s.axis.clone(),
            axis_value: s.axis_value,
            steps: s.steps,
            total_tokens: s.total_tokens,
            total_time_ns: s.total_time_ns,
            tps: s.tps,
            latency_s: s.latency_s,
            mean_step_latency_s: s.mean_step_latency_s,
            hit_rate: s.hit_rate,
            bubble_ratio: s.bubble_ratio,
            mean_accuracy: s.mean_accuracy,
            fn_rate: s.fn_rate,
            fp_rate: s.fp_rate,
            fault_rate: s.fault_rate,
            loads: s.loads,
            accuracy_series: series.join(";"),
        }
    }
}

impl TryFrom<CsvRow> for RunSummary {
    type Error = MetricsError;

    fn try_from(r: CsvRow) -> Result<Self, Self::Error> {
        let accuracy_series = if r.accuracy_series.is_empty() {
            Vec::new()
        } else {
            r.accuracy_series
                .split(';')
                .map(|v| {
                    v.parse()
                        .map_err(|_| MetricsError::Format(format!("bad accuracy value '{v}'")))
                })
                .collect::<Result<_, _>>()?
        };
        Ok(Self {
            policy: r.policy,
            axis: r.axis,
            axis_value: r.axis_value,
            steps: r.steps,
            total_tokens: r.total_tokens,
            total_time_ns: r.total_time_ns,
            tps: r.tps,
            latency_s: r.latency_s,
            mean_step_latency_s: r.mean_step_latency_s,
            hit_rate: r.hit_rate,
            bubble_ratio: r.bubble_ratio,
            mean_accuracy: r.mean_accuracy,
            fn_rate: r.fn_rate,
            fp_rate: r.fp_rate,
            fault_rate: r.fault_rate,
            loads: r.loads,
            accuracy_series,
        })
    }
}

pub fn write_csv<W: Write>(mut out: W, rows: &[RunSummary]) -> Result<(), MetricsError> {
    writeln!(out, "{SCHEMA_HEADER}")?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.serialize(CsvRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}

fn read_schema_line<R: BufRead>(input: &mut R) -> Result<(), MetricsError> {
    let mut first = String::new();
    input.read_line(&mut first)?;
    if first.trim_end() != SCHEMA_HEADER {
        return Err(MetricsError::Format(format!(
            "expected '{SCHEMA_HEADER}', found '{}'",
            first.trim_end()
        )));
    }
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<RunSummary>, MetricsError> {
    let mut input = BufReader::new(input);
    read_schema_line(&mut input)?;
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if !header.iter().eq(CSV_COLUMNS.iter().copied()) {
        return Err(MetricsError::Format("unexpected CSV columns".into()));
    }
    r.deserialize::<CsvRow>()
        .map(|row| RunSummary::try_from(row?))
        .collect()
}

pub fn write_jsonl<W: Write>(mut out: W, rows: &[RunSummary]) -> Result<(), MetricsError> {
    writeln!(out, "{SCHEMA_HEADER}")?;
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: Read>(input: R) -> Result<Vec<RunSummary>, MetricsError> {
    let mut input = BufReader::new(input);
    read_schema_line(&mut input)?;
    let mut rows = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}

/// Writes `rows` to `path` in `format`.
pub fn emit(rows: &[RunSummary], format: Format, path: &Path) -> Result<(), MetricsError> {
    let file = File::create(path).map_err(|source| MetricsError::File {
        path: path.to_path_buf(),
        source,
    })?;
    let out = BufWriter::new(file);
    match format {
        Format::Csv => write_csv(out, rows),
        Format::Jsonl => write_jsonl(out, rows),
    }
}

pub fn load(path: &Path, format: Format) -> Result<Vec<RunSummary>, MetricsError> {
    let file = File::open(path).map_err(|source| MetricsError::File {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        Format::Csv => read_csv(file),
        Format::Jsonl => read_jsonl(file),
    }
}
