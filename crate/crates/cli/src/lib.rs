//! Subcommand implementations behind the `harvest` binary.
//!
//! Every command takes an experiment source, either a JSON file path or
//! `preset:<name>`, and writes its outputs atomically (temp file + rename).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use harvest_core::engine::{self, replay_check, RunTrace, Violation};
use harvest_core::experiment::{self, Experiment, ExperimentDoc, SweepPoint, MODEL_SIZES};
use harvest_core::metrics::{self, MetricsReport, StageBreakdown};
use harvest_core::profiler::{self, BubbleProfile, TaskProfile};
use harvest_core::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "HARVEST_OUT_DIR";

pub const BASELINE_TRACE: &str = "baseline.trace.jsonl";
pub const TRACE: &str = "trace.jsonl";
pub const REPORT: &str = "report.json";
pub const PROFILE: &str = "profile.json";
pub const SWEEP_TABLE: &str = "sweep.csv";
pub const SWEEP_SUMMARY: &str = "sweep.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
    #[error("replay check failed with {} violation(s); first: {}", .0.len(), .0[0])]
    Violations(Vec<Violation>),
    #[error("{0}")]
    Internal(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Invalid(_) | CliError::Io { .. } => 1,
            CliError::Violations(_) | CliError::Internal(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. } => CliError::Parse(e.to_string()),
            Error::Config(_) | Error::Metrics(_) => CliError::Invalid(e.to_string()),
            Error::IllegalTransition { .. } | Error::NotRunnable { .. } | Error::Internal(_) => {
                CliError::Internal(e.to_string())
            }
        }
    }
}

impl From<harvest_core::ConfigError> for CliError {
    fn from(e: harvest_core::ConfigError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum TableFormat {
    #[default]
    Csv,
    JsonLines,
}

impl TableFormat {
    fn extension(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::JsonLines => "jsonl",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report types serialize");
    v.push(b'\n');
    v
}

/// `--out` if given, else the environment default, else `./harvest-out`.
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("harvest-out"))
}

fn load(source: &str, seed: Option<u64>) -> Result<(ExperimentDoc, Experiment)> {
    let mut doc = experiment::load_doc(source)?;
    if let Some(seed) = seed {
        doc.seed = seed;
    }
    let exp = doc.resolve()?;
    Ok((doc, exp))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileDoc {
    pub bubbles: BubbleProfile,
    pub tasks: Vec<TaskProfile>,
}

/// Profiles the pipeline's bubbles and every task standalone.
pub fn cmd_profile(source: &str, out_dir: Option<&Path>) -> Result<ProfileDoc> {
    let (_, exp) = load(source, None)?;
    let bubbles = profiler::profile_bubbles(&exp.pipeline)?;
    let noise = exp.settings.noise();
    let tasks = exp
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| profiler::profile_task(t, i, exp.settings.profile_steps, &noise))
        .collect();
    let doc = ProfileDoc { bubbles, tasks };
    if let Some(dir) = out_dir {
        write_atomic(&dir.join(PROFILE), &to_json(&doc))?;
    }
    Ok(doc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub source: String,
    pub seed: u64,
    pub prices: metrics::PriceConfig,
    pub metrics: MetricsReport,
}

/// Baseline and treatment traces of one experiment, both replay-checked.
pub struct RunPair {
    pub baseline: RunTrace,
    pub treatment: RunTrace,
    pub report: MetricsReport,
}

pub fn simulate(exp: &Experiment) -> Result<RunPair> {
    let baseline = engine::run(&exp.pipeline, &[], &exp.settings)?;
    let treatment = engine::run(&exp.pipeline, &exp.tasks, &exp.settings)?;
    for t in [&baseline, &treatment] {
        let v = replay_check(t);
        if !v.is_empty() {
            return Err(CliError::Violations(v));
        }
    }
    let report = metrics::report(&baseline, &treatment, &exp.prices)?;
    Ok(RunPair {
        baseline,
        treatment,
        report,
    })
}

fn breakdown_table(rows: &[StageBreakdown], format: TableFormat) -> Vec<u8> {
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r).expect("csv rows serialize");
            }
            w.into_inner().expect("in-memory writer")
        }
        TableFormat::JsonLines => {
            let mut out = Vec::new();
            for r in rows {
                out.extend(serde_json::to_vec(r).expect("rows serialize"));
                out.push(b'\n');
            }
            out
        }
    }
}

/// Runs the baseline and the treatment, writing both traces, the report and
/// the breakdown table to `out_dir`.
pub fn cmd_run(source: &str, out_dir: &Path, seed: Option<u64>, format: TableFormat) -> Result<RunReport> {
    let (doc, exp) = load(source, seed)?;
    let pair = simulate(&exp)?;
    let report = RunReport {
        source: source.to_string(),
        seed: doc.seed,
        prices: exp.prices.clone(),
        metrics: pair.report,
    };
    write_atomic(&out_dir.join(BASELINE_TRACE), pair.baseline.to_jsonl().as_bytes())?;
    write_atomic(&out_dir.join(TRACE), pair.treatment.to_jsonl().as_bytes())?;
    write_atomic(&out_dir.join(REPORT), &to_json(&report))?;
    let table = format!("breakdown.{}", format.extension());
    write_atomic(
        &out_dir.join(table),
        &breakdown_table(&report.metrics.breakdown, format),
    )?;
    Ok(report)
}

/// One row of the aggregate sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub micro_batches: usize,
    pub model_size: String,
    pub batch_size: String,
    pub bubble_rate: f64,
    pub mean_bubble_duration_s: f64,
    pub mean_available_memory_gib: f64,
    pub t_no_s: f64,
    pub t_with_s: f64,
    pub time_increase: f64,
    pub savings: Option<f64>,
    pub side_work: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    /// Set when the grid varies model size: whether, at every other grid
    /// coordinate, larger models have strictly shorter bubbles with strictly
    /// less memory available.
    pub model_size_trend: Option<bool>,
}

fn sweep_row(point: &SweepPoint, exp: &Experiment, pair: &RunPair) -> SweepRow {
    let bubbles = profiler::profile_bubbles(&exp.pipeline).expect("resolved pipeline is valid");
    let n = bubbles.bubbles.len().max(1) as f64;
    let mean_dur = bubbles.bubbles.iter().map(|b| b.duration.as_secs_f64()).sum::<f64>() / n;
    let mean_mem = bubbles.bubbles.iter().map(|b| b.available_memory).sum::<f64>() / n;
    SweepRow {
        label: point.label(),
        micro_batches: exp.pipeline.num_micro_batches,
        model_size: point.model_size.clone().unwrap_or_default(),
        batch_size: point.batch_size.map(|b| b.to_string()).unwrap_or_default(),
        bubble_rate: pair.report.bubble_rate,
        mean_bubble_duration_s: mean_dur,
        mean_available_memory_gib: mean_mem,
        t_no_s: pair.report.t_no.as_secs_f64(),
        t_with_s: pair.report.t_with.as_secs_f64(),
        time_increase: pair.report.time_increase,
        savings: pair.report.cost.as_ref().map(|c| c.savings),
        side_work: pair.treatment.outcomes.iter().map(|o| o.work_done).sum(),
    }
}

fn model_rank(name: &str) -> usize {
    MODEL_SIZES.iter().position(|m| m.name == name).unwrap_or(usize::MAX)
}

/// Groups rows by every axis except model size and checks that both
/// bubble duration and available memory strictly fall as models grow.
pub fn model_size_trend(rows: &[SweepRow]) -> Option<bool> {
    if rows.iter().all(|r| r.model_size.is_empty()) {
        return None;
    }
    let mut groups: std::collections::BTreeMap<(usize, String), Vec<&SweepRow>> = Default::default();
    for r in rows {
        groups
            .entry((r.micro_batches, r.batch_size.clone()))
            .or_default()
            .push(r);
    }
    let ok = groups.values_mut().all(|g| {
        g.sort_by_key(|r| model_rank(&r.model_size));
        g.windows(2).all(|w| {
            w[1].mean_bubble_duration_s < w[0].mean_bubble_duration_s
                && w[1].mean_available_memory_gib < w[0].mean_available_memory_gib
        })
    });
    Some(ok)
}

/// Runs every point of the document's sweep grid, `jobs` at a time.
pub fn cmd_sweep(source: &str, out_dir: &Path, jobs: usize) -> Result<SweepSummary> {
    let doc = experiment::load_doc(source)?;
    let sweep = doc
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Invalid("invalid `sweep`: the document has no sweep grid".into()))?;
    let points = experiment::sweep_points(sweep)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let rows: Vec<Result<SweepRow>> = pool.install(|| {
        points
            .par_iter()
            .map(|point| {
                let exp = doc.at_point(point)?.resolve()?;
                let pair = simulate(&exp)?;
                let dir = out_dir.join(point.label());
                write_atomic(&dir.join(REPORT), &to_json(&pair.report))?;
                Ok(sweep_row(point, &exp, &pair))
            })
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).expect("csv rows serialize");
    }
    write_atomic(&out_dir.join(SWEEP_TABLE), &w.into_inner().expect("in-memory writer"))?;
    let summary = SweepSummary {
        model_size_trend: model_size_trend(&rows),
        rows,
    };
    write_atomic(&out_dir.join(SWEEP_SUMMARY), &to_json(&summary))?;
    Ok(summary)
}

/// Re-reads a trace file and replays its invariants.
pub fn cmd_check(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let trace = RunTrace::from_jsonl(&text)?;
    let v = replay_check(&trace);
    if v.is_empty() {
        Ok(trace.ops.len() + trace.records.len())
    } else {
        Err(CliError::Violations(v))
    }
}
