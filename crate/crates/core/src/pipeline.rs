//! Pipeline-parallel training schedule and bubble extraction.
//!
//! Each stage issues its operations in 1F1B order: `min(m, p - s)` warm-up
//! forwards, then one backward per forward, then the remaining backwards.
//! Operations start as early as their dependencies allow and epochs are
//! separated by a synchronous barrier.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::time::SimTime;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "FP")]
    Fp,
    #[serde(rename = "BP")]
    Bp,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Fp => f.write_str("FP"),
            OpKind::Bp => f.write_str("BP"),
        }
    }
}

/// Training workload shape. Durations are per stage; use [`PipelineConfig::uniform`]
/// when every stage shares the same FP and BP length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub num_stages: usize,
    pub num_micro_batches: usize,
    pub fp_durations: Vec<SimTime>,
    pub bp_durations: Vec<SimTime>,
    pub num_epochs: usize,
    /// GiB per GPU.
    pub gpu_memory_total: f64,
    /// GiB consumed by training on each stage.
    pub stage_memory: Vec<f64>,
}

impl PipelineConfig {
    pub fn uniform(
        num_stages: usize,
        num_micro_batches: usize,
        fp: SimTime,
        bp: SimTime,
        num_epochs: usize,
        gpu_memory_total: f64,
        stage_memory: Vec<f64>,
    ) -> Self {
        PipelineConfig {
            num_stages,
            num_micro_batches,
            fp_durations: vec![fp; num_stages],
            bp_durations: vec![bp; num_stages],
            num_epochs,
            gpu_memory_total,
            stage_memory,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = self.num_stages;
        if p == 0 {
            return Err(ConfigError::new("num_stages", "must be at least 1"));
        }
        if self.num_micro_batches == 0 {
            return Err(ConfigError::new("num_micro_batches", "must be at least 1"));
        }
        if self.num_epochs == 0 {
            return Err(ConfigError::new("num_epochs", "must be at least 1"));
        }
        for (name, list) in [("fp_duration", &self.fp_durations), ("bp_duration", &self.bp_durations)] {
            if list.len() != p {
                return Err(ConfigError::new(
                    name,
                    format!("expected {p} per-stage durations, got {}", list.len()),
                ));
            }
            if let Some(s) = list.iter().position(|d| *d == SimTime::ZERO) {
                return Err(ConfigError::new(name, format!("stage {s} duration must be positive")));
            }
        }
        if !self.gpu_memory_total.is_finite() || self.gpu_memory_total < 0.0 {
            return Err(ConfigError::new("gpu_memory_total", "must be a non-negative number"));
        }
        if self.stage_memory.len() != p {
            return Err(ConfigError::new(
                "stage_memory",
                format!("expected {p} entries, got {}", self.stage_memory.len()),
            ));
        }
        for (s, mem) in self.stage_memory.iter().enumerate() {
            if !mem.is_finite() || *mem < 0.0 {
                return Err(ConfigError::new(format!("stage_memory[{s}]"), "must be non-negative"));
            }
            if *mem > self.gpu_memory_total {
                return Err(ConfigError::new(
                    format!("stage_memory[{s}]"),
                    format!("{mem} GiB exceeds gpu_memory_total {}", self.gpu_memory_total),
                ));
            }
        }
        Ok(())
    }

    pub fn duration(&self, stage: usize, kind: OpKind) -> SimTime {
        match kind {
            OpKind::Fp => self.fp_durations[stage],
            OpKind::Bp => self.bp_durations[stage],
        }
    }

    /// Memory left for side tasks on a stage's GPU.
    pub fn available_memory(&self, stage: usize) -> f64 {
        self.gpu_memory_total - self.stage_memory[stage]
    }

    pub fn ops_per_stage_epoch(&self) -> usize {
        2 * self.num_micro_batches
    }

    /// Same workload restricted to one epoch.
    pub fn single_epoch(&self) -> PipelineConfig {
        PipelineConfig {
            num_epochs: 1,
            ..self.clone()
        }
    }
}

/// Memory used by training on each stage: weights plus one activation set per
/// in-flight micro-batch, where stage `s` holds `p - s` of them at the end of warm-up.
pub fn default_stage_memory(
    num_stages: usize,
    gpu_memory_total: f64,
    weight_mem: f64,
    activation_mem_per_micro_batch: f64,
) -> Result<Vec<f64>, ConfigError> {
    for (field, v) in [
        ("gpu_memory_total", gpu_memory_total),
        ("weight_memory", weight_mem),
        ("activation_memory_per_micro_batch", activation_mem_per_micro_batch),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(ConfigError::new(field, "must be a non-negative number"));
        }
    }
    let peak = weight_mem + num_stages as f64 * activation_mem_per_micro_batch;
    if peak > gpu_memory_total {
        return Err(ConfigError::new(
            "stage_memory",
            format!("stage 0 needs {peak} GiB but the GPU has {gpu_memory_total} GiB"),
        ));
    }
    Ok((0..num_stages)
        .map(|s| {
            let in_flight = (num_stages - s) as f64;
            (weight_mem + in_flight * activation_mem_per_micro_batch).min(gpu_memory_total)
        })
        .collect())
}

/// One-epoch issue order of a stage as `(kind, micro_batch)` with 1-based micro-batches.
pub fn stage_issue_order(num_stages: usize, num_micro_batches: usize, stage: usize) -> Vec<(OpKind, usize)> {
    let m = num_micro_batches;
    let warmup = m.min(num_stages - stage);
    let mut order = Vec::with_capacity(2 * m);
    for mb in 1..=warmup {
        order.push((OpKind::Fp, mb));
    }
    for i in 1..=(m - warmup) {
        order.push((OpKind::Bp, i));
        order.push((OpKind::Fp, warmup + i));
    }
    for mb in (m - warmup + 1)..=m {
        order.push((OpKind::Bp, mb));
    }
    order
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpEvent {
    pub stage: usize,
    pub kind: OpKind,
    /// 1-based micro-batch index.
    pub micro_batch: usize,
    pub epoch: usize,
    pub start: SimTime,
    pub end: SimTime,
}

impl OpEvent {
    pub fn duration(&self) -> SimTime {
        self.end - self.start
    }
}

/// Dense index of an operation, shared by the schedule builder and the engine.
#[derive(Clone, Debug)]
pub(crate) struct OpIndexer {
    p: usize,
    m: usize,
}

impl OpIndexer {
    pub(crate) fn new(config: &PipelineConfig) -> Self {
        OpIndexer {
            p: config.num_stages,
            m: config.num_micro_batches,
        }
    }

    pub(crate) fn index(&self, epoch: usize, stage: usize, kind: OpKind, micro_batch: usize) -> usize {
        let k = match kind {
            OpKind::Fp => 0,
            OpKind::Bp => 1,
        };
        ((epoch * self.p + stage) * 2 + k) * self.m + (micro_batch - 1)
    }

    pub(crate) fn len(&self, epochs: usize) -> usize {
        epochs * self.p * 2 * self.m
    }

    /// Cross-stage predecessor of an op, if any.
    pub(crate) fn upstream(&self, epoch: usize, stage: usize, kind: OpKind, micro_batch: usize) -> Option<usize> {
        match kind {
            OpKind::Fp if stage > 0 => Some(self.index(epoch, stage - 1, OpKind::Fp, micro_batch)),
            OpKind::Bp if stage + 1 < self.p => Some(self.index(epoch, stage + 1, OpKind::Bp, micro_batch)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    /// Sorted by `(start, stage)`.
    pub ops: Vec<OpEvent>,
    /// Per epoch: earliest op start and latest op end.
    pub epoch_spans: Vec<(SimTime, SimTime)>,
    pub config: PipelineConfig,
}

impl ScheduleTrace {
    /// Wraps an executed op list, computing epoch spans.
    pub fn from_ops(config: PipelineConfig, mut ops: Vec<OpEvent>) -> Self {
        ops.sort_by_key(|o| (o.start, o.stage, o.epoch));
        let mut spans = vec![(SimTime::MAX, SimTime::ZERO); config.num_epochs];
        for op in &ops {
            let span = &mut spans[op.epoch];
            span.0 = span.0.min(op.start);
            span.1 = span.1.max(op.end);
        }
        ScheduleTrace {
            ops,
            epoch_spans: spans,
            config,
        }
    }

    pub fn makespan(&self) -> SimTime {
        self.ops.iter().map(|o| o.end).max().unwrap_or(SimTime::ZERO)
    }

    pub fn wall_time(&self) -> SimTime {
        let start = self.ops.iter().map(|o| o.start).min().unwrap_or(SimTime::ZERO);
        self.makespan() - start
    }

    /// Ops of one stage in execution order.
    pub fn stage_ops(&self, stage: usize) -> Vec<OpEvent> {
        let mut ops: Vec<OpEvent> = self.ops.iter().filter(|o| o.stage == stage).copied().collect();
        ops.sort_by_key(|o| o.start);
        ops
    }
}

/// Earliest-start schedule of the configured workload.
pub fn build_schedule(config: &PipelineConfig) -> Result<ScheduleTrace, ConfigError> {
    config.validate()?;
    let p = config.num_stages;
    let m = config.num_micro_batches;
    let epochs = config.num_epochs;
    let idx = OpIndexer::new(config);
    let orders: Vec<Vec<(OpKind, usize)>> = (0..p).map(|s| stage_issue_order(p, m, s)).collect();

    let mut end: Vec<Option<SimTime>> = vec![None; idx.len(epochs)];
    let mut cursor = vec![0usize; p];
    let mut stage_free = vec![SimTime::ZERO; p];
    let mut epoch_left = vec![2 * p * m; epochs];
    let mut epoch_end = vec![SimTime::ZERO; epochs];
    let per_stage = 2 * m * epochs;
    let mut ops = Vec::with_capacity(idx.len(epochs));

    loop {
        let mut progressed = false;
        for s in 0..p {
            while cursor[s] < per_stage {
                let epoch = cursor[s] / (2 * m);
                let (kind, mb) = orders[s][cursor[s] % (2 * m)];
                if epoch > 0 && epoch_left[epoch - 1] > 0 {
                    break;
                }
                let mut ready = stage_free[s];
                if epoch > 0 {
                    ready = ready.max(epoch_end[epoch - 1]);
                }
                if let Some(up) = idx.upstream(epoch, s, kind, mb) {
                    match end[up] {
                        Some(t) => ready = ready.max(t),
                        None => break,
                    }
                }
                let finish = ready + config.duration(s, kind);
                end[idx.index(epoch, s, kind, mb)] = Some(finish);
                ops.push(OpEvent {
                    stage: s,
                    kind,
                    micro_batch: mb,
                    epoch,
                    start: ready,
                    end: finish,
                });
                stage_free[s] = finish;
                epoch_left[epoch] -= 1;
                epoch_end[epoch] = epoch_end[epoch].max(finish);
                cursor[s] += 1;
                progressed = true;
            }
        }
        if cursor.iter().all(|&c| c == per_stage) {
            break;
        }
        // 1F1B never deadlocks; reaching this means the issue order is broken.
        assert!(progressed, "pipeline schedule deadlocked");
    }
    Ok(ScheduleTrace::from_ops(config.clone(), ops))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BubbleType {
    A,
    B,
    C,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bubble {
    pub stage: usize,
    pub epoch: usize,
    /// Position of the op that ends this bubble within the stage's epoch
    /// sequence; equals `2 * m` for the trailing bubble of an epoch.
    pub slot: usize,
    pub start: SimTime,
    pub duration: SimTime,
    pub available_memory: f64,
    pub btype: BubbleType,
}

impl Bubble {
    pub fn end(&self) -> SimTime {
        self.start + self.duration
    }
}

/// Every maximal idle interval of every stage inside each epoch span.
pub fn extract_bubbles(trace: &ScheduleTrace) -> Vec<Bubble> {
    let cfg = &trace.config;
    let n = cfg.ops_per_stage_epoch();
    let mut per_stage_epoch: Vec<Vec<Vec<OpEvent>>> = vec![vec![Vec::new(); cfg.num_epochs]; cfg.num_stages];
    for op in &trace.ops {
        per_stage_epoch[op.stage][op.epoch].push(*op);
    }
    let mut bubbles = Vec::new();
    for (epoch, &(span_start, span_end)) in trace.epoch_spans.iter().enumerate() {
        for (stage, by_epoch) in per_stage_epoch.iter_mut().enumerate() {
            let ops = &mut by_epoch[epoch];
            if ops.is_empty() {
                continue;
            }
            ops.sort_by_key(|o| o.start);
            let first_bp = ops.iter().position(|o| o.kind == OpKind::Bp);
            let mut push = |slot: usize, start: SimTime, stop: SimTime, btype: BubbleType| {
                if stop > start {
                    bubbles.push(Bubble {
                        stage,
                        epoch,
                        slot,
                        start,
                        duration: stop - start,
                        available_memory: cfg.available_memory(stage),
                        btype,
                    });
                }
            };
            push(0, span_start, ops[0].start, BubbleType::A);
            for j in 1..ops.len() {
                let btype = if Some(j) == first_bp {
                    BubbleType::B
                } else {
                    BubbleType::C
                };
                push(j, ops[j - 1].end, ops[j].start, btype);
            }
            push(n, ops[ops.len() - 1].end, span_end, BubbleType::A);
        }
    }
    bubbles.sort_by_key(|b| (b.epoch, b.stage, b.start));
    bubbles
}

/// Total bubble time over total GPU time of all stages.
pub fn bubble_rate(trace: &ScheduleTrace, bubbles: &[Bubble]) -> f64 {
    let wall = trace.wall_time();
    if wall == SimTime::ZERO {
        return 0.0;
    }
    let idle: SimTime = bubbles.iter().map(|b| b.duration).sum();
    idle.as_micros() as f64 / (trace.config.num_stages as f64 * wall.as_micros() as f64)
}
