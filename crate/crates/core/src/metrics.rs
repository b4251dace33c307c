//! Training slowdown, cost savings and the per-stage bubble-time breakdown.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{ActivityKind, Disposition, RunTrace, TraceRecord};
use crate::error::{ConfigError, Error};
use crate::time::SimTime;

/// Relative increase of training time caused by side tasks.
pub fn time_increase(t_with: SimTime, t_no: SimTime) -> Result<f64, Error> {
    if t_no == SimTime::ZERO {
        return Err(Error::Metrics("baseline training time must be positive".into()));
    }
    Ok((t_with.as_micros() as f64 - t_no.as_micros() as f64) / t_no.as_micros() as f64)
}

/// Hourly prices and standalone throughputs used for cost accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceConfig {
    /// USD per hour of the training server.
    #[serde(default = "default_price_1")]
    pub price_server_1: f64,
    /// USD per hour of the low-end server a side task would otherwise run on.
    #[serde(default = "default_price_2")]
    pub price_server_2: f64,
    /// Work units per hour each task achieves on that low-end server.
    #[serde(default)]
    pub reference_throughput: BTreeMap<String, f64>,
}

fn default_price_1() -> f64 {
    3.96
}

fn default_price_2() -> f64 {
    0.18
}

impl Default for PriceConfig {
    fn default() -> Self {
        PriceConfig {
            price_server_1: default_price_1(),
            price_server_2: default_price_2(),
            reference_throughput: BTreeMap::new(),
        }
    }
}

impl PriceConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("prices.price_server_1", self.price_server_1),
            ("prices.price_server_2", self.price_server_2),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(ConfigError::new(field, "must be non-negative"));
            }
        }
        for (id, th) in &self.reference_throughput {
            if !th.is_finite() || *th <= 0.0 {
                return Err(ConfigError::new(
                    format!("prices.reference_throughput.{id}"),
                    "must be positive",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// Cost of training alone.
    pub c_no: f64,
    /// Cost of the extra training time.
    pub c_extra: f64,
    /// What the side-task work would cost on low-end servers.
    pub c_side: f64,
    /// Net savings relative to `c_no`.
    pub savings: f64,
}

/// `work` maps task ids to completed units.
pub fn cost_savings(
    t_no: SimTime,
    delta_t: f64,
    work: &BTreeMap<String, u64>,
    prices: &PriceConfig,
) -> Result<CostBreakdown, Error> {
    if t_no == SimTime::ZERO {
        return Err(Error::Metrics("baseline training time must be positive".into()));
    }
    let c_no = prices.price_server_1 * t_no.as_secs_f64() / 3600.0;
    let c_extra = delta_t * c_no;
    let mut c_side = 0.0;
    for (id, &units) in work {
        if units == 0 {
            continue;
        }
        let th = prices
            .reference_throughput
            .get(id)
            .ok_or_else(|| Error::Metrics(format!("no reference throughput for task `{id}`")))?;
        c_side += prices.price_server_2 * units as f64 / th;
    }
    Ok(CostBreakdown {
        c_no,
        c_extra,
        c_side,
        savings: (c_side - c_extra) / c_no,
    })
}

/// How one stage's bubble time was spent, in microseconds.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBreakdown {
    pub stage: usize,
    pub total: u64,
    /// Steps and kernels.
    pub used: u64,
    /// Initialization and per-dispatch overhead.
    pub runtime: u64,
    /// Idle because no queued task fits the stage's memory.
    pub idle_oom: u64,
    /// Idle for any other reason, mostly bubbles too short for a step.
    pub idle_insufficient: u64,
}

impl StageBreakdown {
    pub fn idle(&self) -> u64 {
        self.idle_oom + self.idle_insufficient
    }

    pub fn fraction(&self, part: u64) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            part as f64 / self.total as f64
        }
    }
}

/// Partitions every executed bubble into used, runtime and idle time.
///
/// Idle time counts as memory-starved when the worker has no task of its own
/// at that instant and some task submitted by then needed at least the
/// worker's memory.
pub fn bubble_breakdown(trace: &RunTrace) -> Vec<StageBreakdown> {
    let p = trace.header.config.num_stages;
    let mut activity: Vec<Vec<(SimTime, SimTime, ActivityKind)>> = vec![Vec::new(); p];
    for (w, _, kind, start, end, _) in trace.activities() {
        if start < end {
            activity[w].push((start, end, kind));
        }
    }
    for a in &mut activity {
        a.sort_by_key(|x| x.0);
    }

    // Per worker: intervals during which it had a task assigned and not yet done.
    let mut owned: Vec<Vec<(SimTime, SimTime)>> = vec![Vec::new(); p];
    let makespan = trace.makespan();
    let mut assigned_at = BTreeMap::new();
    let mut ended_at = BTreeMap::new();
    for rec in &trace.records {
        match rec {
            TraceRecord::Submitted {
                time,
                task,
                assignment: crate::manager::Assignment::Assigned { worker },
            } => {
                assigned_at.insert(*task, (*time, *worker));
            }
            TraceRecord::Transition {
                time,
                task,
                to: crate::task::SideTaskState::Stopped,
                ..
            } => {
                ended_at.insert(*task, *time);
            }
            _ => {}
        }
    }
    for (task, (from, w)) in &assigned_at {
        let until = ended_at.get(task).copied().unwrap_or(makespan.max(*from));
        owned[*w].push((*from, until));
    }

    // Earliest submission time of a task too large for each worker.
    let starving: Vec<Option<SimTime>> = (0..p)
        .map(|w| {
            let mem = trace.header.worker_memory[w];
            trace
                .header
                .tasks
                .iter()
                .zip(&trace.header.profiles)
                .filter(|(_, prof)| prof.est_memory >= mem)
                .map(|(t, _)| t.submit_time)
                .min()
        })
        .collect();

    let mut out: Vec<StageBreakdown> = (0..p)
        .map(|stage| StageBreakdown {
            stage,
            ..Default::default()
        })
        .collect();
    for b in &trace.bubbles {
        let s = b.stage;
        let row = &mut out[s];
        let (start, end) = (b.start, b.end());
        row.total += (end - start).as_micros();
        let mut covered = Vec::new();
        for &(a0, a1, kind) in &activity[s] {
            let lo = a0.max(start);
            let hi = a1.min(end);
            if lo < hi {
                let len = (hi - lo).as_micros();
                if kind.is_work() {
                    row.used += len;
                } else {
                    row.runtime += len;
                }
                covered.push((lo, hi));
            }
        }
        for (g0, g1) in gaps(start, end, &covered) {
            split_idle(row, g0, g1, &owned[s], starving[s]);
        }
    }
    out
}

fn gaps(start: SimTime, end: SimTime, covered: &[(SimTime, SimTime)]) -> Vec<(SimTime, SimTime)> {
    let mut out = Vec::new();
    let mut cur = start;
    for &(lo, hi) in covered {
        if lo > cur {
            out.push((cur, lo));
        }
        cur = cur.max(hi);
    }
    if cur < end {
        out.push((cur, end));
    }
    out
}

fn split_idle(
    row: &mut StageBreakdown,
    g0: SimTime,
    g1: SimTime,
    owned: &[(SimTime, SimTime)],
    starving: Option<SimTime>,
) {
    // Cut the gap at every ownership boundary and at the starvation onset.
    let mut cuts = vec![g0, g1];
    for &(a, b) in owned {
        cuts.extend([a, b].into_iter().filter(|&t| t > g0 && t < g1));
    }
    if let Some(t) = starving.filter(|&t| t > g0 && t < g1) {
        cuts.push(t);
    }
    cuts.sort();
    cuts.dedup();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let has_task = owned.iter().any(|&(o0, o1)| o0 <= a && a < o1);
        let starved = starving.is_some_and(|t| t <= a);
        let len = (b - a).as_micros();
        if !has_task && starved {
            row.idle_oom += len;
        } else {
            row.idle_insufficient += len;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub id: String,
    pub worker: Option<usize>,
    pub disposition: Disposition,
    pub work_done: u64,
    pub peak_memory: f64,
}

/// Everything reported about one run next to its no-side-task baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub t_no: SimTime,
    pub t_with: SimTime,
    pub time_increase: f64,
    pub bubble_rate: f64,
    pub cost: Option<CostBreakdown>,
    pub breakdown: Vec<StageBreakdown>,
    pub tasks: Vec<TaskReport>,
}

/// Cost figures are omitted when a task with completed work lacks a reference throughput.
pub fn report(baseline: &RunTrace, run: &RunTrace, prices: &PriceConfig) -> Result<MetricsReport, Error> {
    let t_no = baseline.makespan();
    let t_with = run.makespan();
    let delta = time_increase(t_with, t_no)?;
    let work: BTreeMap<String, u64> = run.outcomes.iter().map(|o| (o.id.clone(), o.work_done)).collect();
    let cost = match cost_savings(t_no, delta, &work, prices) {
        Ok(c) => Some(c),
        Err(Error::Metrics(_)) => None,
        Err(e) => return Err(e),
    };
    let schedule = baseline.schedule();
    Ok(MetricsReport {
        t_no,
        t_with,
        time_increase: delta,
        bubble_rate: crate::pipeline::bubble_rate(&schedule, &baseline.bubbles),
        cost,
        breakdown: bubble_breakdown(run),
        tasks: run
            .outcomes
            .iter()
            .map(|o| TaskReport {
                id: o.id.clone(),
                worker: o.worker,
                disposition: o.disposition.clone(),
                work_done: o.work_done,
                peak_memory: o.peak_memory,
            })
            .collect(),
    })
}
