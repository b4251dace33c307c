//! Independent consistency checks over a finished trace.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::pipeline::{self, stage_issue_order, OpKind, ScheduleTrace};
use crate::task::{SideTaskState, TransitionKind};
use crate::time::SimTime;

use super::{ActivityKind, RunTrace, TraceRecord};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub check: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.check, self.detail)
    }
}

struct Report(Vec<Violation>);

impl Report {
    fn fail(&mut self, check: &'static str, detail: String) {
        self.0.push(Violation { check, detail });
    }
}

/// Re-derives the pipeline, lifecycle and occupancy invariants from the trace
/// alone. An empty result means the trace is consistent.
pub fn replay_check(trace: &RunTrace) -> Vec<Violation> {
    let mut r = Report(Vec::new());
    check_ops(trace, &mut r);
    check_occupancy(trace, &mut r);
    check_lifecycle(trace, &mut r);
    check_rpcs(trace, &mut r);
    let recomputed =
        pipeline::extract_bubbles(&ScheduleTrace::from_ops(trace.header.config.clone(), trace.ops.clone()));
    if recomputed != trace.bubbles {
        r.fail(
            "bubbles",
            format!(
                "{} recorded vs {} recomputed from ops",
                trace.bubbles.len(),
                recomputed.len()
            ),
        );
    }
    r.0
}

fn check_ops(trace: &RunTrace, r: &mut Report) {
    let cfg = &trace.header.config;
    let (p, m) = (cfg.num_stages, cfg.num_micro_batches);
    let mut by_key = BTreeMap::new();
    for op in &trace.ops {
        if op.end < op.start || op.end - op.start != cfg.duration(op.stage, op.kind) {
            r.fail("op-duration", format!("{op:?}"));
        }
        let key = (op.epoch, op.stage, op.kind == OpKind::Bp, op.micro_batch);
        if by_key.insert(key, *op).is_some() {
            r.fail("op-unique", format!("{op:?} appears twice"));
        }
    }
    let expected = 2 * p * m * cfg.num_epochs;
    if by_key.len() != expected {
        r.fail("op-count", format!("{} ops, expected {expected}", by_key.len()));
        return;
    }
    let mut epoch_end = vec![SimTime::ZERO; cfg.num_epochs];
    for op in by_key.values() {
        epoch_end[op.epoch] = epoch_end[op.epoch].max(op.end);
    }
    for op in by_key.values() {
        let up = match op.kind {
            OpKind::Fp if op.stage > 0 => by_key.get(&(op.epoch, op.stage - 1, false, op.micro_batch)),
            OpKind::Bp if op.stage + 1 < p => by_key.get(&(op.epoch, op.stage + 1, true, op.micro_batch)),
            OpKind::Bp => by_key.get(&(op.epoch, op.stage, false, op.micro_batch)),
            _ => None,
        };
        if let Some(up) = up {
            if up.end > op.start {
                r.fail("dependency", format!("{op:?} starts before {up:?} ends"));
            }
        }
        if op.epoch > 0 && op.start < epoch_end[op.epoch - 1] {
            r.fail(
                "epoch-barrier",
                format!("{op:?} starts before epoch {} ends", op.epoch - 1),
            );
        }
    }
    let schedule = trace.schedule();
    for s in 0..p {
        let ops = schedule.stage_ops(s);
        let order = stage_issue_order(p, m, s);
        for (i, op) in ops.iter().enumerate() {
            if (op.kind, op.micro_batch) != order[i % order.len()] || op.epoch != i / order.len() {
                r.fail("issue-order", format!("stage {s} position {i}: {op:?}"));
                break;
            }
        }
        for w in ops.windows(2) {
            if w[1].start < w[0].end {
                r.fail("stage-overlap", format!("{:?} overlaps {:?}", w[0], w[1]));
            }
        }
    }
}

fn check_occupancy(trace: &RunTrace, r: &mut Report) {
    let p = trace.header.config.num_stages;
    let mut busy: Vec<Vec<(SimTime, SimTime, String)>> = vec![Vec::new(); p];
    for op in &trace.ops {
        busy[op.stage].push((
            op.start,
            op.end,
            format!("{:?}{} e{}", op.kind, op.micro_batch, op.epoch),
        ));
    }
    let mut work_done = BTreeMap::new();
    for (worker, task, kind, start, end, completed) in trace.activities() {
        if worker >= p || end < start {
            r.fail(
                "activity",
                format!("task {task} {kind:?} [{start}, {end}) on worker {worker}"),
            );
            continue;
        }
        if start < end {
            busy[worker].push((start, end, format!("task {task} {kind:?}")));
        }
        if kind.is_work() && completed {
            *work_done.entry(task).or_insert(0u64) += 1;
        }
        if kind == ActivityKind::Overhead && !completed && start == end {
            r.fail("activity", format!("empty overhead of task {task} at {start}"));
        }
    }
    for (w, intervals) in busy.iter_mut().enumerate() {
        intervals.sort_by_key(|i| (i.0, i.1));
        for pair in intervals.windows(2) {
            if pair[1].0 < pair[0].1 {
                r.fail(
                    "gpu-exclusive",
                    format!("worker {w}: {} overlaps {}", pair[0].2, pair[1].2),
                );
            }
        }
    }
    for o in &trace.outcomes {
        let seen = work_done.get(&o.task).copied().unwrap_or(0);
        if seen != o.work_done {
            r.fail(
                "work-count",
                format!("task {} reports {} units, trace has {seen}", o.task, o.work_done),
            );
        }
    }
}

fn check_lifecycle(trace: &RunTrace, r: &mut Report) {
    let n = trace.header.tasks.len();
    let mut state = vec![SideTaskState::Submitted; n];
    let mut worker_of = vec![None; n];
    let mut stopped_at: Vec<Option<SimTime>> = vec![None; n];
    for rec in &trace.records {
        match *rec {
            TraceRecord::Transition {
                time,
                task,
                worker,
                kind,
                from,
                to,
                memory,
            } => {
                if from != state[task] {
                    r.fail(
                        "lifecycle",
                        format!("task {task} {kind:?} at {time}: from {from} but was {}", state[task]),
                    );
                }
                if from.after(kind) != Some(to) {
                    r.fail("lifecycle", format!("task {task}: illegal {kind:?} {from} -> {to}"));
                }
                if stopped_at[task].is_some() {
                    r.fail("after-stop", format!("task {task} {kind:?} at {time} after stop"));
                }
                if to == SideTaskState::Stopped {
                    stopped_at[task] = Some(time);
                    if memory != 0.0 {
                        r.fail("memory", format!("task {task} stopped holding {memory} GiB"));
                    }
                } else if !to.holds_gpu_memory() && memory != 0.0 {
                    r.fail("memory", format!("task {task} holds {memory} GiB in {to}"));
                }
                if to == SideTaskState::Running && kind == TransitionKind::StartSideTask {
                    for other in 0..n {
                        if other != task && worker_of[other] == Some(worker) && state[other] == SideTaskState::Running {
                            r.fail(
                                "single-running",
                                format!("tasks {other} and {task} both running on worker {worker} at {time}"),
                            );
                        }
                    }
                }
                state[task] = to;
                worker_of[task] = Some(worker);
            }
            TraceRecord::Activity { task, kind, start, .. } => {
                if let Some(stop) = stopped_at[task] {
                    if start >= stop {
                        r.fail(
                            "after-stop",
                            format!("task {task} {kind:?} at {start} after stop at {stop}"),
                        );
                    }
                }
            }
            _ => {}
        }
    }
    for o in &trace.outcomes {
        use super::Disposition::*;
        let expected_stopped = matches!(o.disposition, Completed | Killed { .. });
        if expected_stopped != (state[o.task] == SideTaskState::Stopped) {
            r.fail(
                "outcome",
                format!("task {} ends in {} with {:?}", o.task, state[o.task], o.disposition),
            );
        }
    }
}

fn check_rpcs(trace: &RunTrace, r: &mut Report) {
    let latency = trace.header.settings.rpc_latency;
    for rec in &trace.records {
        if let TraceRecord::Rpc {
            issued,
            lands,
            task,
            kind,
            ..
        } = *rec
        {
            if lands != issued + latency {
                r.fail(
                    "rpc-latency",
                    format!("task {task} {kind:?} issued {issued} lands {lands}"),
                );
            }
        }
    }
}
