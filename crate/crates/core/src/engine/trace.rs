use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::limits::KillReason;
use crate::manager::{Assignment, TaskId};
use crate::pipeline::{Bubble, OpEvent, PipelineConfig, ScheduleTrace};
use crate::profiler::TaskProfile;
use crate::task::{SideTaskSpec, SideTaskState, TransitionKind};
use crate::time::SimTime;

use super::RunSettings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub config: PipelineConfig,
    pub tasks: Vec<SideTaskSpec>,
    pub profiles: Vec<TaskProfile>,
    /// Cap applied to each task at creation, GiB.
    pub memory_limits: Vec<f64>,
    /// GiB available to side tasks per worker.
    pub worker_memory: Vec<f64>,
    pub settings: RunSettings,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityKind {
    /// `InitSideTask` loading the task onto the GPU.
    Init,
    /// Per-dispatch interface and manager cost.
    Overhead,
    /// One iterative step.
    Step,
    /// One imperative kernel.
    Kernel,
}

impl ActivityKind {
    /// Counts as side-task work rather than runtime overhead.
    pub fn is_work(self) -> bool {
        matches!(self, ActivityKind::Step | ActivityKind::Kernel)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceRecord {
    Submitted {
        time: SimTime,
        task: TaskId,
        assignment: Assignment,
    },
    BubbleStarted {
        time: SimTime,
        worker: usize,
        epoch: usize,
        slot: usize,
        planned_end: SimTime,
    },
    BubbleEnded {
        time: SimTime,
        worker: usize,
    },
    Rpc {
        issued: SimTime,
        lands: SimTime,
        task: TaskId,
        worker: usize,
        kind: TransitionKind,
        bubble_end: Option<SimTime>,
    },
    Transition {
        time: SimTime,
        task: TaskId,
        worker: usize,
        kind: TransitionKind,
        from: SideTaskState,
        to: SideTaskState,
        memory: f64,
    },
    /// A pause reached the task. `busy` is set when a step, kernel or
    /// initialization was in flight.
    PauseRequested {
        time: SimTime,
        task: TaskId,
        worker: usize,
        state: SideTaskState,
        busy: bool,
    },
    /// A request that had no effect in the task's state.
    Ignored {
        time: SimTime,
        task: TaskId,
        kind: TransitionKind,
        state: SideTaskState,
    },
    Activity {
        worker: usize,
        task: TaskId,
        kind: ActivityKind,
        start: SimTime,
        end: SimTime,
        /// False when cut short by a kill or stop.
        completed: bool,
    },
    Finished {
        time: SimTime,
        task: TaskId,
    },
    Kill {
        time: SimTime,
        task: TaskId,
        worker: usize,
        reason: KillReason,
        memory: f64,
    },
    Reclaimed {
        time: SimTime,
        task: TaskId,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "disposition", rename_all = "snake_case")]
pub enum Disposition {
    Rejected,
    Completed,
    Killed {
        reason: KillReason,
    },
    /// Still queued or paused when training ended.
    Unfinished {
        state: SideTaskState,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task: TaskId,
    pub id: String,
    pub worker: Option<usize>,
    pub disposition: Disposition,
    /// Completed steps or kernels.
    pub work_done: u64,
    pub peak_memory: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub header: TraceHeader,
    /// Executed pipeline ops, sorted by `(start, stage)`.
    pub ops: Vec<OpEvent>,
    /// Bubbles of the undelayed schedule, used for manager signalling.
    pub planned_bubbles: Vec<Bubble>,
    /// Bubbles of the executed timeline.
    pub bubbles: Vec<Bubble>,
    pub records: Vec<TraceRecord>,
    pub outcomes: Vec<TaskOutcome>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum TraceLine {
    Header(TraceHeader),
    Op(OpEvent),
    PlannedBubble(Bubble),
    Bubble(Bubble),
    Record(TraceRecord),
    Outcome(TaskOutcome),
}

impl RunTrace {
    pub fn makespan(&self) -> SimTime {
        self.ops.iter().map(|o| o.end).max().unwrap_or(SimTime::ZERO)
    }

    pub fn schedule(&self) -> ScheduleTrace {
        ScheduleTrace::from_ops(self.header.config.clone(), self.ops.clone())
    }

    pub fn activities(&self) -> impl Iterator<Item = (usize, TaskId, ActivityKind, SimTime, SimTime, bool)> + '_ {
        self.records.iter().filter_map(|r| match *r {
            TraceRecord::Activity {
                worker,
                task,
                kind,
                start,
                end,
                completed,
            } => Some((worker, task, kind, start, end, completed)),
            _ => None,
        })
    }

    /// One JSON object per line: header, ops, planned bubbles, bubbles,
    /// records, outcomes.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut line = |l: TraceLine| {
            out.push_str(&serde_json::to_string(&l).expect("trace lines serialize"));
            out.push('\n');
        };
        line(TraceLine::Header(self.header.clone()));
        self.ops.iter().for_each(|o| line(TraceLine::Op(*o)));
        self.planned_bubbles
            .iter()
            .for_each(|b| line(TraceLine::PlannedBubble(b.clone())));
        self.bubbles.iter().for_each(|b| line(TraceLine::Bubble(b.clone())));
        self.records.iter().for_each(|r| line(TraceLine::Record(r.clone())));
        self.outcomes.iter().for_each(|o| line(TraceLine::Outcome(o.clone())));
        out
    }

    pub fn from_jsonl(text: &str) -> Result<RunTrace, Error> {
        let mut header = None;
        let mut trace_ops = Vec::new();
        let mut planned = Vec::new();
        let mut bubbles = Vec::new();
        let mut records = Vec::new();
        let mut outcomes = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: TraceLine = serde_json::from_str(raw).map_err(|e| Error::Parse {
                what: format!("trace line {}", n + 1),
                message: e.to_string(),
            })?;
            match line {
                TraceLine::Header(h) => header = Some(h),
                TraceLine::Op(o) => trace_ops.push(o),
                TraceLine::PlannedBubble(b) => planned.push(b),
                TraceLine::Bubble(b) => bubbles.push(b),
                TraceLine::Record(r) => records.push(r),
                TraceLine::Outcome(o) => outcomes.push(o),
            }
        }
        let header = header.ok_or_else(|| Error::Parse {
            what: "trace".into(),
            message: "missing header line".into(),
        })?;
        Ok(RunTrace {
            header,
            ops: trace_ops,
            planned_bubbles: planned,
            bubbles,
            records,
            outcomes,
        })
    }
}
