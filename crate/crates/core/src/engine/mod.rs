//! The discrete-event core.
//!
//! One logical clock drives the pipeline, the side task manager and the side
//! tasks. Each stage's GPU has at most one occupant: a pipeline op or a side
//! task's step, kernel or initialization. Pipeline ops have priority: an op
//! that becomes ready while a side task holds the GPU waits for that task's
//! next boundary (or its kill), and the wait shows up as a later op start.
//!
//! Events with equal timestamps are processed by class, then worker, then
//! insertion sequence:
//!
//! | class | event |
//! |-------|-------|
//! | 0 | pipeline op end |
//! | 1 | side-task step/kernel/init end, OOM kill |
//! | 2 | grace-period check |
//! | 3-6 | manager: bubble end, task finished, task submitted, bubble start |
//! | 7 | transition RPC lands at the task |
//! | 8 | memory reclaimed |

mod replay;
mod trace;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

pub use replay::{replay_check, Violation};
pub use trace::{ActivityKind, Disposition, RunTrace, TaskOutcome, TraceHeader, TraceRecord};

use crate::error::{ConfigError, Error};
use crate::limits::{self, Enforcement, KillReason, LimitConfig, MemoryVerdict};
use crate::manager::{Assignment, ManagerEventKind, SideTaskManager, TaskId, TransitionRequest};
use crate::pipeline::{self, stage_issue_order, Bubble, OpEvent, OpIndexer, OpKind, PipelineConfig, ScheduleTrace};
use crate::profiler::{self, Noise, TaskProfile};
use crate::task::{
    self, Interface, IterativeOutcome, Misbehavior, SideTaskRuntime, SideTaskSpec, SideTaskState, StepGate,
    StepSampler, TransitionKind,
};
use crate::time::SimTime;

const EVENT_BUDGET: u64 = 200_000_000;

/// Knobs of one engine run that are not part of the workload itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    /// Grid every configured duration must lie on.
    pub tick: SimTime,
    pub seed: u64,
    pub limits: LimitConfig,
    /// Cost of each iterative dispatch, charged inside the bubble.
    pub check_overhead: SimTime,
    /// Delay between a manager decision and the transition taking effect.
    pub rpc_latency: SimTime,
    pub profile_steps: u64,
    /// Multiplicative step-length noise; 0 disables it.
    pub step_jitter: f64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            tick: SimTime::from_millis(1),
            seed: 0,
            limits: LimitConfig::default(),
            check_overhead: SimTime::from_millis(1),
            rpc_latency: SimTime::ZERO,
            profile_steps: profiler::DEFAULT_PROFILE_STEPS,
            step_jitter: 0.0,
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.tick == SimTime::ZERO {
            return Err(ConfigError::new("tick", "must be positive"));
        }
        self.limits.validate()?;
        for (field, t) in [
            ("limits.grace_period", self.limits.grace_period),
            ("limits.reclaim_delay", self.limits.reclaim_delay),
            ("runtime.check_overhead", self.check_overhead),
            ("runtime.rpc_latency", self.rpc_latency),
        ] {
            if !t.is_multiple_of(self.tick) {
                return Err(ConfigError::new(field, "must be a multiple of the tick"));
            }
        }
        if self.profile_steps == 0 {
            return Err(ConfigError::new("runtime.profile_steps", "must be at least 1"));
        }
        if !self.step_jitter.is_finite() || !(0.0..1.0).contains(&self.step_jitter) {
            return Err(ConfigError::new("runtime.step_jitter", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn noise(&self) -> Noise {
        Noise {
            step_jitter: self.step_jitter,
            seed: self.seed,
            tick: self.tick,
        }
    }
}

fn validate_inputs(config: &PipelineConfig, tasks: &[SideTaskSpec], settings: &RunSettings) -> Result<(), ConfigError> {
    config.validate()?;
    settings.validate()?;
    for (s, (fp, bp)) in config.fp_durations.iter().zip(&config.bp_durations).enumerate() {
        if !fp.is_multiple_of(settings.tick) || !bp.is_multiple_of(settings.tick) {
            return Err(ConfigError::new(
                format!("pipeline.stage[{s}]"),
                "op durations must be multiples of the tick",
            ));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for t in tasks {
        t.validate()?;
        if !seen.insert(t.id.as_str()) {
            return Err(ConfigError::new(format!("tasks[{}].id", t.id), "duplicate task id"));
        }
        for (field, d) in [
            ("per_step_duration", t.per_step_duration),
            ("init_duration", t.init_duration),
            ("submit_time", t.submit_time),
        ] {
            if !d.is_multiple_of(settings.tick) {
                return Err(ConfigError::new(
                    format!("tasks[{}].{field}", t.id),
                    "must be a multiple of the tick",
                ));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
enum Ev {
    OpEnd {
        stage: usize,
    },
    SideEnd {
        task: TaskId,
        gen: u64,
    },
    OomKill {
        task: TaskId,
        gen: u64,
    },
    GraceCheck {
        task: TaskId,
        pause_at: SimTime,
        reason: KillReason,
    },
    Manager(ManagerEventKind),
    BubbleOpened {
        bubble: Bubble,
        gen: u64,
    },
    Land(TransitionRequest),
    Reclaim {
        task: TaskId,
    },
}

impl Ev {
    fn class(&self) -> u8 {
        match self {
            Ev::OpEnd { .. } => 0,
            Ev::SideEnd { .. } | Ev::OomKill { .. } => 1,
            Ev::GraceCheck { .. } => 2,
            Ev::Manager(kind) => 3 + kind.priority(),
            Ev::BubbleOpened { .. } => 6,
            Ev::Land(_) => 7,
            Ev::Reclaim { .. } => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    time: SimTime,
    class: u8,
    worker: usize,
    seq: u64,
}

struct Queued {
    key: Key,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key.cmp(&other.key)
    }
}

#[derive(Clone, Debug)]
struct Activity {
    kind: ActivityKind,
    /// Start of the dispatch overhead preceding a step.
    overhead_start: Option<SimTime>,
    start: SimTime,
    end: SimTime,
    mem_at_start: f64,
}

#[derive(Clone, Debug)]
enum Deferred {
    Pause,
    Start { bubble_end: SimTime },
}

struct TaskSlot {
    rt: SideTaskRuntime,
    profile: TaskProfile,
    limit: f64,
    sampler: StepSampler,
    initializing: bool,
    activity: Option<Activity>,
    deferred: Vec<Deferred>,
    bubble_end: SimTime,
    gen: u64,
    peak_memory: f64,
    disposition: Option<Disposition>,
}

#[derive(Clone, Copy, Debug)]
struct RunningOp {
    kind: OpKind,
    micro_batch: usize,
    epoch: usize,
    start: SimTime,
}

struct Engine<'a> {
    cfg: &'a PipelineConfig,
    settings: &'a RunSettings,
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,

    idx: OpIndexer,
    orders: Vec<Vec<(OpKind, usize)>>,
    op_end: Vec<Option<SimTime>>,
    cursor: Vec<usize>,
    running_op: Vec<Option<RunningOp>>,
    pending_op: Vec<bool>,
    epoch_left: Vec<usize>,
    epoch_done: Vec<Option<SimTime>>,
    /// Per stage: when the currently open bubble slot started.
    open_slot: Vec<Option<SimTime>>,
    slot_gen: Vec<u64>,
    planned: BTreeMap<(usize, usize, usize), Bubble>,
    ops_out: Vec<OpEvent>,

    tasks: Vec<TaskSlot>,
    gpu_task: Vec<Option<TaskId>>,
    active_task: Vec<Option<TaskId>>,
    manager: SideTaskManager,
    records: Vec<TraceRecord>,
}

/// Runs one experiment to completion.
pub fn run(config: &PipelineConfig, tasks: &[SideTaskSpec], settings: &RunSettings) -> Result<RunTrace, Error> {
    validate_inputs(config, tasks, settings)?;
    let planned_trace = pipeline::build_schedule(config)?;
    let planned_bubbles = pipeline::extract_bubbles(&planned_trace);
    let noise = settings.noise();
    let profiles: Vec<TaskProfile> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| profiler::profile_task(t, i, settings.profile_steps, &noise))
        .collect();
    let worker_memory: Vec<f64> = (0..config.num_stages).map(|s| config.available_memory(s)).collect();
    let memory_limits: Vec<f64> = tasks
        .iter()
        .zip(&profiles)
        .map(|(t, p)| settings.limits.memory_limit_for(t.memory_limit, p.est_memory))
        .collect();

    let mut engine = Engine::new(
        config,
        settings,
        tasks,
        &profiles,
        &memory_limits,
        &worker_memory,
        &planned_bubbles,
    );
    engine.start();
    engine.drain()?;
    let ops = engine.ops_out.clone();
    let outcomes = engine.outcomes();
    let records = std::mem::take(&mut engine.records);
    let executed = ScheduleTrace::from_ops(config.clone(), ops);
    let bubbles = pipeline::extract_bubbles(&executed);
    Ok(RunTrace {
        header: TraceHeader {
            config: config.clone(),
            tasks: tasks.to_vec(),
            profiles,
            memory_limits,
            worker_memory,
            settings: settings.clone(),
        },
        ops: executed.ops,
        planned_bubbles,
        bubbles,
        records,
        outcomes,
    })
}

impl<'a> Engine<'a> {
    fn new(
        cfg: &'a PipelineConfig,
        settings: &'a RunSettings,
        specs: &[SideTaskSpec],
        profiles: &[TaskProfile],
        limits: &[f64],
        worker_memory: &[f64],
        planned_bubbles: &[Bubble],
    ) -> Self {
        let p = cfg.num_stages;
        let m = cfg.num_micro_batches;
        let idx = OpIndexer::new(cfg);
        let tasks = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| TaskSlot {
                rt: SideTaskRuntime::new(spec.clone()),
                profile: profiles[i].clone(),
                limit: limits[i],
                sampler: StepSampler::new(
                    spec.per_step_duration,
                    settings.step_jitter,
                    settings.tick,
                    settings.seed,
                    i as u64,
                ),
                initializing: false,
                activity: None,
                deferred: Vec::new(),
                bubble_end: SimTime::ZERO,
                gen: 0,
                peak_memory: 0.0,
                disposition: None,
            })
            .collect();
        Engine {
            cfg,
            settings,
            now: SimTime::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            orders: (0..p).map(|s| stage_issue_order(p, m, s)).collect(),
            op_end: vec![None; idx.len(cfg.num_epochs)],
            idx,
            cursor: vec![0; p],
            running_op: vec![None; p],
            pending_op: vec![false; p],
            epoch_left: vec![2 * p * m; cfg.num_epochs],
            epoch_done: vec![None; cfg.num_epochs],
            open_slot: vec![None; p],
            slot_gen: vec![0; p],
            planned: planned_bubbles
                .iter()
                .map(|b| ((b.stage, b.epoch, b.slot), b.clone()))
                .collect(),
            ops_out: Vec::with_capacity(2 * p * m * cfg.num_epochs),
            tasks,
            gpu_task: vec![None; p],
            active_task: vec![None; p],
            manager: SideTaskManager::new(worker_memory, settings.rpc_latency),
            records: Vec::new(),
        }
    }

    fn push(&mut self, time: SimTime, worker: usize, ev: Ev) {
        self.seq += 1;
        let key = Key {
            time,
            class: ev.class(),
            worker,
            seq: self.seq,
        };
        self.queue.push(Reverse(Queued { key, ev }));
    }

    fn task_worker(&self, task: TaskId) -> usize {
        self.tasks[task].rt.assigned_worker.unwrap_or(0)
    }

    fn start(&mut self) {
        for i in 0..self.tasks.len() {
            let profile = self.tasks[i].profile.clone();
            let at = self.tasks[i].rt.spec.submit_time;
            self.push(at, 0, Ev::Manager(ManagerEventKind::TaskSubmitted { task: i, profile }));
        }
        for s in 0..self.cfg.num_stages {
            self.try_advance(s);
            if self.stage_idle(s) {
                self.maybe_open_slot(s, 0, 0);
            }
        }
    }

    fn drain(&mut self) -> Result<(), Error> {
        let mut processed = 0u64;
        while let Some(Reverse(Queued { key, ev })) = self.queue.pop() {
            debug_assert!(key.time >= self.now, "event scheduled in the past");
            self.now = key.time;
            processed += 1;
            if processed > EVENT_BUDGET {
                return Err(Error::Internal("event budget exhausted".into()));
            }
            match ev {
                Ev::OpEnd { stage } => self.on_op_end(stage),
                Ev::SideEnd { task, gen } => self.on_side_end(task, gen),
                Ev::OomKill { task, gen } => {
                    if self.tasks[task].gen == gen && self.tasks[task].activity.is_some() {
                        self.kill(task, KillReason::Oom);
                    }
                }
                Ev::GraceCheck { task, pause_at, reason } => self.on_grace_check(task, pause_at, reason),
                Ev::Manager(kind) => self.on_manager_event(kind),
                Ev::BubbleOpened { bubble, gen } => {
                    if self.slot_gen[bubble.stage] == gen {
                        let worker = bubble.stage;
                        self.on_manager_event(ManagerEventKind::BubbleStarted { worker, bubble });
                    }
                }
                Ev::Land(req) => self.on_land(req),
                Ev::Reclaim { task } => self.records.push(TraceRecord::Reclaimed { time: self.now, task }),
            }
        }
        if self
            .cursor
            .iter()
            .any(|&c| c < self.orders[0].len() * self.cfg.num_epochs)
        {
            return Err(Error::Internal("pipeline did not finish".into()));
        }
        Ok(())
    }

    // ---- pipeline ----

    fn per_stage_total(&self) -> usize {
        2 * self.cfg.num_micro_batches * self.cfg.num_epochs
    }

    fn next_op(&self, s: usize) -> Option<(usize, OpKind, usize)> {
        let c = self.cursor[s];
        if c >= self.per_stage_total() {
            return None;
        }
        let n = self.cfg.ops_per_stage_epoch();
        let (kind, mb) = self.orders[s][c % n];
        Some((c / n, kind, mb))
    }

    fn next_op_ready(&self, s: usize) -> bool {
        let Some((epoch, kind, mb)) = self.next_op(s) else {
            return false;
        };
        if epoch > 0 && self.epoch_done[epoch - 1].is_none() {
            return false;
        }
        match self.idx.upstream(epoch, s, kind, mb) {
            Some(up) => self.op_end[up].is_some(),
            None => true,
        }
    }

    fn stage_idle(&self, s: usize) -> bool {
        self.running_op[s].is_none() && !self.pending_op[s]
    }

    fn try_advance(&mut self, s: usize) {
        if !self.stage_idle(s) || !self.next_op_ready(s) {
            return;
        }
        self.close_slot(s);
        if self.gpu_task[s].is_some() {
            self.pending_op[s] = true;
        } else {
            self.start_op(s);
        }
    }

    fn start_op(&mut self, s: usize) {
        let (epoch, kind, micro_batch) = self.next_op(s).expect("op to start exists");
        self.pending_op[s] = false;
        self.running_op[s] = Some(RunningOp {
            kind,
            micro_batch,
            epoch,
            start: self.now,
        });
        let end = self.now + self.cfg.duration(s, kind);
        self.push(end, s, Ev::OpEnd { stage: s });
    }

    fn on_op_end(&mut self, s: usize) {
        let op = self.running_op[s].take().expect("op end without running op");
        self.ops_out.push(OpEvent {
            stage: s,
            kind: op.kind,
            micro_batch: op.micro_batch,
            epoch: op.epoch,
            start: op.start,
            end: self.now,
        });
        self.op_end[self.idx.index(op.epoch, s, op.kind, op.micro_batch)] = Some(self.now);
        self.cursor[s] += 1;
        self.epoch_left[op.epoch] -= 1;
        let epoch_complete = self.epoch_left[op.epoch] == 0;
        if epoch_complete {
            self.epoch_done[op.epoch] = Some(self.now);
        }

        self.try_advance(s);
        let n = self.cfg.ops_per_stage_epoch();
        let pos = self.cursor[s] % n;
        if self.stage_idle(s) && !(pos == 0 && epoch_complete) {
            let slot = if pos == 0 { n } else { pos };
            self.maybe_open_slot(s, op.epoch, slot);
        }

        if epoch_complete {
            for t in 0..self.cfg.num_stages {
                self.close_slot(t);
            }
            if op.epoch + 1 < self.cfg.num_epochs {
                for t in 0..self.cfg.num_stages {
                    self.try_advance(t);
                    if self.stage_idle(t) {
                        self.maybe_open_slot(t, op.epoch + 1, 0);
                    }
                }
            }
        } else {
            match op.kind {
                OpKind::Fp if s + 1 < self.cfg.num_stages => self.try_advance(s + 1),
                OpKind::Bp if s > 0 => self.try_advance(s - 1),
                _ => {}
            }
        }
        if self.stage_idle(s) {
            self.try_launch_side(s);
        }
    }

    fn maybe_open_slot(&mut self, s: usize, epoch: usize, slot: usize) {
        let Some(planned) = self.planned.get(&(s, epoch, slot)) else {
            return;
        };
        let bubble = Bubble {
            start: self.now,
            ..planned.clone()
        };
        self.open_slot[s] = Some(self.now);
        self.slot_gen[s] += 1;
        self.records.push(TraceRecord::BubbleStarted {
            time: self.now,
            worker: s,
            epoch,
            slot,
            planned_end: bubble.end(),
        });
        let gen = self.slot_gen[s];
        self.push(self.now, s, Ev::BubbleOpened { bubble, gen });
    }

    /// A slot closing at the instant it opened was never idle; the manager
    /// is told about neither edge.
    fn close_slot(&mut self, s: usize) {
        let Some(opened) = self.open_slot[s].take() else {
            return;
        };
        self.records.push(TraceRecord::BubbleEnded {
            time: self.now,
            worker: s,
        });
        if opened == self.now {
            self.slot_gen[s] += 1;
        } else {
            self.push(self.now, s, Ev::Manager(ManagerEventKind::BubbleEnded { worker: s }));
        }
    }

    // ---- manager ----

    fn on_manager_event(&mut self, kind: ManagerEventKind) {
        let event = crate::manager::ManagerEvent { time: self.now, kind };
        let (assignment, rpcs) = self.manager.handle(&event);
        if let (Some(assignment), ManagerEventKind::TaskSubmitted { task, .. }) = (assignment, &event.kind) {
            let task = *task;
            self.records.push(TraceRecord::Submitted {
                time: self.now,
                task,
                assignment,
            });
            match assignment {
                Assignment::Assigned { worker } => self.tasks[task].rt.assigned_worker = Some(worker),
                Assignment::Rejected => self.tasks[task].disposition = Some(Disposition::Rejected),
            }
        }
        for rpc in rpcs {
            self.records.push(TraceRecord::Rpc {
                issued: rpc.issued_at,
                lands: rpc.lands_at,
                task: rpc.task,
                worker: rpc.worker,
                kind: rpc.kind,
                bubble_end: rpc.bubble_end,
            });
            self.push(rpc.lands_at, rpc.worker, Ev::Land(rpc));
        }
    }

    // ---- side tasks ----

    fn transition(&mut self, task: TaskId, kind: TransitionKind) {
        let now = self.now;
        let worker = self.task_worker(task);
        let slot = &mut self.tasks[task];
        let from = slot.rt.state;
        let to = slot
            .rt
            .apply_transition(kind, now)
            .expect("engine only applies legal transitions");
        slot.peak_memory = slot.peak_memory.max(slot.rt.memory_allocated);
        if kind != TransitionKind::RunNextStep {
            self.records.push(TraceRecord::Transition {
                time: now,
                task,
                worker,
                kind,
                from,
                to,
                memory: slot.rt.memory_allocated,
            });
        }
    }

    fn ignored(&mut self, task: TaskId, kind: TransitionKind) {
        self.records.push(TraceRecord::Ignored {
            time: self.now,
            task,
            kind,
            state: self.tasks[task].rt.state,
        });
    }

    fn on_land(&mut self, req: TransitionRequest) {
        let task = req.task;
        let w = req.worker;
        let state = self.tasks[task].rt.state;
        if state == SideTaskState::Stopped {
            self.ignored(task, req.kind);
            return;
        }
        let busy = self.tasks[task].activity.is_some();
        match req.kind {
            TransitionKind::CreateSideTask if state == SideTaskState::Submitted => {
                self.transition(task, TransitionKind::CreateSideTask);
            }
            TransitionKind::InitSideTask if state == SideTaskState::Created && !self.tasks[task].initializing => {
                self.tasks[task].initializing = true;
                self.active_task[w] = Some(task);
                self.try_launch_side(w);
            }
            TransitionKind::StartSideTask if busy => {
                let bubble_end = req.bubble_end.unwrap_or(self.now);
                self.tasks[task].deferred.push(Deferred::Start { bubble_end });
            }
            TransitionKind::StartSideTask if state == SideTaskState::Paused => {
                self.tasks[task].bubble_end = req.bubble_end.unwrap_or(self.now);
                self.transition(task, TransitionKind::StartSideTask);
                self.active_task[w] = Some(task);
                self.try_launch_side(w);
            }
            TransitionKind::PauseSideTask => self.on_pause_landed(task, w, busy),
            TransitionKind::StopSideTask => {
                self.truncate_activity(task);
                self.transition(task, TransitionKind::StopSideTask);
                self.release(task, w);
                let slot = &mut self.tasks[task];
                if slot.disposition.is_none() {
                    slot.disposition = Some(Disposition::Completed);
                }
                self.after_gpu_released(w);
            }
            kind => self.ignored(task, kind),
        }
    }

    fn on_pause_landed(&mut self, task: TaskId, w: usize, busy: bool) {
        let slot = &self.tasks[task];
        let state = slot.rt.state;
        let initializing = slot.initializing;
        let ignores = slot.rt.spec.misbehavior == Misbehavior::IgnoresPause;
        self.records.push(TraceRecord::PauseRequested {
            time: self.now,
            task,
            worker: w,
            state,
            busy,
        });
        let grace_at = self.now + self.settings.limits.grace_period;
        let pause_at = self.now;
        if initializing {
            self.tasks[task].deferred.push(Deferred::Pause);
            self.push(
                grace_at,
                w,
                Ev::GraceCheck {
                    task,
                    pause_at,
                    reason: KillReason::InitTimeout,
                },
            );
            return;
        }
        if state != SideTaskState::Running {
            // Already paused (or never loaded): nothing to enforce.
            self.ignored(task, TransitionKind::PauseSideTask);
            return;
        }
        self.push(
            grace_at,
            w,
            Ev::GraceCheck {
                task,
                pause_at,
                reason: KillReason::PauseTimeout,
            },
        );
        if ignores {
            return;
        }
        if busy {
            self.tasks[task].deferred.push(Deferred::Pause);
        } else {
            self.transition(task, TransitionKind::PauseSideTask);
            if self.active_task[w] == Some(task) {
                self.active_task[w] = None;
            }
        }
    }

    fn on_grace_check(&mut self, task: TaskId, pause_at: SimTime, reason: KillReason) {
        let rt = &self.tasks[task].rt;
        if rt.state == SideTaskState::Stopped {
            return;
        }
        let verdict = limits::framework_enforce(
            rt.last_paused_timestamp,
            pause_at,
            self.now,
            self.settings.limits.grace_period,
        );
        if verdict == Enforcement::Kill {
            self.kill(task, reason);
        }
    }

    /// Clears the GPU and worker bindings of a task that stopped running.
    fn release(&mut self, task: TaskId, w: usize) {
        if self.gpu_task[w] == Some(task) {
            self.gpu_task[w] = None;
        }
        if self.active_task[w] == Some(task) {
            self.active_task[w] = None;
        }
        let slot = &mut self.tasks[task];
        slot.initializing = false;
        slot.deferred.clear();
    }

    /// Cuts the in-flight activity at `now`, recording the partial interval.
    fn truncate_activity(&mut self, task: TaskId) {
        let now = self.now;
        let w = self.task_worker(task);
        let slot = &mut self.tasks[task];
        let Some(act) = slot.activity.take() else {
            return;
        };
        slot.gen += 1;
        slot.rt.busy_until = None;
        if act.kind.is_work() {
            slot.rt.memory_allocated = slot.rt.memory_after(now.max(act.start) - act.start);
            slot.peak_memory = slot.peak_memory.max(slot.rt.memory_allocated);
        }
        if let Some(o) = act.overhead_start {
            if o < now {
                self.records.push(TraceRecord::Activity {
                    worker: w,
                    task,
                    kind: ActivityKind::Overhead,
                    start: o,
                    end: now.min(act.start),
                    completed: now >= act.start,
                });
            }
        }
        if act.start < now {
            self.records.push(TraceRecord::Activity {
                worker: w,
                task,
                kind: act.kind,
                start: act.start,
                end: now,
                completed: false,
            });
        }
        if self.gpu_task[w] == Some(task) {
            self.gpu_task[w] = None;
        }
    }

    fn kill(&mut self, task: TaskId, reason: KillReason) {
        let w = self.task_worker(task);
        self.truncate_activity(task);
        let memory = self.tasks[task].rt.memory_allocated;
        self.transition(task, TransitionKind::StopSideTask);
        self.release(task, w);
        self.tasks[task].disposition = Some(Disposition::Killed { reason });
        self.records.push(TraceRecord::Kill {
            time: self.now,
            task,
            worker: w,
            reason,
            memory,
        });
        self.manager.on_task_killed(task);
        let at = self.now + self.settings.limits.reclaim_delay;
        self.push(at, w, Ev::Reclaim { task });
        self.after_gpu_released(w);
    }

    fn after_gpu_released(&mut self, w: usize) {
        if self.gpu_task[w].is_some() {
            return;
        }
        if self.pending_op[w] {
            self.start_op(w);
        } else {
            self.try_launch_side(w);
        }
    }

    fn on_side_end(&mut self, task: TaskId, gen: u64) {
        if self.tasks[task].gen != gen {
            return;
        }
        let Some(act) = self.tasks[task].activity.take() else {
            return;
        };
        let w = self.task_worker(task);
        self.gpu_task[w] = None;
        if let Some(o) = act.overhead_start {
            self.records.push(TraceRecord::Activity {
                worker: w,
                task,
                kind: ActivityKind::Overhead,
                start: o,
                end: act.start,
                completed: true,
            });
        }
        self.records.push(TraceRecord::Activity {
            worker: w,
            task,
            kind: act.kind,
            start: act.start,
            end: act.end,
            completed: true,
        });

        match act.kind {
            ActivityKind::Init => {
                self.tasks[task].initializing = false;
                self.transition(task, TransitionKind::InitSideTask);
                let slot = &self.tasks[task];
                if limits::check_memory(slot.rt.memory_allocated, slot.limit) == MemoryVerdict::OomKill {
                    self.kill(task, KillReason::Oom);
                    return;
                }
                if self.active_task[w] == Some(task) {
                    self.active_task[w] = None;
                }
            }
            _ => {
                let slot = &mut self.tasks[task];
                slot.rt.memory_allocated = act.mem_at_start;
                slot.rt.complete_step(act.end - act.start);
                slot.peak_memory = slot.peak_memory.max(slot.rt.memory_allocated);
                if slot.rt.steps_exhausted() {
                    self.records.push(TraceRecord::Finished { time: self.now, task });
                    self.push(self.now, w, Ev::Manager(ManagerEventKind::TaskFinished { task }));
                }
            }
        }

        let deferred = std::mem::take(&mut self.tasks[task].deferred);
        for d in deferred {
            let state = self.tasks[task].rt.state;
            match d {
                Deferred::Pause if state == SideTaskState::Running => {
                    if self.tasks[task].rt.spec.misbehavior != Misbehavior::IgnoresPause {
                        self.transition(task, TransitionKind::PauseSideTask);
                        if self.active_task[w] == Some(task) {
                            self.active_task[w] = None;
                        }
                    }
                }
                Deferred::Start { bubble_end } if state == SideTaskState::Paused => {
                    self.tasks[task].bubble_end = bubble_end;
                    self.transition(task, TransitionKind::StartSideTask);
                    self.active_task[w] = Some(task);
                }
                Deferred::Pause => {}
                Deferred::Start { .. } => self.ignored(task, TransitionKind::StartSideTask),
            }
        }
        self.after_gpu_released(w);
    }

    fn try_launch_side(&mut self, w: usize) {
        let training_done = self.epoch_done[self.cfg.num_epochs - 1].is_some();
        if training_done || !self.stage_idle(w) || self.gpu_task[w].is_some() {
            return;
        }
        let Some(task) = self.active_task[w] else {
            return;
        };
        let now = self.now;
        if self.tasks[task].initializing {
            let end = now + self.tasks[task].rt.spec.init_duration;
            self.begin_activity(
                task,
                w,
                Activity {
                    kind: ActivityKind::Init,
                    overhead_start: None,
                    start: now,
                    end,
                    mem_at_start: 0.0,
                },
            );
            return;
        }
        let slot = &mut self.tasks[task];
        if slot.rt.state != SideTaskState::Running {
            return;
        }
        let mem = slot.rt.memory_allocated;
        let activity = match slot.rt.spec.interface {
            Interface::Iterative => {
                let gate = StepGate {
                    bubble_end: slot.bubble_end,
                    est_step: slot
                        .profile
                        .est_per_step_duration
                        .unwrap_or(slot.rt.spec.per_step_duration),
                    check_overhead: self.settings.check_overhead,
                };
                match task::iterative_run(&slot.rt, &gate, now, gate.est_step).expect("running iterative task") {
                    IterativeOutcome::StepScheduled { step_start, .. } => {
                        let actual = slot.sampler.next_step();
                        Activity {
                            kind: ActivityKind::Step,
                            overhead_start: (step_start > now).then_some(now),
                            start: step_start,
                            end: step_start + actual,
                            mem_at_start: mem,
                        }
                    }
                    IterativeOutcome::Yielded | IterativeOutcome::Exhausted => return,
                }
            }
            Interface::Imperative => {
                let kernel = slot.sampler.next_step();
                match task::imperative_run(&slot.rt, now, kernel).expect("running imperative task") {
                    Some(end) => Activity {
                        kind: ActivityKind::Kernel,
                        overhead_start: None,
                        start: now,
                        end,
                        mem_at_start: mem,
                    },
                    None => return,
                }
            }
        };
        self.tasks[task]
            .rt
            .apply_transition(TransitionKind::RunNextStep, activity.start)
            .expect("running task accepts RunNextStep");
        self.begin_activity(task, w, activity);
    }

    fn begin_activity(&mut self, task: TaskId, w: usize, act: Activity) {
        let tick = self.settings.tick;
        let slot = &mut self.tasks[task];
        slot.gen += 1;
        let gen = slot.gen;
        let rate = slot.rt.spec.misbehavior.leak_rate();
        let crossing = if act.kind.is_work() {
            limits::leak_crossing(
                slot.rt.spec.memory_demand,
                rate,
                slot.limit,
                slot.rt.executed,
                act.end - act.start,
                tick,
            )
        } else {
            None
        };
        slot.rt.busy_until = Some(act.end);
        let (start, end) = (act.start, act.end);
        slot.activity = Some(act);
        self.gpu_task[w] = Some(task);
        match crossing {
            Some(offset) => self.push(start + offset, w, Ev::OomKill { task, gen }),
            None => self.push(end, w, Ev::SideEnd { task, gen }),
        }
    }

    fn outcomes(&self) -> Vec<TaskOutcome> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(i, slot)| TaskOutcome {
                task: i,
                id: slot.rt.spec.id.clone(),
                worker: slot.rt.assigned_worker,
                disposition: slot
                    .disposition
                    .clone()
                    .unwrap_or(Disposition::Unfinished { state: slot.rt.state }),
                work_done: slot.rt.steps_completed,
                peak_memory: slot.peak_memory,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
