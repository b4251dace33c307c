//! Side-task lifecycle and the behaviour of the two programming interfaces.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Error};
use crate::limits::{self, Gate};
use crate::time::SimTime;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SideTaskState {
    Submitted,
    Created,
    Paused,
    Running,
    Stopped,
}

impl SideTaskState {
    pub const ALL: [SideTaskState; 5] = [
        SideTaskState::Submitted,
        SideTaskState::Created,
        SideTaskState::Paused,
        SideTaskState::Running,
        SideTaskState::Stopped,
    ];

    /// Target state of `kind` from `self`, or `None` when the edge does not exist.
    pub fn after(self, kind: TransitionKind) -> Option<SideTaskState> {
        use SideTaskState::*;
        use TransitionKind::*;
        match (self, kind) {
            (Submitted, CreateSideTask) => Some(Created),
            (Created, InitSideTask) => Some(Paused),
            (Paused, StartSideTask) => Some(Running),
            (Running, RunNextStep) => Some(Running),
            (Running, PauseSideTask) => Some(Paused),
            (Created | Paused | Running, StopSideTask) => Some(Stopped),
            _ => None,
        }
    }

    /// GPU context is resident only in these states.
    pub fn holds_gpu_memory(self) -> bool {
        matches!(self, SideTaskState::Paused | SideTaskState::Running)
    }
}

impl fmt::Display for SideTaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransitionKind {
    CreateSideTask,
    InitSideTask,
    StartSideTask,
    RunNextStep,
    PauseSideTask,
    StopSideTask,
}

impl TransitionKind {
    pub const ALL: [TransitionKind; 6] = [
        TransitionKind::CreateSideTask,
        TransitionKind::InitSideTask,
        TransitionKind::StartSideTask,
        TransitionKind::RunNextStep,
        TransitionKind::PauseSideTask,
        TransitionKind::StopSideTask,
    ];
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interface {
    /// Step-wise body; checks the remaining bubble time before every step.
    Iterative,
    /// Monolithic body of back-to-back kernels, paused from outside.
    Imperative,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Misbehavior {
    #[default]
    None,
    /// Never acknowledges `PauseSideTask`.
    IgnoresPause,
    /// Keeps allocating GPU memory while executing.
    MemoryLeak {
        /// GiB per simulated second of execution.
        rate: f64,
    },
}

impl Misbehavior {
    pub fn leak_rate(&self) -> f64 {
        match self {
            Misbehavior::MemoryLeak { rate } => *rate,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideTaskSpec {
    pub id: String,
    pub interface: Interface,
    /// Step length for iterative tasks, kernel length for imperative ones.
    pub per_step_duration: SimTime,
    /// `None` runs until the experiment ends.
    pub total_steps: Option<u64>,
    pub init_duration: SimTime,
    /// GiB allocated by `InitSideTask`.
    pub memory_demand: f64,
    pub misbehavior: Misbehavior,
    pub submit_time: SimTime,
    /// Explicit memory cap in GiB; defaults to the profiled estimate plus headroom.
    pub memory_limit: Option<f64>,
}

impl SideTaskSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |name: &str| format!("tasks[{}].{name}", self.id);
        if self.id.is_empty() {
            return Err(ConfigError::new("tasks[].id", "must be non-empty"));
        }
        if self.per_step_duration == SimTime::ZERO {
            return Err(ConfigError::new(field("per_step_duration"), "must be positive"));
        }
        if self.total_steps == Some(0) {
            return Err(ConfigError::new(field("total_steps"), "must be positive when set"));
        }
        if !self.memory_demand.is_finite() || self.memory_demand < 0.0 {
            return Err(ConfigError::new(field("memory_demand"), "must be non-negative"));
        }
        if let Some(limit) = self.memory_limit {
            if !limit.is_finite() || limit < 0.0 {
                return Err(ConfigError::new(field("memory_limit"), "must be non-negative"));
            }
        }
        if let Misbehavior::MemoryLeak { rate } = self.misbehavior {
            if !rate.is_finite() || rate <= 0.0 {
                return Err(ConfigError::new(field("misbehavior.rate"), "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SideTaskRuntime {
    pub spec: SideTaskSpec,
    pub state: SideTaskState,
    pub steps_completed: u64,
    /// GiB currently resident on the GPU.
    pub memory_allocated: f64,
    pub last_paused_timestamp: Option<SimTime>,
    pub assigned_worker: Option<usize>,
    /// End of the step or kernel in flight; only set while running.
    pub busy_until: Option<SimTime>,
    /// Total time spent executing steps or kernels.
    pub executed: SimTime,
}

impl SideTaskRuntime {
    pub fn new(spec: SideTaskSpec) -> Self {
        SideTaskRuntime {
            spec,
            state: SideTaskState::Submitted,
            steps_completed: 0,
            memory_allocated: 0.0,
            last_paused_timestamp: None,
            assigned_worker: None,
            busy_until: None,
            executed: SimTime::ZERO,
        }
    }

    /// Applies one lifecycle edge at `now`, returning the new state.
    pub fn apply_transition(&mut self, kind: TransitionKind, now: SimTime) -> Result<SideTaskState, Error> {
        let next = self
            .state
            .after(kind)
            .ok_or(Error::IllegalTransition { from: self.state, kind })?;
        match kind {
            TransitionKind::InitSideTask => {
                self.memory_allocated = self.spec.memory_demand;
                self.last_paused_timestamp = Some(now);
            }
            TransitionKind::PauseSideTask => {
                self.last_paused_timestamp = Some(now);
                self.busy_until = None;
            }
            TransitionKind::StopSideTask => {
                self.memory_allocated = 0.0;
                self.busy_until = None;
            }
            _ => {}
        }
        self.state = next;
        Ok(next)
    }

    pub fn steps_exhausted(&self) -> bool {
        self.spec.total_steps.is_some_and(|total| self.steps_completed >= total)
    }

    /// Records a finished step or kernel that ran for `elapsed`.
    pub fn complete_step(&mut self, elapsed: SimTime) {
        self.steps_completed += 1;
        self.executed += elapsed;
        self.memory_allocated = self.memory_after(SimTime::ZERO);
        self.busy_until = None;
    }

    /// Resident memory once a further `extra` of execution has happened.
    /// Leaks are computed from the integer execution total, so the result
    /// does not depend on how execution was split into steps.
    pub fn memory_after(&self, extra: SimTime) -> f64 {
        match self.spec.misbehavior.leak_rate() {
            0.0 => self.memory_allocated,
            rate => limits::leaked_memory(self.spec.memory_demand, rate, self.executed + extra),
        }
    }

    fn require_running(&self, interface: Interface) -> Result<(), Error> {
        if self.state != SideTaskState::Running {
            return Err(Error::NotRunnable {
                task: self.spec.id.clone(),
                reason: format!("state is {}", self.state),
            });
        }
        if self.spec.interface != interface {
            return Err(Error::NotRunnable {
                task: self.spec.id.clone(),
                reason: format!("interface is {:?}", self.spec.interface),
            });
        }
        Ok(())
    }
}

/// Inputs of the remaining-time check performed before every iterative step.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct StepGate {
    pub bubble_end: SimTime,
    /// Profiled per-step estimate.
    pub est_step: SimTime,
    /// Interface and manager cost charged to each dispatch.
    pub check_overhead: SimTime,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum IterativeOutcome {
    /// Overhead occupies `[now, step_start)`, the step `[step_start, end)`.
    StepScheduled { step_start: SimTime, end: SimTime },
    /// Not enough time left in the bubble; idle until the next transition.
    Yielded,
    /// `total_steps` reached.
    Exhausted,
}

/// One dispatch of an iterative task. `actual_step` is how long the step really
/// takes, which differs from the estimate only when step noise is enabled.
pub fn iterative_run(
    rt: &SideTaskRuntime,
    gate: &StepGate,
    now: SimTime,
    actual_step: SimTime,
) -> Result<IterativeOutcome, Error> {
    rt.require_running(Interface::Iterative)?;
    if rt.steps_exhausted() {
        return Ok(IterativeOutcome::Exhausted);
    }
    let remaining = gate.bubble_end.saturating_sub(now + gate.check_overhead);
    match limits::program_directed_gate(remaining, gate.est_step) {
        Gate::Run => {
            let step_start = now + gate.check_overhead;
            Ok(IterativeOutcome::StepScheduled {
                step_start,
                end: step_start + actual_step,
            })
        }
        Gate::Yield => Ok(IterativeOutcome::Yielded),
    }
}

/// Launches the next kernel of an imperative task; returns its end time.
/// No remaining-time check happens: imperative tasks run until paused.
pub fn imperative_run(rt: &SideTaskRuntime, now: SimTime, kernel: SimTime) -> Result<Option<SimTime>, Error> {
    rt.require_running(Interface::Imperative)?;
    if rt.steps_exhausted() {
        return Ok(None);
    }
    Ok(Some(now + kernel))
}

/// When a pause requested at `requested_at` takes effect: immediately if idle,
/// otherwise at the boundary of the step or kernel in flight. Kernels that have
/// started cannot be interrupted. `None` when the task ignores pauses.
pub fn pause_effective_at(rt: &SideTaskRuntime, requested_at: SimTime) -> Option<SimTime> {
    if rt.spec.misbehavior == Misbehavior::IgnoresPause {
        return None;
    }
    Some(rt.busy_until.map_or(requested_at, |busy| busy.max(requested_at)))
}

/// Seeded per-task source of actual step lengths.
///
/// With zero jitter every sample equals the configured length and no random
/// numbers are drawn. Otherwise each sample is `base * (1 + jitter * u)` with
/// `u` uniform in `[-1, 1]`, snapped to the tick grid and at least one tick.
#[derive(Clone, Debug)]
pub struct StepSampler {
    base: SimTime,
    jitter: f64,
    tick: SimTime,
    rng: ChaCha8Rng,
}

impl StepSampler {
    pub fn new(base: SimTime, jitter: f64, tick: SimTime, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        StepSampler {
            base,
            jitter,
            tick,
            rng,
        }
    }

    pub fn next_step(&mut self) -> SimTime {
        if self.jitter == 0.0 {
            return self.base;
        }
        let u: f64 = self.rng.gen_range(-1.0..=1.0);
        let raw = self.base.as_micros() as f64 * (1.0 + self.jitter * u);
        let tick = self.tick.as_micros().max(1);
        let ticks = ((raw / tick as f64).round() as u64).max(1);
        SimTime::from_micros(ticks * tick)
    }
}
