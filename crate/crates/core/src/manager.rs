//! Side task manager: assigns new tasks to per-GPU workers and drives task
//! transitions from bubble start and end notifications.
//!
//! The manager only sees what it has commanded. Its view of each task's state
//! is the target of the last transition it issued, which is what the
//! `IsCreated`/`IsPaused` checks in the scheduling loop consult.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::pipeline::Bubble;
use crate::profiler::TaskProfile;
use crate::task::{SideTaskState, TransitionKind};
use crate::time::SimTime;

/// Index of a task in the experiment's task list.
pub type TaskId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct WorkerState {
    pub worker_id: usize,
    /// GiB available to side tasks on this GPU.
    pub gpu_mem: f64,
    /// Ordered by submission time.
    pub task_queue: VecDeque<TaskId>,
    pub current_task: Option<TaskId>,
    /// The bubble currently valid; its `end()` is the planned end.
    pub current_bubble: Option<Bubble>,
}

impl WorkerState {
    pub fn new(worker_id: usize, gpu_mem: f64) -> Self {
        WorkerState {
            worker_id,
            gpu_mem,
            task_queue: VecDeque::new(),
            current_task: None,
            current_bubble: None,
        }
    }

    /// Unfinished responsibilities: queued tasks plus the one being served.
    pub fn task_count(&self) -> usize {
        self.task_queue.len() + usize::from(self.current_task.is_some())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Assignment {
    Assigned { worker: usize },
    Rejected,
}

/// Worker selection on task arrival: among workers whose free memory strictly
/// exceeds the task's, the one with the fewest tasks; first found wins ties.
pub fn select_worker(est_memory: f64, workers: &[WorkerState]) -> Option<usize> {
    let mut min_tasks = usize::MAX;
    let mut selected = None;
    for w in workers {
        if w.gpu_mem > est_memory {
            let n = w.task_count();
            if n < min_tasks {
                min_tasks = n;
                selected = Some(w.worker_id);
            }
        }
    }
    selected
}

#[derive(Clone, Debug, PartialEq)]
pub enum ManagerEventKind {
    BubbleEnded { worker: usize },
    TaskFinished { task: TaskId },
    TaskSubmitted { task: TaskId, profile: TaskProfile },
    BubbleStarted { worker: usize, bubble: Bubble },
}

impl ManagerEventKind {
    /// Processing order of events that share a timestamp.
    pub fn priority(&self) -> u8 {
        match self {
            ManagerEventKind::BubbleEnded { .. } => 0,
            ManagerEventKind::TaskFinished { .. } => 1,
            ManagerEventKind::TaskSubmitted { .. } => 2,
            ManagerEventKind::BubbleStarted { .. } => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManagerEvent {
    pub time: SimTime,
    pub kind: ManagerEventKind,
}

/// A transition RPC. It takes effect at the task at `lands_at`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRequest {
    pub task: TaskId,
    pub worker: usize,
    pub kind: TransitionKind,
    /// Planned bubble end, sent with `StartSideTask`.
    pub bubble_end: Option<SimTime>,
    pub issued_at: SimTime,
    pub lands_at: SimTime,
}

#[derive(Clone, Debug)]
pub struct SideTaskManager {
    pub workers: Vec<WorkerState>,
    pub rpc_latency: SimTime,
    view: BTreeMap<TaskId, SideTaskState>,
    home: BTreeMap<TaskId, usize>,
}

impl SideTaskManager {
    pub fn new(gpu_mem: &[f64], rpc_latency: SimTime) -> Self {
        SideTaskManager {
            workers: gpu_mem
                .iter()
                .enumerate()
                .map(|(i, &m)| WorkerState::new(i, m))
                .collect(),
            rpc_latency,
            view: BTreeMap::new(),
            home: BTreeMap::new(),
        }
    }

    /// State the manager last commanded for `task`.
    pub fn view_of(&self, task: TaskId) -> Option<SideTaskState> {
        self.view.get(&task).copied()
    }

    pub fn worker_of(&self, task: TaskId) -> Option<usize> {
        self.home.get(&task).copied()
    }

    fn request(
        &mut self,
        task: TaskId,
        worker: usize,
        kind: TransitionKind,
        bubble_end: Option<SimTime>,
        now: SimTime,
    ) -> TransitionRequest {
        if let Some(state) = self.view.get_mut(&task) {
            if let Some(next) = state.after(kind) {
                *state = next;
            }
        }
        TransitionRequest {
            task,
            worker,
            kind,
            bubble_end,
            issued_at: now,
            lands_at: now + self.rpc_latency,
        }
    }

    /// Admits a profiled task or rejects it for lack of memory. An admitted
    /// task is created on its worker right away.
    pub fn submit_task(
        &mut self,
        task: TaskId,
        profile: &TaskProfile,
        now: SimTime,
    ) -> (Assignment, Vec<TransitionRequest>) {
        self.view.insert(task, SideTaskState::Submitted);
        match select_worker(profile.est_memory, &self.workers) {
            Some(worker) => {
                self.workers[worker].task_queue.push_back(task);
                self.home.insert(task, worker);
                let create = self.request(task, worker, TransitionKind::CreateSideTask, None, now);
                (Assignment::Assigned { worker }, vec![create])
            }
            None => (Assignment::Rejected, Vec::new()),
        }
    }

    pub fn on_bubble_ended(&mut self, worker: usize, now: SimTime) -> Vec<TransitionRequest> {
        let mut out = Vec::new();
        if let Some(task) = self.workers[worker].current_task {
            out.push(self.request(task, worker, TransitionKind::PauseSideTask, None, now));
        }
        self.workers[worker].current_bubble = None;
        out
    }

    pub fn on_bubble_started(&mut self, worker: usize, bubble: Bubble, now: SimTime) -> Vec<TransitionRequest> {
        let bubble_end = bubble.end();
        let w = &mut self.workers[worker];
        w.current_bubble = Some(bubble);
        if w.current_task.is_none() {
            match w.task_queue.pop_front() {
                Some(next) => w.current_task = Some(next),
                None => return Vec::new(),
            }
        }
        let task = w.current_task.expect("current task set above");
        match self.view_of(task) {
            Some(SideTaskState::Created) => {
                vec![self.request(task, worker, TransitionKind::InitSideTask, None, now)]
            }
            Some(SideTaskState::Paused) => {
                vec![self.request(task, worker, TransitionKind::StartSideTask, Some(bubble_end), now)]
            }
            _ => Vec::new(),
        }
    }

    /// A task reached its step budget; stop it and free the worker.
    pub fn on_task_finished(&mut self, task: TaskId, now: SimTime) -> Vec<TransitionRequest> {
        let Some(worker) = self.worker_of(task) else {
            return Vec::new();
        };
        let w = &mut self.workers[worker];
        if w.current_task == Some(task) {
            w.current_task = None;
        }
        w.task_queue.retain(|&t| t != task);
        vec![self.request(task, worker, TransitionKind::StopSideTask, None, now)]
    }

    /// The worker terminated the task; forget it.
    pub fn on_task_killed(&mut self, task: TaskId) {
        self.view.insert(task, SideTaskState::Stopped);
        if let Some(worker) = self.worker_of(task) {
            let w = &mut self.workers[worker];
            if w.current_task == Some(task) {
                w.current_task = None;
            }
            w.task_queue.retain(|&t| t != task);
        }
    }

    pub fn handle(&mut self, event: &ManagerEvent) -> (Option<Assignment>, Vec<TransitionRequest>) {
        let now = event.time;
        match &event.kind {
            ManagerEventKind::BubbleEnded { worker } => (None, self.on_bubble_ended(*worker, now)),
            ManagerEventKind::TaskFinished { task } => (None, self.on_task_finished(*task, now)),
            ManagerEventKind::TaskSubmitted { task, profile } => {
                let (a, rpcs) = self.submit_task(*task, profile, now);
                (Some(a), rpcs)
            }
            ManagerEventKind::BubbleStarted { worker, bubble } => {
                (None, self.on_bubble_started(*worker, bubble.clone(), now))
            }
        }
    }

    /// Processes every event due at `now` in the deterministic order
    /// (bubble end, task finished, task submitted, bubble start; then worker).
    pub fn manager_tick(&mut self, mut events: Vec<ManagerEvent>, now: SimTime) -> Vec<TransitionRequest> {
        events.retain(|e| e.time <= now);
        events.sort_by_key(|e| (e.time, e.kind.priority(), event_worker(&e.kind, self)));
        let mut out = Vec::new();
        for e in &events {
            out.extend(self.handle(e).1);
        }
        out
    }
}

fn event_worker(kind: &ManagerEventKind, mgr: &SideTaskManager) -> usize {
    match kind {
        ManagerEventKind::BubbleEnded { worker } | ManagerEventKind::BubbleStarted { worker, .. } => *worker,
        ManagerEventKind::TaskFinished { task } => mgr.worker_of(*task).unwrap_or(0),
        ManagerEventKind::TaskSubmitted { task, .. } => *task,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::BubbleType;

    fn profile(mem: f64) -> TaskProfile {
        TaskProfile {
            task_id: "t".into(),
            est_per_step_duration: Some(SimTime::from_millis(10)),
            est_memory: mem,
            profiled_steps: 32,
        }
    }

    fn bubble(stage: usize, start: u64, len: u64) -> Bubble {
        Bubble {
            stage,
            epoch: 0,
            slot: 0,
            start: SimTime::from_millis(start),
            duration: SimTime::from_millis(len),
            available_memory: 28.0,
            btype: BubbleType::A,
        }
    }

    #[test]
    fn only_qualifying_worker_gets_large_task() {
        let mut mgr = SideTaskManager::new(&[28.0, 32.0, 36.0, 40.0], SimTime::ZERO);
        let (a, rpcs) = mgr.submit_task(0, &profile(38.0), SimTime::ZERO);
        assert_eq!(a, Assignment::Assigned { worker: 3 });
        assert_eq!(rpcs[0].kind, TransitionKind::CreateSideTask);
    }

    #[test]
    fn least_loaded_worker_wins() {
        let mut workers: Vec<WorkerState> = (0..4).map(|i| WorkerState::new(i, 40.0)).collect();
        workers[0].task_queue.extend([10, 11]);
        workers[1].task_queue.push_back(12);
        workers[2].current_task = Some(13);
        assert_eq!(select_worker(1.0, &workers), Some(3));
        workers[3].task_queue.push_back(14);
        // Ties between 1, 2 and 3 go to the lowest id.
        assert_eq!(select_worker(1.0, &workers), Some(1));
    }

    #[test]
    fn memory_admission_is_strict_and_rejection_reported() {
        let mut mgr = SideTaskManager::new(&[8.0, 8.0], SimTime::ZERO);
        let (a, rpcs) = mgr.submit_task(0, &profile(8.0), SimTime::ZERO);
        assert_eq!(a, Assignment::Rejected);
        assert!(rpcs.is_empty());
    }

    #[test]
    fn bubble_start_without_tasks_only_records_bubble() {
        let mut mgr = SideTaskManager::new(&[8.0], SimTime::ZERO);
        assert!(mgr.on_bubble_started(0, bubble(0, 0, 5), SimTime::ZERO).is_empty());
        assert!(mgr.workers[0].current_bubble.is_some());
        assert!(mgr.on_bubble_ended(0, SimTime::from_millis(5)).is_empty());
        assert!(mgr.workers[0].current_bubble.is_none());
    }

    #[test]
    fn lifecycle_init_then_start_then_pause() {
        let mut mgr = SideTaskManager::new(&[8.0], SimTime::from_millis(2));
        mgr.submit_task(0, &profile(1.0), SimTime::ZERO);
        let r = mgr.on_bubble_started(0, bubble(0, 10, 50), SimTime::from_millis(10));
        assert_eq!(r[0].kind, TransitionKind::InitSideTask);
        assert_eq!(r[0].lands_at, SimTime::from_millis(12));
        let r = mgr.on_bubble_ended(0, SimTime::from_millis(60));
        assert_eq!(r[0].kind, TransitionKind::PauseSideTask);
        let r = mgr.on_bubble_started(0, bubble(0, 100, 50), SimTime::from_millis(100));
        assert_eq!(r[0].kind, TransitionKind::StartSideTask);
        assert_eq!(r[0].bubble_end, Some(SimTime::from_millis(150)));
        assert_eq!(mgr.view_of(0), Some(SideTaskState::Running));
    }

    #[test]
    fn finished_task_hands_worker_to_next_in_queue() {
        let mut mgr = SideTaskManager::new(&[8.0], SimTime::ZERO);
        mgr.submit_task(0, &profile(1.0), SimTime::ZERO);
        mgr.submit_task(1, &profile(1.0), SimTime::ZERO);
        assert_eq!(mgr.workers[0].task_queue, VecDeque::from([0, 1]));
        mgr.on_bubble_started(0, bubble(0, 0, 5), SimTime::ZERO);
        assert_eq!(mgr.workers[0].current_task, Some(0));
        let stop = mgr.on_task_finished(0, SimTime::from_millis(3));
        assert_eq!(stop[0].kind, TransitionKind::StopSideTask);
        assert_eq!(mgr.workers[0].current_task, None);
        let r = mgr.on_bubble_started(0, bubble(0, 10, 5), SimTime::from_millis(10));
        assert_eq!(mgr.workers[0].current_task, Some(1));
        assert_eq!(r[0].task, 1);
        assert_eq!(r[0].kind, TransitionKind::InitSideTask);
    }

    #[test]
    fn tick_orders_end_before_start() {
        let mut mgr = SideTaskManager::new(&[8.0], SimTime::ZERO);
        mgr.submit_task(0, &profile(1.0), SimTime::ZERO);
        mgr.on_bubble_started(0, bubble(0, 0, 5), SimTime::ZERO);
        let now = SimTime::from_millis(5);
        let events = vec![
            ManagerEvent {
                time: now,
                kind: ManagerEventKind::BubbleStarted {
                    worker: 0,
                    bubble: bubble(0, 5, 5),
                },
            },
            ManagerEvent {
                time: now,
                kind: ManagerEventKind::BubbleEnded { worker: 0 },
            },
        ];
        let kinds: Vec<_> = mgr.manager_tick(events, now).into_iter().map(|r| r.kind).collect();
        assert_eq!(
            kinds,
            vec![TransitionKind::PauseSideTask, TransitionKind::StartSideTask]
        );
    }

    #[test]
    fn killed_task_is_forgotten() {
        let mut mgr = SideTaskManager::new(&[8.0], SimTime::ZERO);
        mgr.submit_task(0, &profile(1.0), SimTime::ZERO);
        mgr.on_bubble_started(0, bubble(0, 0, 5), SimTime::ZERO);
        mgr.on_task_killed(0);
        assert_eq!(mgr.workers[0].current_task, None);
        assert_eq!(mgr.workers[0].task_count(), 0);
    }
}
