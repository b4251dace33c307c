use harvest_core::manager::{select_worker, Assignment, SideTaskManager, WorkerState};
use harvest_core::oracles::assignment_oracle;
use harvest_core::profiler::TaskProfile;
use harvest_core::task::{Interface, Misbehavior, SideTaskRuntime, SideTaskSpec, SideTaskState, TransitionKind};
use harvest_core::{Error, SimTime};
use proptest::prelude::*;

const LEGAL: [(SideTaskState, TransitionKind, SideTaskState); 8] = [
    (
        SideTaskState::Submitted,
        TransitionKind::CreateSideTask,
        SideTaskState::Created,
    ),
    (
        SideTaskState::Created,
        TransitionKind::InitSideTask,
        SideTaskState::Paused,
    ),
    (
        SideTaskState::Paused,
        TransitionKind::StartSideTask,
        SideTaskState::Running,
    ),
    (
        SideTaskState::Running,
        TransitionKind::RunNextStep,
        SideTaskState::Running,
    ),
    (
        SideTaskState::Running,
        TransitionKind::PauseSideTask,
        SideTaskState::Paused,
    ),
    (
        SideTaskState::Created,
        TransitionKind::StopSideTask,
        SideTaskState::Stopped,
    ),
    (
        SideTaskState::Paused,
        TransitionKind::StopSideTask,
        SideTaskState::Stopped,
    ),
    (
        SideTaskState::Running,
        TransitionKind::StopSideTask,
        SideTaskState::Stopped,
    ),
];

fn spec() -> SideTaskSpec {
    SideTaskSpec {
        id: "t".into(),
        interface: Interface::Iterative,
        per_step_duration: SimTime::from_millis(3),
        total_steps: None,
        init_duration: SimTime::ZERO,
        memory_demand: 2.5,
        misbehavior: Misbehavior::None,
        submit_time: SimTime::ZERO,
        memory_limit: None,
    }
}

proptest! {
    #[test]
    fn random_transition_sequences_follow_the_table(kinds in prop::collection::vec(0usize..6, 0..40)) {
        let mut rt = SideTaskRuntime::new(spec());
        for (i, k) in kinds.into_iter().enumerate() {
            let kind = TransitionKind::ALL[k];
            let before = rt.state;
            let legal = LEGAL.iter().find(|(f, t, _)| *f == before && *t == kind).map(|e| e.2);
            match (rt.apply_transition(kind, SimTime::from_millis(i as u64)), legal) {
                (Ok(next), Some(want)) => prop_assert_eq!(next, want),
                (Err(Error::IllegalTransition { from, kind: k2 }), None) => {
                    prop_assert_eq!(from, before);
                    prop_assert_eq!(k2, kind);
                    prop_assert_eq!(rt.state, before);
                }
                (got, want) => prop_assert!(false, "{:?} {:?}: got {:?}, want {:?}", before, kind, got.is_ok(), want),
            }
            prop_assert_eq!(rt.memory_allocated > 0.0, rt.state.holds_gpu_memory());
        }
    }

    #[test]
    fn selection_matches_exhaustive_rule(
        workers in prop::collection::vec((0u32..40, 0usize..5), 1..=6),
        est in 0u32..40,
    ) {
        let states: Vec<WorkerState> = workers
            .iter()
            .enumerate()
            .map(|(i, &(mem, n))| {
                let mut w = WorkerState::new(i, mem as f64 / 2.0);
                w.task_queue.extend(0..n);
                w
            })
            .collect();
        let plain: Vec<(f64, usize)> = workers.iter().map(|&(m, n)| (m as f64 / 2.0, n)).collect();
        prop_assert_eq!(select_worker(est as f64 / 2.0, &states), assignment_oracle(est as f64 / 2.0, &plain));
    }

    #[test]
    fn submission_sequences_match_oracle(
        mems in prop::collection::vec(0u32..24, 1..=6),
        tasks in prop::collection::vec(0u32..24, 1..=12),
    ) {
        let gpu: Vec<f64> = mems.iter().map(|&m| m as f64).collect();
        let mut mgr = SideTaskManager::new(&gpu, SimTime::ZERO);
        let mut counts = vec![0usize; gpu.len()];
        for (i, &est) in tasks.iter().enumerate() {
            let profile = TaskProfile {
                task_id: format!("t{i}"),
                est_per_step_duration: None,
                est_memory: est as f64,
                profiled_steps: 1,
            };
            let (got, _) = mgr.submit_task(i, &profile, SimTime::ZERO);
            let plain: Vec<(f64, usize)> = gpu.iter().copied().zip(counts.iter().copied()).collect();
            let want = match assignment_oracle(est as f64, &plain) {
                Some(w) => {
                    counts[w] += 1;
                    Assignment::Assigned { worker: w }
                }
                None => Assignment::Rejected,
            };
            prop_assert_eq!(got, want);
        }
    }
}
