use super::*;
use crate::pipeline::build_schedule;

fn ms(v: u64) -> SimTime {
    SimTime::from_millis(v)
}

fn pipe(epochs: usize) -> PipelineConfig {
    PipelineConfig::uniform(4, 4, ms(10), ms(20), epochs, 48.0, vec![46.0, 39.5, 33.0, 26.5])
}

fn task(id: &str, interface: Interface, step: u64, mem: f64) -> SideTaskSpec {
    SideTaskSpec {
        id: id.into(),
        interface,
        per_step_duration: ms(step),
        total_steps: None,
        init_duration: ms(2),
        memory_demand: mem,
        misbehavior: Misbehavior::None,
        submit_time: SimTime::ZERO,
        memory_limit: None,
    }
}

#[test]
fn no_tasks_reproduces_the_schedule() {
    let cfg = pipe(3);
    let trace = run(&cfg, &[], &RunSettings::default()).unwrap();
    assert_eq!(trace.ops, build_schedule(&cfg).unwrap().ops);
    assert_eq!(trace.bubbles, trace.planned_bubbles);
    assert!(replay_check(&trace).is_empty());
}

#[test]
fn iterative_task_never_delays_training() {
    let cfg = pipe(4);
    let tasks = [
        task("a", Interface::Iterative, 3, 1.5),
        task("b", Interface::Iterative, 7, 5.0),
    ];
    let trace = run(&cfg, &tasks, &RunSettings::default()).unwrap();
    let base = run(&cfg, &[], &RunSettings::default()).unwrap();
    assert_eq!(trace.makespan(), base.makespan());
    assert!(trace.outcomes.iter().all(|o| o.work_done > 0), "{:?}", trace.outcomes);
    assert_eq!(replay_check(&trace), vec![]);
}

#[test]
fn imperative_task_overruns_but_stays_bounded() {
    let cfg = pipe(4);
    let tasks = [task("k", Interface::Imperative, 7, 5.0)];
    let trace = run(&cfg, &tasks, &RunSettings::default()).unwrap();
    let base = run(&cfg, &[], &RunSettings::default()).unwrap();
    assert!(trace.makespan() > base.makespan());
    assert_eq!(replay_check(&trace), vec![]);
}

#[test]
fn oversized_task_is_rejected() {
    let cfg = pipe(1);
    let trace = run(
        &cfg,
        &[task("big", Interface::Iterative, 3, 30.0)],
        &RunSettings::default(),
    )
    .unwrap();
    assert_eq!(trace.outcomes[0].disposition, Disposition::Rejected);
}

#[test]
fn ignoring_pause_is_killed_after_grace() {
    let cfg = pipe(3);
    let mut t = task("stuck", Interface::Imperative, 7, 5.0);
    t.misbehavior = Misbehavior::IgnoresPause;
    let settings = RunSettings::default();
    let trace = run(&cfg, &[t], &settings).unwrap();
    let pause = trace
        .records
        .iter()
        .find_map(|r| match r {
            TraceRecord::PauseRequested {
                time,
                state: SideTaskState::Running,
                ..
            } => Some(*time),
            _ => None,
        })
        .unwrap();
    let kill = trace
        .records
        .iter()
        .find_map(|r| match r {
            TraceRecord::Kill { time, reason, .. } => Some((*time, *reason)),
            _ => None,
        })
        .unwrap();
    assert_eq!(kill, (pause + settings.limits.grace_period, KillReason::PauseTimeout));
    assert_eq!(replay_check(&trace), vec![]);
}

#[test]
fn finite_task_completes_and_next_in_queue_runs() {
    let cfg = pipe(4);
    let mut a = task("a", Interface::Iterative, 3, 1.0);
    a.total_steps = Some(5);
    let mut b = task("b", Interface::Iterative, 3, 1.0);
    b.total_steps = Some(5);
    // Force both onto worker 0 by making it the only worker with memory.
    let cfg = PipelineConfig {
        stage_memory: vec![46.0, 48.0, 48.0, 48.0],
        ..cfg
    };
    let trace = run(&cfg, &[a, b], &RunSettings::default()).unwrap();
    for o in &trace.outcomes {
        assert_eq!(o.disposition, Disposition::Completed, "{o:?}");
        assert_eq!(o.work_done, 5);
    }
    assert_eq!(replay_check(&trace), vec![]);
}

#[test]
fn run_is_deterministic_and_round_trips() {
    let cfg = pipe(3);
    let tasks = [
        task("a", Interface::Iterative, 3, 1.5),
        task("b", Interface::Imperative, 4, 5.0),
    ];
    let settings = RunSettings {
        step_jitter: 0.3,
        seed: 9,
        ..RunSettings::default()
    };
    let one = run(&cfg, &tasks, &settings).unwrap();
    let two = run(&cfg, &tasks, &settings).unwrap();
    assert_eq!(one.to_jsonl(), two.to_jsonl());
    assert_eq!(RunTrace::from_jsonl(&one.to_jsonl()).unwrap(), one);
}
