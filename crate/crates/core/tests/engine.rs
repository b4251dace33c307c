use harvest_core::engine::{replay_check, run, Disposition, RunSettings, RunTrace, TraceRecord};
use harvest_core::limits::{KillReason, LimitConfig};
use harvest_core::metrics::bubble_breakdown;
use harvest_core::pipeline::{build_schedule, PipelineConfig};
use harvest_core::task::{Interface, Misbehavior, SideTaskSpec};
use harvest_core::SimTime;
use proptest::prelude::*;

fn ms(v: u64) -> SimTime {
    SimTime::from_millis(v)
}

fn task_strategy(i: usize) -> impl Strategy<Value = SideTaskSpec> {
    (
        any::<bool>(),
        1u64..=12,
        proptest::option::of(1u64..=30),
        0u64..=6,
        0u32..=30,
        0u8..=5,
        0u64..=40,
    )
        .prop_map(move |(iterative, step, total, init, mem, misb, submit)| SideTaskSpec {
            id: format!("task{i}"),
            interface: if iterative {
                Interface::Iterative
            } else {
                Interface::Imperative
            },
            per_step_duration: ms(step),
            total_steps: total,
            init_duration: ms(init),
            memory_demand: mem as f64 / 2.0,
            misbehavior: match misb {
                0 => Misbehavior::IgnoresPause,
                1 => Misbehavior::MemoryLeak { rate: 2.0 },
                _ => Misbehavior::None,
            },
            submit_time: ms(submit),
            memory_limit: (misb == 1).then_some(mem as f64 / 2.0 + 0.1),
        })
}

type Workload = (PipelineConfig, Vec<SideTaskSpec>, RunSettings);

fn workload() -> impl Strategy<Value = Workload> {
    (
        1usize..=4,
        1usize..=5,
        1usize..=3,
        5u64..=15,
        0usize..=4,
        any::<u64>(),
        0u64..=2,
        any::<bool>(),
    )
        .prop_flat_map(|(p, m, epochs, d, n, seed, latency, noisy)| {
            let cfg = PipelineConfig::uniform(
                p,
                m,
                ms(d),
                ms(2 * d),
                epochs,
                24.0,
                (0..p).map(|s| 4.0 * s as f64).collect(),
            );
            let settings = RunSettings {
                seed,
                rpc_latency: ms(latency),
                limits: LimitConfig {
                    grace_period: ms(20),
                    ..LimitConfig::default()
                },
                step_jitter: if noisy { 0.25 } else { 0.0 },
                ..RunSettings::default()
            };
            let tasks: Vec<_> = (0..n).map(task_strategy).collect();
            (Just(cfg), tasks, Just(settings))
        })
}

fn well_behaved(trace: &RunTrace) -> bool {
    trace.header.tasks.iter().all(|t| t.misbehavior == Misbehavior::None)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_run_replays_clean((cfg, tasks, settings) in workload()) {
        let trace = run(&cfg, &tasks, &settings).unwrap();
        let violations = replay_check(&trace);
        prop_assert!(violations.is_empty(), "{:?}", violations);
        for row in bubble_breakdown(&trace) {
            prop_assert_eq!(row.used + row.runtime + row.idle_oom + row.idle_insufficient, row.total);
        }
    }

    #[test]
    fn trace_round_trips_and_repeats((cfg, tasks, settings) in workload()) {
        let a = run(&cfg, &tasks, &settings).unwrap();
        let b = run(&cfg, &tasks, &settings).unwrap();
        let text = a.to_jsonl();
        prop_assert_eq!(&text, &b.to_jsonl());
        prop_assert_eq!(RunTrace::from_jsonl(&text).unwrap(), a);
    }

    #[test]
    fn quiet_iterative_tasks_cost_nothing((cfg, mut tasks, mut settings) in workload()) {
        // Without noise and with init short enough for every bubble, the
        // remaining-time gate keeps training untouched.
        settings.step_jitter = 0.0;
        for t in &mut tasks {
            t.interface = Interface::Iterative;
            t.misbehavior = Misbehavior::None;
            t.memory_limit = None;
            t.init_duration = SimTime::ZERO;
        }
        let trace = run(&cfg, &tasks, &settings).unwrap();
        prop_assert!(well_behaved(&trace));
        prop_assert_eq!(trace.ops, build_schedule(&cfg).unwrap().ops);
    }

    #[test]
    fn killed_tasks_release_memory((cfg, tasks, settings) in workload()) {
        let trace = run(&cfg, &tasks, &settings).unwrap();
        for o in &trace.outcomes {
            if let Disposition::Killed { reason } = &o.disposition {
                let spec = &trace.header.tasks[o.task];
                match reason {
                    KillReason::Oom => {
                        let leaks = spec.misbehavior.leak_rate() > 0.0;
                        prop_assert!(leaks);
                    }
                    KillReason::PauseTimeout => prop_assert_eq!(spec.misbehavior, Misbehavior::IgnoresPause),
                    KillReason::InitTimeout => {}
                }
                let killed = trace.records.iter().any(|r| matches!(r, TraceRecord::Kill { task, .. } if *task == o.task));
                prop_assert!(killed);
            }
        }
    }
}

#[test]
fn leak_kill_lands_on_first_exceeding_tick() {
    let cfg = PipelineConfig::uniform(2, 4, ms(20), ms(40), 6, 24.0, vec![0.0, 0.0]);
    let t = SideTaskSpec {
        id: "leak".into(),
        interface: Interface::Iterative,
        per_step_duration: ms(5),
        total_steps: None,
        init_duration: ms(1),
        memory_demand: 1.0,
        misbehavior: Misbehavior::MemoryLeak { rate: 10.0 },
        submit_time: SimTime::ZERO,
        memory_limit: Some(2.0),
    };
    let trace = run(&cfg, &[t], &RunSettings::default()).unwrap();
    // Total step time executed before the kill, from the activity records.
    let (kill_time, mem) = trace
        .records
        .iter()
        .find_map(|r| match r {
            TraceRecord::Kill {
                time,
                memory,
                reason: KillReason::Oom,
                ..
            } => Some((*time, *memory)),
            _ => None,
        })
        .expect("leaking task is killed");
    let executed: u64 = trace
        .activities()
        .filter(|a| a.2.is_work() && a.4 <= kill_time)
        .map(|a| (a.4 - a.3).as_micros())
        .sum();
    // 1 GiB + 10 GiB/s crosses 2 GiB after 100 ms of execution; first tick over is 101 ms.
    assert_eq!(executed, 101_000);
    assert!(mem > 2.0 && mem - 10.0 * 0.001 <= 2.0);
    assert!(replay_check(&trace).is_empty());
}
