//! Offline profiling of side tasks and of the pipeline's bubbles.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::pipeline::{self, Bubble, PipelineConfig};
use crate::task::{Interface, SideTaskRuntime, SideTaskSpec, StepSampler, TransitionKind};
use crate::time::SimTime;

pub const DEFAULT_PROFILE_STEPS: u64 = 32;

/// RNG stream offset keeping profiling draws apart from run-time draws.
pub(crate) const PROFILE_STREAM_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskProfile {
    pub task_id: String,
    /// Mean step length; absent for imperative tasks, whose kernels are not
    /// step-delimited.
    pub est_per_step_duration: Option<SimTime>,
    /// Peak GiB observed.
    pub est_memory: f64,
    pub profiled_steps: u64,
}

/// Step-noise settings shared by the profiler and the engine.
#[derive(Copy, Clone, Debug, PartialEq, Default)]
pub struct Noise {
    pub step_jitter: f64,
    pub seed: u64,
    pub tick: SimTime,
}

/// Runs the task alone on a dedicated simulated GPU for `n_steps` steps.
pub fn profile_task(spec: &SideTaskSpec, task_index: usize, n_steps: u64, noise: &Noise) -> TaskProfile {
    let n_steps = n_steps.max(1);
    let mut sampler = StepSampler::new(
        spec.per_step_duration,
        noise.step_jitter,
        noise.tick,
        noise.seed,
        PROFILE_STREAM_BASE + task_index as u64,
    );
    let mut rt = SideTaskRuntime::new(SideTaskSpec {
        total_steps: None,
        ..spec.clone()
    });
    let mut now = SimTime::ZERO;
    for kind in [
        TransitionKind::CreateSideTask,
        TransitionKind::InitSideTask,
        TransitionKind::StartSideTask,
    ] {
        rt.apply_transition(kind, now).expect("standalone lifecycle is legal");
        if kind == TransitionKind::InitSideTask {
            now += spec.init_duration;
        }
    }
    let mut peak = rt.memory_allocated;
    let mut total = SimTime::ZERO;
    for _ in 0..n_steps {
        let step = sampler.next_step();
        rt.apply_transition(TransitionKind::RunNextStep, now)
            .expect("running task accepts RunNextStep");
        now += step;
        total += step;
        rt.complete_step(step);
        peak = peak.max(rt.memory_allocated);
    }
    let est_per_step_duration = match spec.interface {
        Interface::Iterative => {
            let mean = (total.as_micros() as f64 / n_steps as f64).round() as u64;
            Some(SimTime::from_micros(mean))
        }
        Interface::Imperative => None,
    };
    TaskProfile {
        task_id: spec.id.clone(),
        est_per_step_duration,
        est_memory: peak,
        profiled_steps: n_steps,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBubbleProfile {
    pub stage: usize,
    pub durations: Vec<SimTime>,
    pub available_memory: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BubbleProfile {
    pub stages: Vec<StageBubbleProfile>,
    pub bubble_rate: f64,
    pub bubbles: Vec<Bubble>,
}

/// Dry-runs one epoch of the pipeline and records every bubble.
pub fn profile_bubbles(config: &PipelineConfig) -> Result<BubbleProfile, ConfigError> {
    let trace = pipeline::build_schedule(&config.single_epoch())?;
    let bubbles = pipeline::extract_bubbles(&trace);
    let bubble_rate = pipeline::bubble_rate(&trace, &bubbles);
    let stages = (0..config.num_stages)
        .map(|stage| StageBubbleProfile {
            stage,
            durations: bubbles
                .iter()
                .filter(|b| b.stage == stage)
                .map(|b| b.duration)
                .collect(),
            available_memory: config.available_memory(stage),
        })
        .collect();
    Ok(BubbleProfile {
        stages,
        bubble_rate,
        bubbles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Misbehavior;

    fn spec(interface: Interface) -> SideTaskSpec {
        SideTaskSpec {
            id: "resnet18".into(),
            interface,
            per_step_duration: SimTime::from_micros(30_400),
            total_steps: Some(5),
            init_duration: SimTime::from_millis(20),
            memory_demand: 2.63,
            misbehavior: Misbehavior::None,
            submit_time: SimTime::ZERO,
            memory_limit: None,
        }
    }

    fn quiet() -> Noise {
        Noise {
            step_jitter: 0.0,
            seed: 0,
            tick: SimTime::from_micros(100),
        }
    }

    #[test]
    fn iterative_profile_is_exact_without_noise() {
        let p = profile_task(&spec(Interface::Iterative), 0, 10, &quiet());
        assert_eq!(p.est_per_step_duration, Some(SimTime::from_micros(30_400)));
        assert_eq!(p.est_memory, 2.63);
        assert_eq!(p.profiled_steps, 10);
    }

    #[test]
    fn imperative_profile_has_no_step_estimate() {
        let p = profile_task(&spec(Interface::Imperative), 0, 10, &quiet());
        assert_eq!(p.est_per_step_duration, None);
        assert_eq!(p.est_memory, 2.63);
    }

    #[test]
    fn leak_shows_up_in_memory_estimate() {
        let mut s = spec(Interface::Iterative);
        s.misbehavior = Misbehavior::MemoryLeak { rate: 0.5 };
        let p = profile_task(&s, 0, 32, &quiet());
        // 32 steps x 30.4 ms x 0.5 GiB/s on top of the demand.
        let expect = 2.63 + 32.0 * 0.0304 * 0.5;
        assert!((p.est_memory - expect).abs() < 1e-9, "{}", p.est_memory);
    }

    #[test]
    fn noisy_profile_is_reproducible_sample_mean() {
        let noise = Noise {
            step_jitter: 0.3,
            seed: 42,
            tick: SimTime::from_micros(100),
        };
        let a = profile_task(&spec(Interface::Iterative), 1, 32, &noise);
        let b = profile_task(&spec(Interface::Iterative), 1, 32, &noise);
        assert_eq!(a, b);
        let est = a.est_per_step_duration.unwrap().as_micros();
        assert!((21_280..=39_520).contains(&est));
    }

    #[test]
    fn bubble_profile_of_single_stage_is_empty() {
        let cfg = PipelineConfig::uniform(
            1,
            4,
            SimTime::from_millis(1),
            SimTime::from_millis(1),
            3,
            48.0,
            vec![8.0],
        );
        let prof = profile_bubbles(&cfg).unwrap();
        assert_eq!(prof.bubble_rate, 0.0);
        assert!(prof.stages[0].durations.is_empty());
    }

    #[test]
    fn bubble_profile_rate_three_sevenths() {
        let cfg = PipelineConfig::uniform(
            4,
            4,
            SimTime::from_millis(1),
            SimTime::from_millis(1),
            5,
            48.0,
            vec![8.0; 4],
        );
        let prof = profile_bubbles(&cfg).unwrap();
        assert!((prof.bubble_rate - 3.0 / 7.0).abs() < 1e-12);
        assert_eq!(prof.stages[2].available_memory, 40.0);
    }
}
