//! Resource limits on side tasks: a per-task GPU memory cap, the
//! remaining-time gate used by iterative tasks, and the grace-period kill that
//! backs up `PauseSideTask` and `InitSideTask`.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::time::SimTime;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitConfig {
    /// How long the manager waits after a pause before checking the last
    /// paused timestamp.
    pub grace_period: SimTime,
    /// GiB added to the profiled memory estimate when no explicit cap is set.
    pub memory_headroom: f64,
    /// Delay between a kill and the trace record of memory reclamation.
    pub reclaim_delay: SimTime,
}

impl Default for LimitConfig {
    fn default() -> Self {
        LimitConfig {
            grace_period: SimTime::from_millis(100),
            memory_headroom: 0.0,
            reclaim_delay: SimTime::ZERO,
        }
    }
}

impl LimitConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.grace_period == SimTime::ZERO {
            return Err(ConfigError::new("limits.grace_period", "must be positive"));
        }
        if !self.memory_headroom.is_finite() || self.memory_headroom < 0.0 {
            return Err(ConfigError::new("limits.memory_headroom", "must be non-negative"));
        }
        Ok(())
    }

    /// Cap applied when the task is created.
    pub fn memory_limit_for(&self, explicit: Option<f64>, est_memory: f64) -> f64 {
        explicit.unwrap_or(est_memory + self.memory_headroom)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KillReason {
    Oom,
    PauseTimeout,
    InitTimeout,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum MemoryVerdict {
    Ok,
    OomKill,
}

/// Strict exceedance kills; an allocation exactly at the limit is fine.
pub fn check_memory(allocated: f64, limit: f64) -> MemoryVerdict {
    if allocated > limit {
        MemoryVerdict::OomKill
    } else {
        MemoryVerdict::Ok
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Gate {
    Run,
    Yield,
}

/// Run the next step only if the bubble has strictly more time left than one step.
pub fn program_directed_gate(remaining: SimTime, est_step: SimTime) -> Gate {
    if remaining > est_step {
        Gate::Run
    } else {
        Gate::Yield
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Enforcement {
    /// Check not due yet.
    Pending,
    Ok,
    Kill,
}

/// Grace-period check after a pause issued at `pause_issued_at`. The task is
/// killed if its last paused timestamp has not moved since the pause began.
pub fn framework_enforce(
    last_paused: Option<SimTime>,
    pause_issued_at: SimTime,
    now: SimTime,
    grace: SimTime,
) -> Enforcement {
    if now < pause_issued_at + grace {
        return Enforcement::Pending;
    }
    match last_paused {
        Some(t) if t >= pause_issued_at => Enforcement::Ok,
        _ => Enforcement::Kill,
    }
}

/// Memory after executing for `elapsed` at `rate` GiB per second.
pub fn leaked_memory(base: f64, rate: f64, elapsed: SimTime) -> f64 {
    if rate == 0.0 {
        base
    } else {
        base + rate * elapsed.as_secs_f64()
    }
}

/// Offset of the first tick within `(0, window]` at which a leaking allocation
/// strictly exceeds `limit`, if any. `executed` is execution time already
/// accumulated on top of `base` before the window opens.
pub fn leak_crossing(
    base: f64,
    rate: f64,
    limit: f64,
    executed: SimTime,
    window: SimTime,
    tick: SimTime,
) -> Option<SimTime> {
    if rate <= 0.0 || tick == SimTime::ZERO {
        return None;
    }
    let exceeds = |k: u64| leaked_memory(base, rate, executed + SimTime::from_micros(k * tick.as_micros())) > limit;
    let per_tick = rate * tick.as_secs_f64();
    let guess = ((limit - leaked_memory(base, rate, executed)) / per_tick)
        .floor()
        .max(0.0);
    let max_k = window.as_micros() / tick.as_micros();
    if guess > max_k as f64 + 1.0 {
        return None;
    }
    let mut k = (guess as u64).max(1);
    while !exceeds(k) {
        k += 1;
        if k > max_k {
            return None;
        }
    }
    while k > 1 && exceeds(k - 1) {
        k -= 1;
    }
    (k <= max_k).then(|| SimTime::from_micros(k * tick.as_micros()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_boundary_is_strict() {
        assert_eq!(check_memory(8.0, 8.0), MemoryVerdict::Ok);
        assert_eq!(check_memory(8.000001, 8.0), MemoryVerdict::OomKill);
        assert_eq!(check_memory(2.63, 8.0), MemoryVerdict::Ok);
    }

    #[test]
    fn gate_is_strict() {
        let est = SimTime::from_micros(30_400);
        assert_eq!(program_directed_gate(SimTime::from_millis(50), est), Gate::Run);
        assert_eq!(program_directed_gate(est, est), Gate::Yield);
    }

    #[test]
    fn gate_sweep_matches_loop_oracle() {
        // Steps that fit in a bubble of length L: the largest k with L - k*est > est
        // counted from zero, i.e. ceil(L/est) - 1.
        let est = 7u64;
        for len in 1..200u64 {
            let mut remaining = len;
            let mut steps = 0;
            while program_directed_gate(SimTime::from_micros(remaining), SimTime::from_micros(est)) == Gate::Run {
                remaining -= est;
                steps += 1;
            }
            assert_eq!(steps, len.div_ceil(est) - 1, "len={len}");
        }
    }

    #[test]
    fn grace_check_kills_only_unacknowledged_pause() {
        let grace = SimTime::from_millis(100);
        let pause = SimTime::from_millis(10_000);
        let due = pause + grace;
        assert_eq!(
            framework_enforce(None, pause, SimTime::from_millis(10_050), grace),
            Enforcement::Pending
        );
        assert_eq!(
            framework_enforce(Some(SimTime::from_millis(9_000)), pause, due, grace),
            Enforcement::Kill
        );
        assert_eq!(framework_enforce(None, pause, due, grace), Enforcement::Kill);
        assert_eq!(
            framework_enforce(Some(SimTime::from_millis(10_050)), pause, due, grace),
            Enforcement::Ok
        );
        assert_eq!(framework_enforce(Some(pause), pause, due, grace), Enforcement::Ok);
    }

    #[test]
    fn leak_crossing_finds_first_exceeding_tick() {
        let tick = SimTime::from_millis(1);
        // 2 GiB + 1 GiB/s crosses 8 GiB after 6 s; exactly 8.0 at 6 s is not over.
        let hit = leak_crossing(2.0, 1.0, 8.0, SimTime::ZERO, SimTime::from_millis(10_000), tick).unwrap();
        assert_eq!(hit, SimTime::from_millis(6_001));
        assert!(leaked_memory(2.0, 1.0, hit) > 8.0);
        assert!(leaked_memory(2.0, 1.0, hit - tick) <= 8.0);
        assert_eq!(
            leak_crossing(2.0, 1.0, 8.0, SimTime::ZERO, SimTime::from_millis(6_000), tick),
            None
        );
        // Resuming after 5 s of execution leaves 1 s to go.
        assert_eq!(
            leak_crossing(
                2.0,
                1.0,
                8.0,
                SimTime::from_millis(5_000),
                SimTime::from_millis(2_000),
                tick
            ),
            Some(SimTime::from_millis(1_001))
        );
        assert_eq!(
            leak_crossing(2.0, 0.0, 8.0, SimTime::ZERO, SimTime::from_millis(60_000), tick),
            None
        );
    }

    #[test]
    fn default_limit_is_profiled_estimate() {
        let cfg = LimitConfig::default();
        assert_eq!(cfg.memory_limit_for(None, 2.63), 2.63);
        assert_eq!(cfg.memory_limit_for(Some(8.0), 2.63), 8.0);
        assert!(cfg.validate().is_ok());
        let bad = LimitConfig {
            grace_period: SimTime::ZERO,
            ..cfg
        };
        assert_eq!(bad.validate().unwrap_err().field, "limits.grace_period");
    }
}
