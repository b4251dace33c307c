use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

const MICROS_PER_SEC: f64 = 1_000_000.0;

/// A point or span on the simulated clock, in whole microseconds.
///
/// All engine arithmetic happens on integers so that event ordering is exact.
/// Configured durations are additionally required to be multiples of the
/// experiment's tick (1 ms unless overridden).
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_SEC
    }

    /// Converts seconds to microseconds, rejecting values that are negative,
    /// non-finite or not representable as a whole number of microseconds.
    pub fn from_secs_f64(secs: f64) -> Option<Self> {
        if !secs.is_finite() || secs < 0.0 {
            return None;
        }
        let scaled = secs * MICROS_PER_SEC;
        let rounded = scaled.round();
        if (scaled - rounded).abs() > 1e-3 || rounded > u64::MAX as f64 {
            return None;
        }
        Some(SimTime(rounded as u64))
    }

    /// Converts a configured duration in seconds, checking it lies on the tick grid.
    pub fn from_config_secs(field: &str, secs: f64, tick: SimTime) -> Result<Self, ConfigError> {
        let t = SimTime::from_secs_f64(secs).ok_or_else(|| {
            ConfigError::new(
                field,
                format!("{secs} is not a non-negative whole number of microseconds"),
            )
        })?;
        if tick.0 == 0 {
            return Err(ConfigError::new("tick", "must be positive"));
        }
        if t.0 % tick.0 != 0 {
            return Err(ConfigError::new(
                field,
                format!("{secs} s is not a multiple of the {} s tick", tick.as_secs_f64()),
            ));
        }
        Ok(t)
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }

    pub fn is_multiple_of(self, tick: SimTime) -> bool {
        tick.0 != 0 && self.0.is_multiple_of(tick.0)
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_sub(rhs.0).expect("simulated time subtraction underflow"))
    }
}

impl std::iter::Sum for SimTime {
    fn sum<I: Iterator<Item = SimTime>>(iter: I) -> SimTime {
        SimTime(iter.map(|t| t.0).sum())
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}s", self.as_secs_f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seconds_round_trip_on_tick_grid() {
        let tick = SimTime::from_micros(100);
        let t = SimTime::from_config_secs("x", 0.0304, tick).unwrap();
        assert_eq!(t.as_micros(), 30_400);
        assert!(SimTime::from_config_secs("x", 0.0304, SimTime::from_millis(1)).is_err());
    }

    #[test]
    fn rejects_negative_and_sub_microsecond() {
        assert!(SimTime::from_secs_f64(-1.0).is_none());
        assert!(SimTime::from_secs_f64(f64::NAN).is_none());
        assert!(SimTime::from_secs_f64(1.5e-7).is_none());
    }
}
