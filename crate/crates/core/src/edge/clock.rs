use std::sync::atomic::{AtomicI64, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ClockError {
    #[error("acceleration must be > 0, got {0}")]
    InvalidAcceleration(f64),
    #[error("cannot move a free-running clock by hand")]
    FreeRunning,
}

#[derive(Debug)]
enum Mode {
    /// Time moves only through `advance_to`; with an acceleration the call
    /// also sleeps so sim time never outruns `acceleration` times wall time.
    Stepped {
        now_ms: AtomicI64,
        pacing: Option<(f64, Instant, i64)>,
    },
    /// Sim time derived from wall time.
    FreeRunning {
        acceleration: f64,
        wall_origin: Instant,
        sim_origin_ms: i64,
    },
}

/// Simulation time in epoch milliseconds.
#[derive(Debug)]
pub struct VirtualClock {
    mode: Mode,
}

fn check(acceleration: f64) -> Result<f64, ClockError> {
    if acceleration > 0.0 && acceleration.is_finite() {
        Ok(acceleration)
    } else {
        Err(ClockError::InvalidAcceleration(acceleration))
    }
}

impl VirtualClock {
    /// A clock advanced by the caller. `None` runs as fast as possible.
    pub fn stepped(start_ms: i64, acceleration: Option<f64>) -> Result<Self, ClockError> {
        let pacing = acceleration
            .map(check)
            .transpose()?
            .map(|a| (a, Instant::now(), start_ms));
        Ok(VirtualClock {
            mode: Mode::Stepped {
                now_ms: AtomicI64::new(start_ms),
                pacing,
            },
        })
    }

    pub fn free_running(start_ms: i64, acceleration: f64) -> Result<Self, ClockError> {
        Ok(VirtualClock {
            mode: Mode::FreeRunning {
                acceleration: check(acceleration)?,
                wall_origin: Instant::now(),
                sim_origin_ms: start_ms,
            },
        })
    }

    pub fn now_ms(&self) -> i64 {
        match &self.mode {
            Mode::Stepped { now_ms, .. } => now_ms.load(Ordering::SeqCst),
            Mode::FreeRunning {
                acceleration,
                wall_origin,
                sim_origin_ms,
            } => sim_origin_ms + (wall_origin.elapsed().as_secs_f64() * 1000.0 * acceleration) as i64,
        }
    }

    pub fn acceleration(&self) -> Option<f64> {
        match &self.mode {
            Mode::Stepped { pacing, .. } => pacing.map(|p| p.0),
            Mode::FreeRunning { acceleration, .. } => Some(*acceleration),
        }
    }

    /// Wall-clock duration of `sim_ms` of simulated time.
    pub fn wall_duration(&self, sim_ms: i64) -> Duration {
        match self.acceleration() {
            Some(a) => Duration::from_secs_f64(sim_ms.max(0) as f64 / 1000.0 / a),
            None => Duration::ZERO,
        }
    }

    /// Moves a stepped clock forward. Time never goes backwards.
    pub fn advance_to(&self, t_ms: i64) -> Result<(), ClockError> {
        let Mode::Stepped { now_ms, pacing } = &self.mode else {
            return Err(ClockError::FreeRunning);
        };
        now_ms.fetch_max(t_ms, Ordering::SeqCst);
        if let Some((a, wall_origin, sim_origin)) = pacing {
            let due = Duration::from_secs_f64((t_ms - sim_origin).max(0) as f64 / 1000.0 / a);
            let elapsed = wall_origin.elapsed();
            if due > elapsed {
                std::thread::sleep(due - elapsed);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stepped_is_monotone() {
        let c = VirtualClock::stepped(1_000, None).unwrap();
        c.advance_to(5_000).unwrap();
        c.advance_to(2_000).unwrap();
        assert_eq!(c.now_ms(), 5_000);
    }

    #[test]
    fn rejects_bad_acceleration() {
        assert_eq!(
            VirtualClock::stepped(0, Some(0.0)).unwrap_err(),
            ClockError::InvalidAcceleration(0.0)
        );
        assert!(VirtualClock::free_running(0, -1.0).is_err());
    }

    #[test]
    fn pacing_follows_acceleration() {
        let c = VirtualClock::stepped(0, Some(100.0)).unwrap();
        let t = Instant::now();
        c.advance_to(20_000).unwrap();
        let wall = t.elapsed().as_secs_f64();
        assert!((0.19..0.5).contains(&wall), "{wall}");
    }

    #[test]
    fn free_running_advances_with_wall_time() {
        let c = VirtualClock::free_running(0, 1000.0).unwrap();
        std::thread::sleep(Duration::from_millis(20));
        assert!(c.now_ms() >= 20_000);
        assert_eq!(c.advance_to(1), Err(ClockError::FreeRunning));
    }
}
