use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::clock::Clock;
use crate::error::{Error, Result};

/// At most `capacity` operations in any window of `window_secs` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateLimit {
    pub capacity: u32,
    pub window_secs: f64,
}

impl RateLimit {
    pub fn per_minute(capacity: u32) -> Self {
        RateLimit {
            capacity,
            window_secs: 60.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::validation("rate limit capacity must be at least 1"));
        }
        if !(self.window_secs > 0.0 && self.window_secs.is_finite()) {
            return Err(Error::validation("rate limit window must be positive"));
        }
        Ok(())
    }

    pub fn window(&self) -> Duration {
        Duration::from_secs_f64(self.window_secs)
    }
}

/// Sliding-window log limiter.
///
/// An operation at time `t` is admitted only if fewer than `capacity`
/// operations were admitted in `(t - window, t]`.
pub struct SlidingWindowLimiter {
    limit: RateLimit,
    admitted: Mutex<VecDeque<Duration>>,
}

impl SlidingWindowLimiter {
    pub fn new(limit: RateLimit) -> Result<Self> {
        limit.validate()?;
        Ok(SlidingWindowLimiter {
            limit,
            admitted: Mutex::new(VecDeque::new()),
        })
    }

    pub fn limit(&self) -> RateLimit {
        self.limit
    }

    /// Admits an operation at `now`, or returns how long to wait.
    pub fn try_acquire(&self, now: Duration) -> std::result::Result<(), Duration> {
        let window = self.limit.window();
        let mut log = self.admitted.lock().unwrap();
        while let Some(&front) = log.front() {
            if front + window <= now {
                log.pop_front();
            } else {
                break;
            }
        }
        if log.len() < self.limit.capacity as usize {
            log.push_back(now);
            Ok(())
        } else {
            let front = *log.front().expect("log is at capacity");
            Err(front + window - now)
        }
    }

    /// Blocks on `clock` until admitted; returns the admission time.
    pub fn acquire(&self, clock: &dyn Clock) -> Duration {
        loop {
            let now = clock.now();
            match self.try_acquire(now) {
                Ok(()) => return now,
                Err(wait) => clock.sleep(wait),
            }
        }
    }
}
