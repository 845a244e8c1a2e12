use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seed;

/// Exponential backoff with jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Upper bound on attempts for a single request, first call included.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn max_attempts(&self) -> u32 {
        self.max_retries.max(1)
    }

    /// Delay after failed attempt `attempt` (0-based). Jitter is drawn from
    /// the request key so replays back off identically.
    pub fn backoff(&self, attempt: u32, request_key: &str) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_delay_ms);
        let mut rng = ChaCha8Rng::seed_from_u64(seed::hash_parts(&[
            request_key.as_bytes(),
            &attempt.to_le_bytes(),
        ]));
        let jitter: f64 = rng.random_range(0.5..1.0);
        Duration::from_secs_f64(exp as f64 * jitter / 1000.0)
    }
}
