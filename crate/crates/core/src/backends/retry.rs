use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Exponential backoff between attempts: `base_ms * factor^attempt`,
/// multiplied by a uniform jitter in `[1 - jitter, 1 + jitter]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub base_ms: u64,
    pub factor: f64,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_ms: 200,
            factor: 2.0,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            base_ms: 0,
            factor: 1.0,
            jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.factor.is_finite() || self.factor < 1.0 {
            return Err(format!("backoff factor {} must be >= 1", self.factor));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(format!("backoff jitter {} must lie in [0, 1)", self.jitter));
        }
        Ok(())
    }

    /// Nominal delay before retry number `retry` (0-based), without jitter.
    pub fn nominal(&self, retry: u32) -> Duration {
        let ms = self.base_ms as f64 * self.factor.powi(retry as i32);
        Duration::from_secs_f64(ms / 1000.0)
    }

    pub fn delay<R: Rng + ?Sized>(&self, retry: u32, rng: &mut R) -> Duration {
        let nominal = self.nominal(retry);
        if self.jitter == 0.0 || nominal.is_zero() {
            return nominal;
        }
        let scale = 1.0 + rng.gen_range(-self.jitter..=self.jitter);
        nominal.mul_f64(scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn exponential_nominal_delays() {
        let p = RetryPolicy::default();
        assert_eq!(p.nominal(0), Duration::from_millis(200));
        assert_eq!(p.nominal(1), Duration::from_millis(400));
        assert_eq!(p.nominal(2), Duration::from_millis(800));
    }

    #[test]
    fn jitter_stays_within_band() {
        let p = RetryPolicy::default();
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for retry in 0..4 {
            let nominal = p.nominal(retry).as_secs_f64();
            for _ in 0..200 {
                let d = p.delay(retry, &mut rng).as_secs_f64();
                assert!(d >= nominal * 0.8 - 1e-9 && d <= nominal * 1.2 + 1e-9);
            }
        }
    }

    #[test]
    fn invalid_policies_rejected() {
        assert!(RetryPolicy { factor: 0.5, ..Default::default() }.validate().is_err());
        assert!(RetryPolicy { jitter: 1.0, ..Default::default() }.validate().is_err());
    }
}
