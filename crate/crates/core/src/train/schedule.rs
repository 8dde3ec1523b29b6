//! Annealing and learning-rate schedules.

use crate::error::{Error, Result};

/// Exponential decay with a delayed start and a floor:
/// constant at `initial_value` until `start_step`, then
/// `max(floor, initial_value * decay_rate^((step - start_step) / decay_steps))`.
/// Monotone non-increasing for `decay_rate <= 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub initial_value: f64,
    pub decay_rate: f64,
    pub decay_steps: usize,
    pub start_step: usize,
    pub floor: f64,
}

impl AnnealSchedule {
    pub fn constant(value: f64) -> Self {
        AnnealSchedule {
            initial_value: value,
            decay_rate: 1.0,
            decay_steps: 1,
            start_step: 0,
            floor: value,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::config("decay rate must lie in (0, 1]"));
        }
        if self.decay_steps == 0 {
            return Err(Error::config("decay steps must be positive"));
        }
        if self.floor > self.initial_value {
            return Err(Error::config("schedule floor exceeds its initial value"));
        }
        Ok(())
    }

    pub fn value(&self, step: usize) -> f64 {
        if step <= self.start_step {
            return self.initial_value;
        }
        let elapsed = (step - self.start_step) as f64 / self.decay_steps as f64;
        let v = self.initial_value * self.decay_rate.powf(elapsed);
        v.max(self.floor)
    }
}

/// Learning rate: linear warm-up from `warmup_init` to `peak`, then cosine
/// decay toward `min` over `decay_steps` (constant at `peak` when
/// `decay_steps` is zero).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub warmup_init: f64,
    pub peak: f64,
    pub warmup_steps: usize,
    pub decay_steps: usize,
    pub min: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            warmup_init: lr,
            peak: lr,
            warmup_steps: 0,
            decay_steps: 0,
            min: lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.peak <= 0.0 || self.warmup_init <= 0.0 || self.min <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(())
    }

    pub fn value(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.warmup_init + frac * (self.peak - self.warmup_init);
        }
        if self.decay_steps == 0 {
            return self.peak;
        }
        let progress = ((step - self.warmup_steps) as f64 / self.decay_steps as f64).min(1.0);
        self.min + 0.5 * (self.peak - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reacher_style_beta() -> AnnealSchedule {
        AnnealSchedule {
            initial_value: 1000.0,
            decay_rate: 0.975,
            decay_steps: 500,
            start_step: 50_000,
            floor: 0.0,
        }
    }

    #[test]
    fn holds_initial_value_until_start() {
        let s = reacher_style_beta();
        assert_eq!(s.value(0), 1000.0);
        assert_eq!(s.value(49_999), 1000.0);
        assert_eq!(s.value(50_000), 1000.0);
    }

    #[test]
    fn one_decay_period_applies_one_rate_factor() {
        let s = reacher_style_beta();
        assert!((s.value(50_500) - 975.0).abs() < 1e-9);
        assert!((s.value(51_000) - 1000.0 * 0.975 * 0.975).abs() < 1e-9);
    }

    #[test]
    fn schedule_is_monotone_and_floored() {
        let s = AnnealSchedule {
            initial_value: 10.0,
            decay_rate: 0.5,
            decay_steps: 100,
            start_step: 200,
            floor: 1.0,
        };
        let mut prev = f64::INFINITY;
        for step in 0..3000 {
            let v = s.value(step);
            assert!(v <= prev + 1e-15);
            assert!(v >= 1.0);
            prev = v;
        }
        assert_eq!(s.value(3000), 1.0);
    }

    #[test]
    fn warmup_then_cosine() {
        let lr = LrSchedule {
            warmup_init: 1e-5,
            peak: 1e-3,
            warmup_steps: 100,
            decay_steps: 1000,
            min: 1e-5,
        };
        assert_eq!(lr.value(0), 1e-5);
        assert!((lr.value(50) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-12);
        assert_eq!(lr.value(100), 1e-3);
        assert!((lr.value(600) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-9);
        assert!((lr.value(1100) - 1e-5).abs() < 1e-12);
        assert!((lr.value(5000) - 1e-5).abs() < 1e-12);
    }

    #[test]
    fn constant_lr_never_moves() {
        let lr = LrSchedule::constant(1e-3);
        for step in [0, 1, 10, 100_000] {
            assert_eq!(lr.value(step), 1e-3);
        }
    }
}
