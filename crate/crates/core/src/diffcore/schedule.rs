use serde::{Deserialize, Serialize};

use super::DiffError;

/// Linear warmup from zero to `peak_lr`, then linear decay to `floor_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub peak_lr: f32,
    pub floor_lr: f32,
}

impl LrSchedule {
    pub fn new(warmup_steps: u64, total_steps: u64, peak_lr: f32, floor_lr: f32) -> Result<Self, DiffError> {
        if warmup_steps > total_steps {
            return Err(DiffError::Domain(format!(
                "warmup {warmup_steps} exceeds total {total_steps}"
            )));
        }
        if floor_lr.is_nan() || peak_lr.is_nan() || floor_lr > peak_lr || floor_lr < 0.0 {
            return Err(DiffError::Domain(format!(
                "need 0 <= floor_lr ({floor_lr}) <= peak_lr ({peak_lr})"
            )));
        }
        Ok(Self {
            warmup_steps,
            total_steps,
            peak_lr,
            floor_lr,
        })
    }

    pub fn lr_at_step(&self, step: u64) -> Result<f32, DiffError> {
        if step > self.total_steps {
            return Err(DiffError::Domain(format!(
                "step {step} beyond schedule end {}",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * step as f32 / self.warmup_steps as f32);
        }
        let decay_len = self.total_steps - self.warmup_steps;
        if decay_len == 0 {
            return Ok(self.peak_lr);
        }
        let frac = (step - self.warmup_steps) as f32 / decay_len as f32;
        Ok(self.peak_lr * (1.0 - frac) + self.floor_lr * frac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_peak_and_floor() {
        let s = LrSchedule::new(10, 100, 3e-4, 1e-5).unwrap();
        assert_eq!(s.lr_at_step(0).unwrap(), 0.0);
        assert_eq!(s.lr_at_step(10).unwrap(), 3e-4);
        assert_eq!(s.lr_at_step(100).unwrap(), 1e-5);
        assert!((s.lr_at_step(5).unwrap() - 1.5e-4).abs() < 1e-10);
        assert!(s.lr_at_step(101).is_err());
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(LrSchedule::new(11, 10, 1.0, 0.0).is_err());
        assert!(LrSchedule::new(1, 10, 1.0, 2.0).is_err());
    }

    #[test]
    fn monotone_after_warmup() {
        let s = LrSchedule::new(4, 40, 1.0, 0.1).unwrap();
        let lrs: Vec<f32> = (4..=40).map(|t| s.lr_at_step(t).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
