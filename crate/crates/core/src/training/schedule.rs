use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Micro-batches accumulated per optimizer step.
    pub accumulation: usize,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Config(alloc::format!(
                "warmup ({}) must be below total steps ({})",
                self.warmup_steps,
                self.total_steps
            )));
        }
        if self.accumulation == 0 {
            return Err(Error::Config("accumulation factor must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config("peak learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup to the peak, then inverse square-root decay. Steps are
/// 1-based; without warmup the rate stays at the peak.
pub fn lr_at(step: u64, sched: &TrainSchedule) -> f64 {
    let step = step.max(1) as f64;
    let w = sched.warmup_steps as f64;
    if sched.warmup_steps == 0 {
        sched.peak_lr
    } else if step <= w {
        sched.peak_lr * step / w
    } else {
        sched.peak_lr * libm::sqrt(w / step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s() -> TrainSchedule {
        TrainSchedule { peak_lr: 5e-4, warmup_steps: 2000, total_steps: 26_000, accumulation: 1, seed: 0 }
    }

    #[test]
    fn shape() {
        assert_eq!(lr_at(2000, &s()), 5e-4);
        assert!((lr_at(1000, &s()) - 2.5e-4).abs() < 1e-18);
        assert!((lr_at(8000, &s()) - 2.5e-4).abs() < 1e-18);
        assert!(lr_at(2001, &s()) < 5e-4);
    }

    #[test]
    fn validation() {
        assert!(s().validate().is_ok());
        assert!(TrainSchedule { warmup_steps: 26_000, ..s() }.validate().is_err());
        assert!(TrainSchedule { accumulation: 0, ..s() }.validate().is_err());
    }
}
