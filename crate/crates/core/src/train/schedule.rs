use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Warmup, hold and decay phases over `total_updates` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriStateSchedule {
    pub total_updates: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub hold_fraction: f64,
    pub decay_fraction: f64,
}

impl TriStateSchedule {
    /// 10% linear warmup from zero, 40% at peak, 50% linear decay to zero.
    pub fn new(total_updates: usize, peak_lr: f64) -> Result<Self> {
        let s = Self {
            total_updates,
            peak_lr,
            warmup_fraction: 0.1,
            hold_fraction: 0.4,
            decay_fraction: 0.5,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_updates < 1 {
            return Err(Error::Schedule("total_updates must be at least 1".into()));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Schedule(format!("invalid peak lr {}", self.peak_lr)));
        }
        let fr = [self.warmup_fraction, self.hold_fraction, self.decay_fraction];
        if fr.iter().any(|f| !(*f >= 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Schedule(format!("phase fractions {fr:?} must sum to 1")));
        }
        Ok(())
    }

    /// Learning rate at `step`, for `0 <= step <= total_updates`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_updates {
            return Err(Error::Schedule(format!(
                "step {step} beyond {} updates",
                self.total_updates
            )));
        }
        let total = self.total_updates as f64;
        let s = step as f64;
        let warm_end = self.warmup_fraction * total;
        let hold_end = (self.warmup_fraction + self.hold_fraction) * total;
        let lr = if s < warm_end {
            self.peak_lr * s / warm_end
        } else if s <= hold_end {
            self.peak_lr
        } else {
            self.peak_lr * (total - s) / (total - hold_end)
        };
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_values() {
        let s = TriStateSchedule::new(1000, 1e-3).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert!((s.lr_at(50).unwrap() - 5e-4).abs() < 1e-18);
        for step in [100, 300, 500] {
            assert_eq!(s.lr_at(step).unwrap(), 1e-3);
        }
        assert!((s.lr_at(750).unwrap() - 5e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(1000).unwrap(), 0.0);
        assert!(s.lr_at(1001).is_err());
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(TriStateSchedule::new(0, 1e-3).is_err());
        let mut s = TriStateSchedule::new(10, 1e-3).unwrap();
        s.hold_fraction = 0.5;
        assert!(s.validate().is_err());
    }
}
