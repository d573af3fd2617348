//! Linear warmup followed by cosine annealing.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: f64,
    pub min_lr: f64,
    pub total_epochs: f64,
    /// Optimizer steps that make up one epoch.
    pub steps_per_epoch: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            warmup_start_lr: 1e-6,
            warmup_epochs: 10.0,
            min_lr: 1e-5,
            total_epochs: 200.0,
            steps_per_epoch: 1,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.warmup_start_lr <= self.min_lr
            && self.min_lr <= self.base_lr
            && self.warmup_start_lr >= 0.0
            && self.warmup_epochs >= 0.0
            && self.warmup_epochs < self.total_epochs
            && self.steps_per_epoch > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent schedule {self:?}")))
        }
    }

    /// Epoch position of optimizer step `step` (0-based).
    pub fn epoch_of(&self, step: usize) -> f64 {
        step as f64 / self.steps_per_epoch as f64
    }
}

/// Learning rate at a (fractional) epoch in `[0, total_epochs]`.
pub fn lr_at(s: &ScheduleConfig, epoch: f64) -> Result<f64> {
    if !(0.0..=s.total_epochs).contains(&epoch) {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside [0, {}]",
            s.total_epochs
        )));
    }
    if epoch < s.warmup_epochs {
        return Ok(s.warmup_start_lr + (s.base_lr - s.warmup_start_lr) * epoch / s.warmup_epochs);
    }
    let progress = (epoch - s.warmup_epochs) / (s.total_epochs - s.warmup_epochs);
    Ok(s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_values() {
        let s = ScheduleConfig::default();
        assert_eq!(lr_at(&s, 0.0).unwrap(), 1e-6);
        assert_eq!(lr_at(&s, 10.0).unwrap(), 2e-4);
        assert!((lr_at(&s, 200.0).unwrap() - 1e-5).abs() < 1e-18);
        assert!(lr_at(&s, 200.5).is_err());
        assert!(lr_at(&s, -0.1).is_err());
    }

    #[test]
    fn continuous_at_warmup_end() {
        let s = ScheduleConfig::default();
        let before = lr_at(&s, 10.0 - 1e-9).unwrap();
        let after = lr_at(&s, 10.0 + 1e-9).unwrap();
        assert!((before - 2e-4).abs() < 1e-12);
        assert!((after - 2e-4).abs() < 1e-12);
    }

    #[test]
    fn monotone_pieces() {
        let s = ScheduleConfig::default();
        let lrs: Vec<f64> = (0..=200).map(|e| lr_at(&s, e as f64).unwrap()).collect();
        assert!(lrs[..=10].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[10..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rejects_bad_config() {
        let s = ScheduleConfig {
            min_lr: 1e-3,
            ..Default::default()
        };
        assert!(s.validate().is_err());
        assert!(ScheduleConfig::default().validate().is_ok());
    }
}
