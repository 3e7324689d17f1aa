use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Piecewise constant, divided at each milestone.
    Step,
    /// `lr · (1 + cos(π·epoch / epochs)) / 2`.
    Cosine,
}

/// Per-epoch learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub initial_lr: f64,
    pub epochs: usize,
    /// `(epoch, divisor)` pairs for the step kind: from `epoch` on, the
    /// rate is additionally divided by `divisor`.
    #[serde(default)]
    pub milestones: Vec<(usize, f64)>,
}

impl Schedule {
    pub fn step(initial_lr: f64, epochs: usize, milestones: &[(usize, f64)]) -> Self {
        Schedule {
            kind: ScheduleKind::Step,
            initial_lr,
            epochs,
            milestones: milestones.to_vec(),
        }
    }

    /// Divides by `divisor` every `every` epochs.
    pub fn every(initial_lr: f64, epochs: usize, every: usize, divisor: f64) -> Self {
        let milestones: Vec<_> = (1..)
            .map(|i| i * every.max(1))
            .take_while(|&e| e < epochs)
            .map(|e| (e, divisor))
            .collect();
        Self::step(initial_lr, epochs, &milestones)
    }

    pub fn cosine(initial_lr: f64, epochs: usize) -> Self {
        Schedule {
            kind: ScheduleKind::Cosine,
            initial_lr,
            epochs,
            milestones: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "initial learning rate must be positive, got {}",
                self.initial_lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one epoch".into()));
        }
        if self.kind == ScheduleKind::Cosine && !self.milestones.is_empty() {
            return Err(Error::InvalidArgument("cosine schedules take no milestones".into()));
        }
        for w in self.milestones.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::InvalidArgument(format!(
                    "milestones must be strictly increasing, got {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some((e, d)) = self.milestones.iter().find(|(_, d)| !(*d > 1.0 && d.is_finite())) {
            return Err(Error::InvalidArgument(format!("milestone {e}: divisor {d} must exceed 1")));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.epochs
            )));
        }
        Ok(match self.kind {
            ScheduleKind::Step => self
                .milestones
                .iter()
                .take_while(|(e, _)| *e <= epoch)
                .fold(self.initial_lr, |lr, (_, d)| lr / d),
            ScheduleKind::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                self.initial_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    #[test]
    fn divide_by_five_regime() {
        let s = Schedule::step(0.1, 200, &[(60, 5.0), (120, 5.0), (160, 5.0)]);
        s.validate().unwrap();
        for (e, want) in [(0, 0.1), (59, 0.1), (60, 0.02), (120, 0.004), (160, 0.0008), (199, 0.0008)] {
            assert!(close(s.lr_at(e).unwrap(), want), "epoch {e}");
        }
        assert!(s.lr_at(200).is_err());
    }

    #[test]
    fn divide_by_ten_every_sixty() {
        let s = Schedule::every(0.1, 180, 60, 10.0);
        assert_eq!(s.milestones, vec![(60, 10.0), (120, 10.0)]);
        assert!(close(s.lr_at(59).unwrap(), 0.1));
        assert!(close(s.lr_at(60).unwrap(), 0.01));
    }

    #[test]
    fn cosine_approaches_zero() {
        let s = Schedule::cosine(0.1, 150);
        assert_eq!(s.lr_at(0).unwrap(), 0.1);
        assert!(s.lr_at(149).unwrap() < 1e-4);
        assert!(s.lr_at(75).unwrap() < s.lr_at(74).unwrap());
    }

    #[test]
    fn rejects_bad_milestones() {
        assert!(Schedule::step(0.1, 10, &[(5, 2.0), (5, 2.0)]).validate().is_err());
        assert!(Schedule::step(0.1, 10, &[(5, 1.0)]).validate().is_err());
        assert!(Schedule::step(0.0, 10, &[]).validate().is_err());
    }
}
