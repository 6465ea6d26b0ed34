//! Warmup-Stable-Decay learning-rate schedule.
//!
//! The stable stage holds the peak so training can be resumed from any
//! checkpoint inside it without re-warmup; the decay stage ends at exactly
//! zero. Two decay shapes cover both continued-pretraining recipes: a 1−sqrt
//! decay over the whole stage, and a constant stretch followed by the same
//! 1−sqrt curve over the remainder.

use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    OneMinusSqrt,
    ConstantThenOneMinusSqrt { constant_fraction: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerSpec {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub stable_steps: usize,
    pub decay_steps: usize,
    pub decay_kind: DecayKind,
}

/// Reference peak learning rates for the full-scale base / large recipes.
pub const FULL_SCALE_BASE_PEAK_LR: f64 = 3e-4;
pub const FULL_SCALE_LARGE_PEAK_LR: f64 = 5e-5;

impl SchedulerSpec {
    pub fn stable_only(peak_lr: f64, steps: usize) -> Self {
        Self {
            peak_lr,
            warmup_steps: 0,
            stable_steps: steps,
            decay_steps: 0,
            decay_kind: DecayKind::OneMinusSqrt,
        }
    }

    /// 1−sqrt decay across every step.
    pub fn one_minus_sqrt(peak_lr: f64, steps: usize) -> Self {
        Self {
            peak_lr,
            warmup_steps: 0,
            stable_steps: 0,
            decay_steps: steps,
            decay_kind: DecayKind::OneMinusSqrt,
        }
    }

    /// Constant through `constant_fraction` of the decay stage, then 1−sqrt
    /// over the remainder (the large-model recipe with fraction 2/3).
    pub fn constant_then_one_minus_sqrt(peak_lr: f64, steps: usize, constant_fraction: f64) -> Self {
        Self {
            peak_lr,
            warmup_steps: 0,
            stable_steps: 0,
            decay_steps: steps,
            decay_kind: DecayKind::ConstantThenOneMinusSqrt { constant_fraction },
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(TrainError::BadSchedule(format!(
                "peak_lr {} must be positive",
                self.peak_lr
            )));
        }
        if let DecayKind::ConstantThenOneMinusSqrt { constant_fraction } = self.decay_kind {
            if !(0.0..=1.0).contains(&constant_fraction) {
                return Err(TrainError::BadSchedule(format!(
                    "constant_fraction {constant_fraction} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.warmup_steps + self.stable_steps + self.decay_steps
    }

    /// Learning rate at `step` (valid on the closed range `0..=total_steps`).
    pub fn lr_at(&self, step: usize) -> Result<f64, TrainError> {
        self.validate()?;
        let total = self.total_steps();
        if step > total {
            return Err(TrainError::StepOutOfRange { step, total });
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        if step < self.warmup_steps + self.stable_steps || self.decay_steps == 0 {
            return Ok(self.peak_lr);
        }
        let d = (step - self.warmup_steps - self.stable_steps) as f64;
        let total_decay = self.decay_steps as f64;
        match self.decay_kind {
            DecayKind::OneMinusSqrt => Ok(self.peak_lr * (1.0 - (d / total_decay).sqrt())),
            DecayKind::ConstantThenOneMinusSqrt { constant_fraction } => {
                let cut = constant_fraction * total_decay;
                if d < cut {
                    Ok(self.peak_lr)
                } else {
                    Ok(self.peak_lr * (1.0 - ((d - cut) / (total_decay - cut)).sqrt()))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_stage_holds_the_base_peak() {
        let spec = SchedulerSpec {
            peak_lr: FULL_SCALE_BASE_PEAK_LR,
            warmup_steps: 10,
            stable_steps: 100,
            decay_steps: 50,
            decay_kind: DecayKind::OneMinusSqrt,
        };
        for step in [10, 50, 109] {
            assert_eq!(spec.lr_at(step).unwrap(), 3e-4);
        }
    }

    #[test]
    fn quarter_way_into_decay_halves_the_peak() {
        // 1 - sqrt(1/4) = 1/2
        let spec = SchedulerSpec {
            peak_lr: 3e-4,
            warmup_steps: 0,
            stable_steps: 100,
            decay_steps: 100,
            decay_kind: DecayKind::OneMinusSqrt,
        };
        assert_eq!(spec.lr_at(125).unwrap(), 3e-4 * 0.5);
    }

    #[test]
    fn terminal_learning_rate_is_exactly_zero() {
        let sqrt = SchedulerSpec::one_minus_sqrt(5e-5, 300);
        assert_eq!(sqrt.lr_at(300).unwrap(), 0.0);
        let constant = SchedulerSpec::constant_then_one_minus_sqrt(5e-5, 300, 2.0 / 3.0);
        assert_eq!(constant.lr_at(300).unwrap(), 0.0);
    }

    #[test]
    fn stages_join_continuously() {
        let spec = SchedulerSpec {
            peak_lr: 1e-3,
            warmup_steps: 40,
            stable_steps: 60,
            decay_steps: 80,
            decay_kind: DecayKind::OneMinusSqrt,
        };
        // Warmup approaches the peak linearly and hits it at the boundary.
        assert_eq!(spec.lr_at(0).unwrap(), 0.0);
        assert!((spec.lr_at(39).unwrap() - 1e-3 * 39.0 / 40.0).abs() < 1e-18);
        assert_eq!(spec.lr_at(40).unwrap(), 1e-3);
        // Decay starts at the stable value.
        assert_eq!(spec.lr_at(100).unwrap(), 1e-3);
        assert!(spec.lr_at(101).unwrap() < 1e-3);
    }

    #[test]
    fn constant_fraction_variant_holds_then_decays() {
        let spec = SchedulerSpec::constant_then_one_minus_sqrt(
            FULL_SCALE_LARGE_PEAK_LR,
            900,
            2.0 / 3.0,
        );
        for step in [0, 300, 599] {
            assert_eq!(spec.lr_at(step).unwrap(), 5e-5);
        }
        // Past the cut the same 1−sqrt formula applies over the remainder.
        let d = 750.0 - 600.0;
        let expected = 5e-5 * (1.0 - (d / 300.0_f64).sqrt());
        assert_eq!(spec.lr_at(750).unwrap(), expected);
    }

    #[test]
    fn out_of_range_step_is_an_error() {
        let spec = SchedulerSpec::one_minus_sqrt(1e-4, 10);
        assert!(matches!(
            spec.lr_at(11),
            Err(TrainError::StepOutOfRange { step: 11, total: 10 })
        ));
    }

    #[test]
    fn schedule_is_nonnegative_everywhere() {
        let spec = SchedulerSpec {
            peak_lr: 2e-4,
            warmup_steps: 7,
            stable_steps: 13,
            decay_steps: 31,
            decay_kind: DecayKind::ConstantThenOneMinusSqrt {
                constant_fraction: 0.4,
            },
        };
        for step in 0..=spec.total_steps() {
            assert!(spec.lr_at(step).unwrap() >= 0.0);
        }
    }
}
