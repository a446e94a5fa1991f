use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAPER_BASE_RATE: f64 = 0.001;
pub const PAPER_HEAD_RATE: f64 = 0.01;
pub const PAPER_DECAY_FACTOR: f64 = 0.1;

/// Step-decay learning rates with a separate rate for the head layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningSchedule {
    pub base_rate: f64,
    pub head_rate: f64,
    pub decay_factor: f64,
    pub decay_at_iterations: Vec<u64>,
    pub stop_at_iteration: u64,
}

impl LearningSchedule {
    pub fn new(
        base_rate: f64,
        head_rate: f64,
        decay_factor: f64,
        decay_at_iterations: Vec<u64>,
        stop_at_iteration: u64,
    ) -> Result<Self> {
        let s = Self {
            base_rate,
            head_rate,
            decay_factor,
            decay_at_iterations,
            stop_at_iteration,
        };
        s.validate()?;
        Ok(s)
    }

    /// Constant rates, no decay.
    pub fn constant(base_rate: f64, head_rate: f64, stop_at_iteration: u64) -> Result<Self> {
        Self::new(base_rate, head_rate, 1.0, Vec::new(), stop_at_iteration)
    }

    /// Body 0.001, head 0.01, one tenfold decay halfway through `budget`
    /// (the 50k-of-100k point scaled to the budget).
    pub fn paper_recipe(budget: u64) -> Self {
        Self::scaled_recipe(budget, 1.0)
    }

    /// [`Self::paper_recipe`] with both rates multiplied by `scale`.
    pub fn scaled_recipe(budget: u64, scale: f64) -> Self {
        let mid = budget / 2;
        let decay = if mid > 0 && mid < budget {
            vec![mid]
        } else {
            Vec::new()
        };
        Self {
            base_rate: PAPER_BASE_RATE * scale,
            head_rate: PAPER_HEAD_RATE * scale,
            decay_factor: PAPER_DECAY_FACTOR,
            decay_at_iterations: decay,
            stop_at_iteration: budget,
        }
    }

    /// Same decay points with both rates divided by ten.
    pub fn fine_tune(&self) -> Self {
        Self {
            base_rate: self.base_rate / 10.0,
            head_rate: self.head_rate / 10.0,
            ..self.clone()
        }
    }

    pub fn with_stop(&self, stop: u64) -> Self {
        let mut s = self.clone();
        s.stop_at_iteration = stop;
        s.decay_at_iterations.retain(|&d| d < stop);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_rate > 0.0 && self.head_rate > 0.0)
            || !self.base_rate.is_finite()
            || !self.head_rate.is_finite()
        {
            return Err(Error::Config(format!(
                "learning rates must be positive (base {}, head {})",
                self.base_rate, self.head_rate
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::Config(format!(
                "decay factor {} must be positive",
                self.decay_factor
            )));
        }
        if self.decay_at_iterations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "decay points must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = self.decay_at_iterations.last() {
            if last >= self.stop_at_iteration {
                return Err(Error::Config(format!(
                    "decay point {last} is not before stop {}",
                    self.stop_at_iteration
                )));
            }
        }
        Ok(())
    }

    pub fn decay_multiplier(&self, iteration: u64) -> f64 {
        let n = self
            .decay_at_iterations
            .iter()
            .filter(|&&d| d <= iteration)
            .count();
        self.decay_factor.powi(n as i32)
    }

    /// Effective rate for one layer at `iteration`.
    pub fn rate(&self, is_head: bool, lr_multiplier: f64, iteration: u64) -> Result<f64> {
        if iteration >= self.stop_at_iteration {
            return Err(Error::ScheduleExhausted {
                iteration,
                stop: self.stop_at_iteration,
            });
        }
        let base = if is_head {
            self.head_rate
        } else {
            self.base_rate
        };
        Ok(base * lr_multiplier * self.decay_multiplier(iteration))
    }
}
