//! Learning-rate schedule: linear warmup, cosine decay to a floor, and a
//! linearly decaying extra multiplier for the value tables.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Base,
    Values,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_ratio: f64,
    pub end_ratio: f64,
    pub value_start: f64,
}

impl Schedule {
    pub fn new(total_steps: usize) -> Self {
        Self {
            total_steps,
            warmup_ratio: 0.01,
            end_ratio: 0.1,
            value_start: 10.0,
        }
    }

    fn progress(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 1.0;
        }
        (step as f64 / self.total_steps as f64).clamp(0.0, 1.0)
    }

    /// Multiplier of the base learning rate.
    pub fn base(&self, step: usize) -> f64 {
        let p = self.progress(step);
        let w = self.warmup_ratio;
        if p < w {
            return p / w;
        }
        let q = if w < 1.0 { (p - w) / (1.0 - w) } else { 1.0 };
        self.end_ratio + (1.0 - self.end_ratio) * (1.0 + (std::f64::consts::PI * q).cos()) / 2.0
    }

    /// Extra value-table factor, linear from `value_start` down to 1.
    pub fn value_factor(&self, step: usize) -> f64 {
        let p = self.progress(step);
        self.value_start - (self.value_start - 1.0) * p
    }

    pub fn lr_at(&self, step: usize, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Base => self.base(step),
            ParamGroup::Values => self.base(step) * self.value_factor(step),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = Schedule::new(1000);
        assert_eq!(s.base(0), 0.0);
        assert_eq!(s.value_factor(0), 10.0);
        assert!((s.base(1000) - 0.1).abs() < 1e-15);
        assert_eq!(s.value_factor(1000), 1.0);
        assert_eq!(s.base(10), 1.0);
    }

    #[test]
    fn midpoint() {
        let s = Schedule::new(1000);
        let want = 0.1 + 0.9 * (1.0 + (std::f64::consts::PI * (0.5 - 0.01) / 0.99).cos()) / 2.0;
        assert!((s.base(500) - want).abs() < 1e-15);
        assert_eq!(s.value_factor(500), 5.5);
        assert!((s.lr_at(500, ParamGroup::Values) - 5.5 * want).abs() < 1e-15);
    }
}
