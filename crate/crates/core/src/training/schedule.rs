//! Prefix-weight schedule, curriculum checkpoints and learning-rate schedule.

use crate::error::{Error, Result};

pub const DEFAULT_BETA: f64 = 2.0;
pub const DEFAULT_CHECKPOINTS: [usize; 4] = [4, 8, 16, 32];
/// Fraction of optimizer steps spent in linear warmup.
pub const WARMUP_FRACTION: f64 = 0.045;

/// Weights alpha_i = (1 - beta / i) / (1 - beta / L) applied to the margin of
/// a length-i prefix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSchedule {
    beta: f64,
    len: usize,
}

impl AlphaSchedule {
    pub fn new(beta: f64, len: usize) -> Result<Self> {
        if !(beta.is_finite() && beta >= 0.0 && beta < len as f64) {
            return Err(Error::Config(format!(
                "beta {beta} must lie in [0, L = {len})"
            )));
        }
        Ok(AlphaSchedule { beta, len })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Normalizer Z = 1 - beta / L.
    pub fn z(&self) -> f64 {
        1.0 - self.beta / self.len as f64
    }

    pub fn alpha(&self, i: usize) -> Result<f64> {
        if i as f64 <= self.beta || i > self.len {
            return Err(Error::OutOfRange(format!(
                "prefix weight undefined for i = {i} (beta = {}, L = {})",
                self.beta, self.len
            )));
        }
        if i == self.len {
            return Ok(1.0);
        }
        Ok((1.0 - self.beta / i as f64) / self.z())
    }
}

pub fn alpha(i: usize, schedule: &AlphaSchedule) -> Result<f64> {
    schedule.alpha(i)
}

/// Strictly increasing prefix lengths ending at L.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurriculumSchedule {
    checkpoints: Vec<usize>,
}

impl CurriculumSchedule {
    pub fn new(checkpoints: Vec<usize>, len: usize) -> Result<Self> {
        if checkpoints.is_empty() || checkpoints[0] == 0 {
            return Err(Error::Config(
                "curriculum needs positive checkpoints".into(),
            ));
        }
        if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "checkpoints {checkpoints:?} are not strictly increasing"
            )));
        }
        if *checkpoints.last().unwrap() != len {
            return Err(Error::Config(format!(
                "last checkpoint must equal L = {len}"
            )));
        }
        Ok(CurriculumSchedule { checkpoints })
    }

    /// Keeps the requested checkpoints below `len` and appends `len`.
    pub fn clipped(requested: &[usize], len: usize) -> Result<Self> {
        let mut cps: Vec<usize> = requested
            .iter()
            .copied()
            .filter(|&c| c > 0 && c < len)
            .collect();
        cps.sort_unstable();
        cps.dedup();
        cps.push(len);
        Self::new(cps, len)
    }

    pub fn checkpoints(&self) -> &[usize] {
        &self.checkpoints
    }

    pub fn len(&self) -> usize {
        *self.checkpoints.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Checkpoints up to and including `i`.
    pub fn up_to(&self, i: usize) -> Vec<usize> {
        self.checkpoints
            .iter()
            .copied()
            .filter(|&c| c <= i)
            .collect()
    }
}

/// Linear warmup to the peak rate, then linear decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: usize) -> Self {
        let warmup_steps = ((total_steps as f64 * WARMUP_FRACTION).ceil() as usize).max(1);
        LrSchedule {
            peak,
            total_steps,
            warmup_steps,
        }
    }

    /// Rate for 0-based `step`.
    pub fn at(&self, step: usize) -> f64 {
        let s = step as f64 + 1.0;
        let w = self.warmup_steps as f64;
        if s <= w {
            return self.peak * s / w;
        }
        let rest = (self.total_steps as f64 - w).max(1.0);
        self.peak * ((self.total_steps as f64 - s + 1.0) / rest).clamp(0.0, 1.0)
    }
}
