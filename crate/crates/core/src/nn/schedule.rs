use crate::error::{Error, Result};

/// Linear warmup from `warmup_start` to `base` over `warmup_epochs`, then
/// geometric decay by `decay` per epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_start: f64,
    pub warmup_epochs: usize,
    pub decay: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule { base, warmup_start: base, warmup_epochs: 0, decay: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0) || !(self.warmup_start > 0.0) {
            return Err(Error::Contract("learning rates must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Contract(format!("decay {} outside (0, 1]", self.decay)));
        }
        Ok(())
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            let frac = epoch as f64 / self.warmup_epochs as f64;
            self.warmup_start + (self.base - self.warmup_start) * frac
        } else {
            let past = (epoch - self.warmup_epochs) as i32;
            self.base * self.decay.powi(past)
        }
    }
}

/// True once the best (first minimal) loss is more than `patience` epochs old.
pub fn should_stop(losses: &[f64], patience: usize) -> bool {
    let Some((best, _)) = losses.iter().enumerate().fold(None, |acc: Option<(usize, f64)>, (i, &l)| match acc {
        Some((_, b)) if l >= b => acc,
        _ => Some((i, l)),
    }) else {
        return false;
    };
    losses.len() - 1 - best > patience
}
