//! Learning-rate schedule and optimiser hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

/// Constant learning rate used for tokeniser pretraining.
pub const PRETRAIN_LR: f64 = 5e-4;

pub fn schedule_constant() -> f64 {
    PRETRAIN_LR
}

/// Warmup, inverse-square-root decay and square-root cooldown, in epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub warmup: usize,
    pub cooldown: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    pub lr_peak: f64,
}

fn default_alpha() -> f64 {
    0.1
}

fn default_kappa() -> f64 {
    128.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Decay,
    Cooldown,
}

impl ScheduleConfig {
    pub fn new(epochs: usize, warmup: usize, cooldown: usize, lr_peak: f64) -> Result<Self> {
        let cfg = Self { epochs, warmup, cooldown, alpha: default_alpha(), kappa: default_kappa(), lr_peak };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup + self.cooldown > self.epochs {
            return Err(arg_err!("warmup {} + cooldown {} exceed {} epochs", self.warmup, self.cooldown, self.epochs));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(arg_err!("alpha {} outside (0, 1]", self.alpha));
        }
        if !(self.kappa > 0.0) || !(self.lr_peak > 0.0) {
            return Err(arg_err!("kappa and lr_peak must be positive"));
        }
        Ok(())
    }

    pub fn phase(&self, e: usize) -> Phase {
        if e <= self.warmup {
            Phase::Warmup
        } else if e <= self.epochs - self.cooldown {
            Phase::Decay
        } else {
            Phase::Cooldown
        }
    }

    /// `lr_peak / (1 + √(E − C + κ) − √κ)`.
    pub fn lr_end(&self) -> f64 {
        let ec = (self.epochs - self.cooldown) as f64;
        self.lr_peak / (1.0 + (ec + self.kappa).sqrt() - self.kappa.sqrt())
    }
}

/// Learning rate at epoch `e`, formulas taken literally. For `W > 0` the
/// last decay epoch and `lr_end` differ, so the curve steps at the start of
/// cooldown.
pub fn lr_at_epoch(e: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if e > cfg.epochs {
        return Err(arg_err!("epoch {e} beyond schedule length {}", cfg.epochs));
    }
    Ok(match cfg.phase(e) {
        Phase::Warmup => {
            let frac = if cfg.warmup == 0 { 1.0 } else { e as f64 / cfg.warmup as f64 };
            cfg.lr_peak * (cfg.alpha + (1.0 - cfg.alpha) * frac)
        }
        Phase::Decay => {
            let s = (e - cfg.warmup) as f64;
            cfg.lr_peak / (1.0 + (s + cfg.kappa).sqrt() - cfg.kappa.sqrt())
        }
        Phase::Cooldown => {
            let t = (e - (cfg.epochs - cfg.cooldown)) as f64;
            cfg.lr_end() * (1.0 - ((t - 1.0) / cfg.cooldown as f64).sqrt())
        }
    })
}

/// `epoch,lr` rows for the whole schedule.
pub fn schedule_csv(cfg: &ScheduleConfig) -> Result<String> {
    let mut out = String::from("epoch,lr\n");
    for e in 0..=cfg.epochs {
        out.push_str(&format!("{e},{:e}\n", lr_at_epoch(e, cfg)?));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimiserKind {
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimiserConfig {
    #[serde(default = "default_kind")]
    pub kind: OptimiserKind,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    /// Global L2 norm threshold.
    pub clip_norm: f64,
}

fn default_kind() -> OptimiserKind {
    OptimiserKind::Adamw
}

impl OptimiserConfig {
    /// Tokeniser pretraining. The reference run used SOAP; AdamW is run with
    /// the same learning rate, betas and decay.
    pub fn tokeniser_reference() -> Self {
        Self { kind: OptimiserKind::Adamw, lr: 5e-4, betas: (0.95, 0.95), weight_decay: 0.01, eps: 1e-8, clip_norm: 0.5 }
    }

    pub fn rollout_reference() -> Self {
        Self { kind: OptimiserKind::Adamw, lr: 5e-5, betas: (0.9, 0.999), weight_decay: 1e-4, eps: 1e-10, clip_norm: 5.0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_with_zero_length_starts_at_peak() {
        let cfg = ScheduleConfig::new(10, 0, 2, 1.0).unwrap();
        assert_eq!(lr_at_epoch(0, &cfg).unwrap(), 1.0);
        assert!(lr_at_epoch(11, &cfg).is_err());
        assert!(ScheduleConfig::new(4, 3, 2, 1.0).is_err());
    }

    #[test]
    fn csv_has_one_row_per_epoch() {
        let cfg = ScheduleConfig::new(20, 3, 4, 1e-3).unwrap();
        assert_eq!(schedule_csv(&cfg).unwrap().lines().count(), 22);
    }
}
