use serde::{Deserialize, Serialize};

use crate::dataset::Task;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::AdamConfig;

/// Dataset seed offset separating pretraining folds from finetuning folds.
pub const FINETUNE_SEED_OFFSET: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regimen {
    /// Next-sequence and reconstruction losses together.
    Multitask,
    NtpOnly,
    /// Same-genre training starting from a pretrained encoder.
    FinetuneSg,
    /// Same-genre training from random weights.
    FreshSg,
}

impl Regimen {
    pub fn name(self) -> &'static str {
        match self {
            Regimen::Multitask => "multitask",
            Regimen::NtpOnly => "ntp_only",
            Regimen::FinetuneSg => "finetune_sg",
            Regimen::FreshSg => "fresh_sg",
        }
    }

    pub fn task(self) -> Task {
        if self.is_pretrain() {
            Task::Ntp
        } else {
            Task::Sg
        }
    }

    pub fn is_pretrain(self) -> bool {
        matches!(self, Regimen::Multitask | Regimen::NtpOnly)
    }

    pub fn dataset_seed(self, base_seed: u64, fold: u32) -> u64 {
        let offset = if self.is_pretrain() { 0 } else { FINETUNE_SEED_OFFSET };
        base_seed.wrapping_add(fold as u64).wrapping_add(offset)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regimen: Regimen,
    /// Weight of the next-sequence loss.
    pub alpha1: f64,
    /// Weight of the reconstruction loss.
    pub alpha2: f64,
    /// Zero freezes every parameter (the optimizer step is skipped).
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub n_train_cap: usize,
    pub n_val_cap: usize,
    /// Write wall-clock seconds into the metrics; `false` writes 0 so
    /// reruns are byte-identical.
    pub record_timing: bool,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// Defaults: the best-found pretraining settings, and the smaller
    /// learning rate for same-genre training.
    pub fn for_regimen(regimen: Regimen) -> Self {
        let (alpha1, alpha2, lr) = match regimen {
            Regimen::Multitask => (0.1, 0.9, 1e-4),
            Regimen::NtpOnly => (1.0, 0.0, 1e-5),
            Regimen::FinetuneSg | Regimen::FreshSg => (1.0, 0.0, 1e-5),
        };
        let adam = AdamConfig::default();
        Self {
            regimen,
            alpha1,
            alpha2,
            lr,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            weight_decay: adam.weight_decay,
            adam_eps: adam.eps,
            n_train_cap: 10_000,
            n_val_cap: 400,
            record_timing: true,
            model: ModelConfig::default(),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        for (n, a) in [("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("{n} must lie in [0, 1], got {a}"));
            }
        }
        if (self.alpha1 + self.alpha2 - 1.0).abs() > 1e-9 {
            return bad(format!(
                "loss weights must sum to 1 (alpha1 + alpha2 = 1), got {} + {}",
                self.alpha1, self.alpha2
            ));
        }
        if self.regimen == Regimen::NtpOnly && self.alpha2 != 0.0 {
            return bad("ntp_only requires alpha2 = 0".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if self.lr > 0.0 {
            self.adam().validate()?;
        } else {
            AdamConfig { lr: 1.0, ..self.adam() }.validate()?;
        }
        Ok(())
    }

    /// Loss weights actually applied: same-genre regimens train the
    /// same-genre head alone.
    pub fn uses_ntp(&self) -> bool {
        self.regimen.is_pretrain() && self.alpha1 > 0.0
    }

    pub fn uses_mbm(&self) -> bool {
        self.regimen.is_pretrain() && self.alpha2 > 0.0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for r in [
            Regimen::Multitask,
            Regimen::NtpOnly,
            Regimen::FinetuneSg,
            Regimen::FreshSg,
        ] {
            TrainConfig::for_regimen(r).validate().unwrap();
        }
        let m = TrainConfig::for_regimen(Regimen::Multitask);
        assert_eq!((m.alpha1, m.alpha2, m.lr), (0.1, 0.9, 1e-4));
        assert_eq!(TrainConfig::for_regimen(Regimen::NtpOnly).lr, 1e-5);
        assert_eq!(m.epochs, 10);
    }

    #[test]
    fn alphas_must_sum_to_one() {
        let mut c = TrainConfig::for_regimen(Regimen::Multitask);
        c.alpha1 = 0.3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.alpha2 = 0.7;
        c.validate().unwrap();
    }

    #[test]
    fn zero_lr_is_allowed() {
        let mut c = TrainConfig::for_regimen(Regimen::Multitask);
        c.lr = 0.0;
        c.validate().unwrap();
        c.lr = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let c = TrainConfig::for_regimen(Regimen::FreshSg);
        assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        v["bogus"] = 1.into();
        assert!(matches!(
            TrainConfig::from_json(&v.to_string()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dataset_seed_schedule() {
        assert_eq!(Regimen::Multitask.dataset_seed(10, 3), 13);
        assert_eq!(Regimen::FreshSg.dataset_seed(10, 3), 1013);
        assert_eq!(
            Regimen::FinetuneSg.dataset_seed(5, 0),
            Regimen::FreshSg.dataset_seed(5, 0)
        );
    }
}
