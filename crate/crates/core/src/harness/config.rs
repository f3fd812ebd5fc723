use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Variant};
use crate::dataset::{AugmentConfig, SamplerConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::mpfr::MpfrConfig;
use crate::sdce::SdceConfig;

/// Metric loss trained alongside cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LossKind {
    Icg,
    Tri,
}

/// Everything a training run needs, as one flat key-value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_lrs: Vec<f64>,
    /// Run length the warmup and decay epochs are stated for. Other lengths
    /// rescale them proportionally.
    pub reference_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale each step's gradients to at most this global L2 norm; 0
    /// turns clipping off.
    pub max_grad_norm: f64,

    pub lambda: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub push_same_identity: bool,
    pub loss: LossKind,
    pub triplet_margin: f64,

    pub p: usize,
    pub k: usize,
    pub k_per_modality: bool,
    /// Batches per epoch; defaults to one pass over the training images.
    pub iters_per_epoch: Option<usize>,

    pub variant: Variant,
    pub height: usize,
    pub width: usize,
    pub mpfr_on: bool,
    pub sdce_on: bool,
    pub mpfr_stages: Vec<usize>,
    pub heads: Option<usize>,
    pub self_block: bool,
    pub use_jib: bool,
    pub beta_cross: bool,
    pub beta_self: bool,
    pub gem_p: f64,

    pub flip_prob: f64,
    pub erase_prob: f64,
    pub gray_prob: f64,
    pub channel_aug_prob: f64,

    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 saves only the last.
    pub checkpoint_every: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        let sdce = SdceConfig::default();
        Self {
            epochs: 150,
            warmup_epochs: 10,
            base_lr: 0.01,
            peak_lr: 0.1,
            decay_epochs: vec![30, 90, 120],
            decay_lrs: vec![0.01, 0.001, 0.0001],
            reference_epochs: 150,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_grad_norm: 2.0,
            lambda: 1.0,
            rho1: 0.01,
            rho2: 0.7,
            push_same_identity: false,
            loss: LossKind::Icg,
            triplet_margin: 0.3,
            p: 6,
            k: 8,
            k_per_modality: false,
            iters_per_epoch: None,
            variant: Variant::Tiny,
            height: 64,
            width: 32,
            mpfr_on: true,
            sdce_on: true,
            mpfr_stages: MpfrConfig::default().stages,
            heads: None,
            self_block: sdce.self_block,
            use_jib: sdce.use_jib,
            beta_cross: sdce.beta_cross,
            beta_self: sdce.beta_self,
            gem_p: 3.0,
            flip_prob: aug.flip_prob,
            erase_prob: aug.erase_prob,
            gray_prob: aug.gray_prob,
            channel_aug_prob: aug.channel_aug_prob,
            seed: 0,
            checkpoint_every: 0,
            eval_batch: 64,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.reference_epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.decay_epochs.len() != self.decay_lrs.len() {
            return fail("decay_epochs and decay_lrs differ in length".into());
        }
        let horizon = if self.epochs == self.reference_epochs {
            self.epochs
        } else {
            self.reference_epochs
        };
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1])
            || self.decay_epochs.iter().any(|&e| e == 0 || e > horizon)
        {
            return fail(format!(
                "decay epochs {:?} must increase strictly within [1, {horizon}]",
                self.decay_epochs
            ));
        }
        if let Some(&first) = self.decay_epochs.first() {
            if self.warmup_epochs >= first {
                return fail(format!(
                    "warmup ({}) must end before the first decay ({first})",
                    self.warmup_epochs
                ));
            }
        }
        let lrs = [self.base_lr, self.peak_lr]
            .into_iter()
            .chain(self.decay_lrs.iter().copied());
        if lrs.clone().any(|v| !(v.is_finite() && v > 0.0)) {
            return fail("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return fail("momentum must lie in [0,1) and weight decay be non-negative".into());
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm >= 0.0) {
            return fail("max_grad_norm must be non-negative".into());
        }
        if self.height == 0 || self.width == 0 || self.eval_batch == 0 {
            return fail("image size and eval batch must be positive".into());
        }
        if self.iters_per_epoch == Some(0) {
            return fail("iters_per_epoch must be positive".into());
        }
        self.loss_config().validate()?;
        self.sampler_config().validate()?;
        self.augment_config().validate()?;
        self.model_config(1).backbone.validate()?;
        MpfrConfig {
            stages: self.mpfr_stages.clone(),
        }
        .validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            rho1: self.rho1,
            rho2: self.rho2,
            lambda: self.lambda,
            push_same_identity: self.push_same_identity,
            use_icg: self.loss == LossKind::Icg,
            use_triplet: self.loss == LossKind::Tri,
            triplet_margin: self.triplet_margin,
        }
    }

    pub fn grad_clip(&self) -> Option<f64> {
        (self.max_grad_norm > 0.0).then_some(self.max_grad_norm)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            k_per_modality: self.k_per_modality,
            ..SamplerConfig::new(self.p, self.k, self.seed)
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            flip_prob: self.flip_prob,
            erase_prob: self.erase_prob,
            gray_prob: self.gray_prob,
            channel_aug_prob: self.channel_aug_prob,
        }
    }

    pub fn model_config(&self, num_ids: usize) -> ModelConfig {
        let base = ModelConfig::new(self.variant, num_ids);
        ModelConfig {
            backbone: BackboneConfig::for_variant(self.variant),
            mpfr_on: self.mpfr_on,
            sdce_on: self.sdce_on,
            mpfr: MpfrConfig {
                stages: self.mpfr_stages.clone(),
            },
            sdce: SdceConfig {
                heads: self.heads.unwrap_or(base.sdce.heads),
                self_block: self.self_block,
                use_jib: self.use_jib,
                beta_cross: self.beta_cross,
                beta_self: self.beta_self,
                ..base.sdce
            },
            gem_p: self.gem_p,
            ..base
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        assert!(text.lines().all(|l| !l.starts_with('[')));
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults_and_reject_typos() {
        let cfg = TrainConfig::from_toml("epochs = 40\nloss = \"TRI\"\nmpfr_on = false\n").unwrap();
        assert_eq!(
            (cfg.epochs, cfg.loss, cfg.mpfr_on, cfg.p),
            (40, LossKind::Tri, false, 6)
        );
        assert!(!cfg.model_config(10).sdce_active());
        assert!(TrainConfig::from_toml("epoch = 40\n").is_err());
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let bad = [
            "decay_epochs = [90, 30, 120]",
            "decay_epochs = [30, 90, 200]",
            "warmup_epochs = 30",
            "decay_lrs = [0.01]",
            "momentum = 1.5",
            "max_grad_norm = -1.0",
            "k = 3",
        ];
        for b in bad {
            assert!(TrainConfig::from_toml(b).is_err(), "{b}");
        }
        assert_eq!(
            TrainConfig::from_toml("max_grad_norm = 0.0")
                .unwrap()
                .grad_clip(),
            None
        );
        assert_eq!(TrainConfig::default().grad_clip(), Some(2.0));
    }

    #[test]
    fn heads_follow_the_variant_unless_set() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.model_config(3).sdce.heads, 4);
        cfg.variant = Variant::Resnet50;
        assert_eq!(cfg.model_config(3).sdce.heads, 8);
        cfg.heads = Some(2);
        assert_eq!(cfg.model_config(3).sdce.heads, 2);
    }
}
