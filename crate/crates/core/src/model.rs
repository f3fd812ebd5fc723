//! The full network: dual-stem backbone, optional refinement and cascade,
//! GeM pooling and the BN-neck head.

use ndarray::{s, Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape, Var};
use crate::backbone::{gem_pool, Backbone, BackboneConfig, Head, StageFeatures, Variant};
use crate::dataset::Modality;
use crate::error::{Error, Result};
use crate::losses::EmbeddingBatch;
use crate::mpfr::{Mpfr, MpfrConfig, MpfrOutput};
use crate::nn::{Init, Mode, Module, Visitor};
use crate::sdce::{Sdce, SdceConfig, SdceOutput};

pub const GEM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_ids: usize,
    pub mpfr_on: bool,
    /// Ignored unless `mpfr_on`: the cascade reads the refined map.
    pub sdce_on: bool,
    pub mpfr: MpfrConfig,
    pub sdce: SdceConfig,
    pub gem_p: f64,
}

impl ModelConfig {
    pub fn new(variant: Variant, num_ids: usize) -> Self {
        Self {
            backbone: BackboneConfig::for_variant(variant),
            num_ids,
            mpfr_on: true,
            sdce_on: true,
            mpfr: MpfrConfig::default(),
            sdce: SdceConfig {
                heads: match variant {
                    Variant::Tiny => 4,
                    Variant::Resnet50 => 8,
                },
                ..SdceConfig::default()
            },
            gem_p: 3.0,
        }
    }

    pub fn sdce_active(&self) -> bool {
        self.mpfr_on && self.sdce_on
    }

    pub fn embedding_dim(&self) -> usize {
        self.backbone.stage_channels[3]
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput<F: Real> {
    pub stages: StageFeatures<F>,
    pub refined: Option<MpfrOutput<F>>,
    pub cascade: Option<SdceOutput<F>>,
    /// Map that is pooled: the cascade output, else the refined map, else
    /// the deep stage output.
    pub deep: Var<F>,
    pub pooled: Var<F>,
    pub bn: Var<F>,
    pub logits: Var<F>,
}

impl<F: Real> ModelOutput<F> {
    pub fn embeddings(
        &self,
        identities: &[usize],
        modalities: &[Modality],
    ) -> Result<EmbeddingBatch<F>> {
        EmbeddingBatch::new(
            self.pooled.clone(),
            self.bn.clone(),
            identities.to_vec(),
            modalities.to_vec(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    cfg: ModelConfig,
    pub backbone: Backbone<F>,
    pub mpfr: Option<Mpfr<F>>,
    pub sdce: Option<Sdce<F>>,
    pub head: Head<F>,
}

impl<F: Real> Model<F> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.num_ids == 0 {
            return Err(Error::Config(
                "the classifier needs at least one identity".into(),
            ));
        }
        let mut init = Init::new(seed);
        let backbone = Backbone::new(&cfg.backbone, &mut init)?;
        let mpfr = if cfg.mpfr_on {
            Some(Mpfr::for_backbone(&cfg.backbone, &cfg.mpfr, &mut init)?)
        } else {
            None
        };
        let sdce = if cfg.sdce_active() {
            Some(Sdce::new(&mut init, cfg.embedding_dim(), &cfg.sdce)?)
        } else {
            None
        };
        let head = Head::new(&mut init, cfg.embedding_dim(), cfg.num_ids);
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            mpfr,
            sdce,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(
        &self,
        images: &Var<F>,
        modalities: &[Modality],
        mode: Mode,
    ) -> Result<ModelOutput<F>> {
        let stages = self.backbone.forward(images, modalities, mode)?;
        let refined = self
            .mpfr
            .as_ref()
            .map(|m| m.forward(&stages, mode))
            .transpose()?;
        let cascade = match (&self.sdce, &refined) {
            (Some(s), Some(r)) => Some(s.forward(&stages.high, &r.fused)?),
            _ => None,
        };
        let deep = match (&cascade, &refined) {
            (Some(c), _) => c.enhanced.clone(),
            (None, Some(r)) => r.fused.clone(),
            (None, None) => stages.high.clone(),
        };
        let pooled = gem_pool(&deep, self.cfg.gem_p, GEM_EPS)?;
        let bn = self.head.bnneck(&pooled, mode)?;
        let logits = self.head.classify(&bn)?;
        Ok(ModelOutput {
            stages,
            refined,
            cascade,
            deep,
            pooled,
            bn,
            logits,
        })
    }

    /// Eval-mode pooled and BN-neck features for `images` (`N×3×H×W`),
    /// computed in chunks of `batch` rows.
    pub fn embed(
        &self,
        images: &ArrayD<F>,
        modalities: &[Modality],
        batch: usize,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let n = modalities.len();
        if images.shape().first() != Some(&n) {
            return Err(Error::Shape(format!(
                "{:?} images for {n} modality labels",
                images.shape()
            )));
        }
        let d = self.cfg.embedding_dim();
        let mut pooled = Array2::zeros((n, d));
        let mut bn = Array2::zeros((n, d));
        let step = batch.max(1);
        for start in (0..n).step_by(step) {
            let end = (start + step).min(n);
            let tape = Tape::inference();
            let x = tape.constant(images.slice_axis(Axis(0), (start..end).into()).to_owned());
            let out = self.forward(&x, &modalities[start..end], Mode::Eval)?;
            let to64 = |v: &Var<F>| v.value().mapv(|a| a.to_f64().unwrap());
            pooled.slice_mut(s![start..end, ..]).assign(
                &to64(&out.pooled)
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap(),
            );
            bn.slice_mut(s![start..end, ..])
                .assign(&to64(&out.bn).into_dimensionality::<ndarray::Ix2>().unwrap());
        }
        Ok((pooled, bn))
    }
}

impl<F: Real> Module<F> for Model<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        v.scope("backbone", |v| self.backbone.visit(v));
        if let Some(m) = &mut self.mpfr {
            v.scope("mpfr", |v| m.visit(v));
        }
        if let Some(s) = &mut self.sdce {
            v.scope("sdce", |v| s.visit(v));
        }
        v.scope("head", |v| self.head.visit(v));
    }
}
