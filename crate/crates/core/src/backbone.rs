//! Dual-stream feature extractor and the pooling/BN-neck/classifier head.
//!
//! Each modality has its own stem; the four stages after it are shared. The
//! stage outputs are numbered 1–4 and the last three are the shallow, middle
//! and deep maps consumed by the refinement module.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape, Var};
use crate::dataset::Modality;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, ConvBlock, Init, Linear, Mode, Module, Visitor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    /// Bottleneck stages of depth 3/4/6/3 after a 7×7 stem and max-pool.
    Resnet50,
    /// One 3×3 conv block per stage after a stride-2 3×3 stem.
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_strides: [usize; 4],
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        Self {
            variant: Variant::Tiny,
            stem_channels: 16,
            stage_channels: [32, 64, 128, 256],
            stage_strides: [1, 2, 2, 1],
        }
    }

    pub fn resnet50() -> Self {
        Self {
            variant: Variant::Resnet50,
            stem_channels: 64,
            stage_channels: [256, 512, 1024, 2048],
            stage_strides: [1, 2, 2, 1],
        }
    }

    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Tiny => Self::tiny(),
            Variant::Resnet50 => Self::resnet50(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_strides[3] != 1 {
            return Err(Error::Config("the last stage must have stride 1".into()));
        }
        if self.stage_strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("stage strides must be positive".into()));
        }
        let widths: Vec<usize> = std::iter::once(self.stem_channels)
            .chain(self.stage_channels)
            .collect();
        if widths.iter().any(|&c| c == 0) || widths.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "channel widths must be positive and non-decreasing: {widths:?}"
            )));
        }
        if self.variant == Variant::Resnet50 && self.stage_channels.iter().any(|c| c % 4 != 0) {
            return Err(Error::Config(
                "bottleneck widths must be multiples of 4".into(),
            ));
        }
        Ok(())
    }

    /// Spatial size of stage outputs 1–4 for an `h × w` input.
    pub fn stage_sizes(&self, h: usize, w: usize) -> [(usize, usize); 4] {
        let down = |x: usize, k: usize, s: usize, p: usize| (x + 2 * p - k) / s + 1;
        let (mut h, mut w) = match self.variant {
            Variant::Tiny => (down(h, 3, 2, 1), down(w, 3, 2, 1)),
            Variant::Resnet50 => {
                let (h, w) = (down(h, 7, 2, 3), down(w, 7, 2, 3));
                (down(h, 3, 2, 1), down(w, 3, 2, 1))
            }
        };
        let mut out = [(0, 0); 4];
        for (i, &s) in self.stage_strides.iter().enumerate() {
            h = down(h, 3, s, 1);
            w = down(w, 3, s, 1);
            out[i] = (h, w);
        }
        out
    }
}

/// Outputs of the four shared stages.
#[derive(Debug, Clone)]
pub struct StageFeatures<F: Real> {
    pub f1: Var<F>,
    /// Stage 2.
    pub low: Var<F>,
    /// Stage 3.
    pub mid: Var<F>,
    /// Stage 4.
    pub high: Var<F>,
}

impl<F: Real> StageFeatures<F> {
    /// Stage `i` in `1..=4`.
    pub fn stage(&self, i: usize) -> &Var<F> {
        match i {
            1 => &self.f1,
            2 => &self.low,
            3 => &self.mid,
            4 => &self.high,
            _ => panic!("stage index {i} outside 1..=4"),
        }
    }
}

#[derive(Debug, Clone)]
struct Stem<F: Real> {
    block: ConvBlock<F>,
    max_pool: bool,
}

impl<F: Real> Stem<F> {
    fn forward(&self, x: &Var<F>, mode: Mode) -> Result<Var<F>> {
        let y = self.block.forward(x, mode)?;
        Ok(if self.max_pool {
            y.max_pool2d(3, 2, 1)
        } else {
            y
        })
    }
}

impl<F: Real> Module<F> for Stem<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        self.block.visit(v);
    }
}

#[derive(Debug, Clone)]
pub struct Bottleneck<F: Real> {
    reduce: ConvBlock<F>,
    spatial: ConvBlock<F>,
    expand: ConvBlock<F>,
    shortcut: Option<ConvBlock<F>>,
}

impl<F: Real> Bottleneck<F> {
    fn new(init: &mut Init, input: usize, output: usize, stride: usize) -> Self {
        let mid = output / 4;
        let mut expand = ConvBlock::new(init, mid, output, 1, 1, 0);
        expand.relu = false;
        let shortcut = (stride != 1 || input != output).then(|| {
            let mut s = ConvBlock::new(init, input, output, 1, stride, 0);
            s.relu = false;
            s
        });
        Self {
            reduce: ConvBlock::new(init, input, mid, 1, 1, 0),
            spatial: ConvBlock::new(init, mid, mid, 3, stride, 1),
            expand,
            shortcut,
        }
    }

    fn forward(&self, x: &Var<F>, mode: Mode) -> Result<Var<F>> {
        let y = self.reduce.forward(x, mode)?;
        let y = self.spatial.forward(&y, mode)?;
        let y = self.expand.forward(&y, mode)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, mode)?,
            None => x.clone(),
        };
        Ok(y.add(&skip).relu())
    }
}

impl<F: Real> Module<F> for Bottleneck<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        v.scope("reduce", |v| self.reduce.visit(v));
        v.scope("spatial", |v| self.spatial.visit(v));
        v.scope("expand", |v| self.expand.visit(v));
        if let Some(s) = &mut self.shortcut {
            v.scope("shortcut", |v| s.visit(v));
        }
    }
}

#[derive(Debug, Clone)]
enum Stage<F: Real> {
    Plain(ConvBlock<F>),
    Residual(Vec<Bottleneck<F>>),
}

impl<F: Real> Stage<F> {
    fn forward(&self, x: &Var<F>, mode: Mode) -> Result<Var<F>> {
        match self {
            Stage::Plain(b) => b.forward(x, mode),
            Stage::Residual(blocks) => {
                let mut y = x.clone();
                for b in blocks {
                    y = b.forward(&y, mode)?;
                }
                Ok(y)
            }
        }
    }
}

impl<F: Real> Module<F> for Stage<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        match self {
            Stage::Plain(b) => b.visit(v),
            Stage::Residual(blocks) => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    v.scope(&i.to_string(), |v| b.visit(v));
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<F: Real> {
    cfg: BackboneConfig,
    stems: [Stem<F>; 2],
    stages: Vec<Stage<F>>,
}

impl<F: Real> Backbone<F> {
    pub fn new(cfg: &BackboneConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let stem = |init: &mut Init| match cfg.variant {
            Variant::Tiny => Stem {
                block: ConvBlock::new(init, 3, cfg.stem_channels, 3, 2, 1),
                max_pool: false,
            },
            Variant::Resnet50 => Stem {
                block: ConvBlock::new(init, 3, cfg.stem_channels, 7, 2, 3),
                max_pool: true,
            },
        };
        let stems = [stem(init), stem(init)];
        let mut stages = Vec::with_capacity(4);
        let mut input = cfg.stem_channels;
        for (i, (&c, &s)) in cfg
            .stage_channels
            .iter()
            .zip(&cfg.stage_strides)
            .enumerate()
        {
            stages.push(match cfg.variant {
                Variant::Tiny => Stage::Plain(ConvBlock::new(init, input, c, 3, s, 1)),
                Variant::Resnet50 => {
                    let depth = [3, 4, 6, 3][i];
                    Stage::Residual(
                        (0..depth)
                            .map(|j| {
                                if j == 0 {
                                    Bottleneck::new(init, input, c, s)
                                } else {
                                    Bottleneck::new(init, c, c, 1)
                                }
                            })
                            .collect(),
                    )
                }
            });
            input = c;
        }
        Ok(Self {
            cfg: cfg.clone(),
            stems,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Visit only one modality's stem.
    pub fn visit_stem(&mut self, modality: Modality, v: &mut Visitor<'_, F>) {
        self.stems[modality.index()].visit(v);
    }

    /// Visit only the shared stages.
    pub fn visit_stages(&mut self, v: &mut Visitor<'_, F>) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            v.scope(&(i + 1).to_string(), |v| s.visit(v));
        }
    }

    /// Run `images` (`N×3×H×W`) through the stem of each row's modality, then
    /// through the shared stages. Row order is preserved.
    pub fn forward(
        &self,
        images: &Var<F>,
        modalities: &[Modality],
        mode: Mode,
    ) -> Result<StageFeatures<F>> {
        if images.ndim() != 4 || images.shape()[1] != 3 {
            return Err(Error::Shape(format!(
                "backbone expects N×3×H×W images, got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != modalities.len() {
            return Err(Error::Shape(format!(
                "{} images but {} modality labels",
                images.shape()[0],
                modalities.len()
            )));
        }
        let groups: Vec<Vec<usize>> = Modality::BOTH
            .iter()
            .map(|&m| {
                (0..modalities.len())
                    .filter(|&i| modalities[i] == m)
                    .collect()
            })
            .collect();
        let mut parts = Vec::new();
        let mut order = Vec::new();
        for (m, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let x = if rows.len() == modalities.len() {
                images.clone()
            } else {
                images.select_rows(rows)
            };
            parts.push(self.stems[m].forward(&x, mode)?);
            order.extend_from_slice(rows);
        }
        let mut x = if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            let cat = Var::concat(&parts.iter().collect::<Vec<_>>(), 0);
            // `order[j]` is the input row that landed at concatenated row j.
            let mut inverse = vec![0; order.len()];
            for (j, &i) in order.iter().enumerate() {
                inverse[i] = j;
            }
            cat.select_rows(&inverse)
        };
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.forward(&x, mode)?;
            outs.push(x.clone());
        }
        let mut it = outs.into_iter();
        Ok(StageFeatures {
            f1: it.next().unwrap(),
            low: it.next().unwrap(),
            mid: it.next().unwrap(),
            high: it.next().unwrap(),
        })
    }
}

impl<F: Real> Module<F> for Backbone<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        v.scope("stem_vis", |v| self.stems[0].visit(v));
        v.scope("stem_ir", |v| self.stems[1].visit(v));
        v.scope("stage", |v| self.visit_stages(v));
    }
}

/// Generalised mean over the spatial axes of `N×C×H×W`, after clamping at
/// `eps`: `(mean x^p)^(1/p)`, giving `N×C`.
pub fn gem_pool<F: Real>(fmap: &Var<F>, p: f64, eps: f64) -> Result<Var<F>> {
    if fmap.ndim() != 4 {
        return Err(Error::Shape(format!(
            "GeM expects N×C×H×W, got {:?}",
            fmap.shape()
        )));
    }
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "GeM exponent must be ≥ 1, got {p}"
        )));
    }
    if fmap.value().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("GeM input".into()));
    }
    let (n, c) = (fmap.shape()[0], fmap.shape()[1]);
    let x = fmap.clamp_min(F::lit(eps));
    let powered = if p == 1.0 { x } else { x.powf(F::lit(p)) };
    let mean = powered.mean_axes(&[2, 3]);
    let out = if p == 1.0 {
        mean
    } else {
        mean.powf(F::lit(1.0 / p))
    };
    Ok(out.reshape(&[n, c]))
}

/// BN neck (batch norm without shift) and linear identity classifier.
#[derive(Debug, Clone)]
pub struct Head<F: Real> {
    pub neck: BatchNorm<F>,
    pub classifier: Linear<F>,
}

impl<F: Real> Head<F> {
    pub fn new(init: &mut Init, dim: usize, num_ids: usize) -> Self {
        Self {
            neck: BatchNorm::new(dim, false),
            classifier: Linear::from_parts(
                init.normal(&[dim, num_ids], 0.001),
                Some(ndarray::ArrayD::zeros(ndarray::IxDyn(&[num_ids]))),
            ),
        }
    }

    pub fn num_ids(&self) -> usize {
        self.classifier.out_features()
    }

    pub fn bnneck(&self, pooled: &Var<F>, mode: Mode) -> Result<Var<F>> {
        if pooled.ndim() != 2 {
            return Err(Error::Shape(format!(
                "BN neck expects N×D features, got {:?}",
                pooled.shape()
            )));
        }
        self.neck.forward(pooled, mode)
    }

    pub fn classify(&self, features: &Var<F>) -> Result<Var<F>> {
        if features.ndim() != 2 || features.shape()[1] != self.classifier.in_features() {
            return Err(Error::Shape(format!(
                "classifier expects N×{} features, got {:?}",
                self.classifier.in_features(),
                features.shape()
            )));
        }
        self.classifier.forward(features)
    }
}

impl<F: Real> Module<F> for Head<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        v.scope("bnneck", |v| self.neck.visit(v));
        v.scope("classifier", |v| self.classifier.visit(v));
    }
}

/// Run `f` on a fresh inference tape.
pub fn infer<F: Real, T>(f: impl FnOnce(&Rc<Tape<F>>) -> T) -> T {
    f(&Tape::inference())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Slot, Visitor};
    use ndarray::{ArrayD, IxDyn};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn images(n: usize, h: usize, w: usize, seed: u64) -> ArrayD<f32> {
        Init::new(seed).normal(&[n, 3, h, w], 1.0)
    }

    #[test]
    fn tiny_shape_table() {
        let cfg = BackboneConfig::tiny();
        let bb = Backbone::<f32>::new(&cfg, &mut Init::new(0)).unwrap();
        let t = Tape::inference();
        let x = t.constant(images(4, 64, 32, 1));
        let mods = [Modality::Vis, Modality::Ir, Modality::Ir, Modality::Vis];
        let f = bb.forward(&x, &mods, Mode::Eval).unwrap();
        assert_eq!(f.f1.shape(), &[4, 32, 32, 16]);
        assert_eq!(f.low.shape(), &[4, 64, 16, 8]);
        assert_eq!(f.mid.shape(), &[4, 128, 8, 4]);
        assert_eq!(f.high.shape(), &[4, 256, 8, 4]);
        assert_eq!(cfg.stage_sizes(64, 32), [(32, 16), (16, 8), (8, 4), (8, 4)]);
    }

    #[test]
    fn resnet50_full_size_forward() {
        let cfg = BackboneConfig::resnet50();
        assert_eq!(cfg.stage_sizes(384, 192)[3], (24, 12));
        let bb = Backbone::<f32>::new(&cfg, &mut Init::new(0)).unwrap();
        let t = Tape::inference();
        let f = bb
            .forward(
                &t.constant(images(1, 384, 192, 0)),
                &[Modality::Ir],
                Mode::Eval,
            )
            .unwrap();
        assert_eq!(f.low.shape(), &[1, 512, 48, 24]);
        assert_eq!(f.mid.shape(), &[1, 1024, 24, 12]);
        assert_eq!(f.high.shape(), &[1, 2048, 24, 12]);
        assert!(f.high.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stems_are_independent() {
        let bb = Backbone::<f32>::new(&BackboneConfig::tiny(), &mut Init::new(0)).unwrap();
        let t = Tape::inference();
        let x = t.constant(images(2, 16, 8, 2));
        let vis = bb.forward(&x, &[Modality::Vis; 2], Mode::Eval).unwrap();
        let ir = bb.forward(&x, &[Modality::Ir; 2], Mode::Eval).unwrap();
        assert_eq!(vis.f1.shape(), ir.f1.shape());
        assert_ne!(vis.f1.value(), ir.f1.value());
    }

    #[test]
    fn mixed_batch_preserves_row_order() {
        let bb = Backbone::<f64>::new(&BackboneConfig::tiny(), &mut Init::new(3)).unwrap();
        let t = Tape::inference();
        let x = Init::new(4).normal::<f64>(&[3, 3, 16, 8], 1.0);
        let mods = [Modality::Ir, Modality::Vis, Modality::Ir];
        let mixed = bb
            .forward(&t.constant(x.clone()), &mods, Mode::Eval)
            .unwrap();
        for (i, &m) in mods.iter().enumerate() {
            let row = x
                .index_axis(ndarray::Axis(0), i)
                .to_owned()
                .insert_axis(ndarray::Axis(0));
            let alone = bb
                .forward(&t.constant(row.into_dyn()), &[m], Mode::Eval)
                .unwrap();
            let a = mixed
                .high
                .value()
                .index_axis(ndarray::Axis(0), i)
                .to_owned();
            let b = alone
                .high
                .value()
                .index_axis(ndarray::Axis(0), 0)
                .to_owned();
            assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn stem_parameters_are_disjoint_and_stages_shared() {
        let mut bb = Backbone::<f32>::new(&BackboneConfig::tiny(), &mut Init::new(0)).unwrap();
        let ids = |f: &mut dyn FnMut(&mut Backbone<f32>, &mut Visitor<'_, f32>),
                   bb: &mut Backbone<f32>| {
            let mut out = HashSet::new();
            f(
                bb,
                &mut Visitor::new(&mut |_, s| {
                    if let Slot::Param(p) = s {
                        out.insert(p.id());
                    }
                }),
            );
            out
        };
        let vis = ids(&mut |b, v| b.visit_stem(Modality::Vis, v), &mut bb);
        let ir = ids(&mut |b, v| b.visit_stem(Modality::Ir, v), &mut bb);
        let shared = ids(&mut |b, v| b.visit_stages(v), &mut bb);
        assert!(vis.is_disjoint(&ir));
        assert_eq!(vis.len(), ir.len());

        // A training pass touches the shared stages once, whichever stem ran.
        let t = Tape::new();
        let x = t.constant(images(4, 16, 8, 5));
        let mods = [Modality::Vis, Modality::Ir, Modality::Vis, Modality::Ir];
        bb.forward(&x, &mods, Mode::Train).unwrap();
        let used = t.used_params();
        assert!(shared.is_subset(&used) && vis.is_subset(&used) && ir.is_subset(&used));
        let t = Tape::new();
        bb.forward(
            &t.constant(images(2, 16, 8, 6)),
            &[Modality::Ir; 2],
            Mode::Train,
        )
        .unwrap();
        let used = t.used_params();
        assert!(shared.is_subset(&used) && used.is_disjoint(&vis));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let bb = Backbone::<f32>::new(&BackboneConfig::tiny(), &mut Init::new(0)).unwrap();
        let t = Tape::inference();
        let x = t.constant(images(2, 16, 8, 7));
        let a = bb
            .forward(&x, &[Modality::Vis, Modality::Ir], Mode::Eval)
            .unwrap();
        let b = bb
            .forward(&x, &[Modality::Vis, Modality::Ir], Mode::Eval)
            .unwrap();
        assert_eq!(a.high.value(), b.high.value());
    }

    #[test]
    fn config_invariants() {
        let mut c = BackboneConfig::tiny();
        c.stage_strides[3] = 2;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::tiny();
        c.stage_channels = [64, 32, 128, 256];
        assert!(c.validate().is_err());
    }

    fn gem(values: ArrayD<f64>, p: f64) -> ArrayD<f64> {
        let t = Tape::inference();
        gem_pool(&t.constant(values), p, 1e-6)
            .unwrap()
            .value()
            .clone()
    }

    #[test]
    fn gem_hand_values() {
        let m = ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 2]), vec![1.0, 3.0]).unwrap();
        assert!((gem(m.clone(), 3.0)[[0, 0]] - 14f64.cbrt()).abs() < 1e-12);
        assert!((gem(m, 1.0)[[0, 0]] - 2.0).abs() < 1e-12);
        let c = ArrayD::from_elem(IxDyn(&[2, 3, 4, 2]), 0.7);
        assert!(gem(c, 5.0).iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn gem_rejects_non_finite() {
        let t = Tape::<f32>::inference();
        let mut a = ArrayD::zeros(IxDyn(&[1, 1, 2, 2]));
        a[[0, 0, 1, 1]] = f32::INFINITY;
        assert!(gem_pool(&t.constant(a), 3.0, 1e-6).is_err());
    }

    proptest! {
        #[test]
        fn gem_is_monotone_in_p(
            values in prop::collection::vec(0.0f64..5.0, 12),
            p in 1.0f64..6.0,
            dp in 0.0f64..4.0,
        ) {
            let m = ArrayD::from_shape_vec(IxDyn(&[1, 2, 3, 2]), values).unwrap();
            let lo = gem(m.clone(), p);
            let hi = gem(m, p + dp);
            for (a, b) in lo.iter().zip(hi.iter()) {
                prop_assert!(*b >= *a - 1e-9);
            }
        }
    }

    #[test]
    fn bnneck_identity_in_eval() {
        let head = Head::<f64>::new(&mut Init::new(0), 4, 3);
        let t = Tape::inference();
        let x = Init::new(1).normal::<f64>(&[5, 4], 1.0);
        let y = head.bnneck(&t.constant(x.clone()), Mode::Eval).unwrap();
        let scale = 1.0 / (1.0f64 + head.neck.eps).sqrt();
        for (a, b) in x.iter().zip(y.value().iter()) {
            assert!((a * scale - b).abs() < 1e-12);
        }
        // With the eps term absorbed into the running variance the neck is
        // exactly the identity.
        head.neck.running_var.borrow_mut().fill(1.0 - head.neck.eps);
        let y = head.bnneck(&t.constant(x.clone()), Mode::Eval).unwrap();
        for (a, b) in x.iter().zip(y.value().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bnneck_rejects_single_sample_training() {
        let head = Head::<f32>::new(&mut Init::new(0), 4, 3);
        let t = Tape::new();
        let x = t.constant(ArrayD::zeros(IxDyn(&[1, 4])));
        assert!(head.bnneck(&x, Mode::Train).is_err());
    }

    #[test]
    fn classifier_matches_loop_oracle() {
        let mut init = Init::new(9);
        let mut head = Head::<f64>::new(&mut init, 5, 4);
        *head.classifier.weight.value_mut() = init.normal(&[5, 4], 1.0);
        *head.classifier.bias.as_mut().unwrap().value_mut() = init.normal(&[4], 1.0);
        let x = init.normal::<f64>(&[3, 5], 1.0);
        let t = Tape::inference();
        let logits = head.classify(&t.constant(x.clone())).unwrap();
        let w = head.classifier.weight.value();
        let b = head.classifier.bias.as_ref().unwrap().value();
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = b[[j]];
                for k in 0..5 {
                    acc += x[[i, k]] * w[[k, j]];
                }
                assert!((logits.value()[[i, j]] - acc).abs() < 1e-12);
            }
        }
        assert!(head
            .classify(&t.constant(ArrayD::zeros(IxDyn(&[3, 6]))))
            .is_err());
    }

    #[test]
    fn zero_classifier_gives_uniform_softmax() {
        let mut head = Head::<f64>::new(&mut Init::new(0), 3, 4);
        head.classifier.weight.value_mut().fill(0.0);
        let t = Tape::inference();
        let x = t.constant(Init::new(2).normal(&[2, 3], 1.0));
        let probs = head.classify(&x).unwrap().softmax();
        assert!(probs.value().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }
}
