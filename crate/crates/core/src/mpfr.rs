//! Multi-perception feature refinement.
//!
//! Selected stage outputs are brought to the deep map's spatial size by a
//! strided conv block, summarised per pixel by (channel max, channel mean),
//! turned into one spatial logit map per scale by three dilated 3×3 convs,
//! normalised across scales, and used to blend the aligned maps. A final
//! 1×1 conv block restores the deep map's channel width.

use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Var};
use crate::backbone::{BackboneConfig, StageFeatures};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBlock, Init, Mode, Module, Visitor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpfrConfig {
    /// Backbone stages (1–4) to aggregate.
    pub stages: Vec<usize>,
}

impl Default for MpfrConfig {
    fn default() -> Self {
        Self {
            stages: vec![2, 3, 4],
        }
    }
}

impl MpfrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config(
                "the refinement needs at least one stage".into(),
            ));
        }
        let mut seen = [false; 5];
        for &s in &self.stages {
            if !(1..=4).contains(&s) || seen[s] {
                return Err(Error::Config(format!(
                    "refinement stages must be distinct values in 1..=4, got {:?}",
                    self.stages
                )));
            }
            seen[s] = true;
        }
        Ok(())
    }
}

/// How one stage is brought to the target grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleSpec {
    pub stage: usize,
    pub channels: usize,
    /// Ratio between this stage's spatial size and the target's.
    pub stride: usize,
}

/// Kernel size used by the aligning conv for a given stride: 3 for strides
/// up to 2, otherwise the smallest odd size covering the stride.
pub fn align_kernel(stride: usize) -> usize {
    (2 * (stride / 2) + 1).max(3)
}

/// Strided conv block that lands a stage output on the target grid.
#[derive(Debug, Clone)]
pub struct AlignBlock<F: Real> {
    pub block: ConvBlock<F>,
    pub stride: usize,
}

impl<F: Real> AlignBlock<F> {
    pub fn new(init: &mut Init, input: usize, output: usize, stride: usize) -> Self {
        let k = align_kernel(stride);
        Self {
            block: ConvBlock::new(init, input, output, k, stride, k / 2),
            stride,
        }
    }

    /// Align `x` to a `target` (height, width) grid.
    pub fn forward(&self, x: &Var<F>, target: (usize, usize), mode: Mode) -> Result<Var<F>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if h != target.0 * self.stride || w != target.1 * self.stride {
            return Err(Error::Shape(format!(
                "{h}×{w} map cannot be brought to {}×{} with stride {}",
                target.0, target.1, self.stride
            )));
        }
        self.block.forward(x, mode)
    }
}

impl<F: Real> Module<F> for AlignBlock<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        self.block.visit(v);
    }
}

/// Per-pixel channel max and channel mean, stacked as 2 channels (max first).
pub fn build_descriptor<F: Real>(x: &Var<F>) -> Var<F> {
    Var::concat(&[&x.max_axis(1), &x.mean_axes(&[1])], 1)
}

/// Sum of three 3×3 convs with dilation 1, 2 and 3 mapping the 2-channel
/// descriptor to a 1-channel logit map of the same size.
#[derive(Debug, Clone)]
pub struct DilatedMask<F: Real> {
    pub convs: [Conv2d<F>; 3],
}

impl<F: Real> DilatedMask<F> {
    pub fn new(init: &mut Init) -> Self {
        let conv = |init: &mut Init, d: usize| Conv2d::new(init, 2, 1, 3, 1, d, d, true);
        Self {
            convs: [conv(init, 1), conv(init, 2), conv(init, 3)],
        }
    }

    pub fn forward(&self, descriptor: &Var<F>) -> Result<Var<F>> {
        let mut out = self.convs[0].forward(descriptor)?;
        for c in &self.convs[1..] {
            out = out.add(&c.forward(descriptor)?);
        }
        Ok(out)
    }
}

impl<F: Real> Module<F> for DilatedMask<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            v.scope(&format!("dilation{}", i + 1), |v| c.visit(v));
        }
    }
}

/// Per-pixel softmax across scales of `N×1×H×W` logit maps; a single map is
/// passed through a sigmoid instead.
pub fn normalize_masks<F: Real>(raw: &[Var<F>]) -> Result<Vec<Var<F>>> {
    match raw {
        [] => Err(Error::InvalidInput("no masks to normalise".into())),
        [one] => Ok(vec![one.sigmoid()]),
        many => {
            let shape = many[0].shape().to_vec();
            if many.iter().any(|m| m.shape() != shape.as_slice()) {
                return Err(Error::Shape("masks differ in shape".into()));
            }
            let stacked = Var::concat(&many.iter().collect::<Vec<_>>(), 1);
            let weights = stacked
                .permute(&[0, 2, 3, 1])
                .softmax()
                .permute(&[0, 3, 1, 2]);
            Ok((0..many.len()).map(|i| weights.narrow(1, i, 1)).collect())
        }
    }
}

/// `Σ_i weights_i ⊙ aligned_i`, each weight broadcast over channels.
pub fn weighted_sum<F: Real>(aligned: &[Var<F>], weights: &[Var<F>]) -> Result<Var<F>> {
    if aligned.len() != weights.len() || aligned.is_empty() {
        return Err(Error::Shape(format!(
            "{} aligned maps for {} weight maps",
            aligned.len(),
            weights.len()
        )));
    }
    let shape = aligned[0].shape();
    let mut acc: Option<Var<F>> = None;
    for (a, w) in aligned.iter().zip(weights) {
        let (s, ws) = (a.shape(), w.shape());
        if s != shape || ws.len() != 4 || ws[1] != 1 || ws[0] != s[0] || ws[2..] != s[2..] {
            return Err(Error::Shape(format!("cannot weight {s:?} by {ws:?}")));
        }
        let term = a.mul(w);
        acc = Some(match acc {
            Some(x) => x.add(&term),
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// Intermediate maps of one forward pass.
#[derive(Debug, Clone)]
pub struct SpatialMaskSet<F: Real> {
    pub descriptors: Vec<Var<F>>,
    pub raw: Vec<Var<F>>,
    pub weights: Vec<Var<F>>,
}

#[derive(Debug, Clone)]
pub struct MpfrOutput<F: Real> {
    pub aligned: Vec<Var<F>>,
    pub masks: SpatialMaskSet<F>,
    /// Blend before the channel-restoring conv block.
    pub blended: Var<F>,
    pub fused: Var<F>,
}

#[derive(Debug, Clone)]
pub struct Mpfr<F: Real> {
    scales: Vec<ScaleSpec>,
    align: Vec<AlignBlock<F>>,
    masks: Vec<DilatedMask<F>>,
    fuse: ConvBlock<F>,
}

impl<F: Real> Mpfr<F> {
    /// `aligned` is the common channel width, `output` the deep map's width.
    pub fn new(
        init: &mut Init,
        scales: &[ScaleSpec],
        aligned: usize,
        output: usize,
    ) -> Result<Self> {
        MpfrConfig {
            stages: scales.iter().map(|s| s.stage).collect(),
        }
        .validate()?;
        let align = scales
            .iter()
            .map(|s| AlignBlock::new(init, s.channels, aligned, s.stride))
            .collect();
        let masks = scales.iter().map(|_| DilatedMask::new(init)).collect();
        Ok(Self {
            scales: scales.to_vec(),
            align,
            masks,
            fuse: ConvBlock::new(init, aligned, output, 1, 1, 0),
        })
    }

    /// Refinement over `cfg.stages` of a backbone. The aligned width is the
    /// third stage's width.
    pub fn for_backbone(bb: &BackboneConfig, cfg: &MpfrConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let scales: Vec<ScaleSpec> = cfg
            .stages
            .iter()
            .map(|&s| ScaleSpec {
                stage: s,
                channels: bb.stage_channels[s - 1],
                stride: bb.stage_strides[s..].iter().product(),
            })
            .collect();
        Self::new(init, &scales, bb.stage_channels[2], bb.stage_channels[3])
    }

    pub fn scales(&self) -> &[ScaleSpec] {
        &self.scales
    }

    pub fn forward(&self, stages: &StageFeatures<F>, mode: Mode) -> Result<MpfrOutput<F>> {
        let high = &stages.high;
        let target = (high.shape()[2], high.shape()[3]);
        let mut aligned = Vec::with_capacity(self.scales.len());
        let mut descriptors = Vec::new();
        let mut raw = Vec::new();
        for ((spec, align), mask) in self.scales.iter().zip(&self.align).zip(&self.masks) {
            let a = align.forward(stages.stage(spec.stage), target, mode)?;
            let d = build_descriptor(&a);
            raw.push(mask.forward(&d)?);
            descriptors.push(d);
            aligned.push(a);
        }
        let weights = normalize_masks(&raw)?;
        let blended = weighted_sum(&aligned, &weights)?;
        let fused = self.fuse.forward(&blended, mode)?;
        if fused.shape() != high.shape() {
            return Err(Error::Shape(format!(
                "refined map {:?} does not match deep map {:?}",
                fused.shape(),
                high.shape()
            )));
        }
        Ok(MpfrOutput {
            aligned,
            masks: SpatialMaskSet {
                descriptors,
                raw,
                weights,
            },
            blended,
            fused,
        })
    }
}

impl<F: Real> Module<F> for Mpfr<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        for (i, (a, m)) in self.align.iter_mut().zip(&mut self.masks).enumerate() {
            let stage = self.scales[i].stage;
            v.scope(&format!("align{stage}"), |v| a.visit(v));
            v.scope(&format!("mask{stage}"), |v| m.visit(v));
        }
        v.scope("fuse", |v| self.fuse.visit(v));
    }
}
