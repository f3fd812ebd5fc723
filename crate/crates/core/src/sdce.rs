//! Semantic distillation cascade.
//!
//! Two attention blocks over spatial tokens. The cross block queries with the
//! deep map and reads keys/values from the refined map; its attention output
//! is scaled per channel by a learnable factor before the residual. The self
//! block then attends within the cross block's output. Both blocks replace
//! the usual MLP with a gated feed-forward whose gate is a depthwise conv over
//! the token grid.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, Module, Param, Visitor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdceConfig {
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of the token width.
    pub hidden_ratio: usize,
    /// Run the self-attention block after the cross block.
    pub self_block: bool,
    /// Gated depthwise feed-forward; a plain MLP when off.
    pub use_jib: bool,
    pub beta_cross: bool,
    pub beta_self: bool,
}

impl Default for SdceConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            hidden_ratio: 2,
            self_block: true,
            use_jib: true,
            beta_cross: true,
            beta_self: false,
        }
    }
}

/// `N×C×H×W → N×(H·W)×C`, tokens in raster order.
pub fn to_tokens<F: Real>(fmap: &Var<F>) -> Result<Var<F>> {
    if fmap.ndim() != 4 {
        return Err(Error::Shape(format!(
            "expected N×C×H×W, got {:?}",
            fmap.shape()
        )));
    }
    let s = fmap.shape();
    let (n, c, t) = (s[0], s[1], s[2] * s[3]);
    Ok(fmap.reshape(&[n, c, t]).permute(&[0, 2, 1]))
}

/// Inverse of [`to_tokens`] for an `h × w` grid.
pub fn from_tokens<F: Real>(tokens: &Var<F>, h: usize, w: usize) -> Result<Var<F>> {
    if tokens.ndim() != 3 || tokens.shape()[1] != h * w {
        return Err(Error::Shape(format!(
            "{:?} tokens do not tile a {h}×{w} grid",
            tokens.shape()
        )));
    }
    let (n, c) = (tokens.shape()[0], tokens.shape()[2]);
    Ok(tokens.permute(&[0, 2, 1]).reshape(&[n, c, h, w]))
}

/// Linear projection followed by layer norm.
#[derive(Debug, Clone)]
pub struct Projection<F: Real> {
    pub linear: Linear<F>,
    pub norm: LayerNorm<F>,
}

impl<F: Real> Projection<F> {
    pub fn new(init: &mut Init, dim: usize) -> Self {
        Self {
            linear: Linear::new(init, dim, dim, true),
            norm: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, x: &Var<F>) -> Result<Var<F>> {
        self.norm.forward(&self.linear.forward(x)?)
    }
}

impl<F: Real> Module<F> for Projection<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        v.scope("linear", |v| self.linear.visit(v));
        v.scope("norm", |v| self.norm.visit(v));
    }
}

fn split_heads<F: Real>(x: &Var<F>, heads: usize) -> Var<F> {
    let (n, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = c / heads;
    x.reshape(&[n, t, heads, d])
        .permute(&[0, 2, 1, 3])
        .reshape(&[n * heads, t, d])
}

fn merge_heads<F: Real>(x: &Var<F>, n: usize, heads: usize) -> Var<F> {
    let (t, d) = (x.shape()[1], x.shape()[2]);
    x.reshape(&[n, heads, t, d])
        .permute(&[0, 2, 1, 3])
        .reshape(&[n, t, heads * d])
}

/// Multi-head scaled dot-product attention on `N×T×C` inputs. Returns the
/// attended values (`N×Tq×C`) and the attention weights (`N×heads×Tq×Tk`).
pub fn multi_head_attention<F: Real>(
    q: &Var<F>,
    k: &Var<F>,
    v: &Var<F>,
    heads: usize,
) -> Result<(Var<F>, Var<F>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::Shape(format!(
            "attention over {qs:?}, {ks:?}, {vs:?}"
        )));
    }
    let (n, c) = (qs[0], qs[2]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} heads do not divide width {c}"
        )));
    }
    let scale = F::one() / F::from_usize(c / heads).unwrap().sqrt();
    let logits = split_heads(q, heads)
        .bmm(&split_heads(k, heads), true)
        .scale(scale);
    if logits.value().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("attention logits".into()));
    }
    let probs = logits.softmax();
    let out = merge_heads(&probs.bmm(&split_heads(v, heads), false), n, heads);
    let (tq, tk) = (qs[1], ks[1]);
    Ok((out, probs.reshape(&[n, heads, tq, tk])))
}

/// `LN(β ⊙ attended + values)`, or `LN(attended + values)` without β.
pub fn modulate<F: Real>(
    attended: &Var<F>,
    values: &Var<F>,
    beta: Option<&Var<F>>,
    norm: &LayerNorm<F>,
) -> Result<Var<F>> {
    let a = match beta {
        Some(b) => attended.mul(b),
        None => attended.clone(),
    };
    norm.forward(&a.add(values))
}

/// Gated feed-forward: a depthwise 3×3 conv over the `FC1` branch (laid out
/// on the token grid) gates the `FC2` branch elementwise.
#[derive(Debug, Clone)]
pub struct Jib<F: Real> {
    pub fc1: Linear<F>,
    /// `hidden × 3 × 3`.
    pub dw_weight: Param<F>,
    pub dw_bias: Param<F>,
    pub fc2: Linear<F>,
    pub fc3: Linear<F>,
}

impl<F: Real> Jib<F> {
    pub fn new(init: &mut Init, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(init, dim, hidden, true),
            dw_weight: Param::new(init.uniform(&[hidden, 3, 3], 1.0 / 3.0)),
            dw_bias: Param::new(init.uniform(&[hidden], 1.0 / 3.0)),
            fc2: Linear::new(init, dim, hidden, true),
            fc3: Linear::new(init, hidden, dim, true),
        }
    }

    /// Spatial gate for `tokens` on an `h × w` grid, as tokens.
    pub fn gate(&self, tokens: &Var<F>, h: usize, w: usize) -> Result<Var<F>> {
        let grid = from_tokens(&self.fc1.forward(tokens)?, h, w)?;
        let tape = tokens.tape();
        let hidden = self.dw_bias.shape()[0];
        let conv = grid
            .depthwise_conv2d(&self.dw_weight.on(tape))
            .add(&self.dw_bias.on(tape).reshape(&[1, hidden, 1, 1]));
        to_tokens(&conv)
    }

    pub fn forward(&self, tokens: &Var<F>, h: usize, w: usize) -> Result<Var<F>> {
        let gate = self.gate(tokens, h, w)?;
        let branch = self.fc2.forward(tokens)?;
        if branch.shape() != gate.shape() {
            return Err(Error::Shape(format!(
                "gate {:?} does not match branch {:?}",
                gate.shape(),
                branch.shape()
            )));
        }
        Ok(self.fc3.forward(&branch.mul(&gate).gelu())?.add(tokens))
    }
}

impl<F: Real> Module<F> for Jib<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        v.scope("fc1", |v| self.fc1.visit(v));
        v.scope("dwconv", |v| {
            v.param("weight", &mut self.dw_weight);
            v.param("bias", &mut self.dw_bias);
        });
        v.scope("fc2", |v| self.fc2.visit(v));
        v.scope("fc3", |v| self.fc3.visit(v));
    }
}

/// Two-layer GELU MLP with residual, used when the gated block is disabled.
#[derive(Debug, Clone)]
pub struct Mlp<F: Real> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Real> Mlp<F> {
    pub fn new(init: &mut Init, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(init, dim, hidden, true),
            fc2: Linear::new(init, hidden, dim, true),
        }
    }

    pub fn forward(&self, tokens: &Var<F>) -> Result<Var<F>> {
        Ok(self
            .fc2
            .forward(&self.fc1.forward(tokens)?.gelu())?
            .add(tokens))
    }
}

impl<F: Real> Module<F> for Mlp<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        v.scope("fc1", |v| self.fc1.visit(v));
        v.scope("fc2", |v| self.fc2.visit(v));
    }
}

#[derive(Debug, Clone)]
pub enum FeedForward<F: Real> {
    Jib(Jib<F>),
    Mlp(Mlp<F>),
}

/// One attention block: projections, attention, optional channel factor,
/// post-norm and feed-forward.
#[derive(Debug, Clone)]
pub struct AttentionBlock<F: Real> {
    pub q: Projection<F>,
    pub k: Projection<F>,
    pub v: Projection<F>,
    /// Per-channel factor on the attention output, initialised to ones.
    pub beta: Option<Param<F>>,
    pub post_norm: LayerNorm<F>,
    pub ffn: FeedForward<F>,
    pub heads: usize,
}

/// Tensors of interest from one block.
#[derive(Debug, Clone)]
pub struct BlockOutput<F: Real> {
    pub attention: Var<F>,
    pub modulated: Var<F>,
    pub out: Var<F>,
}

impl<F: Real> AttentionBlock<F> {
    pub fn new(
        init: &mut Init,
        dim: usize,
        heads: usize,
        hidden: usize,
        beta: bool,
        jib: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide width {dim}"
            )));
        }
        Ok(Self {
            q: Projection::new(init, dim),
            k: Projection::new(init, dim),
            v: Projection::new(init, dim),
            beta: beta.then(|| Param::new(ArrayD::ones(IxDyn(&[dim])))),
            post_norm: LayerNorm::new(dim),
            ffn: if jib {
                FeedForward::Jib(Jib::new(init, dim, hidden))
            } else {
                FeedForward::Mlp(Mlp::new(init, dim, hidden))
            },
            heads,
        })
    }

    /// Queries from `query_tokens`, keys and values from `context_tokens`.
    pub fn forward(
        &self,
        query_tokens: &Var<F>,
        context_tokens: &Var<F>,
        h: usize,
        w: usize,
    ) -> Result<BlockOutput<F>> {
        if query_tokens.shape() != context_tokens.shape() {
            return Err(Error::Shape(format!(
                "query tokens {:?} and context tokens {:?} differ",
                query_tokens.shape(),
                context_tokens.shape()
            )));
        }
        let q = self.q.forward(query_tokens)?;
        let k = self.k.forward(context_tokens)?;
        let v = self.v.forward(context_tokens)?;
        let (attended, attention) = multi_head_attention(&q, &k, &v, self.heads)?;
        let beta = self.beta.as_ref().map(|b| b.on(query_tokens.tape()));
        let modulated = modulate(&attended, &v, beta.as_ref(), &self.post_norm)?;
        let out = match &self.ffn {
            FeedForward::Jib(j) => j.forward(&modulated, h, w)?,
            FeedForward::Mlp(m) => m.forward(&modulated)?,
        };
        Ok(BlockOutput {
            attention,
            modulated,
            out,
        })
    }
}

impl<F: Real> Module<F> for AttentionBlock<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        v.scope("q", |v| self.q.visit(v));
        v.scope("k", |v| self.k.visit(v));
        v.scope("v", |v| self.v.visit(v));
        if let Some(b) = &mut self.beta {
            v.param("beta", b);
        }
        v.scope("post_norm", |v| self.post_norm.visit(v));
        match &mut self.ffn {
            FeedForward::Jib(j) => v.scope("jib", |v| j.visit(v)),
            FeedForward::Mlp(m) => v.scope("mlp", |v| m.visit(v)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SdceOutput<F: Real> {
    pub cross: BlockOutput<F>,
    pub selfish: Option<BlockOutput<F>>,
    /// Enhanced map with the deep map's shape.
    pub enhanced: Var<F>,
}

#[derive(Debug, Clone)]
pub struct Sdce<F: Real> {
    pub cross: AttentionBlock<F>,
    pub selfish: Option<AttentionBlock<F>>,
}

impl<F: Real> Sdce<F> {
    pub fn new(init: &mut Init, dim: usize, cfg: &SdceConfig) -> Result<Self> {
        let hidden = cfg.hidden_ratio * dim;
        if hidden == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        Ok(Self {
            cross: AttentionBlock::new(init, dim, cfg.heads, hidden, cfg.beta_cross, cfg.use_jib)?,
            selfish: if cfg.self_block {
                Some(AttentionBlock::new(
                    init,
                    dim,
                    cfg.heads,
                    hidden,
                    cfg.beta_self,
                    cfg.use_jib,
                )?)
            } else {
                None
            },
        })
    }

    /// Enhance `deep` with cues from `refined`; both are `N×C×H×W`.
    pub fn forward(&self, deep: &Var<F>, refined: &Var<F>) -> Result<SdceOutput<F>> {
        if deep.shape() != refined.shape() || deep.ndim() != 4 {
            return Err(Error::Shape(format!(
                "deep map {:?} and refined map {:?} must share an N×C×H×W shape",
                deep.shape(),
                refined.shape()
            )));
        }
        let (h, w) = (deep.shape()[2], deep.shape()[3]);
        let cross = self
            .cross
            .forward(&to_tokens(deep)?, &to_tokens(refined)?, h, w)?;
        let (selfish, tokens) = match &self.selfish {
            Some(b) => {
                let o = b.forward(&cross.out, &cross.out, h, w)?;
                let t = o.out.clone();
                (Some(o), t)
            }
            None => (None, cross.out.clone()),
        };
        Ok(SdceOutput {
            cross,
            selfish,
            enhanced: from_tokens(&tokens, h, w)?,
        })
    }
}

impl<F: Real> Module<F> for Sdce<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        v.scope("cross", |v| self.cross.visit(v));
        if let Some(b) = &mut self.selfish {
            v.scope("self", |v| b.visit(v));
        }
    }
}

/// Helper for tests and tools: run on an inference tape.
pub fn tokens_of<F: Real>(t: &Rc<Tape<F>>, fmap: ArrayD<F>) -> Result<Var<F>> {
    to_tokens(&t.constant(fmap))
}
