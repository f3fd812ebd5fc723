//! Parameters, module traversal, and the handful of layers the network is
//! built from.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Real, Tape, Var};
use crate::error::{Error, Result};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor. Cloning yields a new parameter with its own identity.
#[derive(Debug)]
pub struct Param<F: Real> {
    id: ParamId,
    value: ArrayD<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        Self {
            id: ParamId::fresh(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &ArrayD<F> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut ArrayD<F> {
        &mut self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn on(&self, tape: &Rc<Tape<F>>) -> Var<F> {
        tape.param(self)
    }
}

impl<F: Real> Clone for Param<F> {
    fn clone(&self) -> Self {
        Param::new(self.value.clone())
    }
}

/// Whether a forward pass uses batch statistics and updates running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What a [`Visitor`] sees at each named slot.
pub enum Slot<'p, F: Real> {
    Param(&'p mut Param<F>),
    /// Non-trainable state such as batch-norm running statistics.
    Buffer(&'p mut ArrayD<F>),
}

/// Walks a module tree handing out dotted names for every slot.
pub struct Visitor<'a, F: Real> {
    prefix: String,
    f: &'a mut dyn FnMut(&str, Slot<'_, F>),
}

impl<'a, F: Real> Visitor<'a, F> {
    pub fn new(f: &'a mut dyn FnMut(&str, Slot<'_, F>)) -> Self {
        Self {
            prefix: String::new(),
            f,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, p: &mut Param<F>) {
        let full = self.name(name);
        (self.f)(&full, Slot::Param(p));
    }

    pub fn buffer(&mut self, name: &str, b: &mut ArrayD<F>) {
        let full = self.name(name);
        (self.f)(&full, Slot::Buffer(b));
    }

    pub fn scope(&mut self, name: &str, body: impl FnOnce(&mut Visitor<'_, F>)) {
        let saved = std::mem::replace(&mut self.prefix, String::new());
        self.prefix = if saved.is_empty() {
            name.to_string()
        } else {
            format!("{saved}.{name}")
        };
        body(self);
        self.prefix = saved;
    }
}

pub trait Module<F: Real> {
    fn visit(&mut self, v: &mut Visitor<'_, F>);
}

/// All parameters and buffers in traversal order.
pub fn state_dict<F: Real>(m: &mut impl Module<F>) -> Vec<(String, ArrayD<F>)> {
    let mut out = Vec::new();
    m.visit(&mut Visitor::new(&mut |name, slot| {
        let v = match slot {
            Slot::Param(p) => p.value().clone(),
            Slot::Buffer(b) => b.clone(),
        };
        out.push((name.to_string(), v));
    }));
    out
}

/// Overwrite every slot from `state`; every slot must be present with a
/// matching shape.
pub fn load_state_dict<F: Real>(
    m: &mut impl Module<F>,
    state: &HashMap<String, ArrayD<F>>,
) -> Result<()> {
    let mut err = None;
    m.visit(&mut Visitor::new(&mut |name, slot| {
        if err.is_some() {
            return;
        }
        let target = match slot {
            Slot::Param(p) => p.value_mut(),
            Slot::Buffer(b) => b,
        };
        match state.get(name) {
            Some(v) if v.shape() == target.shape() => target.assign(v),
            Some(v) => {
                err = Some(Error::Shape(format!(
                    "{name}: stored {:?}, model {:?}",
                    v.shape(),
                    target.shape()
                )))
            }
            None => err = Some(Error::Checkpoint(format!("missing tensor `{name}`"))),
        }
    }));
    err.map_or(Ok(()), Err)
}

/// Number of trainable scalars.
pub fn param_count<F: Real>(m: &mut impl Module<F>) -> usize {
    let mut n = 0;
    m.visit(&mut Visitor::new(&mut |_, slot| {
        if let Slot::Param(p) = slot {
            n += p.value().len();
        }
    }));
    n
}

/// Deterministic weight initialisation.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<F: Real>(&mut self, shape: &[usize], std: f64) -> ArrayD<F> {
        let d = Normal::new(0.0, std).expect("valid std");
        ArrayD::from_shape_simple_fn(IxDyn(shape), || F::lit(d.sample(&mut self.rng)))
    }

    pub fn uniform<F: Real>(&mut self, shape: &[usize], bound: f64) -> ArrayD<F> {
        let d = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        ArrayD::from_shape_simple_fn(IxDyn(shape), || F::lit(d.sample(&mut self.rng)))
    }

    /// He-normal with fan-out, the usual choice for ReLU conv stacks.
    pub fn kaiming<F: Real>(&mut self, shape: &[usize]) -> ArrayD<F> {
        let fan_out = shape[0] * shape[2..].iter().product::<usize>();
        self.normal(shape, (2.0 / fan_out as f64).sqrt())
    }
}

fn filled<F: Real>(shape: &[usize], v: f64) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), F::lit(v))
}

/// Affine map on the last axis. `weight` is stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear<F: Real> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
}

impl<F: Real> Linear<F> {
    pub fn new(init: &mut Init, input: usize, output: usize, bias: bool) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Param::new(init.uniform(&[input, output], bound)),
            bias: bias.then(|| Param::new(init.uniform(&[output], bound))),
        }
    }

    pub fn from_parts(weight: ArrayD<F>, bias: Option<ArrayD<F>>) -> Self {
        Self {
            weight: Param::new(weight),
            bias: bias.map(Param::new),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Var<F>) -> Result<Var<F>> {
        let shape = x.shape().to_vec();
        let (&last, lead) = shape
            .split_last()
            .ok_or_else(|| Error::Shape("linear input must have at least one axis".into()))?;
        if last != self.in_features() {
            return Err(Error::Shape(format!(
                "linear expects {} input features, got {last}",
                self.in_features()
            )));
        }
        let rows: usize = lead.iter().product();
        let tape = x.tape();
        let mut y = x.reshape(&[rows, last]).matmul(&self.weight.on(tape));
        if let Some(b) = &self.bias {
            y = y.add(&b.on(tape));
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(self.out_features());
        Ok(y.reshape(&out_shape))
    }
}

impl<F: Real> Module<F> for Linear<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        v.param("weight", &mut self.weight);
        if let Some(b) = &mut self.bias {
            v.param("bias", b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<F: Real> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl<F: Real> Conv2d<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        bias: bool,
    ) -> Self {
        let shape = [output, input, kernel, kernel];
        let fan_in = (input * kernel * kernel) as f64;
        Self {
            weight: Param::new(init.kaiming(&shape)),
            bias: bias.then(|| Param::new(init.uniform(&[output], 1.0 / fan_in.sqrt()))),
            stride,
            padding,
            dilation,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Var<F>) -> Result<Var<F>> {
        if x.ndim() != 4 || x.shape()[1] != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects N×{}×H×W, got {:?}",
                self.in_channels(),
                x.shape()
            )));
        }
        let tape = x.tape();
        let y = x.conv2d(
            &self.weight.on(tape),
            self.stride,
            self.padding,
            self.dilation,
        );
        Ok(match &self.bias {
            Some(b) => y.add(&b.on(tape).reshape(&[1, self.out_channels(), 1, 1])),
            None => y,
        })
    }
}

impl<F: Real> Module<F> for Conv2d<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        v.param("weight", &mut self.weight);
        if let Some(b) = &mut self.bias {
            v.param("bias", b);
        }
    }
}

/// Batch normalisation over axis 1 of `N×C` or `N×C×H×W` inputs.
#[derive(Debug)]
pub struct BatchNorm<F: Real> {
    pub gamma: Param<F>,
    pub beta: Option<Param<F>>,
    pub running_mean: RefCell<ArrayD<F>>,
    pub running_var: RefCell<ArrayD<F>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<F: Real> Clone for BatchNorm<F> {
    fn clone(&self) -> Self {
        Self {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running_mean: RefCell::new(self.running_mean.borrow().clone()),
            running_var: RefCell::new(self.running_var.borrow().clone()),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

impl<F: Real> BatchNorm<F> {
    pub fn new(channels: usize, bias: bool) -> Self {
        Self {
            gamma: Param::new(filled(&[channels], 1.0)),
            beta: bias.then(|| Param::new(filled(&[channels], 0.0))),
            running_mean: RefCell::new(filled(&[channels], 0.0)),
            running_var: RefCell::new(filled(&[channels], 1.0)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn forward(&self, x: &Var<F>, mode: Mode) -> Result<Var<F>> {
        let c = self.channels();
        if !(x.ndim() == 2 || x.ndim() == 4) || x.shape()[1] != c {
            return Err(Error::Shape(format!(
                "batch norm over {c} channels got {:?}",
                x.shape()
            )));
        }
        let axes: Vec<usize> = (0..x.ndim()).filter(|&a| a != 1).collect();
        let mut bshape = vec![1; x.ndim()];
        bshape[1] = c;
        let tape = x.tape();
        let normalized = match mode {
            Mode::Train => {
                let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
                if count < 2 {
                    return Err(Error::InvalidInput(
                        "batch normalisation in training mode needs more than one value per channel"
                            .into(),
                    ));
                }
                let mean = x.mean_axes(&axes);
                let centered = x.sub(&mean);
                let var = centered.mul(&centered).mean_axes(&axes);
                let inv = var.add_scalar(F::lit(self.eps)).powf(F::lit(-0.5));
                self.update_running(mean.value(), var.value(), count);
                centered.mul(&inv)
            }
            Mode::Eval => {
                let mean = self
                    .running_mean
                    .borrow()
                    .clone()
                    .into_shape_with_order(IxDyn(&bshape))
                    .unwrap();
                let inv = self
                    .running_var
                    .borrow()
                    .mapv(|v| F::one() / (v + F::lit(self.eps)).sqrt())
                    .into_shape_with_order(IxDyn(&bshape))
                    .unwrap();
                x.sub(&tape.constant(mean)).mul(&tape.constant(inv))
            }
        };
        let mut y = normalized.mul(&self.gamma.on(tape).reshape(&bshape));
        if let Some(b) = &self.beta {
            y = y.add(&b.on(tape).reshape(&bshape));
        }
        Ok(y)
    }

    fn update_running(&self, mean: &ArrayD<F>, var: &ArrayD<F>, count: usize) {
        let m = F::lit(self.momentum);
        let unbias = F::from_usize(count).unwrap() / F::from_usize(count - 1).unwrap();
        let mut rm = self.running_mean.borrow_mut();
        for (r, &v) in rm.iter_mut().zip(mean.iter()) {
            *r = (F::one() - m) * *r + m * v;
        }
        let mut rv = self.running_var.borrow_mut();
        for (r, &v) in rv.iter_mut().zip(var.iter()) {
            *r = (F::one() - m) * *r + m * v * unbias;
        }
    }
}

impl<F: Real> Module<F> for BatchNorm<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        v.param("weight", &mut self.gamma);
        if let Some(b) = &mut self.beta {
            v.param("bias", b);
        }
        v.buffer("running_mean", self.running_mean.get_mut());
        v.buffer("running_var", self.running_var.get_mut());
    }
}

/// Layer normalisation over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm<F: Real> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub eps: f64,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(filled(&[dim], 1.0)),
            beta: Param::new(filled(&[dim], 0.0)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var<F>) -> Result<Var<F>> {
        let d = self.gamma.shape()[0];
        if x.shape().last() != Some(&d) {
            return Err(Error::Shape(format!(
                "layer norm over {d} features got {:?}",
                x.shape()
            )));
        }
        let last = x.ndim() - 1;
        let centered = x.sub(&x.mean_axes(&[last]));
        let var = centered.mul(&centered).mean_axes(&[last]);
        let y = centered.mul(&var.add_scalar(F::lit(self.eps)).powf(F::lit(-0.5)));
        let tape = x.tape();
        Ok(y.mul(&self.gamma.on(tape)).add(&self.beta.on(tape)))
    }
}

impl<F: Real> Module<F> for LayerNorm<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        v.param("weight", &mut self.gamma);
        v.param("bias", &mut self.beta);
    }
}

/// Convolution, batch normalisation, then (optionally) ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<F: Real> {
    pub conv: Conv2d<F>,
    pub bn: BatchNorm<F>,
    pub relu: bool,
}

impl<F: Real> ConvBlock<F> {
    pub fn new(
        init: &mut Init,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(init, input, output, kernel, stride, padding, 1, false),
            bn: BatchNorm::new(output, true),
            relu: true,
        }
    }

    pub fn forward(&self, x: &Var<F>, mode: Mode) -> Result<Var<F>> {
        let y = self.bn.forward(&self.conv.forward(x)?, mode)?;
        Ok(if self.relu { y.relu() } else { y })
    }
}

impl<F: Real> Module<F> for ConvBlock<F> {
    fn visit(&mut self, v: &mut Visitor<'_, F>) {
        v.scope("conv", |v| self.conv.visit(v));
        v.scope("bn", |v| self.bn.visit(v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_norm_train_output_is_centered() {
        let mut init = Init::new(3);
        let bn = BatchNorm::<f64>::new(4, true);
        let t = Tape::new();
        let x = t.constant(init.normal::<f64>(&[6, 4, 3, 2], 2.0).mapv(|v| v + 5.0));
        let y = bn.forward(&x, Mode::Train).unwrap();
        for c in 0..4 {
            let m = y.value().index_axis(ndarray::Axis(1), c).mean().unwrap();
            assert!(m.abs() < 1e-5);
        }
        assert!(bn.running_mean.borrow().iter().all(|&m| m > 0.3));
    }

    #[test]
    fn batch_norm_rejects_single_value_batches() {
        let bn = BatchNorm::<f32>::new(3, false);
        let t = Tape::new();
        let x = t.constant(ArrayD::zeros(IxDyn(&[1, 3])));
        assert!(bn.forward(&x, Mode::Train).is_err());
        assert!(bn.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn state_dict_names_are_dotted() {
        let mut init = Init::new(0);
        let mut block = ConvBlock::<f32>::new(&mut init, 3, 8, 3, 1, 1);
        let names: Vec<String> = state_dict(&mut block).into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "conv.weight",
                "bn.weight",
                "bn.bias",
                "bn.running_mean",
                "bn.running_var"
            ]
        );
    }

    #[test]
    fn cloned_params_get_fresh_ids() {
        let p = Param::<f32>::new(ArrayD::zeros(IxDyn(&[2])));
        assert_ne!(p.id(), p.clone().id());
    }
}
