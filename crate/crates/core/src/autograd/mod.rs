//! A small tape-based reverse-mode automatic differentiation engine.
//!
//! Values are dense `ndarray` arrays in standard (row-major) layout. Every
//! operation on a [`Var`] appends a node to the shared [`Tape`]; calling
//! [`Var::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients for every leaf that asked for one (parameters and explicit
//! variables).
//!
//! The engine is generic over [`Real`] so that training runs in `f32` while
//! finite-difference checks run in `f64`.

pub mod check;
mod conv;
mod linalg;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

use crate::nn::{Param, ParamId};

pub use conv::{col2im, im2col, ConvGeometry};

/// Floating point element type supported by the engine.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn erf(self) -> Self;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Backward function of a node: maps the output gradient to one optional
/// gradient per parent. `needs[i]` tells whether parent `i` wants a gradient.
type BackwardFn<F> = Box<dyn Fn(&ArrayD<F>, &[bool]) -> Vec<Option<ArrayD<F>>>>;

struct Node<F> {
    parents: Vec<usize>,
    needs: Vec<bool>,
    backward: Option<BackwardFn<F>>,
}

/// The recording of one forward computation.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    params: RefCell<HashMap<ParamId, (usize, Rc<ArrayD<F>>)>>,
    recording: Cell<bool>,
}

impl<F: Real> Tape<F> {
    /// A tape that records backward functions.
    pub fn new() -> Rc<Self> {
        Rc::new(Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            recording: Cell::new(true),
        })
    }

    /// A tape for inference: nothing requires a gradient and no closures are
    /// kept alive.
    pub fn inference() -> Rc<Self> {
        let t = Self::new();
        t.recording.set(false);
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(self: &Rc<Self>, value: ArrayD<F>, requires_grad: bool) -> Var<F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents: Vec::new(),
            needs: Vec::new(),
            backward: None,
        });
        Var {
            id,
            value: Rc::new(value),
            requires_grad: requires_grad && self.recording.get(),
            tape: Rc::clone(self),
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(self: &Rc<Self>, value: ArrayD<F>) -> Var<F> {
        self.push(value, false)
    }

    /// A leaf that receives a gradient (when recording).
    pub fn variable(self: &Rc<Self>, value: ArrayD<F>) -> Var<F> {
        self.push(value, true)
    }

    /// Leaf for a parameter. The same parameter always maps to the same node
    /// within one tape, so shared weights accumulate a single gradient. The
    /// value is captured on first use: changes to the parameter afterwards
    /// are only seen by a new tape.
    pub fn param(self: &Rc<Self>, p: &Param<F>) -> Var<F> {
        if let Some((id, value)) = self.params.borrow().get(&p.id()) {
            return Var {
                id: *id,
                value: Rc::clone(value),
                requires_grad: self.recording.get(),
                tape: Rc::clone(self),
            };
        }
        let v = self.push(p.value().clone(), true);
        self.params
            .borrow_mut()
            .insert(p.id(), (v.id, Rc::clone(&v.value)));
        v
    }

    /// Parameters read by this tape so far.
    pub fn used_params(&self) -> HashSet<ParamId> {
        self.params.borrow().keys().copied().collect()
    }

    pub(crate) fn record(
        self: &Rc<Self>,
        value: ArrayD<F>,
        parents: &[&Var<F>],
        backward: impl Fn(&ArrayD<F>, &[bool]) -> Vec<Option<ArrayD<F>>> + 'static,
    ) -> Var<F> {
        let needs: Vec<bool> = parents.iter().map(|p| p.requires_grad).collect();
        if !self.recording.get() || !needs.iter().any(|&n| n) {
            return self.push(value, false);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            needs,
            backward: Some(Box::new(backward)),
        });
        Var {
            id,
            value: Rc::new(value),
            requires_grad: true,
            tape: Rc::clone(self),
        }
    }
}

/// A value on a tape.
#[derive(Clone)]
pub struct Var<F: Real> {
    id: usize,
    value: Rc<ArrayD<F>>,
    requires_grad: bool,
    tape: Rc<Tape<F>>,
}

impl<F: Real> Debug for Var<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl<F: Real> Var<F> {
    pub fn value(&self) -> &ArrayD<F> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.value.ndim()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &Rc<Tape<F>> {
        &self.tape
    }

    /// The single element of a scalar-shaped value.
    pub fn scalar(&self) -> F {
        assert_eq!(self.value.len(), 1, "scalar() on shape {:?}", self.shape());
        *self.value.iter().next().unwrap()
    }

    /// A constant on the same tape.
    pub fn constant_like(&self, value: ArrayD<F>) -> Var<F> {
        self.tape.constant(value)
    }

    /// Reverse-mode sweep from this (scalar) value.
    pub fn backward(&self) -> Grads<F> {
        assert_eq!(
            self.value.len(),
            1,
            "backward() requires a scalar, got shape {:?}",
            self.shape()
        );
        let nodes = self.tape.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[self.id] = Some(ArrayD::from_elem(self.value.raw_dim(), F::one()));
        let mut kept: Vec<Option<ArrayD<F>>> = (0..nodes.len()).map(|_| None).collect();
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                None => kept[id] = Some(g),
                Some(bw) => {
                    let parent_grads = bw(&g, &node.needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((&pid, &need), pg) in
                        node.parents.iter().zip(&node.needs).zip(parent_grads)
                    {
                        if !need {
                            continue;
                        }
                        let Some(pg) = pg else { continue };
                        match &mut grads[pid] {
                            Some(acc) => {
                                debug_assert_eq!(acc.shape(), pg.shape());
                                *acc += &pg;
                            }
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        let params = self
            .tape
            .params
            .borrow()
            .iter()
            .map(|(k, (id, _))| (*k, *id))
            .collect();
        Grads {
            grads: kept,
            params,
        }
    }
}

/// Leaf gradients produced by [`Var::backward`].
pub struct Grads<F> {
    grads: Vec<Option<ArrayD<F>>>,
    params: HashMap<ParamId, usize>,
}

impl<F: Real> Grads<F> {
    /// Gradient of a leaf variable, if it influenced the output.
    pub fn get(&self, v: &Var<F>) -> Option<&ArrayD<F>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter, if it was used and influenced the output.
    pub fn param(&self, p: &Param<F>) -> Option<&ArrayD<F>> {
        self.by_id(p.id())
    }

    pub fn by_id(&self, id: ParamId) -> Option<&ArrayD<F>> {
        self.params.get(&id).and_then(|&n| self.grads[n].as_ref())
    }
}
