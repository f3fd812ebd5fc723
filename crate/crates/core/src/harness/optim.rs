use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use crate::autograd::{Grads, Real};
use crate::nn::{Module, Slot, Visitor};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + wd·w`, `w ← w − lr·v`. With `max_grad_norm`, the
/// gradients are first rescaled so their global L2 norm is at most that.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<F: Real> {
    pub momentum: F,
    pub weight_decay: F,
    pub max_grad_norm: Option<F>,
    /// Velocity per parameter name.
    pub velocity: BTreeMap<String, ArrayD<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: F::from_f64(momentum).unwrap(),
            weight_decay: F::from_f64(weight_decay).unwrap(),
            max_grad_norm: None,
            velocity: BTreeMap::new(),
        }
    }

    pub fn with_max_grad_norm(mut self, max: Option<f64>) -> Self {
        self.max_grad_norm = max.map(|m| F::from_f64(m).unwrap());
        self
    }

    /// Update every parameter that received a gradient. Parameters the
    /// forward pass never touched keep their value and velocity.
    pub fn step(&mut self, model: &mut impl Module<F>, grads: &Grads<F>, lr: f64) -> usize {
        let lr = F::from_f64(lr).unwrap();
        let (mu, wd) = (self.momentum, self.weight_decay);
        let scale = match self.max_grad_norm {
            Some(max) => {
                let norm = grad_norm(model, grads);
                if norm > max {
                    max / norm
                } else {
                    F::one()
                }
            }
            None => F::one(),
        };
        let velocity = &mut self.velocity;
        let mut updated = 0;
        model.visit(&mut Visitor::new(&mut |name, slot| {
            let Slot::Param(p) = slot else { return };
            let Some(g) = grads.param(p) else { return };
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            Zip::from(&mut *v)
                .and(g)
                .and(p.value())
                .for_each(|v, &g, &w| *v = mu * *v + scale * g + wd * w);
            Zip::from(p.value_mut())
                .and(&*v)
                .for_each(|w, &v| *w = *w - lr * v);
            updated += 1;
        }));
        updated
    }
}

/// Global L2 norm of the gradients of the model's parameters.
pub fn grad_norm<F: Real>(model: &mut impl Module<F>, grads: &Grads<F>) -> F {
    let mut sq = F::zero();
    model.visit(&mut Visitor::new(&mut |_, slot| {
        if let Slot::Param(p) = slot {
            if let Some(g) = grads.param(p) {
                sq = g.iter().fold(sq, |a, &v| a + v * v);
            }
        }
    }));
    sq.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::{Init, Linear};

    #[test]
    fn matches_hand_rolled_momentum() {
        let mut lin = Linear::<f64>::new(&mut Init::new(0), 2, 1, true);
        let x = ndarray::array![[1.0, -2.0], [0.5, 3.0]].into_dyn();
        let mut opt = Sgd::new(0.9, 0.01);
        let mut w = lin.weight.value().clone();
        let mut b = lin.bias.as_ref().unwrap().value().clone();
        let (mut vw, mut vb) = (
            ArrayD::<f64>::zeros(w.raw_dim()),
            ArrayD::<f64>::zeros(b.raw_dim()),
        );
        for _ in 0..3 {
            let t = Tape::new();
            let loss = lin
                .forward(&t.constant(x.clone()))
                .unwrap()
                .powf(2.0)
                .sum_all();
            let grads = loss.backward();
            let gw = grads.param(&lin.weight).unwrap().clone();
            let gb = grads.param(lin.bias.as_ref().unwrap()).unwrap().clone();
            assert_eq!(opt.step(&mut lin, &grads, 0.1), 2);
            vw = &vw * 0.9 + &gw + &w * 0.01;
            vb = &vb * 0.9 + &gb + &b * 0.01;
            w = &w - &(&vw * 0.1);
            b = &b - &(&vb * 0.1);
            assert_eq!(lin.weight.value(), &w);
            assert_eq!(lin.bias.as_ref().unwrap().value(), &b);
        }
        assert_eq!(opt.velocity.len(), 2);
    }

    #[test]
    fn clipping_rescales_the_global_gradient() {
        let x = ndarray::array![[1.0, -2.0], [0.5, 3.0]].into_dyn();
        let mut plain = Linear::<f64>::new(&mut Init::new(0), 2, 1, true);
        let mut clipped = plain.clone();
        let t = Tape::new();
        let loss = plain
            .forward(&t.constant(x.clone()))
            .unwrap()
            .powf(2.0)
            .sum_all();
        let grads = loss.backward();
        let norm = grad_norm(&mut plain, &grads);
        assert!(norm > 0.5);
        let before = plain.weight.value().clone();
        Sgd::new(0.0, 0.0).step(&mut plain, &grads, 1.0);

        let t = Tape::new();
        let loss = clipped.forward(&t.constant(x)).unwrap().powf(2.0).sum_all();
        let grads = loss.backward();
        Sgd::new(0.0, 0.0)
            .with_max_grad_norm(Some(0.5))
            .step(&mut clipped, &grads, 1.0);
        let full = &before - plain.weight.value();
        let part = &before - clipped.weight.value();
        for (f, p) in full.iter().zip(&part) {
            assert!((p - f * 0.5 / norm).abs() < 1e-12);
        }
    }
}
