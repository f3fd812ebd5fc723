//! Central finite-difference gradient checks in `f64`.

use std::rc::Rc;

use ndarray::ArrayD;

use super::{Tape, Var};
use crate::nn::{Module, ParamId, Slot, Visitor};

/// Agreement between analytic and numeric gradients for one tensor.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)`.
    pub rel_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

fn rel_err(a: &ArrayD<f64>, n: &ArrayD<f64>, floor: f64) -> GradCheck {
    let diff = a
        .iter()
        .zip(n.iter())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let an = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    GradCheck {
        name: String::new(),
        rel_err: diff / an.max(nn).max(floor),
        analytic_norm: an,
        numeric_norm: nn,
    }
}

fn nudge<M: Module<f64>>(m: &mut M, target: &str, k: usize, delta: f64) {
    m.visit(&mut Visitor::new(&mut |name, slot| {
        if name == target {
            if let Slot::Param(p) = slot {
                let v = p.value_mut();
                let s = v.as_slice_mut().expect("standard layout parameter");
                s[k] += delta;
            }
        }
    }));
}

/// Compare gradients of the scalar `loss(module, tape)` with respect to every
/// parameter of `module` against central differences with step `eps`.
pub fn check_module<M: Module<f64>>(
    module: &mut M,
    eps: f64,
    loss: impl Fn(&M, &Rc<Tape<f64>>) -> Var<f64>,
) -> Vec<GradCheck> {
    let mut slots: Vec<(String, ParamId, Vec<usize>)> = Vec::new();
    module.visit(&mut Visitor::new(&mut |name, slot| {
        if let Slot::Param(p) = slot {
            slots.push((name.to_string(), p.id(), p.shape().to_vec()));
        }
    }));

    let tape = Tape::new();
    let grads = loss(module, &tape).backward();

    let eval = |m: &M| loss(m, &Tape::inference()).scalar();
    let mut out = Vec::with_capacity(slots.len());
    for (name, id, shape) in slots {
        let analytic = grads
            .by_id(id)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(shape.clone()));
        let mut numeric = ArrayD::<f64>::zeros(shape);
        for k in 0..numeric.len() {
            nudge(module, &name, k, eps);
            let up = eval(module);
            nudge(module, &name, k, -2.0 * eps);
            let down = eval(module);
            nudge(module, &name, k, eps);
            numeric.as_slice_mut().unwrap()[k] = (up - down) / (2.0 * eps);
        }
        let mut r = rel_err(&analytic, &numeric, 1e-8);
        r.name = name;
        out.push(r);
    }
    out
}

/// Compare gradients of `loss(inputs)` with respect to each input tensor.
pub fn check_inputs(
    inputs: &[ArrayD<f64>],
    eps: f64,
    loss: impl Fn(&[Var<f64>]) -> Var<f64>,
) -> Vec<GradCheck> {
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let grads = loss(&vars).backward();

    let eval = |xs: &[ArrayD<f64>]| {
        let t = Tape::inference();
        let vs: Vec<Var<f64>> = xs.iter().map(|x| t.constant(x.clone())).collect();
        loss(&vs).scalar()
    };
    let mut work: Vec<ArrayD<f64>> = inputs
        .iter()
        .map(|x| x.as_standard_layout().into_owned())
        .collect();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let analytic = grads
            .get(&vars[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(inputs[i].raw_dim()));
        let mut numeric = ArrayD::<f64>::zeros(inputs[i].raw_dim());
        for k in 0..numeric.len() {
            let orig = work[i].as_slice().unwrap()[k];
            work[i].as_slice_mut().unwrap()[k] = orig + eps;
            let up = eval(&work);
            work[i].as_slice_mut().unwrap()[k] = orig - eps;
            let down = eval(&work);
            work[i].as_slice_mut().unwrap()[k] = orig;
            numeric.as_slice_mut().unwrap()[k] = (up - down) / (2.0 * eps);
        }
        let mut r = rel_err(&analytic, &numeric, 1e-8);
        r.name = format!("input{i}");
        out.push(r);
    }
    out
}
