use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn, Slice, Zip};

use super::{Real, Var};

/// Sum a broadcast gradient back down to `shape`.
pub(crate) fn sum_to_shape<F: Real>(mut g: ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    if g.shape() == shape {
        return g;
    }
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &s) in shape.iter().enumerate() {
        if s == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn standard<F: Real>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n {
                a[i + a.len() - n]
            } else {
                1
            };
            let db = if i + b.len() >= n {
                b[i + b.len() - n]
            } else {
                1
            };
            assert!(
                da == db || da == 1 || db == 1,
                "incompatible broadcast {a:?} vs {b:?}"
            );
            da.max(db)
        })
        .collect()
}

fn zip_broadcast<F: Real>(a: &ArrayD<F>, b: &ArrayD<F>, f: impl Fn(F, F) -> F) -> ArrayD<F> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        Zip::from(&mut out).and(b).for_each(|x, &y| *x = f(*x, y));
        return out;
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::<F>::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl<F: Real> Var<F> {
    /// Elementwise op whose backward needs only the input.
    fn unary(
        &self,
        value: ArrayD<F>,
        backward: impl Fn(&ArrayD<F>, &ArrayD<F>) -> ArrayD<F> + 'static,
    ) -> Var<F> {
        let input = Rc::clone(&self.value);
        self.tape
            .record(value, &[self], move |g, _| vec![Some(backward(g, &input))])
    }

    pub fn add(&self, other: &Var<F>) -> Var<F> {
        let value = zip_broadcast(&self.value, &other.value, |x, y| x + y);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        self.tape.record(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| sum_to_shape(g.clone(), &sa)),
                needs[1].then(|| sum_to_shape(g.clone(), &sb)),
            ]
        })
    }

    pub fn sub(&self, other: &Var<F>) -> Var<F> {
        let value = zip_broadcast(&self.value, &other.value, |x, y| x - y);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        self.tape.record(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| sum_to_shape(g.clone(), &sa)),
                needs[1].then(|| sum_to_shape(g.mapv(|x| -x), &sb)),
            ]
        })
    }

    pub fn mul(&self, other: &Var<F>) -> Var<F> {
        let value = zip_broadcast(&self.value, &other.value, |x, y| x * y);
        let (a, b) = (Rc::clone(&self.value), Rc::clone(&other.value));
        self.tape.record(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| sum_to_shape(zip_broadcast(g, &b, |x, y| x * y), a.shape())),
                needs[1].then(|| sum_to_shape(zip_broadcast(g, &a, |x, y| x * y), b.shape())),
            ]
        })
    }

    pub fn neg(&self) -> Var<F> {
        self.scale(-F::one())
    }

    pub fn scale(&self, c: F) -> Var<F> {
        self.unary(self.value.mapv(|x| x * c), move |g, _| g.mapv(|x| x * c))
    }

    pub fn add_scalar(&self, c: F) -> Var<F> {
        self.unary(self.value.mapv(|x| x + c), |g, _| g.clone())
    }

    pub fn relu(&self) -> Var<F> {
        self.unary(self.value.mapv(|x| x.max(F::zero())), |g, x| {
            let mut out = g.clone();
            Zip::from(&mut out).and(x).for_each(|o, &x| {
                if x <= F::zero() {
                    *o = F::zero()
                }
            });
            out
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<F> {
        let half = F::lit(0.5);
        let inv_sqrt2 = F::lit(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = F::lit(0.398_942_280_401_432_7);
        self.unary(
            self.value
                .mapv(|x| half * x * (F::one() + (x * inv_sqrt2).erf())),
            move |g, x| {
                let mut out = g.clone();
                Zip::from(&mut out).and(x).for_each(|o, &x| {
                    let cdf = half * (F::one() + (x * inv_sqrt2).erf());
                    let pdf = (-(x * x) * half).exp() * inv_sqrt_2pi;
                    *o *= cdf + x * pdf;
                });
                out
            },
        )
    }

    pub fn sigmoid(&self) -> Var<F> {
        let y = self.value.mapv(|x| F::one() / (F::one() + (-x).exp()));
        let y_c = y.clone();
        self.tape.record(y, &[self], move |g, _| {
            let mut out = g.clone();
            Zip::from(&mut out)
                .and(&y_c)
                .for_each(|o, &y| *o *= y * (F::one() - y));
            vec![Some(out)]
        })
    }

    /// Elementwise `x^p`. Callers keep `x > 0` when `p` is not an integer.
    pub fn powf(&self, p: F) -> Var<F> {
        self.unary(self.value.mapv(|x| x.powf(p)), move |g, x| {
            let mut out = g.clone();
            Zip::from(&mut out)
                .and(x)
                .for_each(|o, &x| *o *= p * x.powf(p - F::one()));
            out
        })
    }

    /// `max(x, lo)`; the gradient passes only where `x > lo`.
    pub fn clamp_min(&self, lo: F) -> Var<F> {
        self.unary(self.value.mapv(|x| x.max(lo)), move |g, x| {
            let mut out = g.clone();
            Zip::from(&mut out).and(x).for_each(|o, &x| {
                if x <= lo {
                    *o = F::zero()
                }
            });
            out
        })
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Var<F> {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let mut v = (*self.value).clone();
        for &ax in &sorted {
            v = v.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let shape = self.shape().to_vec();
        self.tape.record(v, &[self], move |g, _| {
            vec![Some(g.broadcast(IxDyn(&shape)).unwrap().to_owned())]
        })
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Var<F> {
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes)
            .scale(F::one() / F::from_usize(count).unwrap())
    }

    /// Sum of all elements as a 0-d value.
    pub fn sum_all(&self) -> Var<F> {
        let s = self.value.sum();
        let shape = self.shape().to_vec();
        self.tape
            .record(ArrayD::from_elem(IxDyn(&[]), s), &[self], move |g, _| {
                let gv = *g.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
            })
    }

    pub fn mean_all(&self) -> Var<F> {
        let n = F::from_usize(self.value.len()).unwrap();
        self.sum_all().scale(F::one() / n)
    }

    /// Maximum over one axis (kept as size 1). The gradient is routed to the
    /// first maximal element.
    pub fn max_axis(&self, axis: usize) -> Var<F> {
        let x = &*self.value;
        let mut out_shape = x.shape().to_vec();
        out_shape[axis] = 1;
        let mut out = ArrayD::<F>::zeros(IxDyn(&out_shape));
        let mut arg = ArrayD::<usize>::zeros(IxDyn(&out_shape));
        Zip::from(out.lanes_mut(Axis(axis)))
            .and(arg.lanes_mut(Axis(axis)))
            .and(x.lanes(Axis(axis)))
            .for_each(|mut o, mut a, lane| {
                let mut best = 0;
                for (i, &v) in lane.iter().enumerate() {
                    if v > lane[best] {
                        best = i;
                    }
                }
                o[0] = lane[best];
                a[0] = best;
            });
        let in_shape = x.shape().to_vec();
        self.tape.record(out, &[self], move |g, _| {
            let mut dx = ArrayD::<F>::zeros(IxDyn(&in_shape));
            Zip::from(dx.lanes_mut(Axis(axis)))
                .and(arg.lanes(Axis(axis)))
                .and(g.lanes(Axis(axis)))
                .for_each(|mut d, a, gl| d[a[0]] = gl[0]);
            vec![Some(dx)]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<F> {
        let last = Axis(self.ndim() - 1);
        let mut y = (*self.value).clone();
        for mut lane in y.lanes_mut(last) {
            let m = lane.fold(F::neg_infinity(), |a, &b| a.max(b));
            lane.mapv_inplace(|v| (v - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        let y_c = y.clone();
        self.tape.record(y, &[self], move |g, _| {
            let mut dx = g.clone();
            Zip::from(dx.lanes_mut(last))
                .and(y_c.lanes(last))
                .for_each(|mut d, yl| {
                    let dot = d
                        .iter()
                        .zip(yl.iter())
                        .fold(F::zero(), |a, (&g, &y)| a + g * y);
                    d.zip_mut_with(&yl, |d, &y| *d = y * (*d - dot));
                });
            vec![Some(dx)]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Var<F> {
        let last = Axis(self.ndim() - 1);
        let mut y = (*self.value).clone();
        for mut lane in y.lanes_mut(last) {
            let m = lane.fold(F::neg_infinity(), |a, &b| a.max(b));
            let lse = m + lane.fold(F::zero(), |a, &v| a + (v - m).exp()).ln();
            lane.mapv_inplace(|v| v - lse);
        }
        let y_c = y.clone();
        self.tape.record(y, &[self], move |g, _| {
            let mut dx = g.clone();
            Zip::from(dx.lanes_mut(last))
                .and(y_c.lanes(last))
                .for_each(|mut d, yl| {
                    let s = d.sum();
                    d.zip_mut_with(&yl, |d, &y| *d -= y.exp() * s);
                });
            vec![Some(dx)]
        })
    }

    /// L2 norm over the last axis (kept as size 1). At a zero vector the
    /// subgradient zero is used.
    pub fn norm_last(&self) -> Var<F> {
        let last = Axis(self.ndim() - 1);
        let n = self
            .value
            .map_axis(last, |l| l.fold(F::zero(), |a, &v| a + v * v).sqrt())
            .insert_axis(last);
        let x = Rc::clone(&self.value);
        let n_c = n.clone();
        self.tape.record(n, &[self], move |g, _| {
            let mut dx = (*x).clone();
            Zip::from(dx.lanes_mut(last))
                .and(n_c.lanes(last))
                .and(g.lanes(last))
                .for_each(|mut d, nl, gl| {
                    let (nv, gv) = (nl[0], gl[0]);
                    if nv > F::zero() {
                        d.mapv_inplace(|v| v * gv / nv);
                    } else {
                        d.fill(F::zero());
                    }
                });
            vec![Some(dx)]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<F> {
        let value = (*self.value)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {shape:?}: {e}", self.shape()));
        let in_shape = self.shape().to_vec();
        self.tape.record(value, &[self], move |g, _| {
            vec![Some(
                g.clone().into_shape_with_order(IxDyn(&in_shape)).unwrap(),
            )]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Var<F> {
        let value = standard((*self.value).clone().permuted_axes(IxDyn(axes)));
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.record(value, &[self], move |g, _| {
            vec![Some(standard(g.clone().permuted_axes(IxDyn(&inverse))))]
        })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<F> {
        let value = self
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let in_shape = self.shape().to_vec();
        self.tape.record(standard(value), &[self], move |g, _| {
            let mut dx = ArrayD::<F>::zeros(IxDyn(&in_shape));
            dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            vec![Some(dx)]
        })
    }

    pub fn concat(parts: &[&Var<F>], axis: usize) -> Var<F> {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|p| p.value.view()).collect();
        let value = standard(ndarray::concatenate(Axis(axis), &views).expect("concat shapes"));
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        parts[0].tape.record(value, parts, move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let s = start;
                    start += len;
                    need.then(|| {
                        g.slice_axis(Axis(axis), Slice::from(s..s + len))
                            .as_standard_layout()
                            .into_owned()
                    })
                })
                .collect()
        })
    }

    /// Gather entries along axis 0. Indices may repeat.
    pub fn select_rows(&self, indices: &[usize]) -> Var<F> {
        let value = standard(self.value.select(Axis(0), indices));
        let idx = indices.to_vec();
        let in_shape = self.shape().to_vec();
        self.tape.record(value, &[self], move |g, _| {
            let mut dx = ArrayD::<F>::zeros(IxDyn(&in_shape));
            for (k, &i) in idx.iter().enumerate() {
                let mut row = dx.index_axis_mut(Axis(0), i);
                row += &g.index_axis(Axis(0), k);
            }
            vec![Some(dx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use ndarray::array;

    fn leaf(t: &std::rc::Rc<Tape<f64>>, a: ArrayD<f64>) -> Var<f64> {
        t.variable(a)
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let t = Tape::<f64>::new();
        let a = leaf(&t, array![[1.0, 2.0], [3.0, 4.0]].into_dyn());
        let b = leaf(&t, array![10.0, 20.0].into_dyn());
        let s = a.add(&b).sum_all();
        assert_eq!(s.scalar(), 70.0);
        let g = s.backward();
        assert_eq!(g.get(&b).unwrap(), &array![2.0, 2.0].into_dyn());
        assert_eq!(g.get(&a).unwrap(), &ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tape::<f64>::inference();
        let a = t.constant(array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]].into_dyn());
        let y = a.softmax();
        for row in y.value().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_at_zero_has_zero_gradient() {
        let t = Tape::<f64>::new();
        let a = leaf(&t, ArrayD::zeros(IxDyn(&[2, 3])));
        let g = a.norm_last().sum_all().backward();
        assert!(g.get(&a).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn max_axis_routes_to_first_max() {
        let t = Tape::<f64>::new();
        let a = leaf(&t, array![[1.0, 5.0, 5.0], [2.0, 0.0, 1.0]].into_dyn());
        let m = a.max_axis(1);
        assert_eq!(m.value(), &array![[5.0], [2.0]].into_dyn());
        let g = m.sum_all().backward();
        assert_eq!(
            g.get(&a).unwrap(),
            &array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]].into_dyn()
        );
    }

    #[test]
    fn inference_tape_records_nothing() {
        let t = Tape::<f32>::inference();
        let a = t.variable(array![1.0f32, 2.0].into_dyn());
        let b = a.mul(&a).relu();
        assert!(!b.requires_grad());
        assert_eq!(b.value(), &array![1.0f32, 4.0].into_dyn());
    }
}
