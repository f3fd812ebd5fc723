use std::rc::Rc;

use ndarray::{linalg::general_mat_mul, Array2, Array3, ArrayD, Axis, Ix2, Ix3};

use super::{Real, Var};

fn as2<F: Real>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("2-D operand")
}

fn as3<F: Real>(a: &ArrayD<F>) -> ndarray::ArrayView3<'_, F> {
    a.view().into_dimensionality::<Ix3>().expect("3-D operand")
}

impl<F: Real> Var<F> {
    /// `[M,K] × [K,N] → [M,N]`.
    pub fn matmul(&self, other: &Var<F>) -> Var<F> {
        let (a, b) = (as2(&self.value), as2(&other.value));
        assert_eq!(a.ncols(), b.nrows(), "matmul {:?} x {:?}", a.dim(), b.dim());
        let mut out = Array2::<F>::zeros((a.nrows(), b.ncols()));
        general_mat_mul(F::one(), &a, &b, F::zero(), &mut out);
        let (av, bv) = (Rc::clone(&self.value), Rc::clone(&other.value));
        self.tape
            .record(out.into_dyn(), &[self, other], move |g, needs| {
                let g = as2(g);
                let (a, b) = (as2(&av), as2(&bv));
                let da = needs[0].then(|| {
                    let mut d = Array2::<F>::zeros(a.raw_dim());
                    general_mat_mul(F::one(), &g, &b.t(), F::zero(), &mut d);
                    d.into_dyn()
                });
                let db = needs[1].then(|| {
                    let mut d = Array2::<F>::zeros(b.raw_dim());
                    general_mat_mul(F::one(), &a.t(), &g, F::zero(), &mut d);
                    d.into_dyn()
                });
                vec![da, db]
            })
    }

    /// Batched product. With `transpose_rhs`, computes `A·Bᵀ` per batch:
    /// `[B,M,K] × [B,N,K] → [B,M,N]`; otherwise `[B,M,K] × [B,K,N]`.
    pub fn bmm(&self, other: &Var<F>, transpose_rhs: bool) -> Var<F> {
        let (a, b) = (as3(&self.value), as3(&other.value));
        let batch = a.len_of(Axis(0));
        assert_eq!(batch, b.len_of(Axis(0)), "bmm batch mismatch");
        let (m, k) = (a.dim().1, a.dim().2);
        let n = if transpose_rhs { b.dim().1 } else { b.dim().2 };
        let kb = if transpose_rhs { b.dim().2 } else { b.dim().1 };
        assert_eq!(k, kb, "bmm inner dimension mismatch");
        let mut out = Array3::<F>::zeros((batch, m, n));
        for i in 0..batch {
            let ai = a.index_axis(Axis(0), i);
            let bi = b.index_axis(Axis(0), i);
            let mut oi = out.index_axis_mut(Axis(0), i);
            if transpose_rhs {
                general_mat_mul(F::one(), &ai, &bi.t(), F::zero(), &mut oi);
            } else {
                general_mat_mul(F::one(), &ai, &bi, F::zero(), &mut oi);
            }
        }
        let (av, bv) = (Rc::clone(&self.value), Rc::clone(&other.value));
        self.tape
            .record(out.into_dyn(), &[self, other], move |g, needs| {
                let g = as3(g);
                let (a, b) = (as3(&av), as3(&bv));
                let mut da = needs[0].then(|| Array3::<F>::zeros(a.raw_dim()));
                let mut db = needs[1].then(|| Array3::<F>::zeros(b.raw_dim()));
                for i in 0..batch {
                    let gi = g.index_axis(Axis(0), i);
                    let ai = a.index_axis(Axis(0), i);
                    let bi = b.index_axis(Axis(0), i);
                    if let Some(da) = da.as_mut() {
                        let mut d = da.index_axis_mut(Axis(0), i);
                        if transpose_rhs {
                            // C = A Bᵀ  ⇒  dA = G B
                            general_mat_mul(F::one(), &gi, &bi, F::zero(), &mut d);
                        } else {
                            general_mat_mul(F::one(), &gi, &bi.t(), F::zero(), &mut d);
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        let mut d = db.index_axis_mut(Axis(0), i);
                        if transpose_rhs {
                            // dB = Gᵀ A
                            general_mat_mul(F::one(), &gi.t(), &ai, F::zero(), &mut d);
                        } else {
                            general_mat_mul(F::one(), &ai.t(), &gi, F::zero(), &mut d);
                        }
                    }
                }
                vec![da.map(|d| d.into_dyn()), db.map(|d| d.into_dyn())]
            })
    }
}

#[cfg(test)]
mod tests {
    use crate::autograd::Tape;
    use ndarray::{array, ArrayD};

    #[test]
    fn matmul_gradient_is_transposed_product() {
        let t = Tape::<f64>::new();
        let a = t.variable(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]].into_dyn());
        let b = t.variable(array![[1.0, 0.0, 2.0], [0.0, 1.0, 3.0]].into_dyn());
        let c = a.matmul(&b);
        assert_eq!(c.value()[[2, 2]], 5.0 * 2.0 + 6.0 * 3.0);
        let g = c.sum_all().backward();
        // d/dA sum(AB) = 1·Bᵀ, so each row holds the row sums of B
        assert_eq!(
            g.get(&a).unwrap(),
            &array![[3.0, 4.0], [3.0, 4.0], [3.0, 4.0]].into_dyn()
        );
        assert_eq!(
            g.get(&b).unwrap(),
            &array![[9.0, 9.0, 9.0], [12.0, 12.0, 12.0]].into_dyn()
        );
    }

    #[test]
    fn bmm_transposed_matches_explicit_transpose() {
        let t = Tape::<f64>::new();
        let a: ArrayD<f64> = ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 3, 4]), |i| {
            (i[0] * 12 + i[1] * 4 + i[2]) as f64 * 0.1
        });
        let b: ArrayD<f64> = ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 5, 4]), |i| {
            ((i[0] * 20 + i[1] * 4 + i[2]) % 7) as f64 - 3.0
        });
        let av = t.variable(a.clone());
        let bv = t.variable(b.clone());
        let direct = av.bmm(&bv, true);
        let via = av.bmm(&bv.permute(&[0, 2, 1]), false);
        assert_eq!(direct.value(), via.value());
        let g1 = direct.sum_all().backward();
        let g2 = via.sum_all().backward();
        assert_eq!(g1.get(&av), g2.get(&av));
        assert_eq!(g1.get(&bv), g2.get(&bv));
    }
}
