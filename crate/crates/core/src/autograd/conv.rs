use std::rc::Rc;

use ndarray::{linalg::general_mat_mul, Array2, ArrayD, ArrayView2, IxDyn};

use super::{Real, Var};

/// Spatial geometry of a 2-D convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = |k: usize| self.dilation * (k - 1) + 1;
        let oh = (h + 2 * self.padding).checked_sub(span(self.kernel.0));
        let ow = (w + 2 * self.padding).checked_sub(span(self.kernel.1));
        match (oh, ow) {
            (Some(oh), Some(ow)) => (oh / self.stride + 1, ow / self.stride + 1),
            _ => (0, 0),
        }
    }

    /// Input coordinate read by output coordinate `o` at kernel tap `k`.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Unfold an `N×C×H×W` image batch into a `(C·kh·kw) × (N·Ho·Wo)` matrix.
pub fn im2col<F: Real>(x: &[F], dims: [usize; 4], geo: &ConvGeometry) -> Array2<F> {
    let [n, c, h, w] = dims;
    let (kh, kw) = geo.kernel;
    let (oh, ow) = geo.output_size(h, w);
    let cols_per_img = oh * ow;
    let mut cols = Array2::<F>::zeros((c * kh * kw, n * cols_per_img));
    let out = cols.as_slice_mut().unwrap();
    let width = n * cols_per_img;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * width;
                for b in 0..n {
                    let img = &x[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    let base = row + b * cols_per_img;
                    for oy in 0..oh {
                        let Some(iy) = geo.source(oy, ki, h) else {
                            continue;
                        };
                        let src = &img[iy * w..(iy + 1) * w];
                        let dst = &mut out[base + oy * ow..base + (oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            if let Some(ix) = geo.source(ox, kj, w) {
                                *d = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image batch.
pub fn col2im<F: Real>(cols: ArrayView2<'_, F>, dims: [usize; 4], geo: &ConvGeometry) -> Vec<F> {
    let [n, c, h, w] = dims;
    let (kh, kw) = geo.kernel;
    let (oh, ow) = geo.output_size(h, w);
    let cols_per_img = oh * ow;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().unwrap();
    let width = n * cols_per_img;
    let mut x = vec![F::zero(); n * c * h * w];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * width;
                for b in 0..n {
                    let img = &mut x[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    let base = row + b * cols_per_img;
                    for oy in 0..oh {
                        let Some(iy) = geo.source(oy, ki, h) else {
                            continue;
                        };
                        let s = &src[base + oy * ow..base + (oy + 1) * ow];
                        let dst = &mut img[iy * w..(iy + 1) * w];
                        for (ox, &v) in s.iter().enumerate() {
                            if let Some(ix) = geo.source(ox, kj, w) {
                                dst[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Visit every (output, input, weight) index triple of a same-padded
/// stride-1 depthwise convolution.
fn depthwise_taps(dims: [usize; 4], k: usize, f: &mut dyn FnMut(usize, usize, usize)) {
    let [n, c, h, w] = dims;
    let r = (k / 2) as isize;
    for b in 0..n {
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            for y in 0..h {
                for x in 0..w {
                    for ki in 0..k {
                        let sy = y as isize + ki as isize - r;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let sx = x as isize + kj as isize - r;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            f(
                                plane + y * w + x,
                                plane + sy as usize * w + sx as usize,
                                (ch * k + ki) * k + kj,
                            );
                        }
                    }
                }
            }
        }
    }
}

/// `[O, N·P]` → `[N, O, P]` and back, for P spatial positions.
fn onp_to_nop<F: Real>(m: &[F], o: usize, n: usize, p: usize) -> Vec<F> {
    let mut out = vec![F::zero(); o * n * p];
    for oc in 0..o {
        for b in 0..n {
            out[(b * o + oc) * p..(b * o + oc + 1) * p]
                .copy_from_slice(&m[(oc * n + b) * p..(oc * n + b + 1) * p]);
        }
    }
    out
}

fn nop_to_onp<F: Real>(m: &[F], o: usize, n: usize, p: usize) -> Vec<F> {
    let mut out = vec![F::zero(); o * n * p];
    for oc in 0..o {
        for b in 0..n {
            out[(oc * n + b) * p..(oc * n + b + 1) * p]
                .copy_from_slice(&m[(b * o + oc) * p..(b * o + oc + 1) * p]);
        }
    }
    out
}

fn dims4(shape: &[usize], what: &str) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "{what} expects a 4-D tensor, got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

impl<F: Real> Var<F> {
    /// Dense 2-D convolution without bias. `self` is `N×C×H×W`, `weight` is
    /// `O×C×kh×kw`.
    pub fn conv2d(
        &self,
        weight: &Var<F>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Var<F> {
        let xd = dims4(self.shape(), "conv2d input");
        let wd = dims4(weight.shape(), "conv2d weight");
        assert_eq!(xd[1], wd[1], "conv2d channel mismatch {xd:?} vs {wd:?}");
        let geo = ConvGeometry {
            kernel: (wd[2], wd[3]),
            stride,
            padding,
            dilation,
        };
        let (oh, ow) = geo.output_size(xd[2], xd[3]);
        assert!(oh > 0 && ow > 0, "conv2d output is empty for input {xd:?}");
        let (n, o, p) = (xd[0], wd[0], oh * ow);
        let x = self.value.as_slice().expect("standard layout");
        let cols = Rc::new(im2col(x, xd, &geo));
        let w2 = weight
            .value
            .view()
            .into_shape_with_order((o, wd[1] * wd[2] * wd[3]))
            .unwrap()
            .to_owned();
        let mut y = Array2::<F>::zeros((o, n * p));
        general_mat_mul(F::one(), &w2, &*cols, F::zero(), &mut y);
        let value = ArrayD::from_shape_vec(
            IxDyn(&[n, o, oh, ow]),
            onp_to_nop(y.as_slice().unwrap(), o, n, p),
        )
        .unwrap();
        let wshape = weight.shape().to_vec();
        self.tape.record(value, &[self, weight], move |g, needs| {
            let g = g.as_standard_layout();
            let gy = Array2::from_shape_vec((o, n * p), nop_to_onp(g.as_slice().unwrap(), o, n, p))
                .unwrap();
            let dx = needs[0].then(|| {
                let mut dcols = Array2::<F>::zeros(cols.raw_dim());
                general_mat_mul(F::one(), &w2.t(), &gy, F::zero(), &mut dcols);
                ArrayD::from_shape_vec(IxDyn(&xd), col2im(dcols.view(), xd, &geo)).unwrap()
            });
            let dw = needs[1].then(|| {
                let mut dw = Array2::<F>::zeros(w2.raw_dim());
                general_mat_mul(F::one(), &gy, &cols.t(), F::zero(), &mut dw);
                dw.into_shape_with_order(IxDyn(&wshape)).unwrap()
            });
            vec![dx, dw]
        })
    }

    /// Depthwise (per-channel) stride-1 convolution. `self` is `N×C×H×W`,
    /// `weight` is `C×k×k` with odd `k`; zero padding keeps `H×W`.
    pub fn depthwise_conv2d(&self, weight: &Var<F>) -> Var<F> {
        let [n, c, h, w] = dims4(self.shape(), "depthwise_conv2d input");
        let ws = weight.shape();
        assert_eq!(ws.len(), 3, "depthwise weight must be C×k×k");
        assert_eq!(ws[0], c, "depthwise channel mismatch");
        let k = ws[1];
        assert!(
            k % 2 == 1 && ws[2] == k,
            "depthwise kernel must be odd and square"
        );
        let x = Rc::clone(&self.value);
        let wt = Rc::clone(&weight.value);
        let xs = x.as_slice().unwrap();
        let wsl = wt.as_slice().unwrap();
        let mut out = vec![F::zero(); n * c * h * w];
        depthwise_taps([n, c, h, w], k, &mut |o, i, wi| out[o] += wsl[wi] * xs[i]);
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
        let wshape = ws.to_vec();
        self.tape.record(value, &[self, weight], move |g, needs| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let xs = x.as_slice().unwrap();
            let wsl = wt.as_slice().unwrap();
            let mut dx = needs[0].then(|| vec![F::zero(); xs.len()]);
            let mut dw = needs[1].then(|| vec![F::zero(); wsl.len()]);
            depthwise_taps([n, c, h, w], k, &mut |o, i, wi| {
                if let Some(dx) = dx.as_mut() {
                    dx[i] += wsl[wi] * gs[o];
                }
                if let Some(dw) = dw.as_mut() {
                    dw[wi] += xs[i] * gs[o];
                }
            });
            vec![
                dx.map(|v| ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), v).unwrap()),
                dw.map(|v| ArrayD::from_shape_vec(IxDyn(&wshape), v).unwrap()),
            ]
        })
    }

    /// Max pooling over `k×k` windows with the given stride and padding.
    pub fn max_pool2d(&self, k: usize, stride: usize, padding: usize) -> Var<F> {
        let [n, c, h, w] = dims4(self.shape(), "max_pool2d input");
        let geo = ConvGeometry {
            kernel: (k, k),
            stride,
            padding,
            dilation: 1,
        };
        let (oh, ow) = geo.output_size(h, w);
        let xs = self.value.as_slice().unwrap();
        let mut out = vec![F::neg_infinity(); n * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (plane * oh + oy) * ow + ox;
                    for ki in 0..k {
                        let Some(iy) = geo.source(oy, ki, h) else {
                            continue;
                        };
                        for kj in 0..k {
                            let Some(ix) = geo.source(ox, kj, w) else {
                                continue;
                            };
                            let i = (plane * h + iy) * w + ix;
                            if xs[i] > out[o] {
                                out[o] = xs[i];
                                arg[o] = i;
                            }
                        }
                    }
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap();
        let in_len = xs.len();
        self.tape.record(value, &[self], move |g, _| {
            let mut dx = vec![F::zero(); in_len];
            for (o, &gv) in g.iter().enumerate() {
                dx[arg[o]] += gv;
            }
            vec![Some(
                ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap(),
            )]
        })
    }
}
