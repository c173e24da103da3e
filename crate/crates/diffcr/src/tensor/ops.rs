//! Elementwise, reduction, linear-algebra and structural ops.
//!
//! Backward closures capture `Arc` clones of the values they need. Every
//! op materializes a standard-layout output, so reshapes elsewhere can
//! assume contiguous data.

use super::{Graph, Var};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use std::sync::Arc;

/// Complementary error function, fractional error below 1.2e-7 everywhere.
/// The entropy model and its frozen tables must share this exact function.
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398
                                + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277))))))));
    let ans = t * poly.exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal PDF.
pub fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn reshape_clone(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    assert_eq!(a.len(), n, "reshape element count mismatch");
    ArrayD::from_shape_vec(IxDyn(shape), a.iter().cloned().collect()).unwrap()
}

pub(crate) fn to2(a: &ArrayD<f64>) -> Array2<f64> {
    assert_eq!(a.ndim(), 2);
    Array2::from_shape_vec((a.shape()[0], a.shape()[1]), a.iter().cloned().collect()).unwrap()
}

impl Graph {
    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    fn binary_ew(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let mut out = (*av).clone();
        out.zip_mut_with(&bv, |x, &y| *x = f(*x, y));
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = g.clone();
                ndarray::Zip::from(&mut ga).and(&*av).and(&*bv).for_each(|gg, &x, &y| *gg *= dfa(x, y));
                sink(ai, ga);
                let mut gb = g.clone();
                ndarray::Zip::from(&mut gb).and(&*av).and(&*bv).for_each(|gg, &x, &y| *gg *= dfb(x, y));
                sink(bi, gb);
            })),
        )
    }

    fn unary_ew(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Var {
        let av = self.value_arc(a);
        let out = av.mapv(f);
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = g.clone();
                ndarray::Zip::from(&mut ga).and(&*av).for_each(|gg, &x| *gg *= df(x));
                sink(ai, ga);
            })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_ew(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_ew(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_ew(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_ew(a, b, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    /// `a + c * b` in one node.
    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Var {
        self.binary_ew(a, b, move |x, y| x + c * y, |_, _| 1.0, move |_, _| c)
    }

    /// `k * a + c` elementwise.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        self.unary_ew(a, move |x| k * x + c, move |_| k)
    }

    pub fn add_const(&mut self, a: Var, c: &ArrayD<f64>) -> Var {
        let av = self.value_arc(a);
        assert_eq!(av.shape(), c.shape());
        let out = &*av + c;
        let ai = a.0;
        self.push(out, Some(Box::new(move |g, sink| sink(ai, g.clone()))))
    }

    pub fn mul_const(&mut self, a: Var, c: &ArrayD<f64>) -> Var {
        let av = self.value_arc(a);
        assert_eq!(av.shape(), c.shape());
        let out = &*av * c;
        let ai = a.0;
        let c = c.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| sink(ai, g * &c))),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary_ew(
            a,
            |x| x / (1.0 + (-x).exp()),
            |x| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary_ew(a, |x| x.ln(), |x| 1.0 / x)
    }

    /// Standard normal CDF, elementwise.
    pub fn normal_cdf(&mut self, a: Var) -> Var {
        self.unary_ew(a, phi, phi_pdf)
    }

    /// `max(x, m)` with the plain subgradient (grad passes where `x >= m`).
    pub fn max_scalar(&mut self, a: Var, m: f64) -> Var {
        self.unary_ew(
            a,
            move |x| x.max(m),
            move |x| if x >= m { 1.0 } else { 0.0 },
        )
    }

    /// `max(x, m)` with a one-way gradient gate: where the input is clamped,
    /// gradient still passes if it would push the value upward. Keeps a
    /// zero-initialized scale head trainable off its floor.
    pub fn lower_bound(&mut self, a: Var, m: f64) -> Var {
        let av = self.value_arc(a);
        let out = av.mapv(|x| x.max(m));
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = g.clone();
                ndarray::Zip::from(&mut ga).and(&*av).for_each(|gg, &x| {
                    if !(x >= m || *gg < 0.0) {
                        *gg = 0.0;
                    }
                });
                sink(ai, ga);
            })),
        )
    }

    /// Round to nearest with a straight-through gradient.
    pub fn round_ste(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let out = av.mapv(f64::round);
        let ai = a.0;
        self.push(out, Some(Box::new(move |g, sink| sink(ai, g.clone()))))
    }

    /// Clamp to [0, 1] with a straight-through gradient.
    pub fn clamp01_st(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let out = av.mapv(|x| x.clamp(0.0, 1.0));
        let ai = a.0;
        self.push(out, Some(Box::new(move |g, sink| sink(ai, g.clone()))))
    }

    /// Cut the tape: same value, no gradient flows back.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let s = av.sum();
        let ai = a.0;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Some(Box::new(move |g, sink| {
                sink(ai, ArrayD::from_elem(av.raw_dim(), g[[0]]));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// `sum((a - b)^2)` as a scalar.
    pub fn mse_sum(&mut self, a: Var, b: Var) -> Var {
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        assert_eq!(av.shape(), bv.shape());
        let mut s = 0.0;
        ndarray::Zip::from(&*av).and(&*bv).for_each(|&x, &y| s += (x - y) * (x - y));
        let (ai, bi) = (a.0, b.0);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Some(Box::new(move |g, sink| {
                let g0 = g[[0]];
                let mut d = (*av).clone();
                d.zip_mut_with(&bv, |x, &y| *x = 2.0 * g0 * (*x - y));
                sink(bi, d.mapv(|x| -x));
                sink(ai, d);
            })),
        )
    }

    /// Per-row `sum((a - b)^2)` over all trailing axes: `[B, ...] -> [B]`.
    pub fn mse_rowsum(&mut self, a: Var, b: Var) -> Var {
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        assert_eq!(av.shape(), bv.shape());
        let bsz = av.shape()[0];
        let per = av.len() / bsz;
        let mut out = vec![0.0; bsz];
        let af = av.as_slice().unwrap();
        let bf = bv.as_slice().unwrap();
        for r in 0..bsz {
            let mut s = 0.0;
            for i in 0..per {
                let d = af[r * per + i] - bf[r * per + i];
                s += d * d;
            }
            out[r] = s;
        }
        let (ai, bi) = (a.0, b.0);
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[bsz]), out).unwrap(),
            Some(Box::new(move |g, sink| {
                let gf = g.as_slice().unwrap();
                let af = av.as_slice().unwrap();
                let bf = bv.as_slice().unwrap();
                let mut da = vec![0.0; af.len()];
                for r in 0..bsz {
                    for i in 0..per {
                        da[r * per + i] = 2.0 * gf[r] * (af[r * per + i] - bf[r * per + i]);
                    }
                }
                let da = ArrayD::from_shape_vec(av.raw_dim(), da).unwrap();
                sink(bi, da.mapv(|x| -x));
                sink(ai, da);
            })),
        )
    }

    /// Fully connected: `x [..., d_in] -> [..., d_out]`, weight `[d_in, d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value_arc(x);
        let wv = self.value_arc(w);
        let d_in = *xv.shape().last().expect("linear input needs an axis");
        assert_eq!(wv.shape()[0], d_in, "linear weight rows != input features");
        let d_out = wv.shape()[1];
        let rows = xv.len() / d_in;
        let x2 = reshape_clone(&xv, &[rows, d_in]);
        let w2 = to2(&wv);
        let mut y2 = to2(&x2).dot(&w2);
        let bv = b.map(|bb| self.value_arc(bb));
        if let Some(bvv) = &bv {
            assert_eq!(bvv.len(), d_out);
            let brow = bvv.as_slice().unwrap();
            for mut row in y2.rows_mut() {
                for (v, add) in row.iter_mut().zip(brow) {
                    *v += add;
                }
            }
        }
        let mut out_shape: Vec<usize> = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        let out = reshape_clone(&y2.into_dyn(), &out_shape);
        let (xi, wi) = (x.0, w.0);
        let bi = b.map(|bb| bb.0);
        let x_shape: Vec<usize> = xv.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g2 = to2(&reshape_clone(g, &[rows, g.len() / rows]));
                let x2 = to2(&reshape_clone(&xv, &[rows, d_in]));
                let w2 = to2(&wv);
                let dx = g2.dot(&w2.t());
                sink(xi, reshape_clone(&dx.into_dyn(), &x_shape));
                let dw = x2.t().dot(&g2);
                sink(wi, dw.into_dyn());
                if let Some(bidx) = bi {
                    let db = g2.sum_axis(Axis(0));
                    sink(bidx, db.into_dyn());
                }
            })),
        )
    }

    /// Batched matmul `[B, M, K] x [B, K, N] -> [B, M, N]`; with
    /// `transpose_b` the second operand is `[B, N, K]`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        assert_eq!(av.ndim(), 3);
        assert_eq!(bv.ndim(), 3);
        let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(bv.shape()[0], bs);
        let n = if transpose_b { bv.shape()[1] } else { bv.shape()[2] };
        let kb = if transpose_b { bv.shape()[2] } else { bv.shape()[1] };
        assert_eq!(k, kb, "bmm inner dims differ");
        let mut out = ArrayD::zeros(IxDyn(&[bs, m, n]));
        for i in 0..bs {
            let a2 = to2(&reshape_clone(&av.index_axis(Axis(0), i).to_owned().into_dyn(), &[m, k]));
            let braw = bv.index_axis(Axis(0), i).to_owned().into_dyn();
            let b2 = if transpose_b {
                to2(&reshape_clone(&braw, &[n, k])).reversed_axes().to_owned()
            } else {
                to2(&reshape_clone(&braw, &[k, n]))
            };
            let y = a2.dot(&b2);
            out.index_axis_mut(Axis(0), i).assign(&y);
        }
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut da = ArrayD::zeros(av.raw_dim());
                let mut db = ArrayD::zeros(bv.raw_dim());
                for i in 0..bs {
                    let g2 = to2(&reshape_clone(&g.index_axis(Axis(0), i).to_owned().into_dyn(), &[m, n]));
                    let a2 = to2(&reshape_clone(&av.index_axis(Axis(0), i).to_owned().into_dyn(), &[m, k]));
                    let braw = bv.index_axis(Axis(0), i).to_owned().into_dyn();
                    if transpose_b {
                        let b2 = to2(&reshape_clone(&braw, &[n, k]));
                        da.index_axis_mut(Axis(0), i).assign(&g2.dot(&b2));
                        db.index_axis_mut(Axis(0), i).assign(&g2.t().dot(&a2));
                    } else {
                        let b2 = to2(&reshape_clone(&braw, &[k, n]));
                        da.index_axis_mut(Axis(0), i).assign(&g2.dot(&b2.t()));
                        db.index_axis_mut(Axis(0), i).assign(&a2.t().dot(&g2));
                    }
                }
                sink(ai, da);
                sink(bi, db);
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let n = *av.shape().last().unwrap();
        let rows = av.len() / n;
        let af = av.as_slice().unwrap();
        let mut out = vec![0.0; af.len()];
        for r in 0..rows {
            let row = &af[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..n {
                let e = (row[i] - mx).exp();
                out[r * n + i] = e;
                z += e;
            }
            for i in 0..n {
                out[r * n + i] /= z;
            }
        }
        let y = ArrayD::from_shape_vec(av.raw_dim(), out).unwrap();
        let ya = Arc::new(y.clone());
        let ai = a.0;
        self.push(
            y,
            Some(Box::new(move |g, sink| {
                let gf = g.as_slice().unwrap();
                let yf = ya.as_slice().unwrap();
                let mut dx = vec![0.0; gf.len()];
                for r in 0..rows {
                    let mut dot = 0.0;
                    for i in 0..n {
                        dot += gf[r * n + i] * yf[r * n + i];
                    }
                    for i in 0..n {
                        dx[r * n + i] = yf[r * n + i] * (gf[r * n + i] - dot);
                    }
                }
                sink(ai, ArrayD::from_shape_vec(ya.raw_dim(), dx).unwrap());
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = self.value_arc(a);
        let out = reshape_clone(&av, shape);
        let ai = a.0;
        let orig: Vec<usize> = av.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, sink| sink(ai, reshape_clone(g, &orig)))),
        )
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat_ch(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let vals: Vec<Arc<ArrayD<f64>>> = xs.iter().map(|&v| self.value_arc(v)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat shapes incompatible");
        let idxs: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let chans: Vec<usize> = vals.iter().map(|v| v.shape()[1]).collect();
        self.push(
            out.as_standard_layout().into_owned(),
            Some(Box::new(move |g, sink| {
                let mut lo = 0;
                for (&idx, &c) in idxs.iter().zip(&chans) {
                    let part = g
                        .slice_axis(Axis(1), ndarray::Slice::from(lo..lo + c))
                        .to_owned();
                    sink(idx, part.as_standard_layout().into_owned());
                    lo += c;
                }
            })),
        )
    }

    /// Slice `[lo, hi)` of the last axis.
    pub fn slice_last(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let av = self.value_arc(a);
        let last = av.ndim() - 1;
        let out = av
            .slice_axis(Axis(last), ndarray::Slice::from(lo..hi))
            .to_owned()
            .as_standard_layout()
            .into_owned();
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut da = ArrayD::zeros(av.raw_dim());
                da.slice_axis_mut(Axis(last), ndarray::Slice::from(lo..hi))
                    .assign(g);
                sink(ai, da);
            })),
        )
    }

    /// `[B, C, H, W] -> [B, T, C*p*p]` with `T = (H/p)*(W/p)` tokens in
    /// raster order.
    pub fn patchify(&mut self, a: Var, p: usize) -> Var {
        let av = self.value_arc(a);
        let (bs, c, h, w) = shape4(&av);
        assert!(h % p == 0 && w % p == 0, "patch size must divide spatial dims");
        let (gh, gw) = (h / p, w / p);
        let t = gh * gw;
        let d = c * p * p;
        let af = av.as_slice().unwrap();
        let mut out = vec![0.0; bs * t * d];
        for b in 0..bs {
            for tok in 0..t {
                let (th, tw) = (tok / gw, tok % gw);
                for cc in 0..c {
                    for ph in 0..p {
                        for pw in 0..p {
                            let src = ((b * c + cc) * h + th * p + ph) * w + tw * p + pw;
                            let dst = (b * t + tok) * d + (cc * p + ph) * p + pw;
                            out[dst] = af[src];
                        }
                    }
                }
            }
        }
        let ai = a.0;
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[bs, t, d]), out).unwrap(),
            Some(Box::new(move |g, sink| {
                let gf = g.as_slice().unwrap();
                let mut da = vec![0.0; bs * c * h * w];
                for b in 0..bs {
                    for tok in 0..t {
                        let (th, tw) = (tok / gw, tok % gw);
                        for cc in 0..c {
                            for ph in 0..p {
                                for pw in 0..p {
                                    let src = ((b * c + cc) * h + th * p + ph) * w + tw * p + pw;
                                    let dst = (b * t + tok) * d + (cc * p + ph) * p + pw;
                                    da[src] = gf[dst];
                                }
                            }
                        }
                    }
                }
                sink(ai, ArrayD::from_shape_vec(IxDyn(&[bs, c, h, w]), da).unwrap());
            })),
        )
    }

    /// Inverse of [`Graph::patchify`].
    pub fn unpatchify(&mut self, a: Var, c: usize, h: usize, w: usize, p: usize) -> Var {
        let av = self.value_arc(a);
        let bs = av.shape()[0];
        let (gh, gw) = (h / p, w / p);
        let t = gh * gw;
        let d = c * p * p;
        assert_eq!(av.shape(), &[bs, t, d]);
        let af = av.as_slice().unwrap();
        let mut out = vec![0.0; bs * c * h * w];
        for b in 0..bs {
            for tok in 0..t {
                let (th, tw) = (tok / gw, tok % gw);
                for cc in 0..c {
                    for ph in 0..p {
                        for pw in 0..p {
                            let dst = ((b * c + cc) * h + th * p + ph) * w + tw * p + pw;
                            let src = (b * t + tok) * d + (cc * p + ph) * p + pw;
                            out[dst] = af[src];
                        }
                    }
                }
            }
        }
        let ai = a.0;
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[bs, c, h, w]), out).unwrap(),
            Some(Box::new(move |g, sink| {
                let gf = g.as_slice().unwrap();
                let mut da = vec![0.0; bs * t * d];
                for b in 0..bs {
                    for tok in 0..t {
                        let (th, tw) = (tok / gw, tok % gw);
                        for cc in 0..c {
                            for ph in 0..p {
                                for pw in 0..p {
                                    let dst = ((b * c + cc) * h + th * p + ph) * w + tw * p + pw;
                                    let src = (b * t + tok) * d + (cc * p + ph) * p + pw;
                                    da[src] = gf[dst];
                                }
                            }
                        }
                    }
                }
                sink(ai, ArrayD::from_shape_vec(IxDyn(&[bs, t, d]), da).unwrap());
            })),
        )
    }

    /// Average-pool `[B, C, H, W]` down to `[B, C, oh, ow]` over rectangular
    /// cells. `oh`/`ow` must divide the input dims.
    pub fn mean_pool_to(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let av = self.value_arc(a);
        let (bs, c, h, w) = shape4(&av);
        assert!(h % oh == 0 && w % ow == 0);
        let (kh, kw) = (h / oh, w / ow);
        let inv = 1.0 / (kh * kw) as f64;
        let af = av.as_slice().unwrap();
        let mut out = vec![0.0; bs * c * oh * ow];
        for b in 0..bs {
            for cc in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut s = 0.0;
                        for dy in 0..kh {
                            for dx in 0..kw {
                                s += af[((b * c + cc) * h + y * kh + dy) * w + x * kw + dx];
                            }
                        }
                        out[((b * c + cc) * oh + y) * ow + x] = s * inv;
                    }
                }
            }
        }
        let ai = a.0;
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[bs, c, oh, ow]), out).unwrap(),
            Some(Box::new(move |g, sink| {
                let gf = g.as_slice().unwrap();
                let mut da = vec![0.0; bs * c * h * w];
                for b in 0..bs {
                    for cc in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let gv = gf[((b * c + cc) * oh + y) * ow + x] * inv;
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        da[((b * c + cc) * h + y * kh + dy) * w + x * kw + dx] = gv;
                                    }
                                }
                            }
                        }
                    }
                }
                sink(ai, ArrayD::from_shape_vec(IxDyn(&[bs, c, h, w]), da).unwrap());
            })),
        )
    }

    /// Row lookup `table[K, D]` at fixed indices: `-> [idx.len(), D]`.
    pub fn select_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value_arc(table);
        assert_eq!(tv.ndim(), 2);
        let (k, d) = (tv.shape()[0], tv.shape()[1]);
        let tf = tv.as_slice().unwrap();
        let mut out = vec![0.0; idx.len() * d];
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < k, "row index out of range");
            out[r * d..(r + 1) * d].copy_from_slice(&tf[i * d..(i + 1) * d]);
        }
        let ti = table.0;
        let idx = idx.to_vec();
        let rows = idx.len();
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[rows, d]), out).unwrap(),
            Some(Box::new(move |g, sink| {
                let gf = g.as_slice().unwrap();
                let mut dt = vec![0.0; k * d];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += gf[r * d + j];
                    }
                }
                sink(ti, ArrayD::from_shape_vec(IxDyn(&[k, d]), dt).unwrap());
            })),
        )
    }

    /// Broadcast-add a per-channel bias to `[B, C, H, W]`.
    pub fn bias_add_ch(&mut self, a: Var, bias: Var) -> Var {
        let av = self.value_arc(a);
        let bv = self.value_arc(bias);
        let (bs, c, h, w) = shape4(&av);
        assert_eq!(bv.len(), c);
        let bf = bv.as_slice().unwrap().to_vec();
        let af = av.as_slice().unwrap();
        let mut out = vec![0.0; af.len()];
        for b in 0..bs {
            for cc in 0..c {
                let base = (b * c + cc) * h * w;
                for i in 0..h * w {
                    out[base + i] = af[base + i] + bf[cc];
                }
            }
        }
        let (ai, bi) = (a.0, bias.0);
        let bshape = bv.raw_dim();
        self.push(
            ArrayD::from_shape_vec(av.raw_dim(), out).unwrap(),
            Some(Box::new(move |g, sink| {
                sink(ai, g.clone());
                let gf = g.as_slice().unwrap();
                let mut db = vec![0.0; c];
                for b in 0..bs {
                    for cc in 0..c {
                        let base = (b * c + cc) * h * w;
                        for i in 0..h * w {
                            db[cc] += gf[base + i];
                        }
                    }
                }
                sink(bi, ArrayD::from_shape_vec(bshape.clone(), db).unwrap());
            })),
        )
    }

    /// Channel reduction `[B, C, H, W] -> [B, 1, H, W]`.
    pub fn sum_channels(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let (bs, c, h, w) = shape4(&av);
        let af = av.as_slice().unwrap();
        let mut out = vec![0.0; bs * h * w];
        for b in 0..bs {
            for cc in 0..c {
                let base = (b * c + cc) * h * w;
                for i in 0..h * w {
                    out[b * h * w + i] += af[base + i];
                }
            }
        }
        let ai = a.0;
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[bs, 1, h, w]), out).unwrap(),
            Some(Box::new(move |g, sink| {
                let gf = g.as_slice().unwrap();
                let mut dx = vec![0.0; bs * c * h * w];
                for b in 0..bs {
                    for cc in 0..c {
                        let base = (b * c + cc) * h * w;
                        for i in 0..h * w {
                            dx[base + i] = gf[b * h * w + i];
                        }
                    }
                }
                sink(ai, ArrayD::from_shape_vec(IxDyn(&[bs, c, h, w]), dx).unwrap());
            })),
        )
    }

    /// Feature-wise affine conditioning: `y = x * (1 + scale) + shift` with
    /// per-(batch, channel) scale/shift `[B, C]`.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = self.value_arc(x);
        let sv = self.value_arc(scale);
        let tv = self.value_arc(shift);
        let (bs, c, h, w) = shape4(&xv);
        assert_eq!(sv.shape(), &[bs, c]);
        assert_eq!(tv.shape(), &[bs, c]);
        let xf = xv.as_slice().unwrap();
        let sf = sv.as_slice().unwrap();
        let tf = tv.as_slice().unwrap();
        let mut out = vec![0.0; xf.len()];
        for b in 0..bs {
            for cc in 0..c {
                let (k, t) = (1.0 + sf[b * c + cc], tf[b * c + cc]);
                let base = (b * c + cc) * h * w;
                for i in 0..h * w {
                    out[base + i] = xf[base + i] * k + t;
                }
            }
        }
        let (xi, si, ti) = (x.0, scale.0, shift.0);
        self.push(
            ArrayD::from_shape_vec(xv.raw_dim(), out).unwrap(),
            Some(Box::new(move |g, sink| {
                let gf = g.as_slice().unwrap();
                let xf = xv.as_slice().unwrap();
                let sf = sv.as_slice().unwrap();
                let mut dx = vec![0.0; xf.len()];
                let mut ds = vec![0.0; bs * c];
                let mut dt = vec![0.0; bs * c];
                for b in 0..bs {
                    for cc in 0..c {
                        let k = 1.0 + sf[b * c + cc];
                        let base = (b * c + cc) * h * w;
                        let mut accs = 0.0;
                        let mut acct = 0.0;
                        for i in 0..h * w {
                            dx[base + i] = gf[base + i] * k;
                            accs += gf[base + i] * xf[base + i];
                            acct += gf[base + i];
                        }
                        ds[b * c + cc] = accs;
                        dt[b * c + cc] = acct;
                    }
                }
                sink(xi, ArrayD::from_shape_vec(xv.raw_dim(), dx).unwrap());
                sink(si, ArrayD::from_shape_vec(IxDyn(&[bs, c]), ds).unwrap());
                sink(ti, ArrayD::from_shape_vec(IxDyn(&[bs, c]), dt).unwrap());
            })),
        )
    }
}

pub fn shape4(a: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    assert_eq!(a.ndim(), 4, "expected [B, C, H, W], got {:?}", a.shape());
    (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3])
}
