//! 2-D convolution via im2col plus nearest-neighbour upsampling.
//!
//! The batch loop runs through [`crate::par`], so it parallelizes when the
//! `parallel` feature is on; items are independent and collected in order,
//! keeping results bitwise identical either way. Backward recomputes im2col
//! instead of caching it, trading a little time for memory.

use super::ops::shape4;
use super::{Graph, Var};
use crate::par;
use ndarray::{Array2, ArrayD, IxDyn};

struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn im2col(x: &[f64], d: &ConvDims, batch: usize) -> Array2<f64> {
    let mut cols = Array2::zeros((d.c * d.kh * d.kw, d.ho * d.wo));
    let base = batch * d.c * d.h * d.w;
    for c in 0..d.c {
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let row = (c * d.kh + kh) * d.kw + kw;
                for ho in 0..d.ho {
                    let hy = (ho * d.stride + kh) as isize - d.pad as isize;
                    if hy < 0 || hy >= d.h as isize {
                        continue;
                    }
                    for wo in 0..d.wo {
                        let wx = (wo * d.stride + kw) as isize - d.pad as isize;
                        if wx < 0 || wx >= d.w as isize {
                            continue;
                        }
                        cols[[row, ho * d.wo + wo]] =
                            x[base + (c * d.h + hy as usize) * d.w + wx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, d: &ConvDims) -> Vec<f64> {
    let mut img = vec![0.0; d.c * d.h * d.w];
    for c in 0..d.c {
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let row = (c * d.kh + kh) * d.kw + kw;
                for ho in 0..d.ho {
                    let hy = (ho * d.stride + kh) as isize - d.pad as isize;
                    if hy < 0 || hy >= d.h as isize {
                        continue;
                    }
                    for wo in 0..d.wo {
                        let wx = (wo * d.stride + kw) as isize - d.pad as isize;
                        if wx < 0 || wx >= d.w as isize {
                            continue;
                        }
                        img[(c * d.h + hy as usize) * d.w + wx as usize] +=
                            cols[[row, ho * d.wo + wo]];
                    }
                }
            }
        }
    }
    img
}

impl Graph {
    /// `x [B, C, H, W]` * `w [O, C, KH, KW]` with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value_arc(x);
        let wv = self.value_arc(w);
        let (b, c, h, wd) = shape4(&xv);
        assert_eq!(wv.ndim(), 4);
        let (o, wc, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(wc, c, "conv weight channels != input channels");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let dims = ConvDims { c, h, w: wd, kh, kw, stride, pad, ho, wo };
        let wmat = Array2::from_shape_vec((o, c * kh * kw), wv.iter().cloned().collect()).unwrap();
        let bv = bias.map(|bb| self.value_arc(bb));
        if let Some(bvv) = &bv {
            assert_eq!(bvv.len(), o);
        }
        let xf = xv.as_slice().unwrap();
        let per_out = o * ho * wo;
        let outs: Vec<Vec<f64>> = par::map_indexed(b, |bi| {
            let cols = im2col(xf, &dims, bi);
            let y = wmat.dot(&cols);
            let mut flat = y.into_raw_vec_and_offset().0;
            if let Some(bvv) = &bv {
                let bs = bvv.as_slice().unwrap();
                for oc in 0..o {
                    for i in 0..ho * wo {
                        flat[oc * ho * wo + i] += bs[oc];
                    }
                }
            }
            flat
        });
        let mut out = Vec::with_capacity(b * per_out);
        for v in outs {
            out.extend_from_slice(&v);
        }
        let (xi, wi) = (x.0, w.0);
        let bias_idx = bias.map(|bb| bb.0);
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[b, o, ho, wo]), out).unwrap(),
            Some(Box::new(move |g, sink| {
                let gf = g.as_slice().unwrap();
                let xf = xv.as_slice().unwrap();
                let wmat =
                    Array2::from_shape_vec((o, c * kh * kw), wv.iter().cloned().collect()).unwrap();
                let parts: Vec<(Vec<f64>, Array2<f64>)> = par::map_indexed(b, |bi| {
                    let gmat = Array2::from_shape_vec(
                        (o, ho * wo),
                        gf[bi * per_out..(bi + 1) * per_out].to_vec(),
                    )
                    .unwrap();
                    let cols = im2col(xf, &dims, bi);
                    let dw = gmat.dot(&cols.t());
                    let dcols = wmat.t().dot(&gmat);
                    (col2im(&dcols, &dims), dw)
                });
                let mut dx = Vec::with_capacity(b * c * h * wd);
                let mut dw_total = Array2::<f64>::zeros((o, c * kh * kw));
                for (dxb, dwb) in parts {
                    dx.extend_from_slice(&dxb);
                    dw_total += &dwb;
                }
                sink(xi, ArrayD::from_shape_vec(IxDyn(&[b, c, h, wd]), dx).unwrap());
                sink(
                    wi,
                    ArrayD::from_shape_vec(
                        IxDyn(&[o, c, kh, kw]),
                        dw_total.into_raw_vec_and_offset().0,
                    )
                    .unwrap(),
                );
                if let Some(bidx) = bias_idx {
                    let mut db = vec![0.0; o];
                    for bi in 0..b {
                        for oc in 0..o {
                            for i in 0..ho * wo {
                                db[oc] += gf[bi * per_out + oc * ho * wo + i];
                            }
                        }
                    }
                    sink(bidx, ArrayD::from_shape_vec(IxDyn(&[o]), db).unwrap());
                }
            })),
        )
    }

    /// Nearest-neighbour 2x upsample; backward is a 2x2 sum pool.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = self.value_arc(x);
        let (b, c, h, w) = shape4(&xv);
        let xf = xv.as_slice().unwrap();
        let (h2, w2) = (h * 2, w * 2);
        let mut out = vec![0.0; b * c * h2 * w2];
        for bc in 0..b * c {
            for y in 0..h2 {
                for x2 in 0..w2 {
                    out[(bc * h2 + y) * w2 + x2] = xf[(bc * h + y / 2) * w + x2 / 2];
                }
            }
        }
        let xi = x.0;
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[b, c, h2, w2]), out).unwrap(),
            Some(Box::new(move |g, sink| {
                let gf = g.as_slice().unwrap();
                let mut dx = vec![0.0; b * c * h * w];
                for bc in 0..b * c {
                    for y in 0..h2 {
                        for x2 in 0..w2 {
                            dx[(bc * h + y / 2) * w + x2 / 2] += gf[(bc * h2 + y) * w2 + x2];
                        }
                    }
                }
                sink(xi, ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).unwrap());
            })),
        )
    }
}
