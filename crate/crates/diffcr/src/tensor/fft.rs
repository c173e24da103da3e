//! 2-D FFT ops for the frequency-domain branch.
//!
//! Complex spectra travel through the graph as real arrays with doubled
//! channels: `[B, 2C, H, W]` where channels `0..C` are real parts and
//! `C..2C` imaginary parts. rustfft normalizes neither direction, so the
//! normalized inverse divides by `H*W` here.
//!
//! Adjoints (the FFT is a real-linear map, so its backward is the conjugate
//! transpose): for the unnormalized forward DFT the adjoint is the
//! unnormalized inverse DFT of the cotangent, real part taken; for the
//! normalized inverse-and-take-real-part op the adjoint is `FFT(g) / N`.
//! Hermitian symmetrization is an orthogonal projection and therefore its
//! own adjoint.

use super::ops::shape4;
use super::{Graph, Var};
use ndarray::{ArrayD, IxDyn};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

type PlanKey = (usize, bool);

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    static PLANS: OnceLock<Mutex<HashMap<PlanKey, Arc<dyn Fft<f64>>>>> = OnceLock::new();
    let cache = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut cache = cache.lock().unwrap();
    cache
        .entry((n, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(n)
            } else {
                planner.plan_fft_forward(n)
            }
        })
        .clone()
}

/// In-place unnormalized 2-D FFT over a row-major `h x w` complex buffer.
pub(crate) fn fft2_inplace(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    let row_fft = plan(w, inverse);
    for r in 0..h {
        row_fft.process(&mut buf[r * w..(r + 1) * w]);
    }
    let col_fft = plan(h, inverse);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
}

/// Unnormalized 2-D DFT of one real plane; returns interleaved (re, im).
pub fn dft2(x: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2_inplace(&mut buf, h, w, false);
    buf
}

/// Binary high-band mask over an `h x w` spectrum: 1 where the radial
/// frequency, normalized so the axis Nyquist is 1, exceeds `cutoff`.
/// The frequency split and the spectral energy profile share this mask so
/// "high band" means the same thing everywhere.
pub fn radial_high_mask(h: usize, w: usize, cutoff: f64) -> ndarray::Array2<f64> {
    let mut m = ndarray::Array2::<f64>::zeros((h, w));
    for ky in 0..h {
        let fy = ky.min(h - ky) as f64 / h as f64;
        for kx in 0..w {
            let fx = kx.min(w - kx) as f64 / w as f64;
            let rho = 2.0 * (fy * fy + fx * fx).sqrt();
            if rho > cutoff {
                m[[ky, kx]] = 1.0;
            }
        }
    }
    m
}

fn plane_to_complex(re: &[f64], im: &[f64]) -> Vec<Complex<f64>> {
    re.iter()
        .zip(im)
        .map(|(&r, &i)| Complex::new(r, i))
        .collect()
}

impl Graph {
    /// Unnormalized forward FFT: `[B, C, H, W] -> [B, 2C, H, W]`.
    pub fn fft2(&mut self, x: Var) -> Var {
        let xv = self.value_arc(x);
        let (b, c, h, w) = shape4(&xv);
        let xf = xv.as_slice().unwrap();
        let hw = h * w;
        let mut out = vec![0.0; b * 2 * c * hw];
        for bi in 0..b {
            for ci in 0..c {
                let mut buf: Vec<Complex<f64>> = xf[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                    .iter()
                    .map(|&v| Complex::new(v, 0.0))
                    .collect();
                fft2_inplace(&mut buf, h, w, false);
                let re_base = (bi * 2 * c + ci) * hw;
                let im_base = (bi * 2 * c + c + ci) * hw;
                for i in 0..hw {
                    out[re_base + i] = buf[i].re;
                    out[im_base + i] = buf[i].im;
                }
            }
        }
        let xi = x.0;
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[b, 2 * c, h, w]), out).unwrap(),
            Some(Box::new(move |g, sink| {
                let gf = g.as_slice().unwrap();
                let mut dx = vec![0.0; b * c * hw];
                for bi in 0..b {
                    for ci in 0..c {
                        let re_base = (bi * 2 * c + ci) * hw;
                        let im_base = (bi * 2 * c + c + ci) * hw;
                        let mut buf =
                            plane_to_complex(&gf[re_base..re_base + hw], &gf[im_base..im_base + hw]);
                        fft2_inplace(&mut buf, h, w, true);
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            dx[base + i] = buf[i].re;
                        }
                    }
                }
                sink(xi, ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).unwrap());
            })),
        )
    }

    /// Normalized inverse FFT keeping the real part:
    /// `[B, 2C, H, W] -> [B, C, H, W]`.
    pub fn ifft2_real(&mut self, x: Var) -> Var {
        let xv = self.value_arc(x);
        let (b, c2, h, w) = shape4(&xv);
        assert_eq!(c2 % 2, 0, "spectrum input needs re/im channel blocks");
        let c = c2 / 2;
        let hw = h * w;
        let norm = 1.0 / hw as f64;
        let xf = xv.as_slice().unwrap();
        let mut out = vec![0.0; b * c * hw];
        for bi in 0..b {
            for ci in 0..c {
                let re_base = (bi * c2 + ci) * hw;
                let im_base = (bi * c2 + c + ci) * hw;
                let mut buf =
                    plane_to_complex(&xf[re_base..re_base + hw], &xf[im_base..im_base + hw]);
                fft2_inplace(&mut buf, h, w, true);
                let base = (bi * c + ci) * hw;
                for i in 0..hw {
                    out[base + i] = buf[i].re * norm;
                }
            }
        }
        let xi = x.0;
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).unwrap(),
            Some(Box::new(move |g, sink| {
                let gf = g.as_slice().unwrap();
                let mut dx = vec![0.0; b * c2 * hw];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let mut buf: Vec<Complex<f64>> = gf[base..base + hw]
                            .iter()
                            .map(|&v| Complex::new(v, 0.0))
                            .collect();
                        fft2_inplace(&mut buf, h, w, false);
                        let re_base = (bi * c2 + ci) * hw;
                        let im_base = (bi * c2 + c + ci) * hw;
                        for i in 0..hw {
                            dx[re_base + i] = buf[i].re * norm;
                            dx[im_base + i] = buf[i].im * norm;
                        }
                    }
                }
                sink(xi, ArrayD::from_shape_vec(IxDyn(&[b, c2, h, w]), dx).unwrap());
            })),
        )
    }

    /// Project a spectrum onto the Hermitian-symmetric subspace:
    /// `X'(k) = (X(k) + conj(X(-k))) / 2`. After this, the normalized
    /// inverse FFT is exactly real. The projection is orthogonal, so the
    /// backward pass applies the same map to the cotangent.
    pub fn hermitize(&mut self, x: Var) -> Var {
        let xv = self.value_arc(x);
        let (b, c2, h, w) = shape4(&xv);
        assert_eq!(c2 % 2, 0);
        let c = c2 / 2;
        let hw = h * w;
        let project = move |src: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; b * c2 * hw];
            for bi in 0..b {
                for ci in 0..c {
                    let re_base = (bi * c2 + ci) * hw;
                    let im_base = (bi * c2 + c + ci) * hw;
                    for u in 0..h {
                        for v in 0..w {
                            let k = u * w + v;
                            let km = ((h - u) % h) * w + (w - v) % w;
                            out[re_base + k] = 0.5 * (src[re_base + k] + src[re_base + km]);
                            out[im_base + k] = 0.5 * (src[im_base + k] - src[im_base + km]);
                        }
                    }
                }
            }
            out
        };
        let out = project(xv.as_slice().unwrap());
        let xi = x.0;
        let dims = xv.raw_dim();
        self.push(
            ArrayD::from_shape_vec(dims.clone(), out).unwrap(),
            Some(Box::new(move |g, sink| {
                let dg = project(g.as_slice().unwrap());
                sink(xi, ArrayD::from_shape_vec(dims.clone(), dg).unwrap());
            })),
        )
    }
}
