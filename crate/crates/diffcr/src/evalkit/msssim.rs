//! Multi-scale SSIM with the standard five-scale weighting.
//!
//! Statistics come from an 11-tap Gaussian window (sigma 1.5) applied in
//! valid mode; scales are linked by 2x2 mean pooling with truncation of odd
//! edges. Images too small for all five scales fall back to however many
//! scales fit (window size 11 at the coarsest used scale), renormalizing
//! the truncated weight prefix to sum to one; at the full five scales the
//! standard weights are used as published.
//!
//! `ms_ssim` is the production path (separable filtering); `ms_ssim_reference`
//! recomputes the same definition with direct 2-D convolution loops, kept
//! deliberately independent so the two can cross-check each other.

use crate::error::{DiffcrError, Result};
use ndarray::{Array2, ArrayD};

pub(crate) const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WIN: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn kernel1d() -> [f64; WIN] {
    let mut k = [0.0; WIN];
    let c = (WIN / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn blur_valid(x: &Array2<f64>) -> Array2<f64> {
    let k = kernel1d();
    let (h, w) = x.dim();
    debug_assert!(h >= WIN && w >= WIN);
    let mut rows = Array2::<f64>::zeros((h, w - WIN + 1));
    for i in 0..h {
        for j in 0..w - WIN + 1 {
            let mut acc = 0.0;
            for (d, &kv) in k.iter().enumerate() {
                acc += kv * x[[i, j + d]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - WIN + 1, w - WIN + 1));
    for i in 0..h - WIN + 1 {
        for j in 0..w - WIN + 1 {
            let mut acc = 0.0;
            for (d, &kv) in k.iter().enumerate() {
                acc += kv * rows[[i + d, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn downsample2(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[[i, j]] = 0.25
                * (x[[2 * i, 2 * j]]
                    + x[[2 * i, 2 * j + 1]]
                    + x[[2 * i + 1, 2 * j]]
                    + x[[2 * i + 1, 2 * j + 1]]);
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term of one scale.
fn scale_scores(x: &Array2<f64>, y: &Array2<f64>) -> (f64, f64) {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mu_x = blur_valid(x);
    let mu_y = blur_valid(y);
    let xx = blur_valid(&(x * x));
    let yy = blur_valid(&(y * y));
    let xy = blur_valid(&(x * y));
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    let n = mu_x.len() as f64;
    for ((&mx, &my), ((&sxx, &syy), &sxy)) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(xx.iter().zip(yy.iter()).zip(xy.iter()))
    {
        let vx = sxx - mx * mx;
        let vy = syy - my * my;
        let cov = sxy - mx * my;
        let cs = (2.0 * cov + c2) / (vx + vy + c2);
        let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        ssim_sum += lum * cs;
        cs_sum += cs;
    }
    (ssim_sum / n, cs_sum / n)
}

fn usable_scales(h: usize, w: usize) -> usize {
    let mut scales = 0;
    let (mut hh, mut ww) = (h, w);
    while scales < 5 && hh >= WIN && ww >= WIN {
        scales += 1;
        hh /= 2;
        ww /= 2;
    }
    scales
}

fn scale_weights(scales: usize) -> Vec<f64> {
    if scales == 5 {
        WEIGHTS.to_vec()
    } else {
        let sum: f64 = WEIGHTS[..scales].iter().sum();
        WEIGHTS[..scales].iter().map(|w| w / sum).collect()
    }
}

fn check_pair(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(DiffcrError::shape(format!(
            "ms-ssim shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let shp = a.shape();
    if shp.len() != 3 {
        return Err(DiffcrError::shape("ms-ssim expects [C, H, W] images"));
    }
    let (c, h, w) = (shp[0], shp[1], shp[2]);
    if usable_scales(h, w) == 0 {
        return Err(DiffcrError::invalid(format!(
            "image {h}x{w} smaller than the {WIN}x{WIN} analysis window"
        )));
    }
    Ok((c, h, w))
}

/// Multi-scale SSIM of two `[C, H, W]` images in [0, 1], averaged over
/// channels. Identical inputs score exactly 1.
pub fn ms_ssim(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    let (c, h, w) = check_pair(a, b)?;
    let scales = usable_scales(h, w);
    let weights = scale_weights(scales);
    let mut total = 0.0;
    for ch in 0..c {
        let mut x = a
            .index_axis(ndarray::Axis(0), ch)
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut y = b
            .index_axis(ndarray::Axis(0), ch)
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut score = 1.0;
        for (s, &wt) in weights.iter().enumerate() {
            let (ssim_m, cs_m) = scale_scores(&x, &y);
            let term = if s + 1 == scales { ssim_m } else { cs_m };
            score *= term.max(0.0).powf(wt);
            if s + 1 < scales {
                x = downsample2(&x);
                y = downsample2(&y);
            }
        }
        total += score;
    }
    Ok(total / c as f64)
}

/// Independent re-computation of [`ms_ssim`] using a direct 2-D window
/// sweep rather than separable filtering. Exists to cross-check the
/// production path; keep the two implementations separate.
pub fn ms_ssim_reference(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    let (c, h, w) = check_pair(a, b)?;
    let scales = usable_scales(h, w);
    let weights = scale_weights(scales);

    // 2-D window built directly as the outer product of the 1-D taps
    let k1d = kernel1d();
    let mut win = [[0.0f64; WIN]; WIN];
    for i in 0..WIN {
        for j in 0..WIN {
            win[i][j] = k1d[i] * k1d[j];
        }
    }
    let c1 = K1 * K1;
    let c2 = K2 * K2;

    let stats = |x: &Array2<f64>, y: &Array2<f64>| -> (f64, f64) {
        let (hh, ww) = x.dim();
        let mut ssim_sum = 0.0;
        let mut cs_sum = 0.0;
        let mut n = 0.0;
        for i in 0..hh - WIN + 1 {
            for j in 0..ww - WIN + 1 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (di, wrow) in win.iter().enumerate() {
                    for (dj, &wv) in wrow.iter().enumerate() {
                        let xv = x[[i + di, j + dj]];
                        let yv = y[[i + di, j + dj]];
                        mx += wv * xv;
                        my += wv * yv;
                        sxx += wv * xv * xv;
                        syy += wv * yv * yv;
                        sxy += wv * xv * yv;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                let cs = (2.0 * cov + c2) / (vx + vy + c2);
                let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                ssim_sum += lum * cs;
                cs_sum += cs;
                n += 1.0;
            }
        }
        (ssim_sum / n, cs_sum / n)
    };

    let pool = |x: &Array2<f64>| -> Array2<f64> {
        let (hh, ww) = x.dim();
        Array2::from_shape_fn((hh / 2, ww / 2), |(i, j)| {
            (x[[2 * i, 2 * j]] + x[[2 * i, 2 * j + 1]] + x[[2 * i + 1, 2 * j]]
                + x[[2 * i + 1, 2 * j + 1]])
                / 4.0
        })
    };

    let mut total = 0.0;
    for ch in 0..c {
        let mut x = a
            .index_axis(ndarray::Axis(0), ch)
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut y = b
            .index_axis(ndarray::Axis(0), ch)
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut score = 1.0;
        for (s, &wt) in weights.iter().enumerate() {
            let (ssim_m, cs_m) = stats(&x, &y);
            let term = if s + 1 == scales { ssim_m } else { cs_m };
            score *= term.max(0.0).powf(wt);
            if s + 1 < scales {
                x = pool(&x);
                y = pool(&y);
            }
        }
        total += score;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::IxDyn;

    #[test]
    fn identical_images_score_one() {
        let mut r = rng::stream(41, "msssim-id");
        let x = rng::uniform_array(&mut r, &[3, 180, 180], 0.0, 1.0);
        assert_eq!(ms_ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn noise_lowers_the_score() {
        let mut r = rng::stream(42, "msssim-noise");
        let x = rng::uniform_array(&mut r, &[1, 180, 180], 0.2, 0.8);
        let n = rng::normal_array(&mut r, &[1, 180, 180]);
        let y = (&x + &(n * 0.08)).mapv(|v: f64| v.clamp(0.0, 1.0));
        let s = ms_ssim(&x, &y).unwrap();
        assert!(s < 0.999 && s > 0.3, "got {s}");
    }

    #[test]
    fn blur_hurts_less_than_heavy_noise() {
        let mut r = rng::stream(43, "msssim-order");
        let x = rng::uniform_array(&mut r, &[1, 176, 176], 0.0, 1.0);
        let heavy = (&x + &(rng::normal_array(&mut r, &[1, 176, 176]) * 0.5))
            .mapv(|v: f64| v.clamp(0.0, 1.0));
        let light = (&x + &(rng::normal_array(&mut r, &[1, 176, 176]) * 0.02))
            .mapv(|v: f64| v.clamp(0.0, 1.0));
        let s_heavy = ms_ssim(&x, &heavy).unwrap();
        let s_light = ms_ssim(&x, &light).unwrap();
        assert!(s_light > s_heavy);
    }

    #[test]
    fn small_images_use_fewer_scales() {
        let mut r = rng::stream(44, "msssim-small");
        // 64x64 supports three scales (64, 32, 16); the fourth would be 8 < 11
        let x = rng::uniform_array(&mut r, &[1, 64, 64], 0.0, 1.0);
        let y = (&x + 0.01).mapv(|v: f64| v.clamp(0.0, 1.0));
        let s = ms_ssim(&x, &y).unwrap();
        assert!((0.0..=1.0).contains(&s));
        assert_eq!(usable_scales(64, 64), 3);
        // below the window size there is nothing to measure
        let tiny = ArrayD::zeros(IxDyn(&[1, 8, 8]));
        assert!(ms_ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn production_and_reference_agree_at_full_scale() {
        let mut r = rng::stream(45, "msssim-xcheck");
        let x = rng::uniform_array(&mut r, &[1, 256, 256], 0.0, 1.0);
        let noise = rng::normal_array(&mut r, &[1, 256, 256]);
        let y = (&x + &(noise * 0.05)).mapv(|v: f64| v.clamp(0.0, 1.0));
        let s1 = ms_ssim(&x, &y).unwrap();
        let s2 = ms_ssim_reference(&x, &y).unwrap();
        assert!((s1 - s2).abs() < 1e-9, "{s1} vs {s2}");
        assert!(s1 < 1.0);
    }
}
