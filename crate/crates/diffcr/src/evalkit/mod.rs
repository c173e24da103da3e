//! Quality metrics, rate-distortion curve comparison, spectral energy
//! profiling, and wall-clock measurement helpers used by the eval tooling.

mod bd;
mod msssim;

pub use bd::{bd_rate, bd_rate_pchip, RdPoint};
pub use msssim::{ms_ssim, ms_ssim_reference};

use crate::error::{DiffcrError, Result};
use crate::tensor::radial_high_mask;
use ndarray::ArrayD;
use std::time::{Duration, Instant};

/// Peak signal-to-noise ratio in dB for signals in [0, 1], capped at 100
/// so identical inputs compare cleanly instead of dividing by zero.
pub fn psnr(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(DiffcrError::shape(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(DiffcrError::invalid("psnr of empty arrays"));
    }
    let mse = (a - b).mapv(|d| d * d).mean().unwrap();
    if mse <= 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

/// Fraction of spectral energy in the high band of each `[.., H, W]` plane,
/// with the same radial mask the frequency split uses. A spectrum with
/// uniform energy per bin comes out at exactly the mask's area fraction.
pub fn high_band_energy_fraction(x: &ArrayD<f64>, cutoff: f64) -> Result<f64> {
    let shp = x.shape();
    if shp.len() < 2 {
        return Err(DiffcrError::shape("expected at least 2 trailing spatial dims"));
    }
    let (h, w) = (shp[shp.len() - 2], shp[shp.len() - 1]);
    let planes = x.len() / (h * w);
    let mask = radial_high_mask(h, w, cutoff);
    let flat = x.as_slice().ok_or_else(|| DiffcrError::shape("non-contiguous array"))?;
    let mut high = 0.0;
    let mut total = 0.0;
    for p in 0..planes {
        let spec = crate::tensor::dft2(&flat[p * h * w..(p + 1) * h * w], h, w);
        for ky in 0..h {
            for kx in 0..w {
                let e = spec[ky * w + kx].norm_sqr();
                total += e;
                high += e * mask[[ky, kx]];
            }
        }
    }
    if total <= 0.0 {
        return Err(DiffcrError::invalid("zero-energy input to spectral profile"));
    }
    Ok(high / total)
}

/// High-band energy fraction per labelled array, e.g. denoising states over
/// a timestep grid.
pub fn frequency_energy_profile(
    states: &[(usize, ArrayD<f64>)],
    cutoff: f64,
) -> Result<Vec<(usize, f64)>> {
    states
        .iter()
        .map(|(t, x)| Ok((*t, high_band_energy_fraction(x, cutoff)?)))
        .collect()
}

/// Median wall-clock time of `f` over `reps` runs after `warmups` discarded
/// warm-up runs.
pub fn median_duration<F: FnMut()>(mut f: F, warmups: usize, reps: usize) -> Duration {
    assert!(reps >= 1);
    for _ in 0..warmups {
        f();
    }
    let mut times: Vec<Duration> = (0..reps)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed()
        })
        .collect();
    times.sort();
    times[times.len() / 2]
}
