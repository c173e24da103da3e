//! Noise schedule and forward/reverse process algebra.
//!
//! Timesteps are zero-based: `t` ranges over `0..T`, `alpha_bar(t)` is the
//! cumulative product of `1 - beta_j` for `j <= t`, so `t = 0` is the
//! cleanest noised state (one beta applied) and `t = T - 1` the noisiest.
//! The one-based convention common in the diffusion literature maps onto
//! this as `t_here = t_onebased - 1`; `alpha_bar_prev(t)` covers the
//! `alpha_bar(t-1)` terms that convention uses, returning exactly 1 at
//! `t = 0`. Reverse steps are deterministic (DDIM with eta = 0), which both
//! decoding paths and the consistency target rely on.

use crate::config::{ModelConfig, ScheduleKind};
use crate::tensor::{Graph, Var};
use ndarray::ArrayD;

const ALPHA_BAR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(t_max >= 1);
        let betas: Vec<f64> = if t_max == 1 {
            vec![beta_start]
        } else {
            (0..t_max)
                .map(|i| {
                    let u = i as f64 / (t_max - 1) as f64;
                    beta_start * (1.0 - u) + beta_end * u
                })
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Squared-cosine schedule; betas clipped to 0.999.
    pub fn cosine(t_max: usize) -> Self {
        assert!(t_max >= 1);
        let f = |u: f64| ((u + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let betas: Vec<f64> = (1..=t_max)
            .map(|t| {
                let ab_t = f(t as f64 / t_max as f64) / f0;
                let ab_prev = f((t - 1) as f64 / t_max as f64) / f0;
                (1.0 - ab_t / ab_prev).min(0.999)
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            assert!((0.0..1.0).contains(&b), "beta out of range: {b}");
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        NoiseSchedule { betas, alpha_bar }
    }

    pub fn from_config(cfg: &ModelConfig) -> Self {
        match cfg.schedule {
            ScheduleKind::Linear => Self::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end),
            ScheduleKind::Cosine => Self::cosine(cfg.timesteps),
        }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Cumulative signal fraction through step `t` (zero-based).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `alpha_bar` one step earlier; exactly 1 at `t = 0`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Signal/noise mixing coefficients at `t`: (sqrt(ab), sqrt(1 - ab)).
    pub fn coeffs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Forward process on plain arrays: `z_t = sqrt(ab) z0 + sqrt(1-ab) eps`.
    pub fn add_noise(&self, z0: &ArrayD<f64>, eps: &ArrayD<f64>, t: usize) -> ArrayD<f64> {
        let (a, s) = self.coeffs(t);
        z0 * a + eps * s
    }

    /// Graph version of [`NoiseSchedule::add_noise`].
    pub fn add_noise_g(&self, g: &mut Graph, z0: Var, eps: Var, t: usize) -> Var {
        let (a, s) = self.coeffs(t);
        let scaled = g.affine(z0, a, 0.0);
        g.add_scaled(scaled, eps, s)
    }

    /// Invert the forward process given a noise estimate. `alpha_bar` is
    /// floored so late timesteps cannot blow the division up.
    pub fn predict_z0_from_eps(&self, z_t: &ArrayD<f64>, eps: &ArrayD<f64>, t: usize) -> ArrayD<f64> {
        let ab = self.alpha_bar(t).max(ALPHA_BAR_FLOOR);
        let s = (1.0 - ab).sqrt();
        (z_t - &(eps * s)) / ab.sqrt()
    }

    /// Graph version of [`NoiseSchedule::predict_z0_from_eps`].
    pub fn predict_z0_from_eps_g(&self, g: &mut Graph, z_t: Var, eps: Var, t: usize) -> Var {
        let ab = self.alpha_bar(t).max(ALPHA_BAR_FLOOR);
        let s = (1.0 - ab).sqrt();
        let num = g.add_scaled(z_t, eps, -s);
        g.affine(num, 1.0 / ab.sqrt(), 0.0)
    }

    /// Deterministic reverse jump `t_high -> t_low` reusing the same noise
    /// estimate (DDIM, eta = 0). Equal endpoints return the input unchanged.
    pub fn ddim_step(
        &self,
        z_t: &ArrayD<f64>,
        eps: &ArrayD<f64>,
        t_high: usize,
        t_low: usize,
    ) -> ArrayD<f64> {
        assert!(t_low <= t_high, "ddim must move toward t = 0");
        if t_low == t_high {
            return z_t.clone();
        }
        let z0 = self.predict_z0_from_eps(z_t, eps, t_high);
        let (a, s) = self.coeffs(t_low);
        z0 * a + eps * s
    }

    /// Graph version of [`NoiseSchedule::ddim_step`].
    pub fn ddim_step_g(&self, g: &mut Graph, z_t: Var, eps: Var, t_high: usize, t_low: usize) -> Var {
        assert!(t_low <= t_high);
        if t_low == t_high {
            return z_t;
        }
        let z0 = self.predict_z0_from_eps_g(g, z_t, eps, t_high);
        let (a, s) = self.coeffs(t_low);
        let scaled = g.affine(z0, a, 0.0);
        g.add_scaled(scaled, eps, s)
    }

    /// SNR-difference weight for the frequency loss:
    /// `w(t) = (snr(t-1) - snr(t)) / 2` with `snr = ab / (1 - ab)`.
    /// Needs `t >= 1` so the previous step exists with `alpha_bar < 1`.
    pub fn snr_weight(&self, t: usize) -> f64 {
        assert!(t >= 1, "snr_weight needs t >= 1, got {t}");
        snr_weight_from_pair(self.alpha_bar_prev(t), self.alpha_bar(t))
    }
}

/// The weight formula on raw alpha-bar values, exposed for direct checks.
pub fn snr_weight_from_pair(ab_prev: f64, ab_t: f64) -> f64 {
    0.5 * (ab_prev / (1.0 - ab_prev) - ab_t / (1.0 - ab_t))
}
