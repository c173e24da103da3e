//! Frequency-aware skip estimation: the consistency head that makes
//! two-step decoding work.
//!
//! The head learns a map from any point on a denoising trajectory straight
//! to its clean endpoint. It is parameterized the consistency-model way,
//! `f(z_t, t) = c_skip(t) * z_t + c_out(t) * F(z0_hat, c_hat, t)`, where
//! `z0_hat` is the one-shot clean estimate implied by the denoiser's noise
//! prediction. The coefficients satisfy `c_skip = 1, c_out = 0` at the
//! clean boundary, so `f` is exactly the identity there no matter what `F`
//! computes, and `F`'s final convolution starts at zero so the whole head
//! is initially a pure skip.
//!
//! `F` refines `z0_hat` against the decoded latent in the frequency
//! domain: both are transformed with an FFT, split into low and high bands
//! by a shared radial mask, and each band runs cross-attention with
//! queries from the estimate and keys/values from the decoded latent. The
//! attended spectrum is blended with the decoded latent's band by a
//! timestep ramp (early, noisy steps trust the decoded latent more), the
//! bands are summed, projected back to Hermitian symmetry, and inverted to
//! a real map that a small fusion stack turns into the refinement.
//!
//! A spatial-attention fallback (no FFT, no bands, no timestep ramp)
//! exists for ablation; it swaps in at construction time.

use crate::config::ModelConfig;
use crate::tensor::nn::{Conv2d, FilmHead, Linear, TimeMlp};
use crate::tensor::{radial_high_mask, shape4, Graph, ParamGroup, ParamStore, Var};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Spectral patch size for attention tokens.
const PATCH: usize = 8;
/// Attention width.
const D_MODEL: usize = 64;

/// Complementary radial band mask over a `[b, c, h, w]` spectrum. Bins with
/// normalized radial frequency above `cutoff` (axis Nyquist is 1) belong to
/// the high band; the two masks sum to one everywhere.
fn band_mask(b: usize, c: usize, h: usize, w: usize, cutoff: f64, high: bool) -> ArrayD<f64> {
    let m = radial_high_mask(h, w, cutoff);
    ArrayD::from_shape_fn(IxDyn(&[b, c, h, w]), |ix| {
        let v = m[[ix[2], ix[3]]];
        if high {
            v
        } else {
            1.0 - v
        }
    })
}

/// Split a real `[B, C, H, W]` map into complementary low and high
/// frequency bands at `cutoff`. The masks partition the spectrum, so the
/// two bands sum back to the input, and a pure tone lands entirely in the
/// band its radial frequency selects.
pub fn freq_split(x: &ArrayD<f64>, cutoff: f64) -> (ArrayD<f64>, ArrayD<f64>) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let xs = g.fft2(xv);
    let (b, c2, h, w) = shape4(g.value(xs));
    let lo_mask = band_mask(b, c2, h, w, cutoff, false);
    let hi_mask = band_mask(b, c2, h, w, cutoff, true);
    let lo_s = g.mul_const(xs, &lo_mask);
    let hi_s = g.mul_const(xs, &hi_mask);
    // the mask is symmetric under frequency negation, so each band of a
    // real signal stays Hermitian and inverts to a real map
    let lo = g.ifft2_real(lo_s);
    let hi = g.ifft2_real(hi_s);
    (g.value(lo).to_owned(), g.value(hi).to_owned())
}

/// Timestep ramp blending an attended band with the decoded latent's band:
/// weight `1 - t / t_max` on the attention output, the rest on the decoded
/// band. At `t = t_max` this returns the decoded band untouched, at `t = 0`
/// the attention output untouched; in between, noisier steps trust the
/// decoded latent more.
pub fn temporal_mix(g: &mut Graph, attended: Var, decoded: Var, t: usize, t_max: usize) -> Var {
    let m = 1.0 - t as f64 / t_max as f64;
    let am = g.affine(attended, m, 0.0);
    let dm = g.affine(decoded, 1.0 - m, 0.0);
    g.add(am, dm)
}

/// Cross-attention over token sequences: queries from `x`, keys and values
/// from `c`, output projected back to the token dimension.
#[derive(Clone, Debug)]
struct TokenAttn {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl TokenAttn {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        token_dim: usize,
    ) -> Self {
        TokenAttn {
            q: Linear::new(store, rng, &format!("{name}.q"), group, token_dim, D_MODEL),
            k: Linear::new(store, rng, &format!("{name}.k"), group, token_dim, D_MODEL),
            v: Linear::new(store, rng, &format!("{name}.v"), group, token_dim, D_MODEL),
            out: Linear::new(store, rng, &format!("{name}.out"), group, D_MODEL, token_dim),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x_tok: Var, c_tok: Var) -> Var {
        let q = self.q.apply(g, store, x_tok);
        let k = self.k.apply(g, store, c_tok);
        let v = self.v.apply(g, store, c_tok);
        let scores = g.bmm(q, k, true);
        let scaled = g.affine(scores, 1.0 / (D_MODEL as f64).sqrt(), 0.0);
        let attn = g.softmax_last(scaled);
        let mixed = g.bmm(attn, v, false);
        self.out.apply(g, store, mixed)
    }
}

/// Frequency-domain attention over low and high radial bands.
#[derive(Clone, Debug)]
struct FdaBlock {
    low: TokenAttn,
    high: TokenAttn,
}

/// Spatial-attention fallback used by the no-FDA ablation.
#[derive(Clone, Debug)]
struct SpatialBlock {
    attn: TokenAttn,
}

#[derive(Clone, Debug)]
enum Mixer {
    Frequency(FdaBlock),
    Spatial(SpatialBlock),
}

#[derive(Clone, Debug)]
pub struct Fase {
    mixer: Mixer,
    time: TimeMlp,
    fuse0: Conv2d,
    film: FilmHead,
    fuse1: Conv2d,
    fuse2: Conv2d,
    pub group: ParamGroup,
    t_max: usize,
    sigma_data: f64,
    t_min: f64,
    cutoff_rho: f64,
    mask_both_bands: bool,
}

impl Fase {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
        group: ParamGroup,
    ) -> Self {
        let c = cfg.ae_channels;
        let prefix = match group {
            ParamGroup::FaseEma => "fase_ema",
            _ => "fase",
        };
        let mixer = if cfg.use_fda {
            // spectra carry re/im blocks, doubling the channel count
            let token_dim = 2 * c * PATCH * PATCH;
            Mixer::Frequency(FdaBlock {
                low: TokenAttn::new(store, rng, &format!("{prefix}.low"), group, token_dim),
                high: TokenAttn::new(store, rng, &format!("{prefix}.high"), group, token_dim),
            })
        } else {
            let token_dim = c * PATCH * PATCH;
            Mixer::Spatial(SpatialBlock {
                attn: TokenAttn::new(store, rng, &format!("{prefix}.spatial"), group, token_dim),
            })
        };
        let hidden = cfg.fase_hidden;
        Fase {
            mixer,
            time: TimeMlp::new(store, rng, &format!("{prefix}.time"), group, cfg.time_embed_dim),
            fuse0: Conv2d::new(store, rng, &format!("{prefix}.fuse0"), group, 3 * c, hidden, 3, 1),
            film: FilmHead::new(store, rng, &format!("{prefix}.film"), group, cfg.time_embed_dim, hidden),
            fuse1: Conv2d::new(store, rng, &format!("{prefix}.fuse1"), group, hidden, hidden, 3, 1),
            fuse2: Conv2d::new_zero(store, &format!("{prefix}.fuse2"), group, hidden, c, 3, 1),
            group,
            t_max: cfg.timesteps,
            sigma_data: cfg.sigma_data,
            t_min: cfg.t_min,
            cutoff_rho: cfg.cutoff_rho,
            mask_both_bands: cfg.mask_both_bands,
        }
    }

    /// Skip and output coefficients at timestep `t`. The timestep is
    /// mapped to a pseudo noise scale `t * s` with `s = 10 / T`, giving
    /// `c_skip(0) = 1` and `c_out(0) = 0` exactly, and `c_skip` below 0.01
    /// by the far end of the schedule.
    pub fn boundary_coeffs(&self, t: usize) -> (f64, f64) {
        let s = 10.0 / self.t_max as f64;
        let td = (t as f64 - self.t_min) * s;
        let sd2 = self.sigma_data * self.sigma_data;
        let c_skip = sd2 / (td * td + sd2);
        let c_out = td / (sd2 + (t as f64 * s).powi(2)).sqrt();
        (c_skip, c_out)
    }

    fn band_path(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        attn: &TokenAttn,
        x_band: Var,
        c_band: Var,
        mix_t: Option<usize>,
    ) -> Var {
        let (_, c2, h, w) = shape4(g.value(x_band));
        let x_tok = g.patchify(x_band, PATCH);
        let c_tok = g.patchify(c_band, PATCH);
        let a_tok = attn.apply(g, store, x_tok, c_tok);
        let a = g.unpatchify(a_tok, c2, h, w, PATCH);
        match mix_t {
            Some(t) => temporal_mix(g, a, c_band, t, self.t_max),
            None => a,
        }
    }

    /// Cross-attended estimate map, same shape as `z0_hat`. In frequency
    /// mode with the ramp on both bands, `t = t_max` returns `c_hat`
    /// exactly: every band path passes the decoded band through untouched
    /// and the bands reassemble its spectrum.
    pub fn mix(&self, g: &mut Graph, store: &ParamStore, z0_hat: Var, c_hat: Var, t: usize) -> Var {
        match &self.mixer {
            Mixer::Frequency(fda) => {
                let xs = g.fft2(z0_hat);
                let cs = g.fft2(c_hat);
                let (b, c2, h, w) = shape4(g.value(xs));

                let high = band_mask(b, c2, h, w, self.cutoff_rho, true);
                let low = band_mask(b, c2, h, w, self.cutoff_rho, false);
                let x_lo = g.mul_const(xs, &low);
                let c_lo = g.mul_const(cs, &low);
                let x_hi = g.mul_const(xs, &high);
                let c_hi = g.mul_const(cs, &high);

                let low_mix = self.mask_both_bands.then_some(t);
                let lo = self.band_path(g, store, &fda.low, x_lo, c_lo, low_mix);
                let hi = self.band_path(g, store, &fda.high, x_hi, c_hi, Some(t));

                let sum = g.add(lo, hi);
                let herm = g.hermitize(sum);
                g.ifft2_real(herm)
            }
            Mixer::Spatial(sp) => self.band_path(g, store, &sp.attn, z0_hat, c_hat, None),
        }
    }

    /// The refinement network `F(z0_hat, c_hat, t)`. Starts identically
    /// zero thanks to the zero-initialized output convolution.
    pub fn refine(&self, g: &mut Graph, store: &ParamStore, z0_hat: Var, c_hat: Var, t: usize) -> Var {
        let (b, _, _, _) = shape4(g.value(z0_hat));
        let x_f = self.mix(g, store, z0_hat, c_hat, t);
        let cat = g.concat_ch(&[x_f, z0_hat, c_hat]);
        let temb = self.time.apply(g, store, t as f64, b);
        let h = self.fuse0.apply(g, store, cat);
        let h = self.film.apply(g, store, h, temb);
        let h = g.silu(h);
        let h = self.fuse1.apply(g, store, h);
        let h = g.silu(h);
        self.fuse2.apply(g, store, h)
    }

    /// The consistency map `f = c_skip(t) * z_t + c_out(t) * F`. At the
    /// clean boundary this returns `z_t` untouched.
    pub fn consistency(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_t: Var,
        z0_hat: Var,
        c_hat: Var,
        t: usize,
    ) -> Var {
        let (c_skip, c_out) = self.boundary_coeffs(t);
        let f = self.refine(g, store, z0_hat, c_hat, t);
        let zs = g.affine(z_t, c_skip, 0.0);
        g.add_scaled(zs, f, c_out)
    }
}

/// Clone the live head's parameter values into the EMA group, returning a
/// head whose forward passes read the shadow weights.
pub fn make_ema(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Fase {
    let shadow = Fase::new(store, rng, cfg, ParamGroup::FaseEma);
    let live = store.ids_in(ParamGroup::Fase);
    let ema = store.ids_in(ParamGroup::FaseEma);
    assert_eq!(live.len(), ema.len(), "shadow must mirror the live head");
    for (&l, &s) in live.iter().zip(&ema) {
        let v = store.value(l).clone();
        assert_eq!(v.shape(), store.value(s).shape(), "shadow shape mismatch");
        *store.value_mut(s) = v;
    }
    shadow
}

/// One EMA step: `shadow = mu * shadow + (1 - mu) * live` over every
/// paired parameter. Call exactly once per optimizer step.
pub fn ema_update(store: &mut ParamStore, mu: f64) {
    let live = store.ids_in(ParamGroup::Fase);
    let ema = store.ids_in(ParamGroup::FaseEma);
    assert_eq!(live.len(), ema.len());
    for (&l, &s) in live.iter().zip(&ema) {
        let lv = store.value(l).clone();
        let sv = store.value_mut(s);
        sv.zip_mut_with(&lv, |a, &b| *a = mu * *a + (1.0 - mu) * b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    fn build(seed: u64, use_fda: bool) -> (ParamStore, Fase, ChaCha8Rng) {
        let mut c = cfg();
        c.use_fda = use_fda;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "fase");
        let f = Fase::new(&mut store, &mut r, &c, ParamGroup::Fase);
        (store, f, r)
    }

    #[test]
    fn boundary_coefficients_pin_the_identity() {
        let (_, f, _) = build(131, true);
        let (cs0, co0) = f.boundary_coeffs(0);
        assert_eq!(cs0, 1.0);
        assert_eq!(co0, 0.0);
        let (cs_end, co_end) = f.boundary_coeffs(999);
        assert!((cs_end - 0.002498748127).abs() < 1e-9, "c_skip(999) = {cs_end}");
        assert!(cs_end < 0.01);
        assert!((co_end - 0.998749844492).abs() < 1e-9, "c_out(999) = {co_end}");
    }

    #[test]
    fn consistency_is_exact_identity_at_the_boundary() {
        let (store, f, mut r) = build(132, true);
        let mut g = Graph::new();
        let z_t = g.constant(rng::normal_array(&mut r, &[1, 4, 8, 8]));
        let z0 = g.constant(rng::normal_array(&mut r, &[1, 4, 8, 8]));
        let c_hat = g.constant(rng::normal_array(&mut r, &[1, 4, 8, 8]));
        let out = f.consistency(&mut g, &store, z_t, z0, c_hat, 0);
        assert_eq!(g.value(out), g.value(z_t));
    }

    #[test]
    fn fresh_head_is_a_pure_skip_at_every_timestep() {
        let (store, f, mut r) = build(133, true);
        let mut g = Graph::new();
        let z_t = g.constant(rng::normal_array(&mut r, &[1, 4, 8, 8]));
        let z0 = g.constant(rng::normal_array(&mut r, &[1, 4, 8, 8]));
        let c_hat = g.constant(rng::normal_array(&mut r, &[1, 4, 8, 8]));
        for t in [1, 400, 999] {
            let refined = f.refine(&mut g, &store, z0, c_hat, t);
            assert!(g.value(refined).iter().all(|&v| v == 0.0));
            let out = f.consistency(&mut g, &store, z_t, z0, c_hat, t);
            let (c_skip, _) = f.boundary_coeffs(t);
            let expect = g.value(z_t).mapv(|v| c_skip * v);
            assert_eq!(g.value(out), &expect);
        }
    }

    #[test]
    fn trained_refinement_is_finite_and_grads_stay_in_group() {
        let (mut store, f, mut r) = build(134, true);
        // wake the zero-initialized output conv
        for id in store.ids_in(ParamGroup::Fase) {
            if store.value(id).iter().all(|&v| v == 0.0) {
                let shape = store.value(id).shape().to_vec();
                *store.value_mut(id) = rng::normal_array(&mut r, &shape).mapv(|v| 0.05 * v);
            }
        }
        let mut g = Graph::new();
        let z0 = g.constant(rng::normal_array(&mut r, &[2, 4, 16, 16]));
        let c_hat = g.constant(rng::normal_array(&mut r, &[2, 4, 16, 16]));
        let refined = f.refine(&mut g, &store, z0, c_hat, 500);
        assert_eq!(g.value(refined).shape(), &[2, 4, 16, 16]);
        assert!(g.value(refined).iter().all(|v| v.is_finite()));
        assert!(g.value(refined).iter().any(|&v| v != 0.0));

        let target = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 4, 16, 16])));
        let loss = g.mse_sum(refined, target);
        let grads = g.backward(loss);
        let param_grads = grads.params(&g);
        assert!(!param_grads.is_empty());
        assert!(param_grads.iter().all(|(id, _)| store.group(*id) == ParamGroup::Fase));
    }

    #[test]
    fn spatial_fallback_runs_without_spectra() {
        let (store, f, mut r) = build(135, false);
        let mut g = Graph::new();
        let z_t = g.constant(rng::normal_array(&mut r, &[1, 4, 8, 8]));
        let z0 = g.constant(rng::normal_array(&mut r, &[1, 4, 8, 8]));
        let c_hat = g.constant(rng::normal_array(&mut r, &[1, 4, 8, 8]));
        let out = f.consistency(&mut g, &store, z_t, z0, c_hat, 0);
        assert_eq!(g.value(out), g.value(z_t));
        let refined = f.refine(&mut g, &store, z0, c_hat, 300);
        assert!(g.value(refined).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn band_split_partitions_and_routes_tones() {
        let mut r = rng::stream(137, "fase-bands");
        let x = rng::normal_array(&mut r, &[2, 3, 16, 16]);
        let (lo, hi) = freq_split(&x, 0.5);
        let residual = (&lo + &hi - &x).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(residual < 1e-9, "bands do not sum to the input: {residual}");

        // a pure axis-Nyquist tone sits at radial frequency 1, entirely in
        // the high band; a constant map sits at 0, entirely in the low band
        let tone = ArrayD::from_shape_fn(IxDyn(&[1, 1, 16, 16]), |ix| {
            if ix[3] % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        });
        let (lo, hi) = freq_split(&tone, 0.5);
        let lo_energy: f64 = lo.iter().map(|v| v * v).sum();
        let hi_energy: f64 = hi.iter().map(|v| v * v).sum();
        assert!(lo_energy < 1e-18 * hi_energy, "tone leaked into the low band");

        let flat = ArrayD::from_elem(IxDyn(&[1, 1, 16, 16]), 0.7);
        let (lo, hi) = freq_split(&flat, 0.5);
        let hi_energy: f64 = hi.iter().map(|v| v * v).sum();
        assert!(hi_energy < 1e-18);
        assert!((lo[[0, 0, 3, 5]] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn temporal_ramp_hands_over_between_endpoints() {
        let mut r = rng::stream(138, "fase-ramp");
        let mut g = Graph::new();
        let a = g.constant(rng::normal_array(&mut r, &[1, 4, 8, 8]));
        let d = g.constant(rng::normal_array(&mut r, &[1, 4, 8, 8]));
        let top = temporal_mix(&mut g, a, d, 1000, 1000);
        assert_eq!(g.value(top), g.value(d), "noisiest step must pass the decoded band through");
        let bottom = temporal_mix(&mut g, a, d, 0, 1000);
        assert_eq!(g.value(bottom), g.value(a), "clean step must pass the attention through");
        let mid = temporal_mix(&mut g, a, d, 250, 1000);
        let expect = 0.75 * g.value(a) + 0.25 * g.value(d);
        let err = (g.value(mid) - &expect).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn mix_returns_the_decoded_latent_at_the_top_of_the_schedule() {
        // with the ramp on both bands, t = t_max ignores attention entirely
        let (store, f, mut r) = build(139, true);
        let mut g = Graph::new();
        let z0 = g.constant(rng::normal_array(&mut r, &[1, 4, 16, 16]));
        let c_hat = g.constant(rng::normal_array(&mut r, &[1, 4, 16, 16]));
        let out = f.mix(&mut g, &store, z0, c_hat, f.t_max);
        let err = (g.value(out) - g.value(c_hat)).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "top-of-schedule mix deviates from the decoded latent: {err}");
    }

    #[test]
    fn ema_tracks_the_live_head() {
        let mut c = cfg();
        c.use_fda = true;
        let mut store = ParamStore::new();
        let mut r = rng::stream(136, "fase-ema");
        let live = Fase::new(&mut store, &mut r, &c, ParamGroup::Fase);
        let shadow = make_ema(&mut store, &mut r, &c);

        // identical weights give identical outputs
        let mut g = Graph::new();
        let z0 = g.constant(rng::normal_array(&mut r, &[1, 4, 8, 8]));
        let ch = g.constant(rng::normal_array(&mut r, &[1, 4, 8, 8]));
        let a = live.refine(&mut g, &store, z0, ch, 200);
        let b = shadow.refine(&mut g, &store, z0, ch, 200);
        assert_eq!(g.value(a), g.value(b));

        // move the live head, then check the EMA recurrence on one param
        let lid = store.ids_in(ParamGroup::Fase)[0];
        let sid = store.ids_in(ParamGroup::FaseEma)[0];
        let before = store.value(sid).clone();
        let shape = store.value(lid).shape().to_vec();
        *store.value_mut(lid) = rng::normal_array(&mut r, &shape);
        let live_v = store.value(lid).clone();
        let mu = 0.95;
        ema_update(&mut store, mu);
        let after = store.value(sid);
        let expect = before.mapv(|v| mu * v) + live_v.mapv(|v| (1.0 - mu) * v);
        assert_eq!(after, &expect);
    }
}
