//! Parameter-owning layer wrappers over the graph ops.
//!
//! Layers register their tensors in a [`ParamStore`] at construction and
//! replay them into whatever graph runs the forward pass. Construction
//! order is deterministic (seeded init streams), so two processes building
//! the same architecture from the same seed agree parameter for parameter.

use super::init;
use super::params::{ParamGroup, ParamId, ParamStore};
use super::{Graph, Var};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), group, init::conv_weight(rng, c_out, c_in, k, k));
        let b = store.add(format!("{name}.b"), group, init::zeros(&[c_out]));
        Conv2d { w, b, stride, pad: k / 2 }
    }

    /// Zero-initialized variant for heads that must start inert.
    pub fn new_zero(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), group, init::zeros(&[c_out, c_in, k, k]));
        let b = store.add(format!("{name}.b"), group, init::zeros(&[c_out]));
        Conv2d { w, b, stride, pad: k / 2 }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), group, init::linear_weight(rng, d_in, d_out));
        let b = store.add(format!("{name}.b"), group, init::zeros(&[d_out]));
        Linear { w, b }
    }

    pub fn new_zero(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), group, init::zeros(&[d_in, d_out]));
        let b = store.add(format!("{name}.b"), group, init::zeros(&[d_out]));
        Linear { w, b }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, Some(b))
    }
}

/// Sinusoidal position features for a scalar timestep, `[1, dim]`,
/// replicated to `[b, dim]`. Standard geometric frequency ladder.
pub fn timestep_features(t: f64, dim: usize, b: usize) -> ndarray::ArrayD<f64> {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut row = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        row[i] = (t * freq).sin();
        row[half + i] = (t * freq).cos();
    }
    let mut data = Vec::with_capacity(b * dim);
    for _ in 0..b {
        data.extend_from_slice(&row);
    }
    ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[b, dim]), data).unwrap()
}

/// Two-layer MLP producing a time embedding shared by FiLM heads.
#[derive(Clone, Debug)]
pub struct TimeMlp {
    pub dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeMlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        dim: usize,
    ) -> Self {
        TimeMlp {
            dim,
            l1: Linear::new(store, rng, &format!("{name}.l1"), group, dim, dim),
            l2: Linear::new(store, rng, &format!("{name}.l2"), group, dim, dim),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, t: f64, b: usize) -> Var {
        let feats = g.constant(timestep_features(t, self.dim, b));
        let h = self.l1.apply(g, store, feats);
        let h = g.silu(h);
        self.l2.apply(g, store, h)
    }
}

/// FiLM conditioning head: projects a `[B, dim]` embedding to per-channel
/// scale and shift and applies them to a feature map.
#[derive(Clone, Debug)]
pub struct FilmHead {
    proj: Linear,
    channels: usize,
}

impl FilmHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        dim: usize,
        channels: usize,
    ) -> Self {
        // zero projection makes conditioning start as identity
        let _ = rng;
        FilmHead {
            proj: Linear::new_zero(store, &format!("{name}.proj"), group, dim, 2 * channels),
            channels,
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, emb: Var) -> Var {
        let st = self.proj.apply(g, store, emb);
        let scale = g.slice_last(st, 0, self.channels);
        let shift = g.slice_last(st, self.channels, 2 * self.channels);
        g.film(x, scale, shift)
    }
}

/// Cross-attention from per-position queries to a small token set.
/// Queries come from a 1x1 projection of the feature map, keys and values
/// from a linear map of the `[B, T, d_model]` context tokens; the attended
/// result is projected back and added residually.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    q: Conv2d,
    k: Linear,
    v: Linear,
    out: Conv2d,
    d_model: usize,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        channels: usize,
        token_dim: usize,
        d_model: usize,
    ) -> Self {
        CrossAttention {
            q: Conv2d::new(store, rng, &format!("{name}.q"), group, channels, d_model, 1, 1),
            k: Linear::new(store, rng, &format!("{name}.k"), group, token_dim, d_model),
            v: Linear::new(store, rng, &format!("{name}.v"), group, token_dim, d_model),
            out: Conv2d::new_zero(store, &format!("{name}.out"), group, d_model, channels, 1, 1),
            d_model,
        }
    }

    /// `x: [B, C, H, W]`, `tokens: [B, T, token_dim]`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, tokens: Var) -> Var {
        let (_b, _c, h, w) = {
            let xv = g.value(x);
            super::ops::shape4(xv)
        };
        let qmap = self.q.apply(g, store, x); // [B, d, H, W]
        let qtok = g.patchify(qmap, 1); // [B, HW, d]
        let k = self.k.apply(g, store, tokens);
        let v = self.v.apply(g, store, tokens);
        let scores = g.bmm(qtok, k, true); // [B, HW, T]
        let scaled = g.affine(scores, 1.0 / (self.d_model as f64).sqrt(), 0.0);
        let attn = g.softmax_last(scaled);
        let mix = g.bmm(attn, v, false); // [B, HW, d]
        let back = g.unpatchify(mix, self.d_model, h, w, 1);
        let proj = self.out.apply(g, store, back);
        g.add(x, proj)
    }
}
