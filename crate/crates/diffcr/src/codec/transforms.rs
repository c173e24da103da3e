//! Convolutional transforms: the frozen image autoencoder and the latent
//! compressor's analysis/synthesis pair.
//!
//! The autoencoder maps images to the 4-channel diffusion latent at 1/4
//! resolution and back; it is pretrained with plain reconstruction loss and
//! then frozen. The compressor transforms run on that latent: analysis
//! halves resolution again into the 16-channel code, synthesis inverts it.
//! Both use residual-in-residual dense blocks, the workhorse of
//! super-resolution stacks, scaled down to two blocks.

use crate::tensor::nn::Conv2d;
use crate::tensor::{Graph, ParamGroup, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

/// Dense three-conv block with 0.2-scaled residual.
#[derive(Clone, Debug)]
pub struct Rrdb {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl Rrdb {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        ch: usize,
        growth: usize,
    ) -> Self {
        Rrdb {
            c1: Conv2d::new(store, rng, &format!("{name}.c1"), group, ch, growth, 3, 1),
            c2: Conv2d::new(store, rng, &format!("{name}.c2"), group, ch + growth, growth, 3, 1),
            c3: Conv2d::new(store, rng, &format!("{name}.c3"), group, ch + 2 * growth, ch, 3, 1),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let a = self.c1.apply(g, store, x);
        let a = g.silu(a);
        let cat1 = g.concat_ch(&[x, a]);
        let b = self.c2.apply(g, store, cat1);
        let b = g.silu(b);
        let cat2 = g.concat_ch(&[x, a, b]);
        let c = self.c3.apply(g, store, cat2);
        g.add_scaled(x, c, 0.2)
    }
}

/// Image-space autoencoder: `[B, 3, H, W] -> [B, C, H/4, W/4]` and back.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    e0: Conv2d,
    e1: Conv2d,
    e2: Conv2d,
    d0: Conv2d,
    d1: Conv2d,
    d2: Conv2d,
    d3: Conv2d,
}

impl Autoencoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, latent_ch: usize) -> Self {
        let gp = ParamGroup::Autoenc;
        Autoencoder {
            e0: Conv2d::new(store, rng, "ae.e0", gp, 3, 16, 3, 2),
            e1: Conv2d::new(store, rng, "ae.e1", gp, 16, 32, 3, 2),
            e2: Conv2d::new(store, rng, "ae.e2", gp, 32, latent_ch, 3, 1),
            d0: Conv2d::new(store, rng, "ae.d0", gp, latent_ch, 32, 3, 1),
            d1: Conv2d::new(store, rng, "ae.d1", gp, 32, 16, 3, 1),
            d2: Conv2d::new(store, rng, "ae.d2", gp, 16, 16, 3, 1),
            d3: Conv2d::new(store, rng, "ae.d3", gp, 16, 3, 3, 1),
        }
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.e0.apply(g, store, x);
        let h = g.silu(h);
        let h = self.e1.apply(g, store, h);
        let h = g.silu(h);
        self.e2.apply(g, store, h)
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Var {
        let h = self.d0.apply(g, store, z);
        let h = g.silu(h);
        let h = g.upsample_nearest2(h);
        let h = self.d1.apply(g, store, h);
        let h = g.silu(h);
        let h = g.upsample_nearest2(h);
        let h = self.d2.apply(g, store, h);
        let h = g.silu(h);
        self.d3.apply(g, store, h)
    }
}

/// Latent analysis transform: `[B, Cz, h, w] -> [B, Cy, h/2, w/2]`.
#[derive(Clone, Debug)]
pub struct Analysis {
    input: Conv2d,
    rrdb1: Rrdb,
    rrdb2: Rrdb,
    down: Conv2d,
    out: Conv2d,
}

impl Analysis {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        z_ch: usize,
        y_ch: usize,
        hidden: usize,
    ) -> Self {
        let gp = ParamGroup::Codec;
        Analysis {
            input: Conv2d::new(store, rng, "ga.in", gp, z_ch, hidden, 3, 1),
            rrdb1: Rrdb::new(store, rng, "ga.rrdb1", gp, hidden, hidden / 2),
            rrdb2: Rrdb::new(store, rng, "ga.rrdb2", gp, hidden, hidden / 2),
            down: Conv2d::new(store, rng, "ga.down", gp, hidden, hidden, 3, 2),
            out: Conv2d::new(store, rng, "ga.out", gp, hidden, y_ch, 3, 1),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Var {
        let h = self.input.apply(g, store, z);
        let h = self.rrdb1.apply(g, store, h);
        let h = self.rrdb2.apply(g, store, h);
        let h = self.down.apply(g, store, h);
        let h = g.silu(h);
        self.out.apply(g, store, h)
    }
}

/// Latent synthesis transform: `[B, Cy, h/2, w/2] -> [B, Cz, h, w]`.
#[derive(Clone, Debug)]
pub struct Synthesis {
    input: Conv2d,
    rrdb1: Rrdb,
    rrdb2: Rrdb,
    up: Conv2d,
    out: Conv2d,
}

impl Synthesis {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        y_ch: usize,
        z_ch: usize,
        hidden: usize,
    ) -> Self {
        let gp = ParamGroup::Codec;
        Synthesis {
            input: Conv2d::new(store, rng, "gs.in", gp, y_ch, hidden, 3, 1),
            rrdb1: Rrdb::new(store, rng, "gs.rrdb1", gp, hidden, hidden / 2),
            rrdb2: Rrdb::new(store, rng, "gs.rrdb2", gp, hidden, hidden / 2),
            up: Conv2d::new(store, rng, "gs.up", gp, hidden, hidden, 3, 1),
            out: Conv2d::new(store, rng, "gs.out", gp, hidden, z_ch, 3, 1),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, y: Var) -> Var {
        let h = self.input.apply(g, store, y);
        let h = g.silu(h);
        let h = self.rrdb1.apply(g, store, h);
        let h = self.rrdb2.apply(g, store, h);
        let h = g.upsample_nearest2(h);
        let h = self.up.apply(g, store, h);
        let h = g.silu(h);
        self.out.apply(g, store, h)
    }
}
