//! Spatial-channel context model over the quantized latent code.
//!
//! The code grid is split into two channel groups and each group into two
//! checkerboard phases, giving four coding passes: group 0 even cells,
//! group 0 odd cells, group 1 even cells, group 1 odd cells. Each pass
//! predicts a Gaussian mean and scale for its own cells from the hyper
//! conditioning field plus everything already decoded, so decoding needs
//! four sequential model evaluations rather than one per symbol.
//!
//! Training runs all passes teacher-forced on the full quantized grid with
//! visibility masks zeroing out not-yet-decoded positions; coding runs the
//! same convolutions pass by pass on the growing reconstruction. Both paths
//! share `apply_pass`, which keeps their arithmetic bit-identical. The
//! prediction heads start at zero, so an untrained model prices every
//! symbol with mean 0 and the scale floor.

use crate::tensor::nn::Conv2d;
use crate::tensor::{Graph, ParamGroup, ParamStore, Var};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Number of coding passes: two channel groups times two spatial phases.
pub const NUM_PASSES: usize = 4;

fn group_of(pass: usize) -> usize {
    pass / 2
}

/// Cell parity coded by a pass: 0 selects even `(y + x)`, 1 odd.
fn phase_of(pass: usize) -> usize {
    pass % 2
}

/// `[b, c, h, w]` 0/1 mask from a per-cell predicate.
fn grid_mask(
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    f: impl Fn(usize, usize, usize) -> bool,
) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[b, c, h, w]), |ix| {
        if f(ix[1], ix[2], ix[3]) {
            1.0
        } else {
            0.0
        }
    })
}

/// Cells already decoded when a pass runs.
pub fn visible_mask(pass: usize, b: usize, cy: usize, h: usize, w: usize) -> ArrayD<f64> {
    let cg = cy / 2;
    let (gp, ph) = (group_of(pass), phase_of(pass));
    grid_mask(b, cy, h, w, |c, y, x| {
        let g = c / cg;
        g < gp || (g == gp && ph == 1 && (y + x) % 2 == 0)
    })
}

/// Cells a pass itself codes, over the pass's own channel group.
pub fn output_mask(pass: usize, b: usize, cg: usize, h: usize, w: usize) -> ArrayD<f64> {
    let ph = phase_of(pass);
    grid_mask(b, cg, h, w, |_, y, x| (y + x) % 2 == ph)
}

/// Raster-order cells belonging to a pass's checkerboard phase.
pub fn pass_positions(pass: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let ph = phase_of(pass);
    let mut out = Vec::with_capacity(h * w / 2 + 1);
    for y in 0..h {
        for x in 0..w {
            if (y + x) % 2 == ph {
                out.push((y, x));
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
struct PassNet {
    c0: Conv2d,
    c1: Conv2d,
    mu_head: Conv2d,
    sigma_head: Conv2d,
}

#[derive(Clone, Debug)]
pub struct ContextModel {
    passes: Vec<PassNet>,
    pub y_ch: usize,
    pub sigma_min: f64,
}

impl ContextModel {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        y_ch: usize,
        psi_dim: usize,
        hidden: usize,
        sigma_min: f64,
    ) -> Self {
        assert!(y_ch % 2 == 0, "channel groups need an even code depth");
        let gp = ParamGroup::Codec;
        let cg = y_ch / 2;
        let passes = (0..NUM_PASSES)
            .map(|p| {
                let n = format!("ctx.p{p}");
                PassNet {
                    c0: Conv2d::new(store, rng, &format!("{n}.c0"), gp, psi_dim + y_ch, hidden, 3, 1),
                    c1: Conv2d::new(store, rng, &format!("{n}.c1"), gp, hidden, hidden, 3, 1),
                    mu_head: Conv2d::new_zero(store, &format!("{n}.mu"), gp, hidden, cg, 1, 1),
                    sigma_head: Conv2d::new_zero(store, &format!("{n}.sigma"), gp, hidden, cg, 1, 1),
                }
            })
            .collect();
        ContextModel { passes, y_ch, sigma_min }
    }

    /// Channels the pass's group covers.
    pub fn group_channels(&self, pass: usize) -> std::ops::Range<usize> {
        let cg = self.y_ch / 2;
        let g = group_of(pass);
        g * cg..(g + 1) * cg
    }

    /// One pass over the full grid: `(mu, sigma)` for the pass's channel
    /// group, `[B, Cy/2, H, W]` each. `y_visible` must already be masked.
    pub fn apply_pass(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pass: usize,
        psi: Var,
        y_visible: Var,
    ) -> (Var, Var) {
        let net = &self.passes[pass];
        let x = g.concat_ch(&[psi, y_visible]);
        let h = net.c0.apply(g, store, x);
        let h = g.silu(h);
        let h = net.c1.apply(g, store, h);
        let h = g.silu(h);
        let mu = net.mu_head.apply(g, store, h);
        let sraw = net.sigma_head.apply(g, store, h);
        let sigma = g.lower_bound(sraw, self.sigma_min);
        (mu, sigma)
    }

    /// Teacher-forced prediction over all passes, assembling full-grid
    /// `(mu, sigma)` of shape `[B, Cy, H, W]` from the per-pass outputs.
    pub fn predict(&self, g: &mut Graph, store: &ParamStore, psi: Var, y_hat: Var) -> (Var, Var) {
        let (b, cy, h, w) = {
            let v = g.value(y_hat);
            crate::tensor::shape4(v)
        };
        assert_eq!(cy, self.y_ch);
        let cg = cy / 2;

        let mut mus = Vec::with_capacity(NUM_PASSES);
        let mut sigmas = Vec::with_capacity(NUM_PASSES);
        for pass in 0..NUM_PASSES {
            let vis = visible_mask(pass, b, cy, h, w);
            let ym = g.mul_const(y_hat, &vis);
            let (mu, sigma) = self.apply_pass(g, store, pass, psi, ym);
            mus.push(mu);
            sigmas.push(sigma);
        }

        let mut mu_groups = Vec::with_capacity(2);
        let mut sigma_groups = Vec::with_capacity(2);
        for grp in 0..2 {
            let even = output_mask(2 * grp, b, cg, h, w);
            let odd = output_mask(2 * grp + 1, b, cg, h, w);
            let me = g.mul_const(mus[2 * grp], &even);
            let mo = g.mul_const(mus[2 * grp + 1], &odd);
            mu_groups.push(g.add(me, mo));
            let se = g.mul_const(sigmas[2 * grp], &even);
            let so = g.mul_const(sigmas[2 * grp + 1], &odd);
            sigma_groups.push(g.add(se, so));
        }
        let mu = g.concat_ch(&mu_groups);
        let sigma = g.concat_ch(&sigma_groups);
        (mu, sigma)
    }

    /// Fills the zero-initialized prediction heads with noise so tests can
    /// exercise nontrivial means and scales. Scales are biased around 1 to
    /// keep residuals inside the coder's non-escape range, like a trained
    /// model's.
    #[cfg(test)]
    pub(crate) fn randomize_heads_for_tests(&self, store: &mut ParamStore, r: &mut ChaCha8Rng) {
        for p in &self.passes {
            for (id, scale, bias) in [
                (p.mu_head.w, 0.1, 0.0),
                (p.mu_head.b, 0.1, 0.0),
                (p.sigma_head.w, 0.05, 0.0),
                (p.sigma_head.b, 0.1, 1.0),
            ] {
                let shape = store.value(id).shape().to_vec();
                let v = crate::rng::normal_array(r, &shape).mapv(|x| x * scale + bias);
                *store.value_mut(id) = v;
            }
        }
    }

    /// One pass as plain arrays for sequential coding. `y_state` holds the
    /// reconstruction so far, zero at future cells; masking it again makes
    /// encoder and decoder insensitive to stale state.
    pub fn pass_tables(
        &self,
        store: &ParamStore,
        pass: usize,
        psi: &ArrayD<f64>,
        y_state: &ArrayD<f64>,
    ) -> (ArrayD<f64>, ArrayD<f64>) {
        let (b, cy, h, w) = crate::tensor::shape4(y_state);
        let mut g = Graph::new();
        let psi_v = g.constant(psi.clone());
        let vis = visible_mask(pass, b, cy, h, w);
        let ys = g.constant(y_state * &vis);
        let (mu, sigma) = self.apply_pass(&mut g, store, pass, psi_v, ys);
        (g.value(mu).to_owned(), g.value(sigma).to_owned())
    }
}
