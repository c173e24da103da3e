//! Vector-quantized hyperprior.
//!
//! The hyper-analysis transform summarizes the latent code into a coarse
//! grid of feature vectors, each snapped to its nearest codebook row. Only
//! the row indices are transmitted, priced by a learned categorical over
//! the codebook. Hyper-synthesis upsamples the quantized grid back into the
//! conditioning field the context model reads.
//!
//! Quantization is non-differentiable, so training uses the usual VQ
//! recipe: a straight-through estimator on the synthesis path, a codebook
//! term pulling selected rows toward the encoder output, and a commitment
//! term (weight 0.25) pulling the encoder toward the codebook. Ties in the
//! nearest-neighbor search resolve to the lowest index so encode and decode
//! agree bit for bit.

use crate::tensor::nn::Conv2d;
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Var};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

/// Commitment-loss weight relative to the codebook term.
pub const COMMITMENT_WEIGHT: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct VqHyper {
    ha0: Conv2d,
    ha1: Conv2d,
    hs0: Conv2d,
    hs1: Conv2d,
    pub codebook: ParamId,
    pub logits: ParamId,
    pub codebook_size: usize,
    pub dim: usize,
}

/// Training-mode outputs of the hyper branch.
pub struct HyperForward {
    /// Conditioning field for the context model, `[B, D, Hy, Wy]`.
    pub psi: Var,
    /// Codebook plus commitment loss.
    pub codebook_loss: Var,
    /// Estimated index bits under the learned categorical.
    pub bits: Var,
    /// Selected codebook rows, row-major over `(batch, y, x)`.
    pub indices: Vec<usize>,
}

impl VqHyper {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        y_ch: usize,
        dim: usize,
        codebook_size: usize,
    ) -> Self {
        let gp = ParamGroup::Codec;
        let codebook = store.add(
            "hyper.codebook",
            gp,
            crate::tensor::init::sample_normal(rng, &[codebook_size, dim], 0.1),
        );
        // zero logits start the index prior uniform
        let logits = store.add("hyper.logits", gp, ArrayD::zeros(ndarray::IxDyn(&[1, codebook_size])));
        VqHyper {
            ha0: Conv2d::new(store, rng, "ha.c0", gp, y_ch, dim, 3, 1),
            ha1: Conv2d::new(store, rng, "ha.c1", gp, dim, dim, 3, 2),
            hs0: Conv2d::new(store, rng, "hs.c0", gp, dim, dim, 3, 1),
            hs1: Conv2d::new(store, rng, "hs.c1", gp, dim, dim, 3, 1),
            codebook,
            logits,
            codebook_size,
            dim,
        }
    }

    /// Hyper-analysis: `[B, Cy, Hy, Wy] -> [B, D, Hy/2, Wy/2]`.
    pub fn analyze(&self, g: &mut Graph, store: &ParamStore, y: Var) -> Var {
        let h = self.ha0.apply(g, store, y);
        let h = g.silu(h);
        self.ha1.apply(g, store, h)
    }

    /// Hyper-synthesis: `[B, D, Hh, Wh] -> [B, D, 2*Hh, 2*Wh]`.
    pub fn synthesize(&self, g: &mut Graph, store: &ParamStore, l_hat: Var) -> Var {
        let h = g.upsample_nearest2(l_hat);
        let h = self.hs0.apply(g, store, h);
        let h = g.silu(h);
        self.hs1.apply(g, store, h)
    }

    /// Nearest codebook row per spatial vector; ties go to the lowest index.
    pub fn nearest_indices(&self, codebook: &ArrayD<f64>, tokens: &ArrayD<f64>) -> Vec<usize> {
        let shape = tokens.shape();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(d, self.dim, "token dim mismatch");
        let tok = tokens.as_slice().expect("contiguous tokens");
        let cb = codebook.as_slice().expect("contiguous codebook");
        let mut out = Vec::with_capacity(b * n);
        for v in 0..b * n {
            let vec = &tok[v * d..(v + 1) * d];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for k in 0..self.codebook_size {
                let row = &cb[k * d..(k + 1) * d];
                let mut dist = 0.0;
                for j in 0..d {
                    let diff = vec[j] - row[j];
                    dist += diff * diff;
                }
                if dist < best_d {
                    best_d = dist;
                    best = k;
                }
            }
            out.push(best);
        }
        out
    }

    /// Full training pass: quantize `y`'s summary and synthesize the
    /// conditioning field with straight-through gradients.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, y: Var) -> HyperForward {
        let l_y = self.analyze(g, store, y);
        let shape = g.value(l_y).shape().to_vec();
        let (b, hh, wh) = (shape[0], shape[2], shape[3]);

        let cb = g.param(store, self.codebook);
        let tokens = g.patchify(l_y, 1);
        let indices = self.nearest_indices(&g.value(cb).to_owned(), &g.value(tokens));

        let rows = g.select_rows(cb, &indices);
        let rows = g.reshape(rows, &[b, hh * wh, self.dim]);
        let l_hat = g.unpatchify(rows, self.dim, hh, wh, 1);

        let l_y_sg = g.detach(l_y);
        let l_hat_sg = g.detach(l_hat);
        let pull_codebook = g.mse_sum(l_hat, l_y_sg);
        let pull_encoder = g.mse_sum(l_y, l_hat_sg);
        let codebook_loss = g.add_scaled(pull_codebook, pull_encoder, COMMITMENT_WEIGHT);

        // straight-through: value of l_hat, gradient of l_y
        let jump = g.sub(l_hat, l_y);
        let jump = g.detach(jump);
        let l_st = g.add(l_y, jump);
        let psi = self.synthesize(g, store, l_st);

        let bits = self.index_bits(g, store, &indices);
        HyperForward { psi, codebook_loss, bits, indices }
    }

    /// Estimated bits for a batch of indices under the learned categorical,
    /// as a graph node so the rate term trains the logits.
    pub fn index_bits(&self, g: &mut Graph, store: &ParamStore, indices: &[usize]) -> Var {
        let mut counts = ArrayD::zeros(ndarray::IxDyn(&[1, self.codebook_size]));
        for &i in indices {
            counts[[0, i]] += 1.0;
        }
        let logits = g.param(store, self.logits);
        let probs = g.softmax_last(logits);
        let probs = g.max_scalar(probs, crate::entropy::PROB_FLOOR);
        let logp = g.ln(probs);
        let weighted = g.mul_const(logp, &counts);
        let total = g.sum_all(weighted);
        g.affine(total, -1.0 / std::f64::consts::LN_2, 0.0)
    }

    /// Index probabilities as plain values, for the entropy coder and
    /// scalar bit accounting.
    pub fn index_probs(&self, store: &ParamStore) -> Vec<f64> {
        let logits = store.value(self.logits);
        let row: Vec<f64> = logits.iter().copied().collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|&e| e / z).collect()
    }
}
