//! Latent compressor: transforms, VQ hyperprior, context model, and the
//! entropy-coded bitstream.
//!
//! The pipeline quantizes a learned transform of the diffusion latent and
//! transmits it in two sections: codebook indices summarizing the code
//! (the hyper branch), then the code itself under a conditional Gaussian
//! whose mean and scale the context model predicts from the hyper field
//! and previously decoded cells. Synthesis maps the quantized code to the
//! conditioning latent the denoiser consumes.
//!
//! Training never runs the sequential coder. It uses additive uniform
//! noise as the usual differentiable stand-in for rounding and prices the
//! noisy code analytically with the same interval-mass formula the coder's
//! tables are built from, so the training rate tracks real payload sizes.
//! Encode and decode share every prediction routine, which makes the
//! reconstruction bit-exact across processes.

mod coding;
mod context;
mod hyper;
mod transforms;

pub use coding::EncodedLatent;
pub use context::{pass_positions, visible_mask, ContextModel, NUM_PASSES};
pub use hyper::{HyperForward, VqHyper, COMMITMENT_WEIGHT};
pub use transforms::{Analysis, Autoencoder, Rrdb, Synthesis};

use crate::config::ModelConfig;
use crate::entropy::PROB_FLOOR;
use crate::rng;
use crate::tensor::{Graph, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

/// Analysis, hyperprior, context model, and synthesis over the frozen
/// autoencoder's latent space.
#[derive(Clone, Debug)]
pub struct LatentCodec {
    pub analysis: Analysis,
    pub synthesis: Synthesis,
    pub hyper: VqHyper,
    pub context: ContextModel,
    pub y_ch: usize,
}

/// Training-mode forward pass outputs. All `Var`s live on the caller's
/// graph; scalars stay as nodes so rate terms can be differentiated.
pub struct CodecForward {
    pub y: Var,
    pub y_hat: Var,
    pub psi: Var,
    pub mu: Var,
    pub sigma: Var,
    /// Synthesized conditioning latent, the codec's reconstruction target.
    pub c_hat: Var,
    /// Estimated bits per code cell, `[B, Cy, H, W]`.
    pub bits_per_cell: Var,
    /// Spatial bit allocation, channels summed: `[B, 1, H, W]`.
    pub bits_map: Var,
    pub y_bits: Var,
    pub hyper_bits: Var,
    pub rate_bits: Var,
    pub codebook_loss: Var,
    pub hyper_indices: Vec<usize>,
}

/// Rate-distortion objective pieces.
pub struct RdTerms {
    pub loss: Var,
    pub distortion: Var,
}

impl LatentCodec {
    pub fn new(store: &mut ParamStore, r: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        LatentCodec {
            analysis: Analysis::new(store, r, cfg.ae_channels, cfg.y_channels, cfg.codec_hidden),
            synthesis: Synthesis::new(store, r, cfg.y_channels, cfg.ae_channels, cfg.codec_hidden),
            hyper: VqHyper::new(store, r, cfg.y_channels, cfg.hyper_dim, cfg.codebook_size),
            context: ContextModel::new(
                store,
                r,
                cfg.y_channels,
                cfg.hyper_dim,
                cfg.codec_hidden,
                cfg.sigma_min,
            ),
            y_ch: cfg.y_channels,
        }
    }

    /// Interval-mass rate estimate for a code under a Gaussian prediction.
    /// Returns per-cell bits, the channel-summed spatial map, and the total.
    pub fn rate_from_prediction(
        g: &mut Graph,
        y_hat: Var,
        mu: Var,
        sigma: Var,
    ) -> (Var, Var, Var) {
        let d = g.sub(y_hat, mu);
        let hi = g.affine(d, 1.0, 0.5);
        let lo = g.affine(d, 1.0, -0.5);
        let hi = g.div(hi, sigma);
        let lo = g.div(lo, sigma);
        let cdf_hi = g.normal_cdf(hi);
        let cdf_lo = g.normal_cdf(lo);
        let p = g.sub(cdf_hi, cdf_lo);
        let p = g.max_scalar(p, PROB_FLOOR);
        let nats = g.ln(p);
        let bits = g.affine(nats, -1.0 / std::f64::consts::LN_2, 0.0);
        let map = g.sum_channels(bits);
        let total = g.sum_all(bits);
        (bits, map, total)
    }

    /// Noise-relaxed forward pass for training: `y_hat = y + u` with
    /// `u ~ U(-1/2, 1/2)`, context teacher-forced on the noisy code.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        r: &mut ChaCha8Rng,
    ) -> CodecForward {
        let y = self.analysis.apply(g, store, z);
        let u = rng::uniform_array(r, g.value(y).shape(), -0.5, 0.5);
        let y_hat = g.add_const(y, &u);

        let hyper = self.hyper.forward(g, store, y);
        let (mu, sigma) = self.context.predict(g, store, hyper.psi, y_hat);
        let (bits_per_cell, bits_map, y_bits) = Self::rate_from_prediction(g, y_hat, mu, sigma);
        let rate_bits = g.add(y_bits, hyper.bits);
        let c_hat = self.synthesis.apply(g, store, y_hat);

        CodecForward {
            y,
            y_hat,
            psi: hyper.psi,
            mu,
            sigma,
            c_hat,
            bits_per_cell,
            bits_map,
            y_bits,
            hyper_bits: hyper.bits,
            rate_bits,
            codebook_loss: hyper.codebook_loss,
            hyper_indices: hyper.indices,
        }
    }

    /// `distortion + lambda2 * rate + codebook_loss`.
    pub fn rd_terms(&self, g: &mut Graph, fwd: &CodecForward, z: Var, lambda2: f64) -> RdTerms {
        let distortion = g.mse_sum(fwd.c_hat, z);
        let dr = g.add_scaled(distortion, fwd.rate_bits, lambda2);
        let loss = g.add(dr, fwd.codebook_loss);
        RdTerms { loss, distortion }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamGroup;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig::default()
    }

    fn build(seed: u64) -> (ParamStore, LatentCodec, ChaCha8Rng) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "codec");
        let codec = LatentCodec::new(&mut store, &mut r, &tiny_cfg());
        (store, codec, r)
    }

    #[test]
    fn fresh_model_prices_with_zero_mean_and_floor_scale() {
        let (store, codec, mut r) = build(101);
        let mut g = Graph::new();
        let z = g.constant(rng::normal_array(&mut r, &[1, 4, 16, 16]));
        let fwd = codec.forward_train(&mut g, &store, z, &mut r);
        assert!(g.value(fwd.mu).iter().all(|&v| v == 0.0));
        assert!(g.value(fwd.sigma).iter().all(|&v| v == 0.01));
    }

    #[test]
    fn bit_map_sums_to_code_total() {
        let (store, codec, mut r) = build(102);
        let mut g = Graph::new();
        let z = g.constant(rng::normal_array(&mut r, &[2, 4, 16, 16]));
        let fwd = codec.forward_train(&mut g, &store, z, &mut r);
        let map_total: f64 = g.value(fwd.bits_map).sum();
        let y_total = g.value(fwd.y_bits).sum();
        assert!(
            (map_total - y_total).abs() <= 1e-6 * y_total.abs(),
            "map {map_total} vs total {y_total}"
        );
        assert_eq!(g.value(fwd.bits_map).shape(), &[2, 1, 8, 8]);
        let rate = g.value(fwd.rate_bits).sum();
        assert!(rate > 0.0 && rate.is_finite());
    }

    #[test]
    fn rd_loss_reaches_every_codec_parameter_family() {
        let (store, codec, mut r) = build(103);
        let mut g = Graph::new();
        let z = g.constant(rng::normal_array(&mut r, &[1, 4, 8, 8]));
        let fwd = codec.forward_train(&mut g, &store, z, &mut r);
        let rd = codec.rd_terms(&mut g, &fwd, z, 0.1);
        let grads = g.backward(rd.loss);
        let touched: Vec<String> = grads
            .params(&g)
            .iter()
            .map(|(id, _)| store.name(*id).to_string())
            .collect();
        for prefix in ["ga.", "gs.", "ha.", "hs.", "ctx.", "hyper.codebook", "hyper.logits"] {
            assert!(
                touched.iter().any(|n| n.starts_with(prefix)),
                "no gradient reached {prefix}*"
            );
        }
        let all_codec = grads
            .params(&g)
            .iter()
            .all(|(id, _)| store.group(*id) == ParamGroup::Codec);
        assert!(all_codec, "rd loss must stay inside the codec group");
    }
}
