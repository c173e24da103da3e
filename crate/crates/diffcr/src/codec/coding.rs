//! Sequential entropy coding of the latent code.
//!
//! Encode and decode walk the four context passes in the same fixed order,
//! raster cells within a pass, group channels within a cell. The encoder
//! transmits the integer residual `k = round(y - mu)` and reconstructs
//! `y_hat = mu + k` exactly as the decoder will, so every later prediction
//! sees bit-identical state on both sides. Predictions come from the same
//! routines the training path uses.
//!
//! The per-symbol estimates accumulated here price each residual under the
//! coding model itself, escape bytes included, so a payload's coded size
//! exceeds its estimate only by table rounding and the coder's flush tail.
//! The smooth Gaussian rate used by the training loss lives in the graph
//! path instead; the two agree once residuals stay in range.

use super::LatentCodec;
use crate::entropy::{
    categorical_bits, CdfTable, GaussianBuckets, RangeDecoder, RangeEncoder,
};
use crate::error::{DiffcrError, Result};
use crate::tensor::{Graph, ParamStore};
use ndarray::{ArrayD, IxDyn};

/// Entropy-coded latent with encoder-side statistics. `c_hat` is computed
/// from the reconstructed code, so it matches the decoder bit for bit.
pub struct EncodedLatent {
    pub hyper_payload: Vec<u8>,
    pub y_payload: Vec<u8>,
    /// Analytic estimate for both payloads together, in bits.
    pub estimate_bits: f64,
    pub y_bits_estimate: f64,
    pub hyper_bits_estimate: f64,
    /// Per-cell estimate over the code grid, channels summed: `[1, 1, H, W]`.
    pub bits_map: ArrayD<f64>,
    pub y_hat: ArrayD<f64>,
    pub c_hat: ArrayD<f64>,
}

impl LatentCodec {
    fn eval_analysis(&self, store: &ParamStore, z: &ArrayD<f64>) -> ArrayD<f64> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let y = self.analysis.apply(&mut g, store, zv);
        g.value(y).to_owned()
    }

    fn eval_synthesis(&self, store: &ParamStore, y_hat: &ArrayD<f64>) -> ArrayD<f64> {
        let mut g = Graph::new();
        let yv = g.constant(y_hat.clone());
        let c = self.synthesis.apply(&mut g, store, yv);
        g.value(c).to_owned()
    }

    /// Codebook indices for a code `y`, plus the hyper grid size.
    fn hyper_indices(&self, store: &ParamStore, y: &ArrayD<f64>) -> (Vec<usize>, usize, usize) {
        let mut g = Graph::new();
        let yv = g.constant(y.clone());
        let l_y = self.hyper.analyze(&mut g, store, yv);
        let shape = g.value(l_y).shape().to_vec();
        let tokens = g.patchify(l_y, 1);
        let idx = self
            .hyper
            .nearest_indices(store.value(self.hyper.codebook), g.value(tokens));
        (idx, shape[2], shape[3])
    }

    /// Conditioning field from transmitted indices; shared by both sides.
    fn psi_from_indices(
        &self,
        store: &ParamStore,
        indices: &[usize],
        hh: usize,
        wh: usize,
    ) -> ArrayD<f64> {
        let d = self.hyper.dim;
        let cb = store.value(self.hyper.codebook);
        let mut l_hat = ArrayD::zeros(IxDyn(&[1, d, hh, wh]));
        for (pos, &k) in indices.iter().enumerate() {
            let (yy, xx) = (pos / wh, pos % wh);
            for j in 0..d {
                l_hat[[0, j, yy, xx]] = cb[[k, j]];
            }
        }
        let mut g = Graph::new();
        let lv = g.constant(l_hat);
        let psi = self.hyper.synthesize(&mut g, store, lv);
        g.value(psi).to_owned()
    }

    fn index_table(&self, store: &ParamStore) -> (CdfTable, Vec<f64>) {
        let probs = self.hyper.index_probs(store);
        (CdfTable::from_probs(&probs), probs)
    }

    fn check_code_grid(z: &ArrayD<f64>) -> Result<(usize, usize)> {
        let s = z.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(DiffcrError::shape(format!(
                "latent coding expects [1, C, H, W], got {s:?}"
            )));
        }
        let (h, w) = (s[2], s[3]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(DiffcrError::shape(format!(
                "latent dims must be multiples of 4 for coding, got {h}x{w}"
            )));
        }
        Ok((h / 2, w / 2))
    }

    /// Compress one latent `[1, Cz, H, W]` into hyper and code payloads.
    pub fn encode_latent(
        &self,
        store: &ParamStore,
        gauss: &GaussianBuckets,
        z: &ArrayD<f64>,
    ) -> Result<EncodedLatent> {
        let (yh, yw) = Self::check_code_grid(z)?;
        let y = self.eval_analysis(store, z);
        debug_assert_eq!(y.shape(), &[1, self.y_ch, yh, yw]);

        let (indices, hh, wh) = self.hyper_indices(store, &y);
        let (table, probs) = self.index_table(store);
        let mut enc = RangeEncoder::new();
        let mut hyper_bits_estimate = 0.0;
        for &i in &indices {
            enc.encode(&table, i);
            hyper_bits_estimate += categorical_bits(probs[i]);
        }
        let hyper_payload = enc.finish();

        let psi = self.psi_from_indices(store, &indices, hh, wh);
        let mut y_state = ArrayD::zeros(IxDyn(&[1, self.y_ch, yh, yw]));
        let mut bits_map = ArrayD::zeros(IxDyn(&[1, 1, yh, yw]));
        let mut y_bits_estimate = 0.0;
        let mut enc = RangeEncoder::new();
        for pass in 0..super::NUM_PASSES {
            let (mu, sigma) = self.context.pass_tables(store, pass, &psi, &y_state);
            let chans = self.context.group_channels(pass);
            for (yy, xx) in super::pass_positions(pass, yh, yw) {
                for (gi, c) in chans.clone().enumerate() {
                    let m = mu[[0, gi, yy, xx]];
                    let s = sigma[[0, gi, yy, xx]];
                    let k = (y[[0, c, yy, xx]] - m).round();
                    gauss.encode(&mut enc, k as i64, s);
                    let cost = gauss.symbol_bits(k as i64, s);
                    y_bits_estimate += cost;
                    bits_map[[0, 0, yy, xx]] += cost;
                    y_state[[0, c, yy, xx]] = m + k;
                }
            }
        }
        let y_payload = enc.finish();

        let c_hat = self.eval_synthesis(store, &y_state);
        Ok(EncodedLatent {
            hyper_payload,
            y_payload,
            estimate_bits: y_bits_estimate + hyper_bits_estimate,
            y_bits_estimate,
            hyper_bits_estimate,
            bits_map,
            y_hat: y_state,
            c_hat,
        })
    }

    /// Reconstruct `(c_hat, y_hat)` from the two payloads. `yh, yw` is the
    /// code grid size, recovered from the container header.
    pub fn decode_latent(
        &self,
        store: &ParamStore,
        gauss: &GaussianBuckets,
        hyper_payload: &[u8],
        y_payload: &[u8],
        yh: usize,
        yw: usize,
    ) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
        if yh == 0 || yw == 0 || yh % 2 != 0 || yw % 2 != 0 {
            return Err(DiffcrError::bitstream(format!(
                "invalid code grid {yh}x{yw}"
            )));
        }
        let (hh, wh) = (yh / 2, yw / 2);
        let (table, _) = self.index_table(store);
        let mut dec = RangeDecoder::new(hyper_payload);
        let indices: Vec<usize> = (0..hh * wh).map(|_| dec.decode(&table)).collect();
        if dec.overran() {
            return Err(DiffcrError::bitstream("hyper payload truncated"));
        }

        let psi = self.psi_from_indices(store, &indices, hh, wh);
        let mut y_state = ArrayD::zeros(IxDyn(&[1, self.y_ch, yh, yw]));
        let mut dec = RangeDecoder::new(y_payload);
        for pass in 0..super::NUM_PASSES {
            let (mu, sigma) = self.context.pass_tables(store, pass, &psi, &y_state);
            let chans = self.context.group_channels(pass);
            for (yy, xx) in super::pass_positions(pass, yh, yw) {
                for (gi, c) in chans.clone().enumerate() {
                    let m = mu[[0, gi, yy, xx]];
                    let s = sigma[[0, gi, yy, xx]];
                    let k = gauss.decode(&mut dec, s);
                    y_state[[0, c, yy, xx]] = m + k as f64;
                }
            }
        }
        if dec.overran() {
            return Err(DiffcrError::bitstream("code payload truncated"));
        }

        let c_hat = self.eval_synthesis(store, &y_state);
        Ok((c_hat, y_state))
    }
}
