//! The assembled compressor: model bundle, image padding, and the
//! container round trip.
//!
//! Compression encodes the image with the frozen autoencoder, codes the
//! latent with the conditional entropy model, and frames the two payloads
//! in a container. Decompression recovers the latent bit-exactly, then
//! either returns the coarse synthesis or sharpens it with the two
//! evaluation sampler seeded by a deterministic noise stream, so the same
//! stream and seed reproduce the same image in any process.
//!
//! Semantic tokens are recomputed on both sides from the shared decoded
//! latent, so they cost no bits. An optional class label travels out of
//! band; its cost is charged to the reported rate but never stored.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, TrainState};
use crate::codec::{Autoencoder, LatentCodec};
use crate::config::ModelConfig;
use crate::denoiser::{ControlEncoder, Denoiser, SemanticEncoder};
use crate::diffusion::NoiseSchedule;
use crate::entropy::{read_container, write_container, GaussianBuckets, Header};
use crate::error::{DiffcrError, Result};
use crate::fase::{self, Fase};
use crate::rng;
use crate::sampler::Sampler;
use crate::tensor::{shape4, Graph, ParamGroup, ParamStore, Var};

/// Rate charged for the out-of-band class label.
pub const LABEL_SIDE_BITS: f64 = 64.0;

/// Every trainable component plus the pieces of shared state they need.
/// Construction order is fixed so the consistency head and its EMA shadow
/// pair up by parameter order.
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ae: Autoencoder,
    pub codec: LatentCodec,
    pub denoiser: Denoiser,
    pub control: ControlEncoder,
    pub semantic: SemanticEncoder,
    pub fase: Fase,
    pub fase_ema: Fase,
    pub schedule: NoiseSchedule,
    pub buckets: GaussianBuckets,
    pub state: TrainState,
}

/// One compressed image: the container bytes plus rate bookkeeping.
pub struct Compressed {
    pub bytes: Vec<u8>,
    pub label: Option<usize>,
    pub img_h: usize,
    pub img_w: usize,
    /// Analytic cost of the coded payloads under the entropy model.
    pub estimate_bits: f64,
    /// Main-payload share of the estimate; the per-cell map sums to this.
    pub y_bits_estimate: f64,
    /// Hyper-payload share of the estimate.
    pub hyper_bits_estimate: f64,
    /// Out-of-band label cost, part of the rate but not of the stream.
    pub side_bits: f64,
    /// Coded cost per cell of the latent grid, `[1, 1, yh, yw]`.
    pub bits_map: ArrayD<f64>,
}

impl Compressed {
    pub fn actual_bits(&self) -> f64 {
        8.0 * self.bytes.len() as f64 + self.side_bits
    }

    pub fn bpp(&self) -> f64 {
        self.actual_bits() / (self.img_h * self.img_w) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Two denoiser evaluations through the consistency head.
    TwoStep,
    /// Plain DDIM with this many evaluations (at least two).
    Ddim(usize),
    /// Return the coarse synthesis without running the denoiser.
    Coarse,
}

#[derive(Clone, Copy, Debug)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    /// Start from the diffused coarse latent instead of pure noise.
    pub init_from_control: bool,
    /// Label signalled out of band at encode time, if any.
    pub label: Option<usize>,
    /// Seed of the decoder noise stream.
    pub seed: u64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            mode: DecodeMode::TwoStep,
            init_from_control: false,
            label: None,
            seed: rng::DEFAULT_SEED,
        }
    }
}

pub struct Decompressed {
    pub image: ArrayD<f64>,
    pub denoiser_calls: usize,
}

/// Mirrored index for reflect padding; the edge sample is not repeated.
fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let p = 2 * n - 2;
    let m = i % p;
    if m < n {
        m
    } else {
        p - m
    }
}

/// Reflect-pad `[B, C, H, W]` on the bottom and right until both spatial
/// dims are multiples of `m`.
pub fn pad_to_multiple(x: &ArrayD<f64>, m: usize) -> ArrayD<f64> {
    let (b, c, h, w) = shape4(x);
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    if ph == h && pw == w {
        return x.clone();
    }
    let mut out = ArrayD::zeros(IxDyn(&[b, c, ph, pw]));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..ph {
                let sy = mirror(y, h);
                for xx in 0..pw {
                    out[[bi, ci, y, xx]] = x[[bi, ci, sy, mirror(xx, w)]];
                }
            }
        }
    }
    out
}

/// Crop `[B, C, H, W]` to its top-left `h x w` window.
pub fn crop(x: &ArrayD<f64>, h: usize, w: usize) -> ArrayD<f64> {
    let (b, c, xh, xw) = shape4(x);
    assert!(h <= xh && w <= xw, "crop larger than input");
    let mut out = ArrayD::zeros(IxDyn(&[b, c, h, w]));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[bi, ci, y, xx]] = x[[bi, ci, y, xx]];
                }
            }
        }
    }
    out
}

fn clamp01(mut x: ArrayD<f64>) -> ArrayD<f64> {
    x.mapv_inplace(|v| v.clamp(0.0, 1.0));
    x
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(config.seed, "model-init");
        let ae = Autoencoder::new(&mut store, &mut r, config.ae_channels);
        let codec = LatentCodec::new(&mut store, &mut r, &config);
        let denoiser = Denoiser::new(&mut store, &mut r, &config);
        let control =
            ControlEncoder::new(&mut store, &mut r, config.ae_channels, config.denoiser_base);
        let semantic = SemanticEncoder::new(&mut store, &mut r, &config);
        let head = Fase::new(&mut store, &mut r, &config, ParamGroup::Fase);
        let fase_ema = fase::make_ema(&mut store, &mut r, &config);
        let schedule = NoiseSchedule::from_config(&config);
        Ok(Model {
            config,
            store,
            ae,
            codec,
            denoiser,
            control,
            semantic,
            fase: head,
            fase_ema,
            schedule,
            buckets: GaussianBuckets::new(),
            state: TrainState::default(),
        })
    }

    pub fn save(&self, path: &Path, include_adam: bool) -> Result<()> {
        checkpoint::save(path, &self.config, &self.store, self.state, include_adam)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, state, params) = checkpoint::load(path)?;
        let mut model = Model::new(config)?;
        checkpoint::install(&mut model.store, params)?;
        model.state = state;
        Ok(model)
    }

    /// Autoencoder latent of an already padded image.
    pub fn latent_of(&self, image: &ArrayD<f64>) -> ArrayD<f64> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let z = self.ae.encode(&mut g, &self.store, x);
        g.value(z).clone()
    }

    /// Decode a latent to a clamped image.
    pub fn image_of(&self, z: &ArrayD<f64>) -> ArrayD<f64> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let x = self.ae.decode(&mut g, &self.store, zv);
        clamp01(g.value(x).clone())
    }

    /// Semantic tokens derived from the decoded latent. The latent is
    /// detached first so the codec never receives gradients through this
    /// path; both coder sides compute identical tokens because the latent
    /// round trip is bit-exact.
    pub fn tokens_from_latent(
        &self,
        g: &mut Graph,
        c_hat: Var,
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        let (b, _, _, _) = shape4(g.value(c_hat));
        let cfg = &self.config;
        if !cfg.use_semantic {
            let shape = [b, cfg.semantic_tokens, cfg.semantic_dim];
            return Ok(g.constant(ArrayD::zeros(IxDyn(&shape))));
        }
        if let Some(ls) = labels {
            if let Some(&bad) = ls.iter().find(|&&l| l >= cfg.num_labels) {
                return Err(DiffcrError::invalid(format!(
                    "label {bad} out of range (num_labels = {})",
                    cfg.num_labels
                )));
            }
        }
        let frozen = g.detach(c_hat);
        let coarse = self.ae.decode(g, &self.store, frozen);
        Ok(self.semantic.encode(g, &self.store, coarse, labels))
    }

    pub fn compress(&self, image: &ArrayD<f64>, label: Option<usize>) -> Result<Compressed> {
        let s = image.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != self.config.image_channels {
            return Err(DiffcrError::shape(format!(
                "expected [1, {}, H, W] image, got {s:?}",
                self.config.image_channels
            )));
        }
        let (h, w) = (s[2], s[3]);
        if h == 0 || w == 0 || h > u16::MAX as usize || w > u16::MAX as usize {
            return Err(DiffcrError::shape(format!("image size {h}x{w} out of range")));
        }
        if let Some(l) = label {
            if l >= self.config.num_labels {
                return Err(DiffcrError::invalid(format!(
                    "label {l} out of range (num_labels = {})",
                    self.config.num_labels
                )));
            }
        }
        let padded = pad_to_multiple(image, self.config.pad_multiple());
        let z = self.latent_of(&padded);
        let enc = self.codec.encode_latent(&self.store, &self.buckets, &z)?;
        let ys = enc.y_hat.shape();
        let header = Header {
            preset: self.config.preset,
            img_h: h as u16,
            img_w: w as u16,
            y_c: ys[1] as u16,
            y_h: ys[2] as u16,
            y_w: ys[3] as u16,
        };
        let bytes = write_container(&header, &enc.hyper_payload, &enc.y_payload);
        Ok(Compressed {
            bytes,
            label,
            img_h: h,
            img_w: w,
            estimate_bits: enc.estimate_bits,
            y_bits_estimate: enc.y_bits_estimate,
            hyper_bits_estimate: enc.hyper_bits_estimate,
            side_bits: if label.is_some() { LABEL_SIDE_BITS } else { 0.0 },
            bits_map: enc.bits_map,
        })
    }

    /// Decode just the latent from a container, validating its geometry
    /// against this model.
    pub fn decode_latent_from(&self, bytes: &[u8]) -> Result<(Header, ArrayD<f64>)> {
        let (header, hyper, ypay) = read_container(bytes)?;
        if header.preset != self.config.preset {
            return Err(DiffcrError::bitstream(format!(
                "stream was coded at preset {} but the model uses preset {}",
                header.preset, self.config.preset
            )));
        }
        let m = self.config.pad_multiple();
        let ph = (header.img_h as usize).div_ceil(m) * m;
        let pw = (header.img_w as usize).div_ceil(m) * m;
        let want = (
            self.config.y_channels,
            ph / 8,
            pw / 8,
        );
        let got = (header.y_c as usize, header.y_h as usize, header.y_w as usize);
        if want != got {
            return Err(DiffcrError::bitstream(format!(
                "latent geometry {got:?} does not match header image size (expected {want:?})"
            )));
        }
        let (c_hat, _) = self.codec.decode_latent(
            &self.store,
            &self.buckets,
            hyper,
            ypay,
            got.1,
            got.2,
        )?;
        Ok((header, c_hat))
    }

    pub fn decompress(&self, bytes: &[u8], opts: &DecodeOptions) -> Result<Decompressed> {
        let (header, c_hat) = self.decode_latent_from(bytes)?;
        let (h, w) = (header.img_h as usize, header.img_w as usize);
        if opts.mode == DecodeMode::Coarse {
            let image = crop(&self.image_of(&c_hat), h, w);
            return Ok(Decompressed { image, denoiser_calls: 0 });
        }

        let mut g = Graph::new();
        let c = g.constant(c_hat);
        let feats = self.control.features(&mut g, &self.store, c);
        let label_vec = opts.label.map(|l| vec![l]);
        let tokens = self.tokens_from_latent(&mut g, c, label_vec.as_deref())?;
        let mut r: ChaCha8Rng = rng::stream(opts.seed, "decode-noise");
        let zshape = g.value(c).shape().to_vec();
        let n_top = g.constant(rng::normal_array(&mut r, &zshape));
        let sampler = Sampler {
            schedule: &self.schedule,
            denoiser: &self.denoiser,
            fase: if self.config.use_cre { Some(&self.fase) } else { None },
        };
        let out = match opts.mode {
            DecodeMode::TwoStep => {
                let n_mid = g.constant(rng::normal_array(&mut r, &zshape));
                sampler.two_step(
                    &mut g,
                    &self.store,
                    c,
                    Some(feats),
                    tokens,
                    n_top,
                    n_mid,
                    self.config.t_mid(),
                    opts.init_from_control,
                )
            }
            DecodeMode::Ddim(n) => {
                if n < 2 {
                    return Err(DiffcrError::invalid("ddim needs at least 2 steps"));
                }
                sampler.ddim(
                    &mut g,
                    &self.store,
                    c,
                    Some(feats),
                    tokens,
                    n_top,
                    n,
                    opts.init_from_control,
                )
            }
            DecodeMode::Coarse => unreachable!(),
        };
        let img = self.ae.decode(&mut g, &self.store, out.z0);
        let image = crop(&clamp01(g.value(img).clone()), h, w);
        Ok(Decompressed { image, denoiser_calls: out.denoiser_calls })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize, seed: u64) -> ArrayD<f64> {
        let mut r = rng::stream(seed, "pipeline-test");
        let mut img = rng::normal_array(&mut r, &[1, 3, h, w]);
        img.mapv_inplace(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
        img
    }

    #[test]
    fn mirror_indices_reflect_without_repeating_the_edge() {
        let idx: Vec<usize> = (0..8).map(|i| mirror(i, 5)).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(mirror(7, 1), 0);
    }

    #[test]
    fn padding_reaches_the_multiple_and_crop_inverts_it() {
        let img = test_image(40, 24, 7);
        let padded = pad_to_multiple(&img, 32);
        assert_eq!(padded.shape(), &[1, 3, 64, 32]);
        assert_eq!(crop(&padded, 40, 24), img);
        // reflected row: padded row 40 mirrors row 38
        assert_eq!(padded[[0, 1, 40, 3]], img[[0, 1, 38, 3]]);
        let exact = test_image(32, 32, 8);
        assert_eq!(pad_to_multiple(&exact, 32), exact);
    }

    #[test]
    fn round_trip_is_deterministic_and_in_range() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let img = test_image(32, 32, 11);
        let comp = model.compress(&img, None).unwrap();
        assert!(comp.actual_bits() > 0.0);
        assert!(comp.bpp() > 0.0);
        let opts = DecodeOptions::default();
        let a = model.decompress(&comp.bytes, &opts).unwrap();
        let b = model.decompress(&comp.bytes, &opts).unwrap();
        assert_eq!(a.denoiser_calls, 2);
        assert_eq!(a.image.shape(), &[1, 3, 32, 32]);
        assert!(a.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn coarse_mode_skips_the_denoiser() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let img = test_image(32, 32, 12);
        let comp = model.compress(&img, None).unwrap();
        let opts = DecodeOptions { mode: DecodeMode::Coarse, ..Default::default() };
        let out = model.decompress(&comp.bytes, &opts).unwrap();
        assert_eq!(out.denoiser_calls, 0);
        assert_eq!(out.image.shape(), &[1, 3, 32, 32]);
    }

    #[test]
    fn non_multiple_sizes_round_trip_to_original_dims() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let img = test_image(40, 24, 13);
        let comp = model.compress(&img, None).unwrap();
        let out = model
            .decompress(&comp.bytes, &DecodeOptions { mode: DecodeMode::Coarse, ..Default::default() })
            .unwrap();
        assert_eq!(out.image.shape(), &[1, 3, 40, 24]);
    }

    #[test]
    fn labels_are_charged_out_of_band_and_validated() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let img = test_image(32, 32, 14);
        let unlabeled = model.compress(&img, None).unwrap();
        let labeled = model.compress(&img, Some(1)).unwrap();
        assert_eq!(labeled.bytes, unlabeled.bytes);
        assert_eq!(labeled.actual_bits() - unlabeled.actual_bits(), LABEL_SIDE_BITS);
        assert!(model.compress(&img, Some(99)).is_err());
    }

    #[test]
    fn geometry_lies_in_the_header_are_rejected() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let img = test_image(32, 32, 15);
        let comp = model.compress(&img, None).unwrap();
        let (mut header, hyper, ypay) = read_container(&comp.bytes).unwrap();
        header.y_h += 2;
        let forged = write_container(&header, hyper, ypay);
        assert!(model.decompress(&forged, &DecodeOptions::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_decoding() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dck");
        model.save(&path, false).unwrap();
        let loaded = Model::load(&path).unwrap();
        let img = test_image(32, 32, 16);
        let comp = model.compress(&img, None).unwrap();
        let comp2 = loaded.compress(&img, None).unwrap();
        assert_eq!(comp.bytes, comp2.bytes);
        let opts = DecodeOptions::default();
        let a = model.decompress(&comp.bytes, &opts).unwrap();
        let b = loaded.decompress(&comp.bytes, &opts).unwrap();
        assert_eq!(a.image, b.image);
    }
}
