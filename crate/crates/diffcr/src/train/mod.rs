//! Two-stage training behind a frozen latent autoencoder.
//!
//! The autoencoder is pretrained on the corpus and then never updated.
//! Stage 1 trains everything else jointly: the codec by rate-distortion,
//! the denoiser by noise prediction, and the consistency head by two
//! losses, a direct regression of its refined latent onto the clean one
//! and a self-consistency term that matches the live head at `t + k`
//! against the EMA head at `t` across one solver hop. Stage 2 freezes the
//! codec too and fine-tunes the generative path through the two
//! evaluation sampler against an image-domain perceptual distance, with
//! the stage-1 consistency and diffusion terms kept as regularizers.
//!
//! Gradient routing is part of the contract, not an emergent property:
//! noise predictions are detached inside both consistency losses so the
//! denoiser learns only from its own loss, the EMA target is built in a
//! throwaway graph so it contributes no gradient at all, and conditioning
//! is detached before it reaches the denoiser so rate-distortion remains
//! the codec's only teacher in stage 1. Codec and generative parameters
//! are stepped by separate optimizer instances so gradient clipping in
//! one family cannot starve the other. The EMA shadow moves exactly once
//! per step in both stages.
//!
//! Batches are rendered from the procedural corpus on the fly, so a seed
//! fully determines the run and the metrics log is reproducible line for
//! line.

use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus;
use crate::error::{DiffcrError, Result};
use crate::fase;
use crate::pipeline::{pad_to_multiple, Model};
use crate::rng;
use crate::sampler::Sampler;
use crate::tensor::{cosine_lr, init, shape4, Adam, Graph, ParamGroup, Var};

/// Held-out render indices start far above anything training can draw.
const HELD_OUT_BASE: u64 = 1 << 40;

/// One batch: images in `[0, 1]` as `[B, 3, S, S]` plus class labels.
pub struct TrainBatch {
    pub images: ArrayD<f64>,
    pub labels: Vec<usize>,
}

/// Render a training batch from the procedural corpus.
pub fn synth_batch(
    r: &mut ChaCha8Rng,
    corpus_seed: u64,
    batch: usize,
    size: usize,
) -> TrainBatch {
    let mut images = ArrayD::zeros(IxDyn(&[batch, 3, size, size]));
    let mut labels = Vec::with_capacity(batch);
    for bi in 0..batch {
        let class = r.gen_range(0..corpus::NUM_CLASSES);
        let index = r.gen::<u32>() as u64;
        let img = corpus::render(class, corpus_seed, index, size);
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    images[[bi, c, y, x]] = img[[c, y, x]];
                }
            }
        }
        labels.push(class);
    }
    TrainBatch { images, labels }
}

/// Held-out images `[1, 3, S, S]`, disjoint from every training draw.
pub fn held_out_images(corpus_seed: u64, count: usize, size: usize) -> Vec<ArrayD<f64>> {
    (0..count)
        .map(|i| {
            let img = corpus::render(i % corpus::NUM_CLASSES, corpus_seed, HELD_OUT_BASE + i as u64, size);
            img.insert_axis(Axis(0)).into_dyn()
        })
        .collect()
}

/// Fixed random-feature distance standing in for a learned perceptual
/// metric: three conv scales with frozen seeded weights, mean squared
/// feature differences summed over scales, plus a small pixel term.
pub struct PerceptualNet {
    layers: Vec<(ArrayD<f64>, ArrayD<f64>, usize)>,
}

impl PerceptualNet {
    /// The weights come from a fixed internal seed, so every process
    /// measures with the same ruler.
    pub fn new() -> Self {
        let mut r = rng::stream(0x7e4c, "perceptual");
        let dims = [(3usize, 8usize, 1usize), (8, 16, 2), (16, 16, 2)];
        let layers = dims
            .iter()
            .map(|&(ci, co, stride)| {
                let w = init::conv_weight(&mut r, co, ci, 3, 3);
                let b = init::sample_normal(&mut r, &[co], 0.1);
                (w, b, stride)
            })
            .collect();
        PerceptualNet { layers }
    }

    fn features(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b, stride) in &self.layers {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let c = g.conv2d(h, wv, Some(bv), *stride, 1);
            h = g.silu(c);
            out.push(h);
        }
        out
    }

    /// `sum_scales mean((f(a) - f(b))^2) + 0.1 * mean((a - b)^2)`.
    pub fn distance(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        let mut total = {
            let d = g.mse_sum(a, b);
            g.affine(d, 0.1 / g.value(a).len() as f64, 0.0)
        };
        for (x, y) in fa.into_iter().zip(fb) {
            let d = g.mse_sum(x, y);
            let m = g.affine(d, 1.0 / g.value(x).len() as f64, 0.0);
            total = g.add(total, m);
        }
        total
    }
}

impl Default for PerceptualNet {
    fn default() -> Self {
        Self::new()
    }
}

fn finite(g: &Graph, v: Var, term: &'static str) -> Result<f64> {
    let x = g.value(v).sum();
    if !x.is_finite() {
        return Err(DiffcrError::NonFinite { term });
    }
    Ok(x)
}

/// Mean squared error as a graph scalar.
fn mse_mean(g: &mut Graph, a: Var, b: Var) -> Var {
    let s = g.mse_sum(a, b);
    g.affine(s, 1.0 / g.value(a).len() as f64, 0.0)
}

/// The two consistency losses at one timestep. `c_for_refine` conditions
/// the direct regression (live in stage 1 so the codec learns to feed the
/// refiner); the self-consistency pair always sees detached conditioning.
/// Noise predictions are detached in both, so the denoiser is untouched.
#[allow(clippy::too_many_arguments)]
fn consistency_losses(
    model: &Model,
    g: &mut Graph,
    z0: Var,
    c_for_refine: Var,
    c_cond: Var,
    tokens: Var,
    feats: crate::denoiser::ControlFeatures,
    t: usize,
    r: &mut ChaCha8Rng,
) -> (Var, Var) {
    let cfg = &model.config;
    let sched = &model.schedule;
    let k = cfg.skip_k_eff();
    let zshape = g.value(z0).shape().to_vec();
    let numel = g.value(z0).len() as f64;
    let snr = sched.snr_weight(t);

    // direct regression of the refined latent onto the clean one
    let eps = g.constant(rng::normal_array(r, &zshape));
    let z_t = sched.add_noise_g(g, z0, eps, t);
    let eps_hat = model.denoiser.forward(g, &model.store, z_t, t, tokens, Some(feats));
    let eps_det = g.detach(eps_hat);
    let z0_hat = sched.predict_z0_from_eps_g(g, z_t, eps_det, t);
    let refined = model.fase.consistency(g, &model.store, z_t, z0_hat, c_for_refine, t);
    let lf_sum = g.mse_sum(refined, z0);
    let l_f = g.affine(lf_sum, snr / numel, 0.0);

    // self-consistency across one solver hop, target from the EMA head
    let t_hi = t + k;
    let eps2 = g.constant(rng::normal_array(r, &zshape));
    let z_hi = sched.add_noise_g(g, z0, eps2, t_hi);
    let ehat_hi = model.denoiser.forward(g, &model.store, z_hi, t_hi, tokens, Some(feats));
    let ehat_hi_det = g.detach(ehat_hi);
    let z0_hi = sched.predict_z0_from_eps_g(g, z_hi, ehat_hi_det, t_hi);
    let live = model.fase.consistency(g, &model.store, z_hi, z0_hi, c_cond, t_hi);
    let z_lo = sched.ddim_step_g(g, z_hi, ehat_hi_det, t_hi, t);
    let target = {
        // throwaway graph: the target carries no gradient by construction
        let mut tg = Graph::new();
        let zl = tg.constant(g.value(z_lo).clone());
        let cc = tg.constant(g.value(c_cond).clone());
        let fts = model.control.features(&mut tg, &model.store, cc);
        let tks = tg.constant(g.value(tokens).clone());
        let el = model.denoiser.forward(&mut tg, &model.store, zl, t, tks, Some(fts));
        let z0l = sched.predict_z0_from_eps_g(&mut tg, zl, el, t);
        let tgt = model.fase_ema.consistency(&mut tg, &model.store, zl, z0l, cc, t);
        tg.value(tgt).clone()
    };
    let tgt = g.constant(target);
    let lc_sum = g.mse_sum(live, tgt);
    let l_c = g.affine(lc_sum, 1.0 / numel, 0.0);
    (l_f, l_c)
}

/// Noise-prediction loss at one timestep, weighted by the schedule.
fn diffusion_loss(
    model: &Model,
    g: &mut Graph,
    z0: Var,
    tokens: Var,
    feats: crate::denoiser::ControlFeatures,
    t: usize,
    r: &mut ChaCha8Rng,
) -> Var {
    let zshape = g.value(z0).shape().to_vec();
    let numel = g.value(z0).len() as f64;
    let eps = g.constant(rng::normal_array(r, &zshape));
    let z_t = model.schedule.add_noise_g(g, z0, eps, t);
    let eps_hat = model.denoiser.forward(g, &model.store, z_t, t, tokens, Some(feats));
    let sum = g.mse_sum(eps_hat, eps);
    g.affine(sum, model.schedule.snr_weight(t) / numel, 0.0)
}

/// Stage-1 loss nodes, exposed individually so routing can be audited.
pub struct Stage1Losses {
    pub rd: Var,
    pub distortion: Var,
    pub rate_bits: Var,
    pub l_f: Var,
    pub l_c: Var,
    pub l_diff: Var,
    pub total: Var,
    pub t: usize,
}

/// Build the stage-1 objective on `g`:
/// `rd + lambda1 * l_f + l_c + lambda3 * l_diff`.
pub fn stage1_losses(
    model: &Model,
    g: &mut Graph,
    batch: &TrainBatch,
    r: &mut ChaCha8Rng,
) -> Result<Stage1Losses> {
    let cfg = &model.config;
    let (b, _, _, _) = shape4(&batch.images);
    if batch.labels.len() != b {
        return Err(DiffcrError::invalid("label count != batch size"));
    }
    let z0 = g.constant(model.latent_of(&batch.images));
    let fwd = model.codec.forward_train(g, &model.store, z0, r);
    let rd = model.codec.rd_terms(g, &fwd, z0, cfg.lambda2());

    let c_cond = g.detach(fwd.c_hat);
    let feats = model.control.features(g, &model.store, c_cond);
    let tokens = model.tokens_from_latent(g, fwd.c_hat, Some(&batch.labels))?;

    let t = r.gen_range(1..cfg.timesteps - cfg.skip_k_eff());
    let l_diff = diffusion_loss(model, g, z0, tokens, feats, t, r);
    let (l_f, l_c) = if cfg.use_cre {
        consistency_losses(model, g, z0, fwd.c_hat, c_cond, tokens, feats, t, r)
    } else {
        (g.scalar(0.0), g.scalar(0.0))
    };

    let wf = g.affine(l_f, cfg.lambda1, 0.0);
    let wd = g.affine(l_diff, cfg.lambda3, 0.0);
    let s1 = g.add(rd.loss, wf);
    let s2 = g.add(l_c, wd);
    let total = g.add(s1, s2);
    Ok(Stage1Losses {
        rd: rd.loss,
        distortion: rd.distortion,
        rate_bits: fwd.rate_bits,
        l_f,
        l_c,
        l_diff,
        total,
        t,
    })
}

/// Stage-2 loss nodes. The conditioning latent comes from the real coder
/// and enters the graph as a constant, so the codec cannot receive
/// gradient here even in principle.
pub struct Stage2Losses {
    pub l_per: Var,
    pub l_f: Var,
    pub l_c: Var,
    pub l_diff: Var,
    pub total: Var,
    pub pixel_mse: f64,
    pub denoiser_calls: usize,
}

pub fn stage2_losses(
    model: &Model,
    g: &mut Graph,
    batch: &TrainBatch,
    perceptual: &PerceptualNet,
    r: &mut ChaCha8Rng,
) -> Result<Stage2Losses> {
    let cfg = &model.config;
    let (b, _, _, _) = shape4(&batch.images);
    if batch.labels.len() != b {
        return Err(DiffcrError::invalid("label count != batch size"));
    }
    let z0_arr = model.latent_of(&batch.images);

    // conditioning from the deployed coder, one item at a time
    let mut c_arr = ArrayD::zeros(IxDyn(&[0]));
    for bi in 0..b {
        let zi = z0_arr
            .index_axis(Axis(0), bi)
            .to_owned()
            .insert_axis(Axis(0))
            .into_dyn();
        let enc = model.codec.encode_latent(&model.store, &model.buckets, &zi)?;
        if bi == 0 {
            let mut shape = enc.c_hat.shape().to_vec();
            shape[0] = b;
            c_arr = ArrayD::zeros(IxDyn(&shape));
        }
        let mut slot = c_arr.index_axis_mut(Axis(0), bi);
        slot.assign(&enc.c_hat.index_axis(Axis(0), 0));
    }
    let c_hat = g.constant(c_arr);
    let feats = model.control.features(g, &model.store, c_hat);
    let tokens = model.tokens_from_latent(g, c_hat, Some(&batch.labels))?;

    // two-evaluation decode with gradients through both steps
    let zshape = g.value(c_hat).shape().to_vec();
    let n_top = g.constant(rng::normal_array(r, &zshape));
    let n_mid = g.constant(rng::normal_array(r, &zshape));
    let sampler = Sampler {
        schedule: &model.schedule,
        denoiser: &model.denoiser,
        fase: if cfg.use_cre { Some(&model.fase) } else { None },
    };
    let out = sampler.two_step(
        g,
        &model.store,
        c_hat,
        Some(feats),
        tokens,
        n_top,
        n_mid,
        cfg.t_mid(),
        false,
    );
    let x_hat = model.ae.decode(g, &model.store, out.z0);
    let x = g.constant(batch.images.clone());
    let l_per = perceptual.distance(g, x_hat, x);
    let pixel = mse_mean(g, x_hat, x);
    let pixel_mse = g.value(pixel).sum();

    // stage-1 regularizers against the frozen conditioning
    let z0 = g.constant(z0_arr);
    let t = r.gen_range(1..cfg.timesteps - cfg.skip_k_eff());
    let l_diff = diffusion_loss(model, g, z0, tokens, feats, t, r);
    let (l_f, l_c) = if cfg.use_cre {
        consistency_losses(model, g, z0, c_hat, c_hat, tokens, feats, t, r)
    } else {
        (g.scalar(0.0), g.scalar(0.0))
    };

    let wf = g.affine(l_f, cfg.lambda1, 0.0);
    let s1 = g.add(l_per, wf);
    let s2 = g.add(l_c, l_diff);
    let total = g.add(s1, s2);
    Ok(Stage2Losses {
        l_per,
        l_f,
        l_c,
        l_diff,
        total,
        pixel_mse,
        denoiser_calls: out.denoiser_calls,
    })
}

/// Held-out latent reconstruction errors: the coarse synthesis, the
/// one-evaluation prediction, and the refined two-evaluation latent,
/// each against the clean autoencoder latent.
pub struct LatentEval {
    pub mse_coarse: f64,
    pub mse_one_step: f64,
    pub mse_two_step: f64,
}

pub fn latent_eval(model: &Model, images: &[ArrayD<f64>], seed: u64) -> Result<LatentEval> {
    let cfg = &model.config;
    let t_top = cfg.timesteps - 1;
    let (mut mc, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for (i, img) in images.iter().enumerate() {
        let padded = pad_to_multiple(img, cfg.pad_multiple());
        let z0_arr = model.latent_of(&padded);
        let enc = model.codec.encode_latent(&model.store, &model.buckets, &z0_arr)?;
        let numel = z0_arr.len() as f64;
        mc += (&enc.c_hat - &z0_arr).mapv(|v| v * v).sum() / numel;

        let mut g = Graph::new();
        let z0 = g.constant(z0_arr);
        let c = g.constant(enc.c_hat);
        let feats = model.control.features(&mut g, &model.store, c);
        let tokens = model.tokens_from_latent(&mut g, c, None)?;
        let mut r = rng::stream_at(seed, "latent-eval", i as u64);
        let zshape = g.value(z0).shape().to_vec();
        let n_top = g.constant(rng::normal_array(&mut r, &zshape));
        let n_mid = g.constant(rng::normal_array(&mut r, &zshape));

        // one evaluation: predict the clean latent from pure noise
        let eps1 = model.denoiser.forward(&mut g, &model.store, n_top, t_top, tokens, Some(feats));
        let z0_one = model.schedule.predict_z0_from_eps_g(&mut g, n_top, eps1, t_top);
        let d1 = mse_mean(&mut g, z0_one, z0);
        m1 += g.value(d1).sum();

        // two evaluations through the deployed sampler
        let sampler = Sampler {
            schedule: &model.schedule,
            denoiser: &model.denoiser,
            fase: if cfg.use_cre { Some(&model.fase) } else { None },
        };
        let out = sampler.two_step(
            &mut g,
            &model.store,
            c,
            Some(feats),
            tokens,
            n_top,
            n_mid,
            cfg.t_mid(),
            false,
        );
        let d2 = mse_mean(&mut g, out.z0, z0);
        m2 += g.value(d2).sum();
    }
    let n = images.len() as f64;
    Ok(LatentEval {
        mse_coarse: mc / n,
        mse_one_step: m1 / n,
        mse_two_step: m2 / n,
    })
}

fn is_generative(gp: ParamGroup) -> bool {
    matches!(
        gp,
        ParamGroup::Denoiser | ParamGroup::Control | ParamGroup::Semantic | ParamGroup::Fase
    )
}

/// Drives the three phases over one model, with per-family optimizers.
pub struct Trainer {
    pub model: Model,
    pub perceptual: PerceptualNet,
    corpus_seed: u64,
    image_size: usize,
    r: ChaCha8Rng,
    adam_ae: Adam,
    adam_codec: Adam,
    adam_gen: Adam,
}

impl Trainer {
    pub fn new(model: Model, corpus_seed: u64) -> Result<Self> {
        let cfg = &model.config;
        let image_size = if cfg.train_crop > 0 { cfg.train_crop } else { 64 };
        if image_size % cfg.pad_multiple() != 0 {
            return Err(DiffcrError::invalid(format!(
                "train crop {image_size} must be a multiple of {}",
                cfg.pad_multiple()
            )));
        }
        let r = rng::stream(cfg.seed, "train");
        let adam_t = model.state.adam_t;
        let mut t = Trainer {
            model,
            perceptual: PerceptualNet::new(),
            corpus_seed,
            image_size,
            r,
            adam_ae: Adam::default(),
            adam_codec: Adam::default(),
            adam_gen: Adam::default(),
        };
        t.adam_ae.set_step_count(adam_t);
        t.adam_codec.set_step_count(adam_t);
        t.adam_gen.set_step_count(adam_t);
        Ok(t)
    }

    fn batch(&mut self) -> TrainBatch {
        synth_batch(
            &mut self.r,
            self.corpus_seed,
            self.model.config.batch_size,
            self.image_size,
        )
    }

    /// Reconstruction pretraining for the latent autoencoder; every later
    /// phase treats it as frozen.
    pub fn pretrain_autoencoder(
        &mut self,
        steps: usize,
        log: &mut dyn FnMut(&str),
    ) -> Result<()> {
        let lr = self.model.config.lr * 10.0;
        for _ in 0..steps {
            let batch = self.batch();
            let mut g = Graph::new();
            let x = g.constant(batch.images.clone());
            let z = self.model.ae.encode(&mut g, &self.model.store, x);
            let x_hat = self.model.ae.decode(&mut g, &self.model.store, z);
            let loss = mse_mean(&mut g, x_hat, x);
            let mse = finite(&g, loss, "autoencoder mse")?;
            let grads = g.backward(loss);
            let pairs = grads.params(&g);
            self.adam_ae
                .apply(&mut self.model.store, &pairs, lr, |gp| gp == ParamGroup::Autoenc);
            self.model.state.ae_steps += 1;
            log(&format!(
                "ae step={} mse={:.6e}",
                self.model.state.ae_steps, mse
            ));
        }
        Ok(())
    }

    /// One full stage-1 pass: joint codec, denoiser, and consistency
    /// training with the EMA shadow updated once per step.
    pub fn run_stage1(&mut self, steps: usize, log: &mut dyn FnMut(&str)) -> Result<()> {
        let total_steps = self.model.config.stage1_steps.max(steps) as u64;
        for _ in 0..steps {
            let batch = self.batch();
            let pixels = (batch.images.len() / 3) as f64;
            let mut g = Graph::new();
            let losses = stage1_losses(&self.model, &mut g, &batch, &mut self.r)?;
            let total = finite(&g, losses.total, "stage1 total")?;
            let rd = finite(&g, losses.rd, "rate-distortion")?;
            let dist = finite(&g, losses.distortion, "distortion")?;
            let rate = finite(&g, losses.rate_bits, "rate")?;
            let l_f = finite(&g, losses.l_f, "consistency regression")?;
            let l_c = finite(&g, losses.l_c, "self-consistency")?;
            let l_diff = finite(&g, losses.l_diff, "diffusion")?;

            let grads = g.backward(losses.total);
            let pairs = grads.params(&g);
            let lr = cosine_lr(
                self.model.config.lr,
                self.model.state.stage1_steps,
                total_steps,
                0.1,
            );
            self.adam_codec
                .apply(&mut self.model.store, &pairs, lr, |gp| gp == ParamGroup::Codec);
            self.adam_gen
                .apply(&mut self.model.store, &pairs, lr, is_generative);
            fase::ema_update(&mut self.model.store, self.model.config.ema_mu);
            self.model.state.stage1_steps += 1;
            self.model.state.adam_t = self.adam_gen.step_count();
            log(&format!(
                "stage1 step={} total={:.6e} rd={:.6e} dist={:.6e} bpp={:.4} lf={:.6e} lc={:.6e} ldiff={:.6e} t={} lr={:.3e}",
                self.model.state.stage1_steps,
                total,
                rd,
                dist,
                rate / pixels,
                l_f,
                l_c,
                l_diff,
                losses.t,
                lr
            ));
        }
        Ok(())
    }

    /// One full stage-2 pass: the codec is frozen and audited, the
    /// generative path trains through the sampler.
    pub fn run_stage2(&mut self, steps: usize, log: &mut dyn FnMut(&str)) -> Result<()> {
        let total_steps = self.model.config.stage2_steps.max(steps) as u64;
        for _ in 0..steps {
            let batch = self.batch();
            let mut g = Graph::new();
            let losses = stage2_losses(&self.model, &mut g, &batch, &self.perceptual, &mut self.r)?;
            let total = finite(&g, losses.total, "stage2 total")?;
            let l_per = finite(&g, losses.l_per, "perceptual")?;
            let l_f = finite(&g, losses.l_f, "consistency regression")?;
            let l_c = finite(&g, losses.l_c, "self-consistency")?;
            let l_diff = finite(&g, losses.l_diff, "diffusion")?;

            let grads = g.backward(losses.total);
            let pairs = grads.params(&g);
            if pairs
                .iter()
                .any(|(id, _)| self.model.store.group(*id) == ParamGroup::Codec)
            {
                return Err(DiffcrError::invalid(
                    "stage-2 gradient leaked into the frozen codec",
                ));
            }
            let lr = cosine_lr(
                self.model.config.lr,
                self.model.state.stage2_steps,
                total_steps,
                0.1,
            );
            self.adam_gen
                .apply(&mut self.model.store, &pairs, lr, is_generative);
            fase::ema_update(&mut self.model.store, self.model.config.ema_mu);
            self.model.state.stage2_steps += 1;
            self.model.state.adam_t = self.adam_gen.step_count();
            log(&format!(
                "stage2 step={} total={:.6e} lper={:.6e} pix={:.6e} lf={:.6e} lc={:.6e} ldiff={:.6e} t_mid={} lr={:.3e}",
                self.model.state.stage2_steps,
                total,
                l_per,
                losses.pixel_mse,
                l_f,
                l_c,
                l_diff,
                self.model.config.t_mid(),
                lr
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny_trainer(seed: u64) -> Trainer {
        let mut cfg = ModelConfig::tiny();
        cfg.seed = seed;
        Trainer::new(Model::new(cfg).unwrap(), seed).unwrap()
    }

    fn tiny_batch(seed: u64) -> TrainBatch {
        let mut r = rng::stream(seed, "train-test");
        synth_batch(&mut r, seed, 2, 32)
    }

    #[test]
    fn perceptual_distance_is_zero_symmetric_and_monotone() {
        let net = PerceptualNet::new();
        let mut r = rng::stream(31, "perc");
        let a_arr = {
            let mut x = rng::normal_array(&mut r, &[1, 3, 32, 32]);
            x.mapv_inplace(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
            x
        };
        let noise = rng::normal_array(&mut r, &[1, 3, 32, 32]);
        let mut g = Graph::new();
        let a = g.constant(a_arr.clone());
        let self_d = net.distance(&mut g, a, a);
        assert_eq!(g.value(self_d).sum(), 0.0);

        let mut last = 0.0;
        for sigma in [0.01, 0.05, 0.1] {
            let b = g.constant(&a_arr + &(&noise * sigma));
            let ab = net.distance(&mut g, a, b);
            let ba = net.distance(&mut g, b, a);
            let d = g.value(ab).sum();
            assert_eq!(d, g.value(ba).sum());
            assert!(d > last, "distance must grow with noise, {d} <= {last}");
            last = d;
        }
    }

    #[test]
    fn stage1_total_is_the_sum_of_its_terms() {
        let tr = tiny_trainer(41);
        let batch = tiny_batch(41);
        let mut r = rng::stream(41, "losses");
        let mut g = Graph::new();
        let l = stage1_losses(&tr.model, &mut g, &batch, &mut r).unwrap();
        let cfg = &tr.model.config;
        let expect = g.value(l.rd).sum()
            + cfg.lambda1 * g.value(l.l_f).sum()
            + g.value(l.l_c).sum()
            + cfg.lambda3 * g.value(l.l_diff).sum();
        let total = g.value(l.total).sum();
        assert!((total - expect).abs() <= 1e-6 * expect.abs().max(1.0));
    }

    #[test]
    fn stage1_gradients_route_by_design() {
        let tr = tiny_trainer(42);
        let batch = tiny_batch(42);
        let mut r = rng::stream(42, "routing");
        let mut g = Graph::new();
        let l = stage1_losses(&tr.model, &mut g, &batch, &mut r).unwrap();
        let store = &tr.model.store;

        let groups_of = |grads: crate::tensor::Gradients| -> Vec<ParamGroup> {
            let mut gs: Vec<ParamGroup> = grads
                .params(&g)
                .iter()
                .filter(|(_, arr)| arr.iter().any(|&v| v != 0.0))
                .map(|(id, _)| store.group(*id))
                .collect();
            gs.dedup();
            gs
        };

        let lc_groups = groups_of(g.backward(l.l_c));
        assert!(lc_groups.iter().all(|&gp| gp == ParamGroup::Fase), "{lc_groups:?}");

        let lf_groups = groups_of(g.backward(l.l_f));
        assert!(
            lf_groups
                .iter()
                .all(|&gp| gp == ParamGroup::Fase || gp == ParamGroup::Codec),
            "{lf_groups:?}"
        );

        let ld_groups = groups_of(g.backward(l.l_diff));
        assert!(
            ld_groups.iter().all(|&gp| is_generative(gp) && gp != ParamGroup::Fase),
            "{ld_groups:?}"
        );

        let rd_groups = groups_of(g.backward(l.rd));
        assert!(rd_groups.iter().all(|&gp| gp == ParamGroup::Codec), "{rd_groups:?}");
    }

    #[test]
    fn lambda3_zero_silences_the_denoiser() {
        let mut cfg = ModelConfig::tiny();
        cfg.lambda3 = 0.0;
        cfg.seed = 43;
        let model = Model::new(cfg).unwrap();
        let batch = tiny_batch(43);
        let mut r = rng::stream(43, "lambda3");
        let mut g = Graph::new();
        let l = stage1_losses(&model, &mut g, &batch, &mut r).unwrap();
        let grads = g.backward(l.total);
        for (id, arr) in grads.params(&g) {
            if model.store.group(id) == ParamGroup::Denoiser {
                assert!(
                    arr.iter().all(|&v| v == 0.0),
                    "denoiser param {} still trained",
                    model.store.name(id)
                );
            }
        }
    }

    #[test]
    fn rate_weight_zero_leaves_entropy_heads_untrained() {
        let tr = tiny_trainer(44);
        let batch = tiny_batch(44);
        let mut r = rng::stream(44, "rate0");
        let mut g = Graph::new();
        let z0 = g.constant(tr.model.latent_of(&batch.images));
        let fwd = tr.model.codec.forward_train(&mut g, &tr.model.store, z0, &mut r);
        let rd = tr.model.codec.rd_terms(&mut g, &fwd, z0, 0.0);
        let grads = g.backward(rd.loss);
        let mut saw_live = false;
        for (id, arr) in grads.params(&g) {
            let name = tr.model.store.name(id);
            let entropy_head =
                name.contains(".mu") || name.contains(".sigma") || name == "hyper.logits";
            if entropy_head {
                assert!(arr.iter().all(|&v| v == 0.0), "{name} trained with zero rate weight");
            } else if arr.iter().any(|&v| v != 0.0) {
                saw_live = true;
            }
        }
        assert!(saw_live, "distortion path should still train");
    }

    #[test]
    fn stage2_freezes_the_compressor() {
        let mut tr = tiny_trainer(45);
        let mut log = |_: &str| {};
        tr.pretrain_autoencoder(2, &mut log).unwrap();
        let before: Vec<ArrayD<f64>> = tr
            .model
            .store
            .ids_in(ParamGroup::Codec)
            .iter()
            .map(|&id| tr.model.store.value(id).clone())
            .collect();
        tr.run_stage2(2, &mut log).unwrap();
        let after: Vec<ArrayD<f64>> = tr
            .model
            .store
            .ids_in(ParamGroup::Codec)
            .iter()
            .map(|&id| tr.model.store.value(id).clone())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn ema_moves_exactly_once_per_step() {
        let mut tr = tiny_trainer(46);
        let live_id = tr.model.store.ids_in(ParamGroup::Fase)[0];
        let ema_id = tr.model.store.ids_in(ParamGroup::FaseEma)[0];
        let shadow_before = tr.model.store.value(ema_id).clone();
        let mut log = |_: &str| {};
        tr.run_stage1(1, &mut log).unwrap();
        let mu = tr.model.config.ema_mu;
        let live_after = tr.model.store.value(live_id).clone();
        let expect = shadow_before.mapv(|v| mu * v) + live_after.mapv(|v| (1.0 - mu) * v);
        assert_eq!(tr.model.store.value(ema_id), &expect);
    }

    #[test]
    fn pretraining_reduces_reconstruction_error() {
        let mut tr = tiny_trainer(47);
        let mut mses = Vec::new();
        let mut log = |line: &str| {
            let v: f64 = line.split("mse=").nth(1).unwrap().parse().unwrap();
            mses.push(v);
        };
        tr.pretrain_autoencoder(12, &mut log).unwrap();
        assert!(mses.last().unwrap() < mses.first().unwrap());
    }

    #[test]
    fn stage_logs_are_deterministic_across_runs() {
        let run = || -> Vec<String> {
            let mut tr = tiny_trainer(48);
            let mut lines = Vec::new();
            let mut log = |line: &str| lines.push(line.to_string());
            tr.pretrain_autoencoder(2, &mut log).unwrap();
            tr.run_stage1(2, &mut log).unwrap();
            tr.run_stage2(1, &mut log).unwrap();
            lines
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ablated_stage1_skips_the_consistency_terms() {
        let mut cfg = ModelConfig::tiny();
        cfg.use_cre = false;
        cfg.seed = 49;
        let model = Model::new(cfg).unwrap();
        let batch = tiny_batch(49);
        let mut r = rng::stream(49, "ablate");
        let mut g = Graph::new();
        let l = stage1_losses(&model, &mut g, &batch, &mut r).unwrap();
        assert_eq!(g.value(l.l_f).sum(), 0.0);
        assert_eq!(g.value(l.l_c).sum(), 0.0);
        let grads = g.backward(l.total);
        assert!(grads
            .params(&g)
            .iter()
            .all(|(id, _)| model.store.group(*id) != ParamGroup::Fase));
    }
}
