//! Latent decoding: the two-evaluation fast path and a multi-step DDIM
//! baseline.
//!
//! The fast path costs exactly two denoiser evaluations. From the starting
//! noise it predicts noise once, jumps to a clean estimate through the
//! consistency head, re-noises that estimate to a mid-schedule timestep,
//! and repeats the predict-and-jump once more. The head absorbs the error
//! a plain one-jump DDIM would make, which is what lets two evaluations
//! stand in for a long schedule.
//!
//! Without the head (the consistency ablation) the same two evaluations
//! run as a two-hop DDIM so comparisons hold the evaluation budget fixed.
//! The baseline decoder walks an evenly spaced DDIM grid with one
//! evaluation per point. Both report how many denoiser calls they made so
//! tests can pin the budget.
//!
//! Everything is built on graph ops: inference just never calls backward,
//! and the second training stage differentiates straight through both
//! evaluations.

use crate::denoiser::{ControlFeatures, Denoiser};
use crate::diffusion::NoiseSchedule;
use crate::fase::Fase;
use crate::tensor::{Graph, ParamStore, Var};

/// Decoder over one conditioning latent. `fase` is `None` under the
/// consistency ablation.
pub struct Sampler<'a> {
    pub schedule: &'a NoiseSchedule,
    pub denoiser: &'a Denoiser,
    pub fase: Option<&'a Fase>,
}

/// A decoded latent plus the number of denoiser evaluations spent.
pub struct Decoded {
    pub z0: Var,
    pub denoiser_calls: usize,
}

impl<'a> Sampler<'a> {
    fn start(
        &self,
        g: &mut Graph,
        c_hat: Var,
        noise: Var,
        init_from_control: bool,
    ) -> Var {
        if init_from_control {
            // diffuse the decoded latent to the end of the schedule instead
            // of starting from pure noise
            let t_top = self.schedule.len() - 1;
            self.schedule.add_noise_g(g, c_hat, noise, t_top)
        } else {
            noise
        }
    }

    /// Two-evaluation decode. `noise_top` seeds the trajectory and
    /// `noise_mid` re-noises the first clean estimate to `t_mid`.
    #[allow(clippy::too_many_arguments)]
    pub fn two_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        c_hat: Var,
        control: Option<ControlFeatures>,
        tokens: Var,
        noise_top: Var,
        noise_mid: Var,
        t_mid: usize,
        init_from_control: bool,
    ) -> Decoded {
        let t_top = self.schedule.len() - 1;
        assert!(t_mid < t_top, "mid timestep must precede the start");
        let z_top = self.start(g, c_hat, noise_top, init_from_control);
        let mut calls = 0;

        let eps_top = self.denoiser.forward(g, store, z_top, t_top, tokens, control);
        calls += 1;
        let z0 = match self.fase {
            Some(fase) => {
                let z0_hat = self.schedule.predict_z0_from_eps_g(g, z_top, eps_top, t_top);
                let z_tilde = fase.consistency(g, store, z_top, z0_hat, c_hat, t_top);
                let z_mid = self.schedule.add_noise_g(g, z_tilde, noise_mid, t_mid);
                let eps_mid = self.denoiser.forward(g, store, z_mid, t_mid, tokens, control);
                calls += 1;
                let z0_hat_mid = self.schedule.predict_z0_from_eps_g(g, z_mid, eps_mid, t_mid);
                fase.consistency(g, store, z_mid, z0_hat_mid, c_hat, t_mid)
            }
            None => {
                // same evaluation budget, plain DDIM hops
                let z_mid = self.schedule.ddim_step_g(g, z_top, eps_top, t_top, t_mid);
                let eps_mid = self.denoiser.forward(g, store, z_mid, t_mid, tokens, control);
                calls += 1;
                self.schedule.predict_z0_from_eps_g(g, z_mid, eps_mid, t_mid)
            }
        };
        Decoded { z0, denoiser_calls: calls }
    }

    /// Evenly spaced DDIM grid from the end of the schedule down to zero,
    /// one denoiser evaluation per grid point.
    pub fn ddim(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        c_hat: Var,
        control: Option<ControlFeatures>,
        tokens: Var,
        noise_top: Var,
        steps: usize,
        init_from_control: bool,
    ) -> Decoded {
        assert!(steps >= 2, "the grid needs at least its two endpoints");
        let t_top = self.schedule.len() - 1;
        let grid: Vec<usize> = (0..steps)
            .map(|i| {
                let frac = 1.0 - i as f64 / (steps - 1) as f64;
                (t_top as f64 * frac).round() as usize
            })
            .collect();
        debug_assert_eq!(grid[0], t_top);
        debug_assert_eq!(grid[steps - 1], 0);

        let mut z = self.start(g, c_hat, noise_top, init_from_control);
        let mut calls = 0;
        for i in 0..steps {
            let eps = self.denoiser.forward(g, store, z, grid[i], tokens, control);
            calls += 1;
            z = if i + 1 < steps {
                self.schedule.ddim_step_g(g, z, eps, grid[i], grid[i + 1])
            } else {
                self.schedule.predict_z0_from_eps_g(g, z, eps, grid[i])
            };
        }
        Decoded { z0: z, denoiser_calls: calls }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::denoiser::{ControlEncoder, SemanticEncoder};
    use crate::rng;
    use crate::tensor::ParamGroup;

    struct Rig {
        cfg: ModelConfig,
        store: ParamStore,
        schedule: NoiseSchedule,
        den: Denoiser,
        ctrl: ControlEncoder,
        _sem: SemanticEncoder,
        fase: Fase,
        r: rand_chacha::ChaCha8Rng,
    }

    fn rig(seed: u64) -> Rig {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "sampler");
        let den = Denoiser::new(&mut store, &mut r, &cfg);
        let ctrl = ControlEncoder::new(&mut store, &mut r, cfg.ae_channels, cfg.denoiser_base);
        let sem = SemanticEncoder::new(&mut store, &mut r, &cfg);
        let f = Fase::new(&mut store, &mut r, &cfg, ParamGroup::Fase);
        let schedule = NoiseSchedule::from_config(&cfg);
        Rig { cfg, store, schedule, den, ctrl, _sem: sem, fase: f, r }
    }

    fn consts(rig: &mut Rig, g: &mut Graph) -> (Var, Var, Var, Var) {
        let c_hat = g.constant(rng::normal_array(&mut rig.r, &[1, 4, 8, 8]));
        let tokens = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 4, 64])));
        let n_top = g.constant(rng::normal_array(&mut rig.r, &[1, 4, 8, 8]));
        let n_mid = g.constant(rng::normal_array(&mut rig.r, &[1, 4, 8, 8]));
        (c_hat, tokens, n_top, n_mid)
    }

    #[test]
    fn two_step_spends_exactly_two_evaluations() {
        let mut rig = rig(141);
        let mut g = Graph::new();
        let (c_hat, tokens, n_top, n_mid) = consts(&mut rig, &mut g);
        let feats = rig.ctrl.features(&mut g, &rig.store, c_hat);
        let sampler = Sampler {
            schedule: &rig.schedule,
            denoiser: &rig.den,
            fase: Some(&rig.fase),
        };
        let out = sampler.two_step(
            &mut g, &rig.store, c_hat, Some(feats), tokens, n_top, n_mid,
            rig.cfg.t_mid(), false,
        );
        assert_eq!(out.denoiser_calls, 2);
        assert_eq!(g.value(out.z0).shape(), &[1, 4, 8, 8]);
        assert!(g.value(out.z0).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ablated_two_step_keeps_the_budget() {
        let mut rig = rig(142);
        let mut g = Graph::new();
        let (c_hat, tokens, n_top, n_mid) = consts(&mut rig, &mut g);
        let sampler = Sampler {
            schedule: &rig.schedule,
            denoiser: &rig.den,
            fase: None,
        };
        let out = sampler.two_step(
            &mut g, &rig.store, c_hat, None, tokens, n_top, n_mid,
            rig.cfg.t_mid(), false,
        );
        assert_eq!(out.denoiser_calls, 2);
        assert!(g.value(out.z0).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ddim_grid_spends_one_evaluation_per_point() {
        let mut rig = rig(143);
        let mut g = Graph::new();
        let (c_hat, tokens, n_top, _) = consts(&mut rig, &mut g);
        let sampler = Sampler {
            schedule: &rig.schedule,
            denoiser: &rig.den,
            fase: Some(&rig.fase),
        };
        for steps in [2, 5, 13] {
            let out = sampler.ddim(&mut g, &rig.store, c_hat, None, tokens, n_top, steps, false);
            assert_eq!(out.denoiser_calls, steps);
            assert!(g.value(out.z0).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn control_init_changes_the_trajectory() {
        let mut rig = rig(144);
        let mut g = Graph::new();
        let (c_hat, tokens, n_top, n_mid) = consts(&mut rig, &mut g);
        let sampler = Sampler {
            schedule: &rig.schedule,
            denoiser: &rig.den,
            fase: Some(&rig.fase),
        };
        let a = sampler.two_step(
            &mut g, &rig.store, c_hat, None, tokens, n_top, n_mid, rig.cfg.t_mid(), false,
        );
        let b = sampler.two_step(
            &mut g, &rig.store, c_hat, None, tokens, n_top, n_mid, rig.cfg.t_mid(), true,
        );
        assert_ne!(g.value(a.z0), g.value(b.z0));
    }

    #[test]
    fn stage_two_gradients_flow_through_both_evaluations() {
        let mut rig = rig(145);
        let mut g = Graph::new();
        let (c_hat, tokens, n_top, n_mid) = consts(&mut rig, &mut g);
        let sampler = Sampler {
            schedule: &rig.schedule,
            denoiser: &rig.den,
            fase: Some(&rig.fase),
        };
        let out = sampler.two_step(
            &mut g, &rig.store, c_hat, None, tokens, n_top, n_mid, rig.cfg.t_mid(), false,
        );
        let target = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 4, 8, 8])));
        let loss = g.mse_sum(out.z0, target);
        let grads = g.backward(loss);
        let groups: Vec<ParamGroup> = grads
            .params(&g)
            .iter()
            .map(|(id, _)| rig.store.group(*id))
            .collect();
        assert!(groups.contains(&ParamGroup::Denoiser));
        assert!(groups.contains(&ParamGroup::Fase));
    }
}
