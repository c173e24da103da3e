//! Finite-difference checks for every op's backward pass.
//!
//! Central differences in f64 with eps = 1e-5 leave truncation error around
//! 1e-10 for smooth ops, so failures here mean a wrong adjoint, not noise.
//! Ops with kinks (clamps, floors) are checked away from their boundary;
//! straight-through ops are checked for the pass-through property instead.

use super::init;
use super::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::rng;
use ndarray::IxDyn;

fn eval_loss(store: &ParamStore, build: &dyn Fn(&mut Graph, &ParamStore) -> Var) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    assert_eq!(g.value(loss).len(), 1, "loss must be scalar");
    g.value(loss)[[0]]
}

/// Compare autodiff parameter gradients against central differences.
/// Checks every coordinate of params with <= 24 elements, else a strided
/// sample of 12.
pub(crate) fn check_params(
    store: &mut ParamStore,
    build: &dyn Fn(&mut Graph, &ParamStore) -> Var,
    eps: f64,
    rtol: f64,
    atol: f64,
) {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss);
    let pgrads = grads.params(&g);
    let ids: Vec<ParamId> = store.ids().collect();
    for pid in ids {
        let ad = pgrads
            .iter()
            .find(|(id, _)| *id == pid)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| ndarray::ArrayD::zeros(store.value(pid).raw_dim()));
        let n = store.value(pid).len();
        let coords: Vec<usize> = if n <= 24 {
            (0..n).collect()
        } else {
            (0..12).map(|i| i * (n / 12)).collect()
        };
        for &ci in &coords {
            let orig = store.value(pid).as_slice().unwrap()[ci];
            store.value_mut(pid).as_slice_mut().unwrap()[ci] = orig + eps;
            let lp = eval_loss(store, build);
            store.value_mut(pid).as_slice_mut().unwrap()[ci] = orig - eps;
            let lm = eval_loss(store, build);
            store.value_mut(pid).as_slice_mut().unwrap()[ci] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let a = ad.as_slice().unwrap()[ci];
            let tol = atol + rtol * fd.abs().max(a.abs());
            assert!(
                (fd - a).abs() <= tol,
                "param {} coord {}: fd {fd:.9e} vs ad {a:.9e} (tol {tol:.3e})",
                store.name(pid),
                ci
            );
        }
    }
}

fn store_with(shapes: &[(&str, &[usize])], seed_domain: &str) -> ParamStore {
    let mut rng = rng::stream(11, seed_domain);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        let v = init::sample_normal(&mut rng, shape, 0.7);
        store.add(*name, ParamGroup::Codec, v);
    }
    store
}

#[test]
fn elementwise_ops() {
    let mut store = store_with(
        &[("a", &[2, 3]), ("b", &[2, 3]), ("c", &[2, 3])],
        "ew",
    );
    // keep divisor away from zero
    store.value_mut(ParamId(2)).mapv_inplace(|x| x + 3.0);
    let build = |g: &mut Graph, s: &ParamStore| {
        let a = g.param(s, ParamId(0));
        let b = g.param(s, ParamId(1));
        let c = g.param(s, ParamId(2));
        let t1 = g.add(a, b);
        let t2 = g.div(a, c);
        let t3 = g.mul(t1, t2);
        let t4 = g.silu(t3);
        let t5 = g.add_scaled(t4, b, 0.3);
        let t6 = g.affine(t5, 1.7, -0.2);
        let t7 = g.sub(t6, a);
        g.mean_all(t7)
    };
    check_params(&mut store, &build, 1e-5, 1e-6, 1e-9);
}

#[test]
fn reductions_and_rowsum() {
    let mut store = store_with(&[("a", &[3, 4, 2]), ("b", &[3, 4, 2])], "red");
    let build = |g: &mut Graph, s: &ParamStore| {
        let a = g.param(s, ParamId(0));
        let b = g.param(s, ParamId(1));
        let rows = g.mse_rowsum(a, b);
        let w = ndarray::ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.2, 1.3, 0.5]).unwrap();
        let wrows = g.mul_const(rows, &w);
        let s1 = g.sum_all(wrows);
        let s2 = g.mse_sum(a, b);
        g.add_scaled(s1, s2, 0.25)
    };
    check_params(&mut store, &build, 1e-5, 1e-6, 1e-9);
}

#[test]
fn linear_softmax_attention() {
    let mut store = store_with(
        &[
            ("x", &[2, 4, 6]),
            ("wq", &[6, 5]),
            ("wk", &[6, 5]),
            ("wv", &[6, 5]),
            ("bq", &[5]),
        ],
        "attn",
    );
    let build = |g: &mut Graph, s: &ParamStore| {
        let x = g.param(s, ParamId(0));
        let wq = g.param(s, ParamId(1));
        let wk = g.param(s, ParamId(2));
        let wv = g.param(s, ParamId(3));
        let bq = g.param(s, ParamId(4));
        let q = g.linear(x, wq, Some(bq));
        let k = g.linear(x, wk, None);
        let v = g.linear(x, wv, None);
        let scores = g.bmm(q, k, true);
        let scaled = g.affine(scores, 1.0 / (5.0f64).sqrt(), 0.0);
        let attn = g.softmax_last(scaled);
        let out = g.bmm(attn, v, false);
        let tgt = g.constant(ndarray::ArrayD::zeros(IxDyn(&[2, 4, 5])));
        g.mse_sum(out, tgt)
    };
    check_params(&mut store, &build, 1e-5, 1e-6, 1e-9);
}

#[test]
fn conv_upsample_film() {
    let mut store = store_with(
        &[
            ("x", &[2, 3, 6, 6]),
            ("w1", &[4, 3, 3, 3]),
            ("b1", &[4]),
            ("w2", &[2, 4, 3, 3]),
            ("scale", &[2, 4]),
            ("shift", &[2, 4]),
        ],
        "conv",
    );
    let build = |g: &mut Graph, s: &ParamStore| {
        let x = g.param(s, ParamId(0));
        let w1 = g.param(s, ParamId(1));
        let b1 = g.param(s, ParamId(2));
        let w2 = g.param(s, ParamId(3));
        let sc = g.param(s, ParamId(4));
        let sh = g.param(s, ParamId(5));
        let h1 = g.conv2d(x, w1, Some(b1), 2, 1); // 6x6 -> 3x3
        let h2 = g.film(h1, sc, sh);
        let h3 = g.silu(h2);
        let h4 = g.upsample_nearest2(h3); // 3x3 -> 6x6
        let h5 = g.conv2d(h4, w2, None, 1, 1);
        let tgt = g.constant(ndarray::ArrayD::zeros(IxDyn(&[2, 2, 6, 6])));
        g.mse_sum(h5, tgt)
    };
    check_params(&mut store, &build, 1e-5, 1e-6, 1e-9);
}

#[test]
fn structural_ops() {
    let mut store = store_with(
        &[("x", &[2, 3, 4, 4]), ("y", &[2, 2, 4, 4]), ("table", &[5, 4])],
        "struct",
    );
    let build = |g: &mut Graph, s: &ParamStore| {
        let x = g.param(s, ParamId(0));
        let y = g.param(s, ParamId(1));
        let t = g.param(s, ParamId(2));
        let cat = g.concat_ch(&[x, y]); // [2,5,4,4]
        let tok = g.patchify(cat, 2); // [2,4,20]
        let part = g.slice_last(tok, 3, 11);
        let back = g.reshape(part, &[2, 2, 4, 4]);
        let un = g.mean_pool_to(back, 2, 2);
        let rows = g.select_rows(t, &[1, 3, 0, 4]); // [4,4]
        let rows4 = g.reshape(rows, &[2, 2, 2, 2]);
        let d = g.sub(un, rows4);
        let up = g.unpatchify(tok, 5, 4, 4, 2);
        let s1 = g.mse_sum(cat, up); // unpatchify(patchify(x)) == x, contributes 0 but exercises both
        let s2 = g.mean_all(d);
        let s3 = g.mse_sum(d, rows4);
        let chans = g.sum_channels(cat); // [2,1,4,4]
        let s4 = g.mean_all(chans);
        let t1 = g.add(s2, s3);
        let t2 = g.add(t1, s4);
        g.add_scaled(t2, s1, 1.0)
    };
    check_params(&mut store, &build, 1e-5, 1e-6, 1e-9);
}

#[test]
fn fft_chain() {
    let mut store = store_with(&[("x", &[1, 2, 4, 4]), ("m", &[1, 4, 4, 4])], "fft");
    let build = |g: &mut Graph, s: &ParamStore| {
        let x = g.param(s, ParamId(0));
        let m = g.param(s, ParamId(1));
        let spec = g.fft2(x); // [1,4,4,4]
        let mixed = g.mul(spec, m);
        let herm = g.hermitize(mixed);
        let back = g.ifft2_real(herm);
        let tgt = g.constant(ndarray::ArrayD::zeros(IxDyn(&[1, 2, 4, 4])));
        g.mse_sum(back, tgt)
    };
    check_params(&mut store, &build, 1e-5, 1e-6, 1e-9);
}

#[test]
fn fft_roundtrip_is_identity() {
    let mut rng = rng::stream(3, "fftrt");
    let x = init::sample_normal(&mut rng, &[2, 3, 8, 8], 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let spec = g.fft2(xv);
    let back = g.ifft2_real(spec);
    let err = (g.value(back) - &x).mapv(f64::abs).sum();
    assert!(err < 1e-10, "fft roundtrip error {err}");
}

#[test]
fn hermitized_spectrum_inverts_to_real() {
    // arbitrary non-symmetric spectrum: after hermitize, the full complex
    // inverse must have negligible imaginary part
    let mut rng = rng::stream(4, "herm");
    let spec = init::sample_normal(&mut rng, &[1, 2, 6, 6], 1.0);
    let mut g = Graph::new();
    let sv = g.constant(spec);
    let hv = g.hermitize(sv);
    let h = g.value(hv);
    let hw = 36;
    let re = &h.as_slice().unwrap()[0..hw];
    let im = &h.as_slice().unwrap()[hw..2 * hw];
    let mut buf: Vec<rustfft::num_complex::Complex<f64>> = re
        .iter()
        .zip(im)
        .map(|(&r, &i)| rustfft::num_complex::Complex::new(r, i))
        .collect();
    super::fft::fft2_inplace(&mut buf, 6, 6, true);
    let max_im = buf.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    let norm: f64 = buf.iter().map(|c| c.norm()).sum();
    assert!(max_im < 1e-12 * norm.max(1.0), "imag leak {max_im}");
}

#[test]
fn rate_expression_grads() {
    // the training rate term: -log2(max(Phi(hi) - Phi(lo), floor))
    let mut store = store_with(&[("y", &[2, 8]), ("sraw", &[2, 8])], "rate");
    store.value_mut(ParamId(1)).mapv_inplace(|x| 0.6 + 0.2 * x.tanh());
    let build = |g: &mut Graph, s: &ParamStore| {
        let y = g.param(s, ParamId(0));
        let sraw = g.param(s, ParamId(1));
        let sigma = g.lower_bound(sraw, 0.01);
        let hi_in = g.affine(y, 1.0, 0.5);
        let lo_in = g.affine(y, 1.0, -0.5);
        let hi = g.div(hi_in, sigma);
        let lo = g.div(lo_in, sigma);
        let phi_hi = g.normal_cdf(hi);
        let phi_lo = g.normal_cdf(lo);
        let p = g.sub(phi_hi, phi_lo);
        let pf = g.max_scalar(p, 1.0 / 65536.0);
        let lp = g.ln(pf);
        let bits = g.affine(lp, -std::f64::consts::LOG2_E, 0.0);
        g.sum_all(bits)
    };
    check_params(&mut store, &build, 1e-6, 1e-5, 1e-8);
}

#[test]
fn straight_through_ops_pass_gradient() {
    let store = store_with(&[("x", &[2, 3])], "ste");
    let build = |g: &mut Graph, s: &ParamStore| {
        let x = g.param(s, ParamId(0));
        let r = g.round_ste(x);
        let c = g.clamp01_st(r);
        g.sum_all(c)
    };
    let mut g = Graph::new();
    let loss = build(&mut g, &store);
    let grads = g.backward(loss);
    let pg = &grads.params(&g)[0].1;
    assert!(pg.iter().all(|&v| v == 1.0), "straight-through grad must be all ones");
    // and the forward really quantizes
    let mut g2 = Graph::new();
    let x = g2.param(&store, ParamId(0));
    let r = g2.round_ste(x);
    assert!(g2.value(r).iter().all(|v| v.fract() == 0.0));
    let _ = store;
}

#[test]
fn lower_bound_gates_by_gradient_sign() {
    use ndarray::ArrayD;
    let mut store = ParamStore::new();
    let x = store.add(
        "x",
        ParamGroup::Codec,
        ArrayD::from_shape_vec(IxDyn(&[2]), vec![-0.5, 0.5]).unwrap(),
    );
    // loss = sum(lb(x, 0.0)): upstream grad +1 everywhere; clamped coord gets 0
    let mut g = Graph::new();
    let xv = g.param(&store, x);
    let lb = g.lower_bound(xv, 0.0);
    let loss = g.sum_all(lb);
    let grads = g.backward(loss);
    let pg = grads.params(&g)[0].1.clone();
    assert_eq!(pg.as_slice().unwrap(), &[0.0, 1.0]);
    // loss = -sum(lb(x, 0.0)): upstream grad -1 pushes x upward, passes through
    let mut g2 = Graph::new();
    let xv2 = g2.param(&store, x);
    let lb2 = g2.lower_bound(xv2, 0.0);
    let s = g2.sum_all(lb2);
    let loss2 = g2.affine(s, -1.0, 0.0);
    let grads2 = g2.backward(loss2);
    let pg2 = grads2.params(&g2)[0].1.clone();
    assert_eq!(pg2.as_slice().unwrap(), &[-1.0, -1.0]);
}

#[test]
fn param_bound_twice_accumulates() {
    let mut store = store_with(&[("x", &[2, 2])], "dup");
    let build = |g: &mut Graph, s: &ParamStore| {
        let x1 = g.param(s, ParamId(0));
        let x2 = g.param(s, ParamId(0));
        assert_eq!(x1, x2);
        let y = g.mul(x1, x2); // x^2: grad must be 2x
        g.sum_all(y)
    };
    check_params(&mut store, &build, 1e-5, 1e-6, 1e-9);
}

#[test]
fn detach_blocks_gradient() {
    let mut store = store_with(&[("x", &[3])], "det");
    let mut g = Graph::new();
    let x = g.param(&store, ParamId(0));
    let d = g.detach(x);
    let y = g.mul(d, d);
    let loss = g.sum_all(y);
    let grads = g.backward(loss);
    assert!(grads.of(x).is_none(), "gradient must not cross detach");
    let _ = &mut store;
}

#[test]
fn erfc_reference_values() {
    // spot values from standard tables; the approximation carries a
    // fractional error up to 1.2e-7, tolerances sized accordingly
    assert!((super::ops::erfc(0.0) - 1.0).abs() < 2e-7);
    assert!((super::ops::erfc(1.0) - 0.157_299_207_050_285).abs() < 1e-7);
    assert!((super::ops::phi(0.0) - 0.5).abs() < 1e-7);
    assert!((super::ops::phi(1.96) - 0.975_002_104_851_78).abs() < 1e-6);
    assert!((super::ops::phi(-1.0) - 0.158_655_253_931_457).abs() < 1e-7);
}
