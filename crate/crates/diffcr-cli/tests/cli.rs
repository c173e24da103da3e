//! End-to-end tests driving the installed binary through fresh processes,
//! so decode determinism is checked across process boundaries rather than
//! within one address space.

use std::path::Path;
use std::process::{Command, Output};

fn diffcr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffcr"))
        .args(args)
        .env_remove("DIFFCR_SEED")
        .output()
        .expect("binary runs")
}

fn expect_ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Small model overrides; unlisted keys keep their defaults.
const TEST_CONFIG: &str = "\
[model]
y_channels = 8
codec_hidden = 12
hyper_dim = 12
codebook_size = 16
denoiser_base = 8
time_embed_dim = 16
semantic_tokens = 2
semantic_dim = 16
fase_hidden = 16
[diffusion]
timesteps = 100
[train]
batch_size = 1
stage1_steps = 30
stage2_steps = 10
train_crop = 32
";

fn p(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

#[test]
fn workflow_round_trips_and_reports_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("model.cfg");
    std::fs::write(&cfg, TEST_CONFIG).unwrap();
    let corpus = dir.path().join("corpus");
    let ckpt = dir.path().join("model.ckpt");

    expect_ok(&diffcr(&["make-corpus", "--out", &p(&corpus), "--count", "2", "--size", "64"]));

    // one optimizer step per phase is enough to produce a valid checkpoint
    let out = expect_ok(&diffcr(&[
        "train", "--config", &p(&cfg), "--stage", "1", "--out", &p(&ckpt),
        "--steps", "1", "--ae-steps", "1",
    ]));
    assert!(out.contains("stage1 step=1"), "missing metrics line: {out}");

    let stream = dir.path().join("img.dcr");
    let png = corpus.join("00001_stripes.png");
    let out = expect_ok(&diffcr(&[
        "compress", "--checkpoint", &p(&ckpt), "--input", &p(&png), "--output", &p(&stream),
    ]));
    assert!(out.contains("bpp="), "missing rate line: {out}");

    // the same container decodes bitwise identically in two fresh processes
    let rec_a = dir.path().join("a.png");
    let rec_b = dir.path().join("b.png");
    for rec in [&rec_a, &rec_b] {
        let out = expect_ok(&diffcr(&[
            "decompress", "--checkpoint", &p(&ckpt), "--input", &p(&stream), "--output", &p(rec),
        ]));
        assert!(out.contains("2 denoiser evaluations"), "wrong call budget: {out}");
    }
    assert_eq!(
        std::fs::read(&rec_a).unwrap(),
        std::fs::read(&rec_b).unwrap(),
        "decode differs across processes"
    );

    // stage 2 refuses to start from nothing, then runs on the stage-1 model
    let s2 = dir.path().join("s2.ckpt");
    let out = diffcr(&["train", "--config", &p(&cfg), "--stage", "2", "--out", &p(&s2)]);
    assert_eq!(code(&out), 2, "fresh stage 2 must be rejected");
    expect_ok(&diffcr(&[
        "train", "--resume", &p(&ckpt), "--stage", "2", "--out", &p(&s2), "--steps", "1",
    ]));

    // failure families map to distinct exit codes
    let bad_cfg = dir.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "timesteps = banana\n").unwrap();
    let out = diffcr(&["train", "--config", &p(&bad_cfg), "--stage", "1", "--out", &p(&s2)]);
    assert_eq!(code(&out), 2, "config error");

    let trunc = dir.path().join("trunc.dcr");
    let bytes = std::fs::read(&stream).unwrap();
    std::fs::write(&trunc, &bytes[..bytes.len() / 2]).unwrap();
    let out = diffcr(&[
        "decompress", "--checkpoint", &p(&ckpt), "--input", &p(&trunc), "--output", &p(&rec_a),
    ]);
    assert_eq!(code(&out), 3, "bitstream error");

    let bad_ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&bad_ckpt, b"not a checkpoint").unwrap();
    let out = diffcr(&[
        "compress", "--checkpoint", &p(&bad_ckpt), "--input", &p(&png), "--output", &p(&stream),
    ]);
    assert_eq!(code(&out), 4, "checkpoint error");
}

#[test]
fn corpus_generation_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        expect_ok(&diffcr(&[
            "make-corpus", "--out", &p(out), "--count", "3", "--size", "32", "--seed", seed,
        ]));
    }
    for name in ["00000_gradient.png", "00001_stripes.png", "00002_blobs.png"] {
        let bytes_a = std::fs::read(a.join(name)).unwrap();
        assert_eq!(bytes_a, std::fs::read(b.join(name)).unwrap(), "{name} differs across runs");
        assert_ne!(bytes_a, std::fs::read(c.join(name)).unwrap(), "{name} ignores the seed");
    }
}

#[test]
fn bd_rate_matches_known_rate_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let reference = dir.path().join("ref.tsv");
    let test = dir.path().join("test.tsv");
    let mut ref_rows = String::from("# bpp\tquality\n");
    let mut test_rows = String::new();
    for i in 0..5 {
        let q = 30.0 + 2.0 * i as f64;
        let bpp = 0.25 * 2f64.powi(i);
        ref_rows.push_str(&format!("{bpp}\t{q}\n"));
        test_rows.push_str(&format!("{}\t{q}\n", 0.9 * bpp));
    }
    std::fs::write(&reference, ref_rows).unwrap();
    std::fs::write(&test, test_rows).unwrap();

    for extra in [&[][..], &["--pchip"][..]] {
        let mut args = vec!["bd-rate", "--reference", reference.to_str().unwrap(), "--test", test.to_str().unwrap()];
        args.extend_from_slice(extra);
        let out = expect_ok(&diffcr(&args));
        assert!(out.contains("bd_rate=-10.0000%"), "expected -10% for a 0.9x curve: {out}");
    }
}
