//! Command line front end for the diffcr pipeline.
//!
//! Subcommands cover the whole workflow: synthesizing the training corpus,
//! running the two training stages, compressing and decompressing single
//! images, sweeping checkpoints into rate-distortion tables, BD-rate between
//! two such tables, and per-image diagnostics (bit allocation heatmap,
//! spectral content of the different decoders).
//!
//! Exit codes distinguish failure families so scripts can branch on them:
//! 1 io, 2 bad config or arguments, 3 malformed bitstream, 4 bad checkpoint.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{ArrayD, Axis};

use diffcr::corpus;
use diffcr::evalkit::{self, RdPoint};
use diffcr::pipeline::{DecodeMode, DecodeOptions};
use diffcr::rng;
use diffcr::train::Trainer;
use diffcr::{DiffcrError, Model, ModelConfig, Result};

#[derive(Parser)]
#[command(name = "diffcr", version, about = "Diffusion-based latent image compression")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the deterministic synthetic corpus to a directory
    MakeCorpus {
        /// Output directory, created if missing
        #[arg(long)]
        out: PathBuf,
        /// Number of images
        #[arg(long)]
        count: usize,
        /// Square image side in pixels
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Corpus seed; DIFFCR_SEED overrides, default 2024
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one training stage and save a checkpoint
    Train {
        /// Model config file (key = value lines); starts a fresh model
        #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
        config: Option<PathBuf>,
        /// Continue from an existing checkpoint instead
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Training stage: 1 fits the compressor, 2 the perceptual decoder
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Where to save the resulting checkpoint
        #[arg(long)]
        out: PathBuf,
        /// Step count override; defaults to the config's stage budget
        #[arg(long)]
        steps: Option<usize>,
        /// Autoencoder warm-up steps, run once before the first stage-1 step
        #[arg(long, default_value_t = 300)]
        ae_steps: usize,
        /// Also write the metric lines printed on stdout to this file
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compress one PNG into a container file
    Compress {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input PNG
        #[arg(long)]
        input: PathBuf,
        /// Output container
        #[arg(long)]
        output: PathBuf,
        /// Semantic label signalled out of band (adds 64 bits to the rate)
        #[arg(long)]
        label: Option<usize>,
    },
    /// Decode a container file back to a PNG
    Decompress {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input container
        #[arg(long)]
        input: PathBuf,
        /// Output PNG
        #[arg(long)]
        output: PathBuf,
        /// Decode with an n-step denoising schedule instead of the
        /// two-evaluation consistency path
        #[arg(long, conflicts_with = "coarse")]
        steps: Option<usize>,
        /// Return the coarse synthesis without running the denoiser
        #[arg(long)]
        coarse: bool,
        /// Start denoising from the diffused coarse latent instead of noise
        #[arg(long)]
        init_from_control: bool,
        /// Label that was signalled at encode time, if any
        #[arg(long)]
        label: Option<usize>,
        /// Decoder noise seed; DIFFCR_SEED overrides, default 2024
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep checkpoints over a corpus into a rate-distortion table
    Eval {
        /// Checkpoints forming one curve, typically one per rate preset
        #[arg(long, required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        /// Corpus directory with a manifest
        #[arg(long)]
        corpus: PathBuf,
        /// Anchor checkpoints; when given, prints BD-rate of the curve
        /// against this anchor curve
        #[arg(long, num_args = 1..)]
        anchors: Vec<PathBuf>,
        /// Quality metric fed into the BD computation and the table file
        #[arg(long, value_enum, default_value_t = QualityMetric::Psnr)]
        quality: QualityMetric,
        /// Monotone interpolation for BD-rate instead of the cubic fit
        #[arg(long)]
        pchip: bool,
        /// Decode with an n-step schedule instead of two evaluations
        #[arg(long)]
        steps: Option<usize>,
        /// Signal each item's corpus class as its semantic label
        #[arg(long)]
        use_labels: bool,
        /// Decoder noise seed; DIFFCR_SEED overrides, default 2024
        #[arg(long)]
        seed: Option<u64>,
        /// Write the curve as `bpp<TAB>quality` lines, ready for bd-rate
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// BD-rate between two `bpp<TAB>quality` tables
    BdRate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Monotone interpolation instead of the cubic fit
        #[arg(long)]
        pchip: bool,
    },
    /// Per-image diagnostics
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input PNG
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        /// Normalized radial frequency splitting low from high band
        #[arg(long, default_value_t = 0.5)]
        cutoff: f64,
        /// Step count of the multi-step decode arm in freq mode
        #[arg(long, default_value_t = 8)]
        steps: usize,
        /// Decoder noise seed; DIFFCR_SEED overrides, default 2024
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum QualityMetric {
    Psnr,
    MsSsim,
}

impl QualityMetric {
    fn name(self) -> &'static str {
        match self {
            QualityMetric::Psnr => "psnr",
            QualityMetric::MsSsim => "ms_ssim",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AnalyzeMode {
    /// Bit allocation: per-cell heatmap and the payload split
    Bits,
    /// Spectral content of the source and each decoder's output
    Freq,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &DiffcrError) -> u8 {
    match e {
        DiffcrError::Config { .. } | DiffcrError::Invalid(_) => 2,
        DiffcrError::Bitstream(_) => 3,
        DiffcrError::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::MakeCorpus { out, count, size, seed } => {
            let seed = rng::resolve_seed(seed);
            let items = corpus::write_corpus(&out, count, size, seed)?;
            println!("wrote {} images to {} (size {size}, seed {seed})", items.len(), out.display());
            Ok(())
        }
        Cmd::Train { config, resume, stage, out, steps, ae_steps, log } => {
            cmd_train(config, resume, stage, &out, steps, ae_steps, log)
        }
        Cmd::Compress { checkpoint, input, output, label } => {
            let model = Model::load(&checkpoint)?;
            let image = load_image4(&input)?;
            let comp = model.compress(&image, label)?;
            fs::write(&output, &comp.bytes)?;
            println!("wrote {} ({} bytes)", output.display(), comp.bytes.len());
            println!(
                "actual_bits={:.0} estimate_bits={:.2} side_bits={:.0} bpp={:.4}",
                comp.actual_bits(),
                comp.estimate_bits,
                comp.side_bits,
                comp.bpp()
            );
            Ok(())
        }
        Cmd::Decompress {
            checkpoint,
            input,
            output,
            steps,
            coarse,
            init_from_control,
            label,
            seed,
        } => {
            let model = Model::load(&checkpoint)?;
            let bytes = fs::read(&input)?;
            let mode = if coarse {
                DecodeMode::Coarse
            } else {
                match steps {
                    Some(n) => DecodeMode::Ddim(n),
                    None => DecodeMode::TwoStep,
                }
            };
            let opts = DecodeOptions { mode, init_from_control, label, seed: rng::resolve_seed(seed) };
            let dec = model.decompress(&bytes, &opts)?;
            save_image4(&output, &dec.image)?;
            println!("wrote {} ({} denoiser evaluations)", output.display(), dec.denoiser_calls);
            Ok(())
        }
        Cmd::Eval {
            checkpoints,
            corpus,
            anchors,
            quality,
            pchip,
            steps,
            use_labels,
            seed,
            out,
        } => cmd_eval(&checkpoints, &corpus, &anchors, quality, pchip, steps, use_labels, seed, out),
        Cmd::BdRate { reference, test, pchip } => {
            let r = read_rd_table(&reference)?;
            let t = read_rd_table(&test)?;
            let bd = if pchip { evalkit::bd_rate_pchip(&r, &t)? } else { evalkit::bd_rate(&r, &t)? };
            println!("bd_rate={bd:+.4}%");
            Ok(())
        }
        Cmd::Analyze { checkpoint, input, mode, cutoff, steps, seed } => {
            cmd_analyze(&checkpoint, &input, mode, cutoff, steps, seed)
        }
    }
}

/// Load a PNG as the `[1, 3, H, W]` batch the model expects.
fn load_image4(path: &Path) -> Result<ArrayD<f64>> {
    Ok(corpus::load_image(path)?.insert_axis(Axis(0)))
}

/// Save a `[1, 3, H, W]` batch as a PNG.
fn save_image4(path: &Path, image: &ArrayD<f64>) -> Result<()> {
    corpus::save_image(path, &image.index_axis(Axis(0), 0).to_owned())
}

fn cmd_train(
    config: Option<PathBuf>,
    resume: Option<PathBuf>,
    stage: u8,
    out: &Path,
    steps: Option<usize>,
    ae_steps: usize,
    log: Option<PathBuf>,
) -> Result<()> {
    let model = match (&config, &resume) {
        (_, Some(path)) => Model::load(path)?,
        (Some(path), None) => {
            let text = fs::read_to_string(path)?;
            Model::new(ModelConfig::parse(&text)?)?
        }
        (None, None) => unreachable!("clap requires one of --config / --resume"),
    };
    if stage == 2 && model.state.stage1_steps == 0 {
        return Err(DiffcrError::invalid(
            "stage 2 trains on top of a stage-1 checkpoint; run --stage 1 first",
        ));
    }

    let corpus_seed = model.config.seed;
    let mut trainer = Trainer::new(model, corpus_seed)?;
    let mut lines: Vec<String> = Vec::new();
    let mut sink = |line: &str| {
        println!("{line}");
        lines.push(line.to_string());
    };

    match stage {
        1 => {
            if trainer.model.state.ae_steps == 0 && ae_steps > 0 {
                trainer.pretrain_autoencoder(ae_steps, &mut sink)?;
            }
            let n = steps.unwrap_or(trainer.model.config.stage1_steps);
            trainer.run_stage1(n, &mut sink)?;
        }
        _ => {
            let n = steps.unwrap_or(trainer.model.config.stage2_steps);
            trainer.run_stage2(n, &mut sink)?;
        }
    }

    if let Some(path) = log {
        let mut text = lines.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(&path, text)?;
    }
    trainer.model.save(out, true)?;
    let st = &trainer.model.state;
    println!(
        "saved {} (ae_steps={} stage1_steps={} stage2_steps={})",
        out.display(),
        st.ae_steps,
        st.stage1_steps,
        st.stage2_steps
    );
    Ok(())
}

/// Rate and both quality metrics of one checkpoint averaged over a corpus.
struct SweepPoint {
    preset: u8,
    bpp: f64,
    psnr: f64,
    ms_ssim: f64,
}

impl SweepPoint {
    fn rd(&self, quality: QualityMetric) -> RdPoint {
        let q = match quality {
            QualityMetric::Psnr => self.psnr,
            QualityMetric::MsSsim => self.ms_ssim,
        };
        RdPoint { bpp: self.bpp, quality: q }
    }
}

fn sweep_checkpoint(
    path: &Path,
    items: &[(corpus::CorpusItem, ArrayD<f64>)],
    opts_base: &DecodeOptions,
    use_labels: bool,
) -> Result<SweepPoint> {
    let model = Model::load(path)?;
    let (mut bpp, mut psnr, mut ms_ssim) = (0.0, 0.0, 0.0);
    for (item, image) in items {
        let label = if use_labels { Some(item.class) } else { None };
        let comp = model.compress(image, label)?;
        let dec = model.decompress(&comp.bytes, &DecodeOptions { label, ..*opts_base })?;
        let src = image.index_axis(Axis(0), 0).to_owned();
        let rec = dec.image.index_axis(Axis(0), 0).to_owned();
        bpp += comp.bpp();
        psnr += evalkit::psnr(&src, &rec)?;
        ms_ssim += evalkit::ms_ssim(&src, &rec)?;
    }
    let n = items.len() as f64;
    Ok(SweepPoint {
        preset: model.config.preset,
        bpp: bpp / n,
        psnr: psnr / n,
        ms_ssim: ms_ssim / n,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoints: &[PathBuf],
    corpus_dir: &Path,
    anchors: &[PathBuf],
    quality: QualityMetric,
    pchip: bool,
    steps: Option<usize>,
    use_labels: bool,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let manifest = corpus::load_manifest(corpus_dir)?;
    if manifest.is_empty() {
        return Err(DiffcrError::invalid("corpus manifest is empty"));
    }
    let items: Vec<(corpus::CorpusItem, ArrayD<f64>)> = manifest
        .into_iter()
        .map(|item| {
            let image = load_image4(&item.path(corpus_dir))?;
            Ok((item, image))
        })
        .collect::<Result<_>>()?;

    let opts = DecodeOptions {
        mode: match steps {
            Some(n) => DecodeMode::Ddim(n),
            None => DecodeMode::TwoStep,
        },
        seed: rng::resolve_seed(seed),
        ..DecodeOptions::default()
    };

    println!("checkpoint\tpreset\tbpp\tpsnr\tms_ssim");
    let sweep = |paths: &[PathBuf]| -> Result<Vec<SweepPoint>> {
        let mut points = Vec::new();
        for path in paths {
            let p = sweep_checkpoint(path, &items, &opts, use_labels)?;
            println!(
                "{}\t{}\t{:.4}\t{:.3}\t{:.5}",
                path.display(),
                p.preset,
                p.bpp,
                p.psnr,
                p.ms_ssim
            );
            points.push(p);
        }
        Ok(points)
    };

    let test = sweep(checkpoints)?;
    if let Some(path) = out {
        let mut text = String::new();
        for p in &test {
            text.push_str(&format!("{:.6}\t{:.6}\n", p.bpp, p.rd(quality).quality));
        }
        fs::write(&path, text)?;
    }
    if !anchors.is_empty() {
        let anchor = sweep(anchors)?;
        let rp: Vec<RdPoint> = anchor.iter().map(|p| p.rd(quality)).collect();
        let tp: Vec<RdPoint> = test.iter().map(|p| p.rd(quality)).collect();
        let bd = if pchip { evalkit::bd_rate_pchip(&rp, &tp)? } else { evalkit::bd_rate(&rp, &tp)? };
        println!("bd_rate={bd:+.4}% (quality={}, vs anchor)", quality.name());
    }
    Ok(())
}

/// Parse a `bpp<TAB>quality` table; `#` lines are comments.
fn read_rd_table(path: &Path) -> Result<Vec<RdPoint>> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split_whitespace();
        let parse = |s: Option<&str>| -> Result<f64> {
            s.and_then(|v| v.parse().ok()).ok_or_else(|| {
                DiffcrError::invalid(format!(
                    "{} line {}: expected `bpp<TAB>quality`",
                    path.display(),
                    i + 1
                ))
            })
        };
        let bpp = parse(cols.next())?;
        let quality = parse(cols.next())?;
        points.push(RdPoint { bpp, quality });
    }
    Ok(points)
}

fn cmd_analyze(
    checkpoint: &Path,
    input: &Path,
    mode: AnalyzeMode,
    cutoff: f64,
    steps: usize,
    seed: Option<u64>,
) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let image = load_image4(input)?;
    match mode {
        AnalyzeMode::Bits => {
            let comp = model.compress(&image, None)?;
            let map = comp.bits_map.index_axis(Axis(0), 0);
            let map = map.index_axis(Axis(0), 0);
            println!("y\tx\tbits");
            for (idx, b) in map.indexed_iter() {
                println!("{}\t{}\t{b:.4}", idx[0], idx[1]);
            }
            let map_bits: f64 = map.sum();
            println!(
                "map_bits={:.3} y_bits={:.3} hyper_bits={:.3} estimate_bits={:.3} actual_bits={:.0}",
                map_bits,
                comp.y_bits_estimate,
                comp.hyper_bits_estimate,
                comp.estimate_bits,
                comp.actual_bits()
            );
            println!("partition_residual={:.3e}", (map_bits - comp.y_bits_estimate).abs());
        }
        AnalyzeMode::Freq => {
            let comp = model.compress(&image, None)?;
            let seed = rng::resolve_seed(seed);
            let decode = |mode: DecodeMode| -> Result<ArrayD<f64>> {
                let opts = DecodeOptions { mode, seed, ..DecodeOptions::default() };
                Ok(model.decompress(&comp.bytes, &opts)?.image)
            };
            let coarse = decode(DecodeMode::Coarse)?;
            let two_step = decode(DecodeMode::TwoStep)?;
            let multi = decode(DecodeMode::Ddim(steps))?;
            println!("decoder\thigh_band_fraction\tpsnr");
            let row = |name: &str, rec: Option<&ArrayD<f64>>| -> Result<()> {
                let x = rec.unwrap_or(&image);
                let hf = evalkit::high_band_energy_fraction(x, cutoff)?;
                match rec {
                    Some(rec) => {
                        println!("{name}\t{hf:.5}\t{:.3}", evalkit::psnr(&image, rec)?)
                    }
                    None => println!("{name}\t{hf:.5}\t-"),
                }
                Ok(())
            };
            row("source", None)?;
            row("coarse", Some(&coarse))?;
            row("two_step", Some(&two_step))?;
            row(&format!("ddim{steps}"), Some(&multi))?;
        }
    }
    Ok(())
}
