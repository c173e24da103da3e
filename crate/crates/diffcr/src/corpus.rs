//! Deterministic synthetic training corpus.
//!
//! Four texture classes cover the spectrum the pipeline cares about:
//! smooth gradients (low frequency), periodic stripes (narrowband),
//! Gaussian blobs (smooth midband), and flat-colored shapes with hard
//! edges (broadband at the edges, flat inside). Every image is a pure
//! function of (seed, index, class, size), so two runs with the same seed
//! produce byte-identical PNGs and the manifest is enough to rebuild
//! labels for semantic conditioning.

use crate::error::{DiffcrError, Result};
use crate::rng;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::fs;
use std::path::{Path, PathBuf};

pub const NUM_CLASSES: usize = 4;
pub const MANIFEST_NAME: &str = "manifest.tsv";

pub fn class_name(class: usize) -> &'static str {
    ["gradient", "stripes", "blobs", "shapes"][class]
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusItem {
    pub file: String,
    pub class: usize,
    pub seed: u64,
}

impl CorpusItem {
    pub fn path(&self, dir: &Path) -> PathBuf {
        dir.join(&self.file)
    }
}

/// Render one corpus image as `[3, size, size]` in [0, 1].
pub fn render(class: usize, seed: u64, index: u64, size: usize) -> ArrayD<f64> {
    assert!(class < NUM_CLASSES);
    let mut r = rng::stream_at(seed, &format!("corpus-c{class}"), index);
    let s = size;
    let mut img = ArrayD::<f64>::zeros(IxDyn(&[3, s, s]));
    match class {
        0 => {
            // linear gradient between two random colors, random direction
            let c0: [f64; 3] = [r.gen(), r.gen(), r.gen()];
            let c1: [f64; 3] = [r.gen(), r.gen(), r.gen()];
            let ang: f64 = r.gen_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = (ang.sin(), ang.cos());
            for y in 0..s {
                for x in 0..s {
                    let u = ((y as f64 * dy + x as f64 * dx) / s as f64 + 1.0) / 2.0;
                    let u = u.clamp(0.0, 1.0);
                    for c in 0..3 {
                        img[IxDyn(&[c, y, x])] = c0[c] * (1.0 - u) + c1[c] * u;
                    }
                }
            }
        }
        1 => {
            // two superposed sinusoidal stripe fields
            let base: [f64; 3] = [r.gen(), r.gen(), r.gen()];
            for _ in 0..2 {
                let ang: f64 = r.gen_range(0.0..std::f64::consts::TAU);
                let freq: f64 = r.gen_range(2.0..8.0);
                let phase: f64 = r.gen_range(0.0..std::f64::consts::TAU);
                let amp: f64 = r.gen_range(0.1..0.3);
                let (dy, dx) = (ang.sin(), ang.cos());
                for y in 0..s {
                    for x in 0..s {
                        let ph = (y as f64 * dy + x as f64 * dx) / s as f64
                            * freq
                            * std::f64::consts::TAU
                            + phase;
                        let v = amp * ph.sin();
                        for c in 0..3 {
                            img[IxDyn(&[c, y, x])] += v / 3.0 + base[c] * 0.25;
                        }
                    }
                }
            }
            for y in 0..s {
                for x in 0..s {
                    for c in 0..3 {
                        img[IxDyn(&[c, y, x])] += 0.35;
                    }
                }
            }
        }
        2 => {
            // sum of random Gaussian bumps over a dark base
            let k = r.gen_range(4..9);
            let mut bumps = Vec::new();
            for _ in 0..k {
                let cy: f64 = r.gen_range(0.0..s as f64);
                let cx: f64 = r.gen_range(0.0..s as f64);
                let rad: f64 = r.gen_range(s as f64 / 12.0..s as f64 / 4.0);
                let col: [f64; 3] = [r.gen(), r.gen(), r.gen()];
                bumps.push((cy, cx, rad, col));
            }
            for y in 0..s {
                for x in 0..s {
                    let mut px = [0.08, 0.08, 0.1];
                    for &(cy, cx, rad, col) in &bumps {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let w = (-d2 / (2.0 * rad * rad)).exp();
                        for c in 0..3 {
                            px[c] += w * col[c] * 0.8;
                        }
                    }
                    for c in 0..3 {
                        img[IxDyn(&[c, y, x])] = px[c];
                    }
                }
            }
        }
        _ => {
            // flat background with hard-edged rectangles and disks
            let bg: [f64; 3] = [r.gen(), r.gen(), r.gen()];
            for y in 0..s {
                for x in 0..s {
                    for c in 0..3 {
                        img[IxDyn(&[c, y, x])] = bg[c];
                    }
                }
            }
            let k = r.gen_range(3..7);
            for _ in 0..k {
                let col: [f64; 3] = [r.gen(), r.gen(), r.gen()];
                if r.gen_bool(0.5) {
                    let y0 = r.gen_range(0..s);
                    let x0 = r.gen_range(0..s);
                    let h = r.gen_range(s / 8..s / 2);
                    let w = r.gen_range(s / 8..s / 2);
                    for y in y0..(y0 + h).min(s) {
                        for x in x0..(x0 + w).min(s) {
                            for c in 0..3 {
                                img[IxDyn(&[c, y, x])] = col[c];
                            }
                        }
                    }
                } else {
                    let cy = r.gen_range(0..s) as f64;
                    let cx = r.gen_range(0..s) as f64;
                    let rad = r.gen_range(s as f64 / 10.0..s as f64 / 3.0);
                    for y in 0..s {
                        for x in 0..s {
                            if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= rad * rad {
                                for c in 0..3 {
                                    img[IxDyn(&[c, y, x])] = col[c];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

/// Write `count` images cycling through the classes, plus the manifest.
pub fn write_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<CorpusItem>> {
    fs::create_dir_all(dir)?;
    let mut items = Vec::with_capacity(count);
    let mut manifest = String::new();
    for i in 0..count {
        let class = i % NUM_CLASSES;
        let img = render(class, seed, i as u64, size);
        let file = format!("{:05}_{}.png", i, class_name(class));
        save_image(&dir.join(&file), &img)?;
        manifest.push_str(&format!("{file}\t{class}\t{}\t{seed}\n", class_name(class)));
        items.push(CorpusItem { file, class, seed });
    }
    fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(items)
}

pub fn load_manifest(dir: &Path) -> Result<Vec<CorpusItem>> {
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut items = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(DiffcrError::invalid(format!(
                "manifest line {}: expected 4 tab-separated fields",
                ln + 1
            )));
        }
        let class: usize = fields[1]
            .parse()
            .map_err(|_| DiffcrError::invalid(format!("manifest line {}: bad class", ln + 1)))?;
        if class >= NUM_CLASSES {
            return Err(DiffcrError::invalid(format!(
                "manifest line {}: class {class} out of range",
                ln + 1
            )));
        }
        let seed: u64 = fields[3]
            .parse()
            .map_err(|_| DiffcrError::invalid(format!("manifest line {}: bad seed", ln + 1)))?;
        items.push(CorpusItem { file: fields[0].to_string(), class, seed });
    }
    if items.is_empty() {
        return Err(DiffcrError::invalid("empty corpus manifest"));
    }
    Ok(items)
}

/// Save `[3, H, W]` values in [0, 1] as an 8-bit RGB PNG.
pub fn save_image(path: &Path, img: &ArrayD<f64>) -> Result<()> {
    let shp = img.shape();
    if shp.len() != 3 || shp[0] != 3 {
        return Err(DiffcrError::shape(format!("expected [3, H, W] image, got {shp:?}")));
    }
    let (h, w) = (shp[1], shp[2]);
    let mut buf = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img[IxDyn(&[c, y, x])].clamp(0.0, 1.0);
                buf.push((v * 255.0).round() as u8);
            }
        }
    }
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized from dimensions");
    rgb.save(path).map_err(|e| DiffcrError::Image(format!("saving {}: {e}", path.display())))
}

/// Load an RGB PNG as `[3, H, W]` in [0, 1].
pub fn load_image(path: &Path) -> Result<ArrayD<f64>> {
    let img = image::open(path)
        .map_err(|e| DiffcrError::Image(format!("loading {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[3, h, w]));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[IxDyn(&[c, y as usize, x as usize])] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}
