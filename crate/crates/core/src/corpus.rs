//! Image corpora: procedural fixtures, PNG directories and paired-target manifests.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::foveamask::Fixation;
use crate::imagekit::{center_crop_square, read_png, resize_bilinear, to_grayscale, Image};
use crate::pooling::{build_layout, DEFAULT_BOUMA, DEFAULT_R_MIN};
use crate::radialblur::{radial_blur, BlurProfile, DEFAULT_SIGMA_MAX};
use crate::statmatch::{synthesize, SynthOptions};
use crate::texstats::{layout_stats, StatsConfig};
use crate::{Error, Result};

/// Procedural images stay this far from 0 and 1.
pub const HEADROOM: f64 = 0.05;

/// RGB image in `[HEADROOM, 1 - HEADROOM]` built from a seeded mix of a colour gradient,
/// soft blobs, oriented gratings, rectangles, discs and faint pixel noise.
pub fn procedural_image(seed: u64, h: usize, w: usize) -> Image<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = h.min(w) as f64;
    let mut acc = vec![[0.0f64; 3]; h * w];

    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
    let tilt: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.3..0.3));
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f64 * theta.cos() + y as f64 * theta.sin()) / scale) - 0.5;
            for c in 0..3 {
                acc[y * w + x][c] = base[c] + tilt[c] * t;
            }
        }
    }

    for _ in 0..rng.gen_range(3..7) {
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let r = rng.gen_range(0.05..0.2) * scale;
        let amp: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.4..0.4));
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let g = (-d2 / (2.0 * r * r)).exp();
                for c in 0..3 {
                    acc[y * w + x][c] += amp[c] * g;
                }
            }
        }
    }

    for _ in 0..rng.gen_range(2..5) {
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (rh, rw) = (rng.gen_range(h / 8..h / 2 + 1), rng.gen_range(w / 8..w / 2 + 1));
        let period = rng.gen_range(2.5..8.0);
        let ang: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let amp = rng.gen_range(0.15..0.35);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..1.0));
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                let u = x as f64 * ang.cos() + y as f64 * ang.sin();
                let s = amp * (std::f64::consts::TAU * u / period).sin();
                for c in 0..3 {
                    acc[y * w + x][c] += s * tint[c];
                }
            }
        }
    }

    for _ in 0..rng.gen_range(4..9) {
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (rh, rw) = (rng.gen_range(2..h / 4 + 3), rng.gen_range(2..w / 4 + 3));
        let col: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                acc[y * w + x] = col;
            }
        }
    }

    for _ in 0..rng.gen_range(3..7) {
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let r = rng.gen_range(0.03..0.12) * scale;
        let col: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        for y in 0..h {
            for x in 0..w {
                if (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2) <= r * r {
                    acc[y * w + x] = col;
                }
            }
        }
    }

    let noise = Normal::new(0.0, rng.gen_range(0.003..0.01)).expect("positive sigma");
    let mut data = Vec::with_capacity(h * w * 3);
    for px in &acc {
        let n: f64 = noise.sample(&mut rng);
        for &v in px {
            data.push((HEADROOM + (1.0 - 2.0 * HEADROOM) * (v + n).clamp(0.0, 1.0)) as f32);
        }
    }
    Image::new(h, w, 3, data).expect("sizes agree")
}

/// Stationary grayscale texture in `[HEADROOM, 1 - HEADROOM]`: a few full-frame
/// gratings over smoothed Gaussian noise, so every pooling region has contrast.
pub fn texture_image(seed: u64, h: usize, w: usize) -> Image<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.5f64; h * w];
    for _ in 0..rng.gen_range(2..5) {
        let period = rng.gen_range(3.0..12.0);
        let ang: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(0.05..0.15);
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 * ang.cos() + y as f64 * ang.sin();
                acc[y * w + x] += amp * (std::f64::consts::TAU * u / period + phase).sin();
            }
        }
    }
    let unit = Normal::new(0.0, 1.0).expect("positive sigma");
    let white: Vec<f64> = (0..h * w).map(|_| unit.sample(&mut rng)).collect();
    let amp = rng.gen_range(0.03..0.08);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += white[yy * w + xx];
                }
            }
            acc[y * w + x] += amp * s / 3.0;
        }
    }
    let data = acc.into_iter().map(|v| v.clamp(HEADROOM, 1.0 - HEADROOM) as f32).collect();
    Image::new(h, w, 1, data).expect("sizes agree")
}

/// `n` procedural images with seeds `first_seed..first_seed + n`.
pub fn procedural_corpus(first_seed: u64, n: usize, h: usize, w: usize) -> Vec<Image<f32>> {
    (0..n as u64).map(|i| procedural_image(first_seed + i, h, w)).collect()
}

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads a PNG, centre-crops it to a square and resizes to `size x size`.
pub fn load_square(path: impl AsRef<Path>, size: usize) -> Result<Image<f32>> {
    let img = center_crop_square(&read_png(path)?);
    if img.height() == size {
        return Ok(img);
    }
    resize_bilinear(&img, size, size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetOracle {
    Blur,
    Statmatch,
}

impl std::str::FromStr for TargetOracle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blur" => Ok(Self::Blur),
            "statmatch" => Ok(Self::Statmatch),
            other => Err(Error::InvalidArgument(format!("unknown oracle {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub oracle: TargetOracle,
    pub fovea_radius: f64,
    pub sigma_max: f64,
    pub bouma: f64,
    pub r_min: f64,
    pub synth: SynthOptions,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            oracle: TargetOracle::Blur,
            fovea_radius: 8.0,
            sigma_max: DEFAULT_SIGMA_MAX,
            bouma: DEFAULT_BOUMA,
            r_min: DEFAULT_R_MIN,
            synth: SynthOptions::default(),
        }
    }
}

/// A generated target with the optimizer outcome when one was involved.
#[derive(Debug, Clone)]
pub struct Target {
    pub image: Image<f32>,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: bool,
}

/// Target for `img` under a centre fixation. Statmatch targets are grayscale
/// syntheses of the image's own statistics, replicated to RGB.
pub fn make_target(img: &Image<f32>, cfg: &TargetConfig, seed: u64) -> Result<Target> {
    let (h, w) = (img.height(), img.width());
    let fix = Fixation::centered(h, w).with_radius(cfg.fovea_radius);
    match cfg.oracle {
        TargetOracle::Blur => {
            let profile = BlurProfile::for_frame(h, w, &fix, cfg.sigma_max)?;
            Ok(Target {
                image: radial_blur(img, &fix, &profile)?,
                seed,
                final_loss: None,
                iterations: None,
                converged: true,
            })
        }
        TargetOracle::Statmatch => {
            let gray = to_grayscale(img)?.cast::<f64>();
            let layout = build_layout(h, w, &fix, cfg.bouma, cfg.r_min)?.normalize_weights()?;
            let targets = layout_stats(&gray, &layout, StatsConfig::default())?;
            let opts = SynthOptions { seed, ..cfg.synth };
            let state = synthesize(&gray, &layout, &targets, &opts)?;
            let g = state.canvas.cast::<f32>();
            Ok(Target {
                image: crate::imagekit::gray_to_rgb(&g)?,
                seed,
                final_loss: Some(state.loss),
                iterations: Some(state.iteration),
                converged: state.converged,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub input: String,
    pub target: String,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub iterations: Option<usize>,
    /// The optimizer stopped above tolerance.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub size: usize,
    pub config: TargetConfig,
    pub entries: Vec<PairEntry>,
}

impl PairManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(Self::FILE_NAME);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    /// `path` may be the manifest file or the directory holding it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push(Self::FILE_NAME);
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Loads every pair, resolving relative paths against `dir`.
    pub fn load_pairs(&self, dir: impl AsRef<Path>) -> Result<Vec<(Image<f32>, Image<f32>)>> {
        let dir = dir.as_ref();
        self.entries
            .iter()
            .map(|e| Ok((read_png(dir.join(&e.input))?, read_png(dir.join(&e.target))?)))
            .collect()
    }
}
