//! Evaluation: pixel and fovea differences, statistic error reports, runtime benchmarks.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fgn::{self, FgnParams};
use crate::foveamask::Fixation;
use crate::imagekit::{gray_to_rgb, to_grayscale, Image};
use crate::pooling::{build_layout, PoolingLayout, DEFAULT_BOUMA, DEFAULT_R_MIN};
use crate::radialblur::{radial_blur, radial_blur_layered, BlurProfile};
use crate::statmatch::{synthesize, SynthOptions};
use crate::texstats::{layout_stats, mean_std, percent_diff, StatsConfig};
use crate::{Error, Result, Scalar};

fn check_same<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// Mean absolute difference over pixels and channels on the 0-255 scale.
pub fn pixel_diff<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data().len().max(1) as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    Ok(255.0 * sum / n)
}

/// [`pixel_diff`] restricted to the closed fovea disk.
pub fn fovea_diff<T: Scalar>(a: &Image<T>, b: &Image<T>, fix: &Fixation) -> Result<f64> {
    check_same(a, b)?;
    let c = a.channels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if !fix.in_fovea(y, x) {
                continue;
            }
            for ch in 0..c {
                sum += (a.get(y, x, ch).as_f64() - b.get(y, x, ch).as_f64()).abs();
            }
            count += c;
        }
    }
    if count == 0 {
        return Err(Error::EmptyFovea);
    }
    Ok(255.0 * sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatError {
    /// Position in the input list.
    pub index: usize,
    pub mean: f64,
    pub std: f64,
}

/// Percent error of the candidate's region statistics against the
/// reference's, pooled over every statistic of every region. Sorted from the
/// highest mean error to the lowest.
pub fn stat_error_report<T: Scalar>(pairs: &[(Image<T>, Image<T>)], layout: &PoolingLayout) -> Result<Vec<StatError>> {
    let mut out = Vec::with_capacity(pairs.len());
    for (index, (cand, reference)) in pairs.iter().enumerate() {
        check_same(cand, reference)?;
        let gc = to_grayscale(cand)?.cast::<f64>();
        let gr = to_grayscale(reference)?.cast::<f64>();
        let sc = layout_stats(&gc, layout, StatsConfig::default())?;
        let sr = layout_stats(&gr, layout, StatsConfig::default())?;
        let mut entries = Vec::new();
        for (a, b) in sc.iter().zip(&sr) {
            entries.extend(percent_diff(a, b)?.per_entry);
        }
        let (mean, std) = mean_std(&entries);
        out.push(StatError { index, mean, std });
    }
    out.sort_by(|a, b| b.mean.total_cmp(&a.mean).then(a.index.cmp(&b.index)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub input_hash: String,
    pub pixel_diff_mean: Option<f64>,
    pub fovea_diff_mean: Option<f64>,
    pub stat_err_mean: Option<f64>,
    pub stat_err_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub images: usize,
    pub pixel_diff_mean: Option<f64>,
    pub fovea_diff_mean: Option<f64>,
    pub stat_err_mean: Option<f64>,
    pub stat_err_max: Option<f64>,
}

impl Aggregates {
    pub fn from_records(records: &[ImageRecord]) -> Self {
        let mean_of = |f: fn(&ImageRecord) -> Option<f64>| {
            let vals: Vec<f64> = records.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let stat_max = records
            .iter()
            .filter_map(|r| r.stat_err_mean)
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        Self {
            images: records.len(),
            pixel_diff_mean: mean_of(|r| r.pixel_diff_mean),
            fovea_diff_mean: mean_of(|r| r.fovea_diff_mean),
            stat_err_mean: mean_of(|r| r.stat_err_mean),
            stat_err_max: stat_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Runtime {
    pub backend: String,
    pub repetitions: usize,
    pub images: usize,
    /// Seconds per image.
    pub mean_s: f64,
    pub min_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<ImageRecord>,
    pub aggregates: Aggregates,
    pub runtimes: Vec<Runtime>,
    pub speedup: Option<f64>,
    pub config_hash: String,
}

/// Hex sha256 of the canonical JSON of `config`.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

impl EvalReport {
    pub fn new<C: Serialize>(records: Vec<ImageRecord>, runtimes: Vec<Runtime>, config: &C) -> Result<Self> {
        let speedup = match runtimes.as_slice() {
            [slow, fast, ..] => Some(speedup(slow, fast)),
            _ => None,
        };
        Ok(Self {
            aggregates: Aggregates::from_records(&records),
            records,
            runtimes,
            speedup,
            config_hash: config_hash(config)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a report and checks that its aggregates match its records.
    pub fn from_json(s: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(s)?;
        let expect = Aggregates::from_records(&report.records);
        if expect != report.aggregates {
            return Err(Error::InconsistentReport(format!(
                "stored {:?}, recomputed {:?}",
                report.aggregates, expect
            )));
        }
        Ok(report)
    }

    /// One row per image record.
    pub fn records_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// A foveation backend timed by [`benchmark`].
pub trait Foveator {
    fn name(&self) -> String;
    fn foveate(&self, img: &Image<f32>, fix: &Fixation) -> Result<Image<f32>>;
}

pub struct IdentityBackend;

impl Foveator for IdentityBackend {
    fn name(&self) -> String {
        "identity".into()
    }

    fn foveate(&self, img: &Image<f32>, _fix: &Fixation) -> Result<Image<f32>> {
        Ok(img.clone())
    }
}

pub struct BlurBackend {
    pub sigma_max: f64,
    /// Sigma step of the layered approximation; `None` runs the exact blur.
    pub layer_step: Option<f64>,
}

impl Foveator for BlurBackend {
    fn name(&self) -> String {
        match self.layer_step {
            Some(s) => format!("blur-layered-{s}"),
            None => "blur".into(),
        }
    }

    fn foveate(&self, img: &Image<f32>, fix: &Fixation) -> Result<Image<f32>> {
        let rgb = gray_to_rgb(img)?;
        let profile = BlurProfile::for_frame(rgb.height(), rgb.width(), fix, self.sigma_max)?;
        match self.layer_step {
            Some(step) => radial_blur_layered(&rgb, fix, &profile, step),
            None => radial_blur(&rgb, fix, &profile),
        }
    }
}

pub struct FgnBackend {
    pub params: FgnParams<f32>,
}

impl Foveator for FgnBackend {
    fn name(&self) -> String {
        "fgn".into()
    }

    fn foveate(&self, img: &Image<f32>, fix: &Fixation) -> Result<Image<f32>> {
        fgn::foveate(&self.params, img, fix)
    }
}

pub struct StatmatchBackend {
    pub options: SynthOptions,
    pub bouma: f64,
    pub r_min: f64,
}

impl Default for StatmatchBackend {
    fn default() -> Self {
        Self {
            options: SynthOptions::default(),
            bouma: DEFAULT_BOUMA,
            r_min: DEFAULT_R_MIN,
        }
    }
}

impl Foveator for StatmatchBackend {
    fn name(&self) -> String {
        "statmatch".into()
    }

    /// Synthesizes from the image's own statistics, the ground-truth path.
    fn foveate(&self, img: &Image<f32>, fix: &Fixation) -> Result<Image<f32>> {
        let gray = to_grayscale(img)?.cast::<f64>();
        let layout = build_layout(gray.height(), gray.width(), fix, self.bouma, self.r_min)?.normalize_weights()?;
        let targets = layout_stats(&gray, &layout, StatsConfig::default())?;
        let state = synthesize(&gray, &layout, &targets, &self.options)?;
        gray_to_rgb(&state.canvas.cast::<f32>())
    }
}

/// Wall-clock seconds per image around the in-memory call, over
/// `repetitions >= 3` passes of the corpus.
pub fn benchmark(backend: &dyn Foveator, images: &[(Image<f32>, Fixation)], repetitions: usize) -> Result<Runtime> {
    if repetitions < 3 {
        return Err(Error::InvalidArgument(format!("{repetitions} repetitions, need at least 3")));
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty benchmark corpus".into()));
    }
    let mut times = Vec::with_capacity(repetitions * images.len());
    for _ in 0..repetitions {
        for (img, fix) in images {
            let t = Instant::now();
            let out = backend.foveate(img, fix)?;
            times.push(t.elapsed().as_secs_f64());
            std::hint::black_box(out);
        }
    }
    Ok(Runtime {
        backend: backend.name(),
        repetitions,
        images: images.len(),
        mean_s: times.iter().sum::<f64>() / times.len() as f64,
        min_s: times.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// How many times faster `fast` is than `slow`, by mean time.
pub fn speedup(slow: &Runtime, fast: &Runtime) -> f64 {
    slow.mean_s / fast.mean_s
}
