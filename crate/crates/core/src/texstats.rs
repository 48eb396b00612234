//! Pooling-region texture statistics with analytic gradients.
//!
//! # Pyramid
//!
//! `L0` is the grayscale image and `L{s+1} = decimate(binomial5(Ls))`. The
//! bandpass residual `Ds = Ls - up(L{s+1})` is split into oriented bands with
//! kernels `K_o = delta / n - beta * (cos 2t (Gxx - Gyy) / 2 + sin 2t Gxy)`
//! built from second derivatives of a unit Gaussian (`t = o * pi / n`). The
//! oriented parts cancel across orientations, so `sum_o B(s, o) = Ds` and the
//! pyramid reconstructs its input. Band `o` responds most strongly to
//! intensity variation along direction `t` (0 = along columns, 90 degrees =
//! along rows).
//!
//! # Statistics (default 109 entries per region)
//!
//! Under the region window at each level, in this order:
//!
//! 1. mean, variance, skewness and kurtosis of `L0`;
//! 2. mean magnitude of every band `B(s, o)`;
//! 3. correlation coefficient between magnitudes of every orientation pair
//!    at the same scale;
//! 4. autocorrelation of `L0..L{n-1}` over a `(2R+1)^2` lag window,
//!    divided by the zero-lag value.
//!
//! Degenerate moments (variance below `1e-12`) define skewness, kurtosis,
//! correlations and autocorrelations as 0.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::imagekit::Image;
use crate::pooling::{LevelWindow, PoolingLayout, PoolingRegion};
use crate::{Error, Result, Scalar};

pub const MIN_PYRAMID_SIDE: usize = 16;
pub const DEGENERATE_VARIANCE: f64 = 1e-12;
pub const MIN_REGION_WEIGHT: f64 = 1e-6;
pub const PERCENT_EPS: f64 = 1e-3;

/// Gain of the oriented component of each band kernel.
pub const ORIENTATION_GAIN: f64 = 2.0;
const G2_RADIUS: i64 = 3;
const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StatsConfig {
    pub n_scales: usize,
    pub n_orientations: usize,
    pub lag_radius: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            n_scales: 3,
            n_orientations: 4,
            lag_radius: 2,
        }
    }
}

impl StatsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scales == 0 || self.n_orientations < 2 {
            return Err(Error::InvalidArgument(format!("stats config {self:?}")));
        }
        Ok(())
    }

    pub fn n_pairs(&self) -> usize {
        self.n_orientations * (self.n_orientations - 1) / 2
    }

    pub fn n_lags(&self) -> usize {
        (2 * self.lag_radius + 1).pow(2)
    }

    pub fn len(&self) -> usize {
        4 + self.n_scales * self.n_orientations + self.n_scales * self.n_pairs() + self.n_scales * self.n_lags()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Lowpass levels built by the pyramid: one more than the band scales.
    pub fn n_levels(&self) -> usize {
        self.n_scales + 1
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let energy = 4;
        let corr = energy + self.n_scales * self.n_orientations;
        let acf = corr + self.n_scales * self.n_pairs();
        (energy, corr, acf)
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n_orientations;
        (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
    }

    fn lags(&self) -> Vec<(i64, i64)> {
        let r = self.lag_radius as i64;
        (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatFamily {
    Mean,
    Variance,
    Skewness,
    Kurtosis,
    BandEnergy,
    BandCorrelation,
    Autocorrelation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatDescriptor {
    pub family: StatFamily,
    pub scale: Option<usize>,
    pub orientation: Option<usize>,
    pub orientation2: Option<usize>,
    pub lag: Option<(i64, i64)>,
}

impl StatDescriptor {
    fn plain(family: StatFamily) -> Self {
        Self {
            family,
            scale: None,
            orientation: None,
            orientation2: None,
            lag: None,
        }
    }

    /// Short column label such as `corr_s1_o0_o2` or `acf_s0_dy-1_dx2`.
    pub fn name(&self) -> String {
        match self.family {
            StatFamily::Mean => "mean".into(),
            StatFamily::Variance => "variance".into(),
            StatFamily::Skewness => "skewness".into(),
            StatFamily::Kurtosis => "kurtosis".into(),
            StatFamily::BandEnergy => format!(
                "energy_s{}_o{}",
                self.scale.unwrap_or(0),
                self.orientation.unwrap_or(0)
            ),
            StatFamily::BandCorrelation => format!(
                "corr_s{}_o{}_o{}",
                self.scale.unwrap_or(0),
                self.orientation.unwrap_or(0),
                self.orientation2.unwrap_or(0)
            ),
            StatFamily::Autocorrelation => {
                let (dy, dx) = self.lag.unwrap_or((0, 0));
                format!("acf_s{}_dy{dy}_dx{dx}", self.scale.unwrap_or(0))
            }
        }
    }
}

/// Ordered statistic descriptors; a pure function of the configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatSchema {
    pub config: StatsConfig,
    pub entries: Vec<StatDescriptor>,
}

impl StatSchema {
    pub fn new(config: StatsConfig) -> Self {
        let mut entries = vec![
            StatDescriptor::plain(StatFamily::Mean),
            StatDescriptor::plain(StatFamily::Variance),
            StatDescriptor::plain(StatFamily::Skewness),
            StatDescriptor::plain(StatFamily::Kurtosis),
        ];
        for s in 0..config.n_scales {
            for o in 0..config.n_orientations {
                entries.push(StatDescriptor {
                    scale: Some(s),
                    orientation: Some(o),
                    ..StatDescriptor::plain(StatFamily::BandEnergy)
                });
            }
        }
        for s in 0..config.n_scales {
            for (a, b) in config.pairs() {
                entries.push(StatDescriptor {
                    scale: Some(s),
                    orientation: Some(a),
                    orientation2: Some(b),
                    ..StatDescriptor::plain(StatFamily::BandCorrelation)
                });
            }
        }
        for s in 0..config.n_scales {
            for lag in config.lags() {
                entries.push(StatDescriptor {
                    scale: Some(s),
                    lag: Some(lag),
                    ..StatDescriptor::plain(StatFamily::Autocorrelation)
                });
            }
        }
        debug_assert_eq!(entries.len(), config.len());
        Self { config, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatVector<T> {
    pub values: Vec<T>,
    pub schema: Arc<StatSchema>,
    pub region_id: usize,
}

impl<T: Scalar> StatVector<T> {
    pub fn cast<U: Scalar>(&self) -> StatVector<U> {
        StatVector {
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
            schema: self.schema.clone(),
            region_id: self.region_id,
        }
    }
}

/// A single-channel plane, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Plane<T> {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![T::zero(); h * w],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.w + x]
    }

    fn add_assign(&mut self, other: &Plane<T>) {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn sub(&self, other: &Plane<T>) -> Plane<T> {
        Plane {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    fn scaled(&self, k: T) -> Plane<T> {
        Plane {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| v * k).collect(),
        }
    }

    pub fn to_image(&self) -> Image<T> {
        Image::new(self.h, self.w, 1, self.data.clone()).expect("non-empty plane")
    }
}

#[inline]
fn clampi(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Separable 1-D clamp-to-edge correlation along one axis (0 = rows, 1 = columns).
fn conv_axis<T: Scalar>(p: &Plane<T>, taps: &[T], axis: usize) -> Plane<T> {
    let r = (taps.len() / 2) as i64;
    let mut out = Plane::zeros(p.h, p.w);
    for y in 0..p.h {
        for x in 0..p.w {
            let mut acc = T::zero();
            for (k, &t) in taps.iter().enumerate() {
                let off = k as i64 - r;
                let v = if axis == 0 {
                    p.at(clampi(y as i64 + off, p.h), x)
                } else {
                    p.at(y, clampi(x as i64 + off, p.w))
                };
                acc += t * v;
            }
            out.data[y * p.w + x] = acc;
        }
    }
    out
}

fn conv_axis_adjoint<T: Scalar>(g: &Plane<T>, taps: &[T], axis: usize) -> Plane<T> {
    let r = (taps.len() / 2) as i64;
    let mut out = Plane::zeros(g.h, g.w);
    for y in 0..g.h {
        for x in 0..g.w {
            let gv = g.at(y, x);
            for (k, &t) in taps.iter().enumerate() {
                let off = k as i64 - r;
                let idx = if axis == 0 {
                    clampi(y as i64 + off, g.h) * g.w + x
                } else {
                    y * g.w + clampi(x as i64 + off, g.w)
                };
                out.data[idx] += t * gv;
            }
        }
    }
    out
}

fn blur_decimate<T: Scalar>(p: &Plane<T>) -> Plane<T> {
    let taps = BINOMIAL5.map(T::lit);
    let b = conv_axis(&conv_axis(p, &taps, 0), &taps, 1);
    let (h2, w2) = (p.h.div_ceil(2), p.w.div_ceil(2));
    let mut out = Plane::zeros(h2, w2);
    for y in 0..h2 {
        for x in 0..w2 {
            out.data[y * w2 + x] = b.at(2 * y, 2 * x);
        }
    }
    out
}

fn blur_decimate_adjoint<T: Scalar>(g: &Plane<T>, h: usize, w: usize) -> Plane<T> {
    let mut up = Plane::zeros(h, w);
    for y in 0..g.h {
        for x in 0..g.w {
            up.data[2 * y * w + 2 * x] = g.at(y, x);
        }
    }
    let taps = BINOMIAL5.map(T::lit);
    conv_axis_adjoint(&conv_axis_adjoint(&up, &taps, 1), &taps, 0)
}

/// Linear interpolation along one axis from `n/2` (rounded up) samples to `n`.
fn upsample_axis<T: Scalar>(p: &Plane<T>, n: usize, axis: usize) -> Plane<T> {
    let half = T::lit(0.5);
    let (h, w) = if axis == 0 { (n, p.w) } else { (p.h, n) };
    let mut out = Plane::zeros(h, w);
    let m = if axis == 0 { p.h } else { p.w };
    for y in 0..h {
        for x in 0..w {
            let i = if axis == 0 { y } else { x };
            let (a, b) = (i / 2, (i / 2 + 1).min(m - 1));
            let get = |j: usize| if axis == 0 { p.at(j, x) } else { p.at(y, j) };
            out.data[y * w + x] = if i % 2 == 0 { get(a) } else { half * (get(a) + get(b)) };
        }
    }
    out
}

fn upsample_axis_adjoint<T: Scalar>(g: &Plane<T>, m: usize, axis: usize) -> Plane<T> {
    let half = T::lit(0.5);
    let (h, w) = if axis == 0 { (m, g.w) } else { (g.h, m) };
    let mut out = Plane::zeros(h, w);
    for y in 0..g.h {
        for x in 0..g.w {
            let i = if axis == 0 { y } else { x };
            let gv = g.at(y, x);
            let (a, b) = (i / 2, (i / 2 + 1).min(m - 1));
            let idx = |j: usize| if axis == 0 { j * w + x } else { y * w + j };
            if i % 2 == 0 {
                out.data[idx(a)] += gv;
            } else {
                out.data[idx(a)] += half * gv;
                out.data[idx(b)] += half * gv;
            }
        }
    }
    out
}

fn upsample<T: Scalar>(p: &Plane<T>, h: usize, w: usize) -> Plane<T> {
    upsample_axis(&upsample_axis(p, h, 0), w, 1)
}

fn upsample_adjoint<T: Scalar>(g: &Plane<T>, h2: usize, w2: usize) -> Plane<T> {
    upsample_axis_adjoint(&upsample_axis_adjoint(g, w2, 1), h2, 0)
}

/// Band kernel for orientation `o` of `n`, `(2*3+1)^2` taps, row-major over `(dy, dx)`.
pub fn band_kernel(o: usize, n: usize) -> Vec<f64> {
    let t = std::f64::consts::PI * o as f64 / n as f64;
    let (c2, s2) = exact_cos_sin(2.0 * t);
    let r = G2_RADIUS;
    let mut k = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (dx as f64, dy as f64);
            let g = (-(x * x + y * y) / 2.0).exp() / (2.0 * std::f64::consts::PI);
            let gxx = (x * x - 1.0) * g;
            let gyy = (y * y - 1.0) * g;
            let gxy = x * y * g;
            let mut v = -ORIENTATION_GAIN * (c2 * (gxx - gyy) / 2.0 + s2 * gxy);
            if dx == 0 && dy == 0 {
                v += 1.0 / n as f64;
            }
            k.push(v);
        }
    }
    k
}

/// cos/sin with exact zeros and ones at multiples of a quarter turn.
fn exact_cos_sin(a: f64) -> (f64, f64) {
    let quarter = a / std::f64::consts::FRAC_PI_2;
    if (quarter - quarter.round()).abs() < 1e-12 {
        match (quarter.round() as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        (a.cos(), a.sin())
    }
}

fn conv2d<T: Scalar>(p: &Plane<T>, kernel: &[T]) -> Plane<T> {
    let r = G2_RADIUS;
    let side = (2 * r + 1) as usize;
    let mut out = Plane::zeros(p.h, p.w);
    for y in 0..p.h {
        for x in 0..p.w {
            let mut acc = T::zero();
            for (ky, dy) in (-r..=r).enumerate() {
                let sy = clampi(y as i64 + dy, p.h);
                for (kx, dx) in (-r..=r).enumerate() {
                    let sx = clampi(x as i64 + dx, p.w);
                    acc += kernel[ky * side + kx] * p.at(sy, sx);
                }
            }
            out.data[y * p.w + x] = acc;
        }
    }
    out
}

fn conv2d_adjoint<T: Scalar>(g: &Plane<T>, kernel: &[T], out: &mut Plane<T>) {
    let r = G2_RADIUS;
    let side = (2 * r + 1) as usize;
    for y in 0..g.h {
        for x in 0..g.w {
            let gv = g.at(y, x);
            if gv == T::zero() {
                continue;
            }
            for (ky, dy) in (-r..=r).enumerate() {
                let sy = clampi(y as i64 + dy, g.h);
                for (kx, dx) in (-r..=r).enumerate() {
                    let sx = clampi(x as i64 + dx, g.w);
                    out.data[sy * g.w + sx] += kernel[ky * side + kx] * gv;
                }
            }
        }
    }
}

/// Lowpass chain, bandpass residuals and oriented bands of a grayscale image.
#[derive(Debug, Clone)]
pub struct Pyramid<T> {
    pub config: StatsConfig,
    /// `L0..L{n_scales}`.
    pub lowpass: Vec<Plane<T>>,
    /// `D0..D{n_scales-1}`.
    pub bandpass: Vec<Plane<T>>,
    /// `bands[s][o]`.
    pub bands: Vec<Vec<Plane<T>>>,
}

fn kernels<T: Scalar>(n: usize) -> Vec<Vec<T>> {
    (0..n)
        .map(|o| band_kernel(o, n).into_iter().map(T::lit).collect())
        .collect()
}

pub fn build_pyramid<T: Scalar>(gray: &Image<T>) -> Result<Pyramid<T>> {
    build_pyramid_with(gray, StatsConfig::default())
}

pub fn build_pyramid_with<T: Scalar>(gray: &Image<T>, config: StatsConfig) -> Result<Pyramid<T>> {
    config.validate()?;
    if gray.channels() != 1 {
        return Err(Error::BadChannelCount {
            expected: "1",
            got: gray.channels(),
        });
    }
    let side = gray.height().min(gray.width());
    if side < MIN_PYRAMID_SIDE {
        return Err(Error::TooSmall {
            min: MIN_PYRAMID_SIDE,
            got: side,
        });
    }
    let mut lowpass = vec![Plane {
        h: gray.height(),
        w: gray.width(),
        data: gray.data().to_vec(),
    }];
    for s in 0..config.n_scales {
        let next = blur_decimate(&lowpass[s]);
        lowpass.push(next);
    }
    let ks = kernels::<T>(config.n_orientations);
    let mut bandpass = Vec::with_capacity(config.n_scales);
    let mut bands = Vec::with_capacity(config.n_scales);
    for s in 0..config.n_scales {
        let (h, w) = (lowpass[s].h, lowpass[s].w);
        let d = lowpass[s].sub(&upsample(&lowpass[s + 1], h, w));
        bands.push(ks.iter().map(|k| conv2d(&d, k)).collect());
        bandpass.push(d);
    }
    Ok(Pyramid {
        config,
        lowpass,
        bandpass,
        bands,
    })
}

impl<T: Scalar> Pyramid<T> {
    /// Collapses the oriented bands and the coarsest lowpass back into an image.
    pub fn reconstruct(&self) -> Image<T> {
        let mut acc = self.lowpass[self.config.n_scales].clone();
        for s in (0..self.config.n_scales).rev() {
            let (h, w) = (self.lowpass[s].h, self.lowpass[s].w);
            let mut level = upsample(&acc, h, w);
            for band in &self.bands[s] {
                level.add_assign(band);
            }
            acc = level;
        }
        acc.to_image()
    }
}

/// Gradient accumulators with the same layout as the pyramid.
struct PyramidGrad<T> {
    lowpass: Vec<Plane<T>>,
    bands: Vec<Vec<Plane<T>>>,
}

impl<T: Scalar> PyramidGrad<T> {
    fn zeros_like(pyr: &Pyramid<T>) -> Self {
        Self {
            lowpass: pyr.lowpass.iter().map(|p| Plane::zeros(p.h, p.w)).collect(),
            bands: pyr
                .bands
                .iter()
                .map(|bs| bs.iter().map(|p| Plane::zeros(p.h, p.w)).collect())
                .collect(),
        }
    }

    /// Pulls the accumulated gradients back to the input image.
    fn backward(self, pyr: &Pyramid<T>) -> Plane<T> {
        let n = pyr.config.n_scales;
        let ks = kernels::<T>(pyr.config.n_orientations);
        let mut grad_d: Vec<Plane<T>> = Vec::with_capacity(n);
        for s in 0..n {
            let (h, w) = (pyr.lowpass[s].h, pyr.lowpass[s].w);
            let mut gd = Plane::zeros(h, w);
            for (o, gb) in self.bands[s].iter().enumerate() {
                conv2d_adjoint(gb, &ks[o], &mut gd);
            }
            grad_d.push(gd);
        }
        let mut lowpass = self.lowpass;
        let minus_one = -T::one();
        let mut total = lowpass.pop().expect("at least one level");
        // coarsest level: only feeds D{n-1} through upsampling
        total.add_assign(&upsample_adjoint(&grad_d[n - 1], pyr.lowpass[n].h, pyr.lowpass[n].w).scaled(minus_one));
        for s in (0..n).rev() {
            let mut g = lowpass.pop().expect("level present");
            g.add_assign(&grad_d[s]);
            if s >= 1 {
                g.add_assign(
                    &upsample_adjoint(&grad_d[s - 1], pyr.lowpass[s].h, pyr.lowpass[s].w).scaled(minus_one),
                );
            }
            g.add_assign(&blur_decimate_adjoint(&total, pyr.lowpass[s].h, pyr.lowpass[s].w));
            total = g;
        }
        total
    }
}

/// Region windows at every level the statistics read.
pub type RegionWindows = Vec<LevelWindow>;

pub fn region_windows(region: &PoolingRegion, frame_h: usize, frame_w: usize, config: &StatsConfig) -> RegionWindows {
    (0..config.n_scales)
        .map(|s| region.level_window(s, frame_h, frame_w))
        .collect()
}

/// Statistics of one pooling region.
pub fn region_stats<T: Scalar>(
    pyr: &Pyramid<T>,
    region: &PoolingRegion,
    region_id: usize,
    schema: &Arc<StatSchema>,
) -> Result<StatVector<T>> {
    let wins = region_windows(region, pyr.lowpass[0].h, pyr.lowpass[0].w, &pyr.config);
    region_stats_windows(pyr, &wins, region_id, schema)
}

pub fn region_stats_windows<T: Scalar>(
    pyr: &Pyramid<T>,
    wins: &RegionWindows,
    region_id: usize,
    schema: &Arc<StatSchema>,
) -> Result<StatVector<T>> {
    if schema.config != pyr.config {
        return Err(Error::SchemaMismatch("pyramid and schema configurations differ".into()));
    }
    check_windows(wins, region_id)?;
    Ok(StatVector {
        values: RegionEval::new(pyr, wins).values(),
        schema: schema.clone(),
        region_id,
    })
}

fn check_windows(wins: &RegionWindows, region_id: usize) -> Result<()> {
    for (level, win) in wins.iter().enumerate() {
        let total = win.total();
        if !(total >= MIN_REGION_WEIGHT) {
            return Err(Error::DegenerateRegion {
                region: region_id,
                level,
                weight: total,
            });
        }
    }
    Ok(())
}

/// Statistics for every region of a layout, computed from one pyramid.
pub fn layout_stats<T: Scalar>(gray: &Image<T>, layout: &PoolingLayout, config: StatsConfig) -> Result<Vec<StatVector<T>>> {
    if gray.height() != layout.height() || gray.width() != layout.width() {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs layout {}x{}",
            gray.height(),
            gray.width(),
            layout.height(),
            layout.width()
        )));
    }
    let pyr = build_pyramid_with(gray, config)?;
    let schema = Arc::new(StatSchema::new(config));
    layout
        .regions
        .iter()
        .enumerate()
        .map(|(i, r)| region_stats(&pyr, r, i, &schema))
        .collect()
}

/// Weighted view of one plane under one window.
struct Weighted<'a, T> {
    plane: &'a Plane<T>,
    win: &'a LevelWindow,
    total: T,
}

impl<'a, T: Scalar> Weighted<'a, T> {
    fn new(plane: &'a Plane<T>, win: &'a LevelWindow) -> Self {
        Self {
            plane,
            win,
            total: T::lit(win.total()),
        }
    }

    /// Iterates `(plane index, weight)` over the window.
    fn iter(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        let b = self.win.bbox;
        let w = self.plane.w;
        (0..b.h).flat_map(move |r| {
            (0..b.w).filter_map(move |c| {
                let wt = self.win.weights[r * b.w + c];
                (wt != 0.0).then(|| ((b.y0 + r) * w + b.x0 + c, T::lit(wt)))
            })
        })
    }

    fn mean_of(&self, f: impl Fn(usize) -> T) -> T {
        self.iter().map(|(i, w)| w * f(i)).sum::<T>() / self.total
    }
}

fn degenerate<T: Scalar>(v: T) -> bool {
    !(v.as_f64() >= DEGENERATE_VARIANCE)
}

/// Forward evaluation and vector-Jacobian product for one region.
struct RegionEval<'a, T> {
    pyr: &'a Pyramid<T>,
    wins: &'a RegionWindows,
}

impl<'a, T: Scalar> RegionEval<'a, T> {
    fn new(pyr: &'a Pyramid<T>, wins: &'a RegionWindows) -> Self {
        Self { pyr, wins }
    }

    fn values(&self) -> Vec<T> {
        let cfg = &self.pyr.config;
        let mut out = Vec::with_capacity(cfg.len());
        out.extend(self.marginals());
        for s in 0..cfg.n_scales {
            let view = Weighted::new(&self.pyr.bands[s][0], &self.wins[s]);
            for band in &self.pyr.bands[s] {
                out.push(view.mean_of(|i| band.data[i].abs()));
            }
        }
        for s in 0..cfg.n_scales {
            for (a, b) in cfg.pairs() {
                out.push(self.band_corr(s, a, b).0);
            }
        }
        for s in 0..cfg.n_scales {
            out.extend(self.autocorr(s));
        }
        out
    }

    fn marginals(&self) -> [T; 4] {
        let view = Weighted::new(&self.pyr.lowpass[0], &self.wins[0]);
        let x = &self.pyr.lowpass[0].data;
        let mu = view.mean_of(|i| x[i]);
        let m2 = view.mean_of(|i| (x[i] - mu).powi(2));
        if degenerate(m2) {
            return [mu, m2, T::zero(), T::zero()];
        }
        let m3 = view.mean_of(|i| (x[i] - mu).powi(3));
        let m4 = view.mean_of(|i| (x[i] - mu).powi(4));
        [mu, m2, m3 / m2.powf(T::lit(1.5)), m4 / (m2 * m2)]
    }

    /// Correlation, means and variances of band magnitudes `a` and `b` at scale `s`.
    fn band_corr(&self, s: usize, a: usize, b: usize) -> (T, [T; 2], [T; 2]) {
        let view = Weighted::new(&self.pyr.bands[s][a], &self.wins[s]);
        let (pa, pb) = (&self.pyr.bands[s][a].data, &self.pyr.bands[s][b].data);
        let ma = view.mean_of(|i| pa[i].abs());
        let mb = view.mean_of(|i| pb[i].abs());
        let va = view.mean_of(|i| (pa[i].abs() - ma).powi(2));
        let vb = view.mean_of(|i| (pb[i].abs() - mb).powi(2));
        if degenerate(va) || degenerate(vb) {
            return (T::zero(), [ma, mb], [va, vb]);
        }
        let cov = view.mean_of(|i| (pa[i].abs() - ma) * (pb[i].abs() - mb));
        (cov / (va * vb).sqrt(), [ma, mb], [va, vb])
    }

    /// Raw lag products `A(lag)` and the window mean at lowpass level `s`.
    fn raw_autocorr(&self, s: usize) -> (Vec<T>, T) {
        let plane = &self.pyr.lowpass[s];
        let view = Weighted::new(plane, &self.wins[s]);
        let mu = view.mean_of(|i| plane.data[i]);
        let lags = self.pyr.config.lags();
        let raw = lags
            .iter()
            .map(|&(dy, dx)| {
                view.mean_of(|i| {
                    let (y, x) = ((i / plane.w) as i64, (i % plane.w) as i64);
                    let j = clampi(y + dy, plane.h) * plane.w + clampi(x + dx, plane.w);
                    (plane.data[i] - mu) * (plane.data[j] - mu)
                })
            })
            .collect();
        (raw, mu)
    }

    fn autocorr(&self, s: usize) -> Vec<T> {
        let (raw, _) = self.raw_autocorr(s);
        let zero = raw[raw.len() / 2];
        if degenerate(zero) {
            return vec![T::zero(); raw.len()];
        }
        raw.iter().map(|&a| a / zero).collect()
    }

    /// Accumulates `upstream . d(stats)/d(pyramid)` into `grad`.
    fn backward(&self, upstream: &[T], grad: &mut PyramidGrad<T>) {
        let cfg = self.pyr.config;
        let (off_energy, off_corr, off_acf) = cfg.offsets();
        self.marginals_backward(&upstream[..4], &mut grad.lowpass[0]);

        for s in 0..cfg.n_scales {
            let win = &self.wins[s];
            let view = Weighted::new(&self.pyr.bands[s][0], win);
            for o in 0..cfg.n_orientations {
                let g = upstream[off_energy + s * cfg.n_orientations + o];
                if g == T::zero() {
                    continue;
                }
                let band = &self.pyr.bands[s][o].data;
                let k = g / view.total;
                let gb = &mut grad.bands[s][o].data;
                for (i, w) in view.iter() {
                    gb[i] += k * w * sign(band[i]);
                }
            }
        }

        for s in 0..cfg.n_scales {
            for (p, (a, b)) in cfg.pairs().into_iter().enumerate() {
                let g = upstream[off_corr + s * cfg.n_pairs() + p];
                if g == T::zero() {
                    continue;
                }
                let (rho, [ma, mb], [va, vb]) = self.band_corr(s, a, b);
                if degenerate(va) || degenerate(vb) {
                    continue;
                }
                let view = Weighted::new(&self.pyr.bands[s][a], &self.wins[s]);
                let sd = (va * vb).sqrt();
                let (ba, bb) = (&self.pyr.bands[s][a].data, &self.pyr.bands[s][b].data);
                let idx: Vec<(usize, T)> = view.iter().collect();
                for &(i, w) in &idx {
                    let (xa, xb) = (ba[i].abs() - ma, bb[i].abs() - mb);
                    let k = g * w / view.total;
                    let da = k * (xb / sd - rho * xa / va);
                    let db = k * (xa / sd - rho * xb / vb);
                    grad.bands[s][a].data[i] += da * sign(ba[i]);
                    grad.bands[s][b].data[i] += db * sign(bb[i]);
                }
            }
        }

        let n_lags = cfg.n_lags();
        for s in 0..cfg.n_scales {
            let g = &upstream[off_acf + s * n_lags..off_acf + (s + 1) * n_lags];
            if g.iter().all(|&v| v == T::zero()) {
                continue;
            }
            self.autocorr_backward(s, g, &mut grad.lowpass[s]);
        }
    }

    fn marginals_backward(&self, g: &[T], out: &mut Plane<T>) {
        let view = Weighted::new(&self.pyr.lowpass[0], &self.wins[0]);
        let x = &self.pyr.lowpass[0].data;
        let mu = view.mean_of(|i| x[i]);
        let m2 = view.mean_of(|i| (x[i] - mu).powi(2));
        let inv_w = T::one() / view.total;
        let two = T::lit(2.0);
        // d(m_k)/dx_p = k w_p (c_p^(k-1) - m_(k-1)) / W with m_1 = 0
        let (mut g2, mut g3, mut g4) = (g[1], T::zero(), T::zero());
        let (mut m2c, mut m3c) = (T::zero(), T::zero());
        if !degenerate(m2) {
            let m3 = view.mean_of(|i| (x[i] - mu).powi(3));
            let m4 = view.mean_of(|i| (x[i] - mu).powi(4));
            // skew = m3 m2^-1.5, kurt = m4 m2^-2
            g3 = g[2] * m2.powf(T::lit(-1.5));
            g2 += g[2] * T::lit(-1.5) * m3 * m2.powf(T::lit(-2.5));
            g4 = g[3] / (m2 * m2);
            g2 += g[3] * (-two) * m4 / (m2 * m2 * m2);
            m2c = m2;
            m3c = m3;
        }
        for (i, w) in view.iter() {
            let c = x[i] - mu;
            let k = w * inv_w;
            let mut d = g[0] * k + g2 * two * k * c;
            if g3 != T::zero() || g4 != T::zero() {
                d += g3 * T::lit(3.0) * k * (c * c - m2c);
                d += g4 * T::lit(4.0) * k * (c * c * c - m3c);
            }
            out.data[i] += d;
        }
    }

    fn autocorr_backward(&self, s: usize, g: &[T], out: &mut Plane<T>) {
        let (raw, mu) = self.raw_autocorr(s);
        let centre = raw.len() / 2;
        let zero = raw[centre];
        if degenerate(zero) {
            return;
        }
        // N(l) = A(l) / A(0)
        let mut g_raw: Vec<T> = g.iter().map(|&v| v / zero).collect();
        let g_zero: T = g.iter().zip(&raw).map(|(&v, &a)| -v * a / (zero * zero)).sum();
        g_raw[centre] += g_zero;

        let plane = &self.pyr.lowpass[s];
        let view = Weighted::new(plane, &self.wins[s]);
        let idx: Vec<(usize, T)> = view.iter().collect();
        let inv_w = T::one() / view.total;
        for (&(dy, dx), &ga) in self.pyr.config.lags().iter().zip(&g_raw) {
            if ga == T::zero() {
                continue;
            }
            let k = ga * inv_w;
            let mut shifted_mean = T::zero();
            for &(i, w) in &idx {
                let (y, x) = ((i / plane.w) as i64, (i % plane.w) as i64);
                let j = clampi(y + dy, plane.h) * plane.w + clampi(x + dx, plane.w);
                let (ci, cj) = (plane.data[i] - mu, plane.data[j] - mu);
                out.data[i] += k * w * cj;
                out.data[j] += k * w * ci;
                shifted_mean += w * cj;
            }
            shifted_mean = shifted_mean * inv_w;
            for &(i, w) in &idx {
                out.data[i] -= k * shifted_mean * w;
            }
        }
    }
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Gradient of `sum_k upstream[k] * stats[k]` with respect to the image, for
/// a set of regions sharing one pyramid. `upstream[r]` pairs with `wins[r]`.
pub fn stats_vjp<T: Scalar>(pyr: &Pyramid<T>, wins: &[RegionWindows], upstream: &[Vec<T>]) -> Image<T> {
    let mut grad = PyramidGrad::zeros_like(pyr);
    for (w, g) in wins.iter().zip(upstream) {
        RegionEval::new(pyr, w).backward(g, &mut grad);
    }
    grad.backward(pyr).to_image()
}

/// Per-entry and aggregate percent differences of `a` relative to `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentDiff {
    pub per_entry: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// `100 |a - b| / max(|b|, 1e-3)` per entry, with mean and population
/// standard deviation over entries.
pub fn percent_diff<T: Scalar>(a: &StatVector<T>, b: &StatVector<T>) -> Result<PercentDiff> {
    if a.schema != b.schema || a.values.len() != b.values.len() {
        return Err(Error::SchemaMismatch(format!(
            "{} vs {} entries",
            a.values.len(),
            b.values.len()
        )));
    }
    let per_entry: Vec<f64> = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            100.0 * (x - y).abs() / y.abs().max(PERCENT_EPS)
        })
        .collect();
    let (mean, std) = mean_std(&per_entry);
    Ok(PercentDiff { per_entry, mean, std })
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Serialize, Deserialize)]
struct StatSetDoc {
    schema: StatSchema,
    regions: Vec<RegionDoc>,
}

#[derive(Serialize, Deserialize)]
struct RegionDoc {
    region_id: usize,
    values: Vec<f64>,
}

/// JSON document with the schema once and the values of each region.
pub fn stats_to_json<T: Scalar>(stats: &[StatVector<T>]) -> Result<String> {
    let schema = stats
        .first()
        .map(|s| (*s.schema).clone())
        .unwrap_or_else(|| StatSchema::new(StatsConfig::default()));
    let doc = StatSetDoc {
        schema,
        regions: stats
            .iter()
            .map(|s| RegionDoc {
                region_id: s.region_id,
                values: s.values.iter().map(|v| v.as_f64()).collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn stats_from_json(s: &str) -> Result<Vec<StatVector<f64>>> {
    let doc: StatSetDoc = serde_json::from_str(s)?;
    if doc.schema != StatSchema::new(doc.schema.config) {
        return Err(Error::SchemaMismatch("schema entries do not match configuration".into()));
    }
    let schema = Arc::new(doc.schema);
    doc.regions
        .into_iter()
        .map(|r| {
            if r.values.len() != schema.len() {
                return Err(Error::SchemaMismatch(format!("region {} has {} values", r.region_id, r.values.len())));
            }
            Ok(StatVector {
                values: r.values,
                schema: schema.clone(),
                region_id: r.region_id,
            })
        })
        .collect()
}

/// CSV with a `region_id` column followed by one column per statistic.
pub fn stats_to_csv<T: Scalar>(stats: &[StatVector<T>]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    if let Some(first) = stats.first() {
        let mut header = vec!["region_id".to_string()];
        header.extend(first.schema.entries.iter().map(|d| d.name()));
        wtr.write_record(&header)?;
    }
    for s in stats {
        let mut row = vec![s.region_id.to_string()];
        row.extend(s.values.iter().map(|v| format!("{:e}", v.as_f64())));
        wtr.write_record(&row)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
