//! Foveated generative network.
//!
//! A stack of stride-1 "same" convolutions with tanh activations. The input
//! is RGB plus the normalized eccentricity mask; each layer's pre-activation
//! also receives `mask_gain_k * mask`, broadcast over channels, so the
//! distance to the fixation reaches every depth. Colour channels are mapped
//! from `[0, 1]` to `[-1, 1]` on the way in and the final activation back on
//! the way out.
//!
//! Even kernels pad `floor((k-1)/2)` before and `ceil((k-1)/2)` after.
//! Convolutions run as im2col followed by a GEMM; backpropagation is written
//! out by hand and shares the same kernels, so the `f64` instantiation is the
//! gradient-check route for the `f32` one used in training.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::foveamask::{self, attach_mask, build_mask, Fixation, MaskChannel};
use crate::imagekit::{gray_to_rgb, Image};
use crate::{Error, Result, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FGN1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
}

impl LayerSpec {
    pub const fn new(kernels: usize, kernel_h: usize, kernel_w: usize, in_channels: usize) -> Self {
        Self {
            kernels,
            kernel_h,
            kernel_w,
            in_channels,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Weights, biases and the mask gain.
    pub fn param_count(&self) -> usize {
        self.kernels * self.fan_in() + self.kernels + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FgnArch {
    pub layers: Vec<LayerSpec>,
    pub activation: Activation,
    pub mask_gain_per_layer: bool,
}

impl FgnArch {
    /// Full-width instance: 256x16x16, 512x8x8, 512x1x1, 3x8x8.
    pub fn paper() -> Self {
        Self {
            layers: vec![
                LayerSpec::new(256, 16, 16, 4),
                LayerSpec::new(512, 8, 8, 256),
                LayerSpec::new(512, 1, 1, 512),
                LayerSpec::new(3, 8, 8, 512),
            ],
            activation: Activation::Tanh,
            mask_gain_per_layer: true,
        }
    }

    /// Full-width architecture with every hidden kernel count divided by `factor`.
    pub fn scaled(factor: usize) -> Self {
        let factor = factor.max(1);
        let paper = Self::paper();
        let mut layers = Vec::with_capacity(paper.layers.len());
        let mut in_channels = 4;
        let last = paper.layers.len() - 1;
        for (i, l) in paper.layers.iter().enumerate() {
            let kernels = if i == last { 3 } else { (l.kernels / factor).max(1) };
            layers.push(LayerSpec::new(kernels, l.kernel_h, l.kernel_w, in_channels));
            in_channels = kernels;
        }
        Self { layers, ..paper }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.layers.first().ok_or_else(|| Error::ShapeMismatch("no layers".into()))?;
        if first.in_channels != 4 {
            return Err(Error::ShapeMismatch(format!("first layer takes {} channels, not 4", first.in_channels)));
        }
        for pair in self.layers.windows(2) {
            if pair[1].in_channels != pair[0].kernels {
                return Err(Error::ShapeMismatch(format!(
                    "layer with {} kernels feeds a layer expecting {} channels",
                    pair[0].kernels, pair[1].in_channels
                )));
            }
        }
        if self.layers.iter().any(|l| l.kernels == 0 || l.kernel_h == 0 || l.kernel_w == 0) {
            return Err(Error::ShapeMismatch("empty layer".into()));
        }
        if self.layers.last().map(|l| l.kernels) != Some(3) {
            return Err(Error::ShapeMismatch("final layer must produce 3 channels".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn max_kernel(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.kernel_h.max(l.kernel_w))
            .max()
            .unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    /// `[out][in][kh][kw]`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub mask_gain: T,
}

impl<T: Scalar> LayerParams<T> {
    fn zeros(spec: &LayerSpec) -> Self {
        Self {
            weights: vec![T::zero(); spec.kernels * spec.fan_in()],
            bias: vec![T::zero(); spec.kernels],
            mask_gain: T::zero(),
        }
    }

    /// Weights, biases, then the mask gain; the checkpoint and `FgnParams::flat` order.
    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .chain(std::iter::once(&self.mask_gain))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weights
            .iter_mut()
            .chain(self.bias.iter_mut())
            .chain(std::iter::once(&mut self.mask_gain))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    #[serde(default)]
    pub options: Option<TrainOptions>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FgnParams<T> {
    pub arch: FgnArch,
    pub layers: Vec<LayerParams<T>>,
    pub mask_normalizer: f64,
    pub meta: TrainingMeta,
}

impl<T: Scalar> FgnParams<T> {
    pub fn zeros(arch: FgnArch, mask_normalizer: f64) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            layers: arch.layers.iter().map(LayerParams::zeros).collect(),
            arch,
            mask_normalizer,
            meta: TrainingMeta::default(),
        })
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`; biases and mask gains zero.
    pub fn init(arch: FgnArch, mask_normalizer: f64, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch, mask_normalizer)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (spec, layer) in p.arch.layers.iter().zip(&mut p.layers) {
            let bound = 1.0 / (spec.fan_in() as f64).sqrt();
            for w in &mut layer.weights {
                *w = T::lit(rng.gen_range(-bound..bound));
            }
        }
        p.meta.seed = seed;
        Ok(p)
    }

    pub fn cast<U: Scalar>(&self) -> FgnParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect();
        FgnParams {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: conv(&l.weights),
                    bias: conv(&l.bias),
                    mask_gain: U::lit(l.mask_gain.as_f64()),
                })
                .collect(),
            mask_normalizer: self.mask_normalizer,
            meta: self.meta.clone(),
        }
    }

    /// All parameters in checkpoint order.
    pub fn flat(&self) -> Vec<T> {
        self.layers.iter().flat_map(|l| l.values().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.arch.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                self.arch.param_count()
            )));
        }
        let mut it = values.iter();
        for layer in &mut self.layers {
            for v in layer.values_mut() {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn check_shapes(&self) -> Result<()> {
        self.arch.validate()?;
        if self.layers.len() != self.arch.layers.len() {
            return Err(Error::ShapeMismatch("layer count differs from architecture".into()));
        }
        for (spec, l) in self.arch.layers.iter().zip(&self.layers) {
            if l.weights.len() != spec.kernels * spec.fan_in() || l.bias.len() != spec.kernels {
                return Err(Error::ShapeMismatch(format!("parameters do not match {spec:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    #[default]
    Clamp,
    Wrap,
}

#[inline]
fn pad_index(i: i64, n: usize, mode: PadMode) -> usize {
    match mode {
        PadMode::Clamp => i.clamp(0, n as i64 - 1) as usize,
        PadMode::Wrap => i.rem_euclid(n as i64) as usize,
    }
}

/// Channel-major copy of an HWC image.
fn to_chw<T: Scalar>(img: &Image<T>) -> Vec<T> {
    let (n, c) = (img.height() * img.width(), img.channels());
    let mut data = vec![T::zero(); c * n];
    for (p, px) in img.data().chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * n + p] = v;
        }
    }
    data
}

/// Columns `[lo, hi)` of a shifted row read the source contiguously; the
/// rest go through the padding rule.
fn interior(w: usize, kx: usize, bw: usize) -> (usize, usize) {
    let lo = bw.saturating_sub(kx).min(w);
    let hi = (w + bw).saturating_sub(kx).min(w).max(lo);
    (lo, hi)
}

/// Column buffer: row `(ci, ky, kx)` holds the padded input shifted by that tap.
fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, spec: &LayerSpec, pad: PadMode) -> Vec<T> {
    let n = h * w;
    let (bh, bw) = ((spec.kernel_h - 1) / 2, (spec.kernel_w - 1) / 2);
    let mut cols = vec![T::zero(); spec.fan_in() * n];
    let mut row = 0;
    for ci in 0..spec.in_channels {
        let plane = &x[ci * n..(ci + 1) * n];
        for ky in 0..spec.kernel_h {
            for kx in 0..spec.kernel_w {
                let (lo, hi) = interior(w, kx, bw);
                let dst = &mut cols[row * n..(row + 1) * n];
                for y in 0..h {
                    let sy = pad_index(y as i64 + ky as i64 - bh as i64, h, pad);
                    let src = &plane[sy * w..(sy + 1) * w];
                    let d = &mut dst[y * w..(y + 1) * w];
                    d[lo..hi].copy_from_slice(&src[lo + kx - bw..hi + kx - bw]);
                    for xx in (0..lo).chain(hi..w) {
                        d[xx] = src[pad_index(xx as i64 + kx as i64 - bw as i64, w, pad)];
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], spec: &LayerSpec, h: usize, w: usize, pad: PadMode) -> Vec<T> {
    let n = h * w;
    let (bh, bw) = ((spec.kernel_h - 1) / 2, (spec.kernel_w - 1) / 2);
    let mut out = vec![T::zero(); spec.in_channels * n];
    let mut row = 0;
    for ci in 0..spec.in_channels {
        let plane = &mut out[ci * n..(ci + 1) * n];
        for ky in 0..spec.kernel_h {
            for kx in 0..spec.kernel_w {
                let (lo, hi) = interior(w, kx, bw);
                let src = &cols[row * n..(row + 1) * n];
                for y in 0..h {
                    let sy = pad_index(y as i64 + ky as i64 - bh as i64, h, pad);
                    let s = &src[y * w..(y + 1) * w];
                    let d = &mut plane[sy * w..(sy + 1) * w];
                    for (dv, &sv) in d[lo + kx - bw..hi + kx - bw].iter_mut().zip(&s[lo..hi]) {
                        *dv += sv;
                    }
                    for xx in (0..lo).chain(hi..w) {
                        d[pad_index(xx as i64 + kx as i64 - bw as i64, w, pad)] += s[xx];
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Below this many kernels a GEMM over the column buffer costs more in
/// memory traffic than it saves, so the layer convolves directly.
const DIRECT_MAX_KERNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConvPath {
    Pointwise,
    Im2col,
    Direct,
}

fn conv_path(spec: &LayerSpec) -> ConvPath {
    if spec.kernel_h == 1 && spec.kernel_w == 1 {
        ConvPath::Pointwise
    } else if spec.kernels <= DIRECT_MAX_KERNELS {
        ConvPath::Direct
    } else {
        ConvPath::Im2col
    }
}

/// Calls `f(tap, y, sy, lo, hi, sx_of)` for every kernel tap and output row,
/// where output columns `[lo, hi)` read source columns `[lo + kx - bw, hi + kx - bw)`.
fn for_each_tap_row(
    h: usize,
    w: usize,
    spec: &LayerSpec,
    pad: PadMode,
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize, &dyn Fn(usize) -> usize),
) {
    let (bh, bw) = ((spec.kernel_h - 1) / 2, (spec.kernel_w - 1) / 2);
    for ky in 0..spec.kernel_h {
        for kx in 0..spec.kernel_w {
            let (lo, hi) = interior(w, kx, bw);
            let sx_of = move |xx: usize| pad_index(xx as i64 + kx as i64 - bw as i64, w, pad);
            for y in 0..h {
                let sy = pad_index(y as i64 + ky as i64 - bh as i64, h, pad);
                f(ky * spec.kernel_w + kx, y, sy, lo, hi, lo + kx - bw, &sx_of);
            }
        }
    }
}

fn direct_forward<T: Scalar>(x: &[T], h: usize, w: usize, spec: &LayerSpec, weights: &[T], pad: PadMode, z: &mut [T]) {
    let n = h * w;
    let taps = spec.kernel_h * spec.kernel_w;
    for ci in 0..spec.in_channels {
        let plane = &x[ci * n..(ci + 1) * n];
        for_each_tap_row(h, w, spec, pad, |tap, y, sy, lo, hi, s0, sx_of| {
            let src = &plane[sy * w..(sy + 1) * w];
            for o in 0..spec.kernels {
                let wv = weights[(o * spec.in_channels + ci) * taps + tap];
                let dst = &mut z[o * n + y * w..o * n + (y + 1) * w];
                for (d, &sv) in dst[lo..hi].iter_mut().zip(&src[s0..s0 + hi - lo]) {
                    *d += wv * sv;
                }
                for xx in (0..lo).chain(hi..w) {
                    dst[xx] += wv * src[sx_of(xx)];
                }
            }
        });
    }
}

/// Accumulates weight gradients into `dw` and, when given, input gradients into `dx`.
#[allow(clippy::too_many_arguments)]
fn direct_backward<T: Scalar>(
    x: &[T],
    gz: &[T],
    h: usize,
    w: usize,
    spec: &LayerSpec,
    weights: &[T],
    pad: PadMode,
    dw: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let n = h * w;
    let taps = spec.kernel_h * spec.kernel_w;
    for ci in 0..spec.in_channels {
        let plane = &x[ci * n..(ci + 1) * n];
        let mut dplane = dx.as_deref_mut().map(|d| &mut d[ci * n..(ci + 1) * n]);
        for_each_tap_row(h, w, spec, pad, |tap, y, sy, lo, hi, s0, sx_of| {
            let src = &plane[sy * w..(sy + 1) * w];
            for o in 0..spec.kernels {
                let wi = (o * spec.in_channels + ci) * taps + tap;
                let g = &gz[o * n + y * w..o * n + (y + 1) * w];
                let mut acc = T::zero();
                for (&gv, &sv) in g[lo..hi].iter().zip(&src[s0..s0 + hi - lo]) {
                    acc += gv * sv;
                }
                for xx in (0..lo).chain(hi..w) {
                    acc += g[xx] * src[sx_of(xx)];
                }
                dw[wi] += acc;
                if let Some(d) = dplane.as_deref_mut() {
                    let wv = weights[wi];
                    let drow = &mut d[sy * w..(sy + 1) * w];
                    for (dv, &gv) in drow[s0..s0 + hi - lo].iter_mut().zip(&g[lo..hi]) {
                        *dv += wv * gv;
                    }
                    for xx in (0..lo).chain(hi..w) {
                        drow[sx_of(xx)] += wv * g[xx];
                    }
                }
            }
        });
    }
}

struct LayerCache<T> {
    /// im2col of the layer input, kept for the weight gradient; only on the im2col path.
    cols: Option<Vec<T>>,
    /// tanh output, `kernels x (h*w)`.
    act: Vec<T>,
}

struct ForwardPass<T> {
    caches: Vec<LayerCache<T>>,
    input: Vec<T>,
}

fn validate_input<T: Scalar>(params: &FgnParams<T>, input4: &Image<T>, mask: &MaskChannel) -> Result<()> {
    params.check_shapes()?;
    if input4.channels() != 4 {
        return Err(Error::ShapeMismatch(format!("input has {} channels, expected 4", input4.channels())));
    }
    if mask.height != input4.height() || mask.width != input4.width() {
        return Err(Error::ShapeMismatch("mask and input dimensions differ".into()));
    }
    let k = params.arch.max_kernel();
    if input4.height() < k || input4.width() < k {
        return Err(Error::ShapeMismatch(format!(
            "input {}x{} smaller than the largest kernel {k}",
            input4.height(),
            input4.width()
        )));
    }
    Ok(())
}

fn mask_plane<T: Scalar>(mask: &MaskChannel, normalizer: f64) -> Vec<T> {
    mask.values.iter().map(|&v| T::lit(v as f64 / normalizer)).collect()
}

fn run_forward<T: Scalar>(params: &FgnParams<T>, input4: &Image<T>, mask: &MaskChannel, pad: PadMode) -> ForwardPass<T> {
    let mut input = to_chw(input4);
    let (h, w) = (input4.height(), input4.width());
    let n = h * w;
    // colour channels enter in [-1, 1], mirroring the output mapping
    for v in &mut input[..3 * n] {
        *v = *v + *v - T::one();
    }
    let m = mask_plane::<T>(mask, params.mask_normalizer);
    let mut caches: Vec<LayerCache<T>> = Vec::with_capacity(params.layers.len());
    for (spec, layer) in params.arch.layers.iter().zip(&params.layers) {
        let prev: &[T] = caches.last().map(|c| c.act.as_slice()).unwrap_or(&input);
        let k = spec.fan_in();
        let mut z = vec![T::zero(); spec.kernels * n];
        let mut cols = None;
        match conv_path(spec) {
            ConvPath::Direct => direct_forward(prev, h, w, spec, &layer.weights, pad, &mut z),
            path => {
                if path == ConvPath::Im2col {
                    cols = Some(im2col(prev, h, w, spec, pad));
                }
                let b = cols.as_deref().unwrap_or(prev);
                T::gemm(spec.kernels, k, n, T::one(), &layer.weights, k as isize, 1, b, n as isize, 1, T::zero(), &mut z, n as isize, 1);
            }
        }
        let gain = if params.arch.mask_gain_per_layer { layer.mask_gain } else { T::zero() };
        for (o, zo) in z.chunks_exact_mut(n).enumerate() {
            let bias = layer.bias[o];
            for (v, &mv) in zo.iter_mut().zip(&m) {
                *v = (*v + bias + gain * mv).tanh();
            }
        }
        caches.push(LayerCache { cols, act: z });
    }
    ForwardPass { caches, input }
}

fn to_output<T: Scalar>(act: &[T], h: usize, w: usize) -> Image<T> {
    let n = h * w;
    let half = T::lit(0.5);
    Image::from_fn(h, w, 3, |y, x, c| (act[c * n + y * w + x] + T::one()) * half)
}

/// Forward pass with clamp-to-edge padding.
pub fn forward<T: Scalar>(params: &FgnParams<T>, input4: &Image<T>, mask: &MaskChannel) -> Result<Image<T>> {
    forward_with(params, input4, mask, PadMode::Clamp)
}

pub fn forward_with<T: Scalar>(params: &FgnParams<T>, input4: &Image<T>, mask: &MaskChannel, pad: PadMode) -> Result<Image<T>> {
    validate_input(params, input4, mask)?;
    let pass = run_forward(params, input4, mask, pad);
    Ok(to_output(&pass.caches.last().expect("validated").act, input4.height(), input4.width()))
}

/// Hidden activations of every layer, `kernels x (h*w)` each, for inspection.
pub fn activations<T: Scalar>(params: &FgnParams<T>, input4: &Image<T>, mask: &MaskChannel) -> Result<Vec<Vec<T>>> {
    validate_input(params, input4, mask)?;
    Ok(run_forward(params, input4, mask, PadMode::Clamp)
        .caches
        .into_iter()
        .map(|c| c.act)
        .collect())
}

/// Builds the mask for `fix`, attaches it and runs the network on an RGB or
/// grayscale image.
pub fn foveate<T: Scalar>(params: &FgnParams<T>, img: &Image<T>, fix: &Fixation) -> Result<Image<T>> {
    let rgb = gray_to_rgb(img)?;
    let mask = build_mask(rgb.height(), rgb.width(), fix)?;
    let input4 = attach_mask(&rgb, &mask, params.mask_normalizer)?;
    forward(params, &input4, &mask)
}

/// Mean squared error of the forward output against `target`, plus the
/// gradient with respect to every parameter (same layout as [`FgnParams::layers`]).
pub fn loss_and_grad<T: Scalar>(
    params: &FgnParams<T>,
    input4: &Image<T>,
    mask: &MaskChannel,
    target: &Image<T>,
    pad: PadMode,
) -> Result<(f64, Vec<LayerParams<T>>)> {
    let mut grads: Vec<LayerParams<T>> = params.arch.layers.iter().map(LayerParams::zeros).collect();
    let loss = accumulate_grad(params, input4, mask, target, pad, T::one(), &mut grads)?;
    Ok((loss, grads))
}

/// Adds `scale * d(mse)/d(params)` into `grads` and returns the unscaled MSE.
fn accumulate_grad<T: Scalar>(
    params: &FgnParams<T>,
    input4: &Image<T>,
    mask: &MaskChannel,
    target: &Image<T>,
    pad: PadMode,
    scale: T,
    grads: &mut [LayerParams<T>],
) -> Result<f64> {
    validate_input(params, input4, mask)?;
    if target.channels() != 3 || target.height() != input4.height() || target.width() != input4.width() {
        return Err(Error::ShapeMismatch("target must be 3-channel with the input's dimensions".into()));
    }
    let (h, w) = (input4.height(), input4.width());
    let n = h * w;
    let pass = run_forward(params, input4, mask, pad);
    let last = &pass.caches.last().expect("validated").act;
    let half = T::lit(0.5);
    let count = T::lit((3 * n) as f64);

    // d(mse)/d(act) through out = (act + 1) / 2
    let mut loss = 0.0f64;
    let mut g_act = vec![T::zero(); 3 * n];
    for c in 0..3 {
        for p in 0..n {
            let out = (last[c * n + p] + T::one()) * half;
            let diff = out - target.data()[p * 3 + c];
            loss += diff.as_f64() * diff.as_f64();
            g_act[c * n + p] = scale * diff / count;
        }
    }
    loss /= (3 * n) as f64;

    let m = mask_plane::<T>(mask, params.mask_normalizer);
    for li in (0..params.layers.len()).rev() {
        let spec = &params.arch.layers[li];
        let layer = &params.layers[li];
        let cache = &pass.caches[li];
        // through tanh
        let mut g_z = g_act;
        for (g, &a) in g_z.iter_mut().zip(&cache.act) {
            *g = *g * (T::one() - a * a);
        }
        let grad = &mut grads[li];
        for (o, gz) in g_z.chunks_exact(n).enumerate() {
            let mut sb = T::zero();
            let mut sm = T::zero();
            for (&g, &mv) in gz.iter().zip(&m) {
                sb += g;
                sm += g * mv;
            }
            grad.bias[o] += sb;
            if params.arch.mask_gain_per_layer {
                grad.mask_gain += sm;
            }
        }
        let prev: &[T] = if li == 0 { &pass.input } else { &pass.caches[li - 1].act };
        if conv_path(spec) == ConvPath::Direct {
            let mut g_prev = (li > 0).then(|| vec![T::zero(); spec.in_channels * n]);
            direct_backward(prev, &g_z, h, w, spec, &layer.weights, pad, &mut grad.weights, g_prev.as_deref_mut());
            match g_prev {
                Some(g) => {
                    g_act = g;
                    continue;
                }
                None => break,
            }
        }
        let cols: &[T] = cache.cols.as_deref().unwrap_or(prev);
        let k = spec.fan_in();
        T::gemm(spec.kernels, n, k, T::one(), &g_z, n as isize, 1, cols, 1, n as isize, T::one(), &mut grad.weights, k as isize, 1);
        if li == 0 {
            break;
        }
        let mut g_cols = vec![T::zero(); k * n];
        T::gemm(k, spec.kernels, n, T::one(), &layer.weights, 1, k as isize, &g_z, n as isize, 1, T::zero(), &mut g_cols, n as isize, 1);
        g_act = if cache.cols.is_some() {
            col2im(&g_cols, spec, h, w, pad)
        } else {
            g_cols
        };
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Scale each layer's learning rate by `max_fan_in / fan_in`.
    #[serde(default)]
    pub fan_in_lr: bool,
    /// Learning rate multiplier applied after every epoch.
    #[serde(default = "unit")]
    pub lr_decay: f64,
    pub momentum: f64,
    /// Fovea radius of the training fixation; the fixation is the image centre.
    pub fovea_radius: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch: 4,
            lr: 0.01,
            lr_decay: 1.0,
            fan_in_lr: false,
            momentum: 0.9,
            fovea_radius: 8.0,
        }
    }
}

/// A training pair prepared for the network: 4-channel input, mask, target.
pub struct PreparedPair<T> {
    pub input4: Image<T>,
    pub mask: MaskChannel,
    pub target: Image<T>,
}

/// Attaches the centre-fixation mask to an `(input, target)` pair; grayscale
/// images are replicated to RGB.
pub fn prepare_pair<T: Scalar>(input: &Image<T>, target: &Image<T>, fovea_radius: f64, normalizer: f64) -> Result<PreparedPair<T>> {
    let rgb = gray_to_rgb(input)?;
    let tgt = gray_to_rgb(target)?;
    if !rgb.same_shape(&tgt) {
        return Err(Error::DimensionMismatch("input and target dimensions differ".into()));
    }
    let (h, w) = (rgb.height(), rgb.width());
    let fix = Fixation::centered(h, w).with_radius(fovea_radius);
    let mask = build_mask(h, w, &fix)?;
    Ok(PreparedPair {
        input4: attach_mask(&rgb, &mask, normalizer)?,
        mask,
        target: tgt,
    })
}

/// Mini-batch SGD with momentum on the mean squared error.
///
/// The visiting order is reshuffled each epoch from `opts.seed`; gradients
/// within a batch are summed in that order, so training is reproducible.
pub fn train<T: Scalar>(pairs: &[(Image<T>, Image<T>)], arch: FgnArch, opts: &TrainOptions) -> Result<FgnParams<T>> {
    train_with_progress(pairs, arch, opts, |_, _| {})
}

pub fn train_with_progress<T: Scalar>(
    pairs: &[(Image<T>, Image<T>)],
    arch: FgnArch,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<FgnParams<T>> {
    let (first, _) = pairs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training pairs".into()))?;
    let (h, w) = (first.height(), first.width());
    if opts.batch == 0 {
        return Err(Error::InvalidArgument("batch size 0".into()));
    }
    let normalizer = foveamask::diagonal(h, w);
    let prepared = pairs
        .iter()
        .map(|(x, y)| {
            if x.height() != h || x.width() != w {
                return Err(Error::DimensionMismatch("training pairs differ in size".into()));
            }
            prepare_pair(x, y, opts.fovea_radius, normalizer)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut params = FgnParams::<T>::init(arch, normalizer, opts.seed)?;
    let mut velocity: Vec<T> = vec![T::zero(); params.arch.param_count()];
    let max_fan_in = params.arch.layers.iter().map(LayerSpec::fan_in).max().unwrap_or(1);
    let layer_scale: Vec<T> = params
        .arch
        .layers
        .iter()
        .map(|l| if opts.fan_in_lr { T::lit(max_fan_in as f64 / l.fan_in() as f64) } else { T::one() })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED_0F_0DE5);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut initial_loss: Option<f64> = None;
    let mut lr = T::lit(opts.lr);
    let decay = T::lit(opts.lr_decay);
    let mu = T::lit(opts.momentum);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch) {
            let mut grads: Vec<LayerParams<T>> = params.arch.layers.iter().map(LayerParams::zeros).collect();
            let scale = T::lit(1.0 / batch.len() as f64);
            let mut batch_loss = 0.0;
            for &i in batch {
                let p = &prepared[i];
                batch_loss += accumulate_grad(&params, &p.input4, &p.mask, &p.target, PadMode::Clamp, scale, &mut grads)?;
            }
            batch_loss /= batch.len() as f64;
            let initial = *initial_loss.get_or_insert(batch_loss);
            if !batch_loss.is_finite() || batch_loss > 10.0 * initial {
                return Err(Error::DivergedLoss {
                    epoch,
                    loss: batch_loss,
                    initial,
                });
            }
            epoch_loss += batch_loss * batch.len() as f64;
            let flat_grad: Vec<T> = grads
                .iter()
                .zip(&layer_scale)
                .flat_map(|(l, &s)| l.values().map(move |&g| g * s))
                .collect();
            for (v, g) in velocity.iter_mut().zip(&flat_grad) {
                *v = mu * *v - lr * *g;
            }
            for (p, v) in params.layers.iter_mut().flat_map(|l| l.values_mut()).zip(&velocity) {
                *p += *v;
            }
        }
        epoch_loss /= prepared.len() as f64;
        params.meta.loss_history.push(epoch_loss);
        params.meta.epoch = epoch + 1;
        on_epoch(epoch, epoch_loss);
        lr *= decay;
    }
    params.meta.seed = opts.seed;
    params.meta.options = Some(*opts);
    Ok(params)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: FgnArch,
    mask_normalizer: f64,
    training_meta: TrainingMeta,
}

/// `FGN1` magic, little-endian `u32` version and header length, the JSON
/// header, then every parameter as little-endian `f32` in layer order
/// (weights `[out][in][kh][kw]`, biases, mask gain).
pub fn save_checkpoint<T: Scalar>(params: &FgnParams<T>) -> Result<Vec<u8>> {
    params.check_shapes()?;
    let header = serde_json::to_vec(&CheckpointHeader {
        arch: params.arch.clone(),
        mask_normalizer: params.mask_normalizer,
        training_meta: params.meta.clone(),
    })?;
    let flat = params.flat();
    let mut out = Vec::with_capacity(12 + header.len() + 4 * flat.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in flat {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<FgnParams<f32>> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let read_u32 = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::MalformedInput("truncated checkpoint header".into()))
    };
    let version = read_u32(4)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let header_len = read_u32(8)? as usize;
    let header_bytes = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| Error::MalformedInput("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
    header.arch.validate()?;
    let payload = &bytes[12 + header_len..];
    let expected = 4 * header.arch.param_count();
    if payload.len() != expected {
        return Err(Error::PayloadSizeMismatch {
            expected,
            got: payload.len(),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut params = FgnParams::zeros(header.arch, header.mask_normalizer)?;
    params.set_flat(&values)?;
    params.meta = header.training_meta;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> FgnArch {
        FgnArch {
            layers: vec![LayerSpec::new(4, 3, 3, 4), LayerSpec::new(3, 3, 3, 4)],
            activation: Activation::Tanh,
            mask_gain_per_layer: true,
        }
    }

    fn rand_image(h: usize, w: usize, c: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.gen_range(0.0..1.0))
    }

    fn inputs(h: usize, w: usize, seed: u64) -> (Image<f64>, MaskChannel) {
        let rgb = rand_image(h, w, 3, seed);
        let fix = Fixation::new((w / 2) as f64, (h / 2) as f64, 1.5);
        let mask = build_mask(h, w, &fix).unwrap();
        let norm = foveamask::diagonal(h, w);
        (attach_mask(&rgb, &mask, norm).unwrap(), mask)
    }

    #[test]
    fn architecture_shapes() {
        let paper = FgnArch::paper();
        paper.validate().unwrap();
        let dims: Vec<_> = paper.layers.iter().map(|l| (l.kernels, l.kernel_h, l.kernel_w, l.in_channels)).collect();
        assert_eq!(dims, vec![(256, 16, 16, 4), (512, 8, 8, 256), (512, 1, 1, 512), (3, 8, 8, 512)]);
        for f in [1, 2, 3, 8, 16, 100, 1000] {
            let a = FgnArch::scaled(f);
            a.validate().unwrap();
            assert_eq!(a.layers.last().unwrap().kernels, 3);
        }
        assert_eq!(FgnArch::scaled(8).layers[0].kernels, 32);
        assert_eq!(FgnArch::scaled(1), paper);
        let mut bad = tiny_arch();
        bad.layers[1].in_channels = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_network_outputs_mid_gray() {
        let (x, m) = inputs(16, 20, 1);
        let p = FgnParams::<f64>::zeros(FgnArch::scaled(64), foveamask::diagonal(16, 20)).unwrap();
        let out = forward(&p, &x, &m).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (16, 20, 3));
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_1x1_matches_scalar_loop() {
        let arch = FgnArch {
            layers: vec![LayerSpec::new(3, 1, 1, 4)],
            activation: Activation::Tanh,
            mask_gain_per_layer: true,
        };
        let mut p = FgnParams::<f64>::zeros(arch, 2.0).unwrap();
        for o in 0..3 {
            p.layers[0].weights[o * 4 + o] = 1.0;
        }
        p.layers[0].mask_gain = 0.5;
        let rgb = rand_image(2, 2, 3, 3);
        let fix = Fixation::new(0.0, 0.0, 0.0);
        let mask = build_mask(2, 2, &fix).unwrap();
        let x = attach_mask(&rgb, &mask, 2.0).unwrap();
        let out = forward(&p, &x, &mask).unwrap();
        for y in 0..2 {
            for xx in 0..2 {
                let mv = mask.get(y, xx) as f64 / 2.0;
                for c in 0..3 {
                    let expect = ((2.0 * rgb.get(y, xx, c) - 1.0 + 0.5 * mv).tanh() + 1.0) / 2.0;
                    assert!((out.get(y, xx, c) - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn output_keeps_spatial_dims_and_range() {
        let arch = FgnArch::scaled(64);
        let p = FgnParams::<f32>::init(arch, 30.0, 3).unwrap();
        for (h, w) in [(16, 16), (17, 23), (24, 16)] {
            let (x, m) = inputs(h, w, 2);
            let out = forward(&p, &x.cast::<f32>(), &m).unwrap();
            assert_eq!((out.height(), out.width()), (h, w));
            let (lo, hi) = out.min_max();
            assert!(lo >= 0.0 && hi <= 1.0);
            for act in activations(&p, &x.cast::<f32>(), &m).unwrap() {
                assert!(act.iter().all(|a| a.abs() < 1.0));
            }
        }
        let (x, m) = inputs(12, 12, 2);
        assert!(matches!(forward(&p, &x.cast::<f32>(), &m), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut p = FgnParams::<f64>::init(tiny_arch(), 11.3, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for l in &mut p.layers {
            for b in &mut l.bias {
                *b = rng.gen_range(-0.3..0.3);
            }
            l.mask_gain = rng.gen_range(-0.5..0.5);
        }
        let (x, m) = inputs(8, 8, 5);
        let target = rand_image(8, 8, 3, 6);
        let (_, grads) = loss_and_grad(&p, &x, &m, &target, PadMode::Clamp).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|l| l.values().copied()).collect();
        let base = p.flat();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let mut q = p.clone();
            q.set_flat(&plus).unwrap();
            let (lp, _) = loss_and_grad(&q, &x, &m, &target, PadMode::Clamp).unwrap();
            q.set_flat(&minus).unwrap();
            let (lm, _) = loss_and_grad(&q, &x, &m, &target, PadMode::Clamp).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn direct_and_im2col_paths_agree() {
        let spec = LayerSpec::new(5, 4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, w) = (7, 9);
        let x: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..spec.kernels * spec.fan_in()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gz: Vec<f64> = (0..spec.kernels * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for pad in [PadMode::Clamp, PadMode::Wrap] {
            let n = h * w;
            let k = spec.fan_in();
            let cols = im2col(&x, h, w, &spec, pad);
            let mut z_gemm = vec![0.0; spec.kernels * n];
            f64::gemm(spec.kernels, k, n, 1.0, &weights, k as isize, 1, &cols, n as isize, 1, 0.0, &mut z_gemm, n as isize, 1);
            let mut z_direct = vec![0.0; spec.kernels * n];
            direct_forward(&x, h, w, &spec, &weights, pad, &mut z_direct);

            let mut dw_gemm = vec![0.0; weights.len()];
            f64::gemm(spec.kernels, n, k, 1.0, &gz, n as isize, 1, &cols, 1, n as isize, 0.0, &mut dw_gemm, k as isize, 1);
            let mut g_cols = vec![0.0; k * n];
            f64::gemm(k, spec.kernels, n, 1.0, &weights, 1, k as isize, &gz, n as isize, 1, 0.0, &mut g_cols, n as isize, 1);
            let dx_gemm = col2im(&g_cols, &spec, h, w, pad);
            let mut dw_direct = vec![0.0; weights.len()];
            let mut dx_direct = vec![0.0; x.len()];
            direct_backward(&x, &gz, h, w, &spec, &weights, pad, &mut dw_direct, Some(&mut dx_direct));

            for (a, b) in [(&z_gemm, &z_direct), (&dw_gemm, &dw_direct), (&dx_gemm, &dx_direct)] {
                for (u, v) in a.iter().zip(b.iter()) {
                    assert!((u - v).abs() < 1e-12, "{pad:?}: {u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn im2col_path_gradients_match_finite_differences() {
        let arch = FgnArch {
            layers: vec![LayerSpec::new(10, 4, 4, 4), LayerSpec::new(10, 1, 1, 10), LayerSpec::new(3, 2, 2, 10)],
            activation: Activation::Tanh,
            mask_gain_per_layer: true,
        };
        assert_eq!(conv_path(&arch.layers[0]), ConvPath::Im2col);
        let p = FgnParams::<f64>::init(arch, 11.3, 2).unwrap();
        let (x, m) = inputs(8, 8, 1);
        let target = rand_image(8, 8, 3, 2);
        let (_, grads) = loss_and_grad(&p, &x, &m, &target, PadMode::Clamp).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|l| l.values().copied()).collect();
        let base = p.flat();
        let h = 1e-6;
        // every 7th parameter keeps the test quick
        for i in (0..base.len()).step_by(7) {
            let mut q = p.clone();
            let mut v = base.clone();
            v[i] += h;
            q.set_flat(&v).unwrap();
            let (lp, _) = loss_and_grad(&q, &x, &m, &target, PadMode::Clamp).unwrap();
            v[i] -= 2.0 * h;
            q.set_flat(&v).unwrap();
            let (lm, _) = loss_and_grad(&q, &x, &m, &target, PadMode::Clamp).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "parameter {i}: {} vs {numeric}", analytic[i]);
        }
    }

    #[test]
    fn translation_covariance_with_wrap_padding() {
        let p = FgnParams::<f64>::init(tiny_arch(), 10.0, 1).unwrap();
        let (x, m) = inputs(10, 12, 4);
        let (dy, dx) = (3usize, 5usize);
        let shift = |img: &Image<f64>| {
            Image::from_fn(img.height(), img.width(), img.channels(), |y, xx, c| {
                img.get((y + img.height() - dy) % img.height(), (xx + img.width() - dx) % img.width(), c)
            })
        };
        let ms = MaskChannel {
            height: 10,
            width: 12,
            values: (0..120)
                .map(|i| {
                    let (y, xx) = (i / 12, i % 12);
                    m.get((y + 10 - dy) % 10, (xx + 12 - dx) % 12)
                })
                .collect(),
        };
        let a = shift(&forward_with(&p, &x, &m, PadMode::Wrap).unwrap());
        let b = forward_with(&p, &shift(&x), &ms, PadMode::Wrap).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut p = FgnParams::<f32>::init(FgnArch::scaled(32), 90.5, 5).unwrap();
        p.meta.loss_history = vec![0.1, 0.05, 0.0125];
        p.layers[1].mask_gain = -0.25;
        let bytes = save_checkpoint(&p).unwrap();
        assert_eq!(&bytes[..4], b"FGN1");
        assert_eq!(load_checkpoint(&bytes).unwrap(), p);

        assert!(matches!(load_checkpoint(&bytes[..bytes.len() - 4]), Err(Error::PayloadSizeMismatch { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_checkpoint(&bad), Err(Error::BadMagic)));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(load_checkpoint(&v2), Err(Error::VersionUnsupported(2))));

        // same payload under a different architecture header
        let other = FgnParams::<f32>::zeros(FgnArch::scaled(16), 90.5).unwrap();
        let other_bytes = save_checkpoint(&other).unwrap();
        let hl = u32::from_le_bytes(other_bytes[8..12].try_into().unwrap()) as usize;
        let phl = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut spliced = other_bytes[..12 + hl].to_vec();
        spliced.extend_from_slice(&bytes[12 + phl..]);
        assert!(matches!(load_checkpoint(&spliced), Err(Error::PayloadSizeMismatch { .. })));
    }

    #[test]
    fn training_learns_identity_on_small_images() {
        let arch = FgnArch {
            layers: vec![LayerSpec::new(8, 3, 3, 4), LayerSpec::new(3, 3, 3, 8)],
            activation: Activation::Tanh,
            mask_gain_per_layer: true,
        };
        let pairs: Vec<(Image<f32>, Image<f32>)> = (0..20)
            .map(|i| {
                // kept off 0 and 1, which tanh reaches only asymptotically
                let src = crate::corpus::procedural_image(i, 32, 32);
                let img = Image::from_fn(32, 32, 3, |y, x, c| 0.1 + 0.8 * src.get(y, x, c));
                (img.clone(), img)
            })
            .collect();
        let opts = TrainOptions {
            seed: 3,
            epochs: 100,
            batch: 4,
            lr: 0.5,
            lr_decay: 1.0,
            fan_in_lr: false,
            momentum: 0.9,
            fovea_radius: 4.0,
        };
        let p = train(&pairs, arch, &opts).unwrap();
        let last = *p.meta.loss_history.last().unwrap();
        assert!(last < 1e-3, "final mse {last}, history {:?}", p.meta.loss_history);
    }

    #[test]
    fn diverging_training_reported() {
        let arch = FgnArch {
            layers: vec![LayerSpec::new(3, 3, 3, 4)],
            activation: Activation::Tanh,
            mask_gain_per_layer: true,
        };
        let pairs: Vec<(Image<f32>, Image<f32>)> = (0..4)
            .map(|i| {
                let img = crate::corpus::procedural_image(i, 16, 16);
                let inv = Image::from_fn(16, 16, 3, |y, x, c| 1.0 - img.get(y, x, c));
                (img, inv)
            })
            .collect();
        // the output is bounded, so only a non-finite loss can trip the check
        let opts = TrainOptions {
            lr: f64::MAX,
            epochs: 5,
            batch: 1,
            ..Default::default()
        };
        assert!(matches!(train(&pairs, arch, &opts), Err(Error::DivergedLoss { .. })));
    }
}
