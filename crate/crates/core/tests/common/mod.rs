//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::PathBuf;

use periph_core::fgn::{self, Activation, FgnArch, FgnParams, LayerSpec, PadMode};
use periph_core::foveamask::{attach_mask, build_mask, diagonal};
use periph_core::imagekit::{decode_png, encode_png, Image};
use periph_core::pooling::{build_layout, PoolingLayout};
use periph_core::radialblur::{radial_blur, BlurProfile, DEFAULT_SIGMA_MAX};
use periph_core::statmatch::Problem;
use periph_core::texstats::{layout_stats, StatFamily, StatSchema, StatsConfig};
use periph_core::Fixation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bundled test assets; resolves from any crate of the workspace.
pub fn assets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/assets")
}

pub fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, c, |_, _, _| rng.gen::<f64>())
}

/// Distance at integer pixel indices, zero inside the closed disk.
pub fn mask_oracle(i: usize, j: usize, fix: &Fixation) -> f32 {
    let dy = i as f64 - fix.fy;
    let dx = j as f64 - fix.fx;
    let d = (dy * dy + dx * dx).sqrt();
    if d <= fix.fovea_radius {
        0.0
    } else {
        d as f32
    }
}

/// Spatially-varying blur as a dense per-pixel operator built from the
/// profile definition, clamp-to-edge folding included.
pub fn dense_blur(img: &Image<f64>, fix: &Fixation, sigma_max: f64) -> Image<f64> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let corners = [(0.0, 0.0), (0.0, w as f64 - 1.0), (h as f64 - 1.0, 0.0), (h as f64 - 1.0, w as f64 - 1.0)];
    let d_max = corners
        .iter()
        .map(|&(r, q)| ((r - fix.fy).powi(2) + (q - fix.fx).powi(2)).sqrt())
        .fold(0.0, f64::max);
    let mut out = img.clone();
    let mut weights = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = ((y as f64 - fix.fy).powi(2) + (x as f64 - fix.fx).powi(2)).sqrt();
            if d <= fix.fovea_radius {
                continue;
            }
            let sigma = (sigma_max * (d - fix.fovea_radius) / (d_max - fix.fovea_radius)).min(sigma_max);
            let r = (3.0 * sigma).ceil() as i64;
            weights.iter_mut().for_each(|v| *v = 0.0);
            let mut total = 0.0;
            for ky in -r..=r {
                for kx in -r..=r {
                    let g = (-((ky * ky + kx * kx) as f64) / (2.0 * sigma * sigma)).exp();
                    let sy = (y as i64 + ky).clamp(0, h as i64 - 1) as usize;
                    let sx = (x as i64 + kx).clamp(0, w as i64 - 1) as usize;
                    weights[sy * w + sx] += g;
                    total += g;
                }
            }
            for ch in 0..c {
                let acc: f64 = (0..h * w).map(|p| weights[p] * img.data()[p * c + ch]).sum();
                out.set(y, x, ch, acc / total);
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// The bundled input's centre-fixation blur, as PNG bytes.
pub fn golden_blur(input_png: &[u8]) -> Vec<u8> {
    let img = decode_png(input_png).unwrap();
    let fix = Fixation::centered(img.height(), img.width());
    let profile = BlurProfile::for_frame(img.height(), img.width(), &fix, DEFAULT_SIGMA_MAX).unwrap();
    encode_png(&radial_blur(&img, &fix, &profile).unwrap()).unwrap()
}

// ---- texture statistics, written as plain loops over full-frame grids ----

type Grid = Vec<Vec<f64>>;

fn clamp(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

fn dims(g: &Grid) -> (usize, usize) {
    (g.len(), g[0].len())
}

fn reduce(l: &Grid) -> Grid {
    let b = [1.0, 4.0, 6.0, 4.0, 1.0].map(|v| v / 16.0);
    let (h, w) = dims(l);
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![vec![0.0; w2]; h2];
    for (y2, row) in out.iter_mut().enumerate() {
        for (x2, v) in row.iter_mut().enumerate() {
            let (y, x) = (2 * y2 as i64, 2 * x2 as i64);
            for i in -2i64..=2 {
                for j in -2i64..=2 {
                    *v += b[(i + 2) as usize] * b[(j + 2) as usize] * l[clamp(y + i, h)][clamp(x + j, w)];
                }
            }
        }
    }
    out
}

/// Linear-interpolation weights from a `m`-sample axis onto index `i`.
fn interp(i: usize, m: usize) -> [(usize, f64); 2] {
    if i % 2 == 0 {
        [(i / 2, 1.0), (i / 2, 0.0)]
    } else {
        [(i / 2, 0.5), ((i / 2 + 1).min(m - 1), 0.5)]
    }
}

fn expand(l: &Grid, h: usize, w: usize) -> Grid {
    let (m, n) = dims(l);
    let mut out = vec![vec![0.0; w]; h];
    for (y, row) in out.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            for (sy, wy) in interp(y, m) {
                for (sx, wx) in interp(x, n) {
                    *v += wy * wx * l[sy][sx];
                }
            }
        }
    }
    out
}

fn oriented_kernel(o: usize, n: usize) -> [[f64; 7]; 7] {
    let t = PI * o as f64 / n as f64;
    let mut k = [[0.0; 7]; 7];
    for dy in -3i64..=3 {
        for dx in -3i64..=3 {
            let (x, y) = (dx as f64, dy as f64);
            let g = (-(x * x + y * y) / 2.0).exp() / (2.0 * PI);
            let (gxx, gyy, gxy) = ((x * x - 1.0) * g, (y * y - 1.0) * g, x * y * g);
            let mut v = -2.0 * ((2.0 * t).cos() * (gxx - gyy) / 2.0 + (2.0 * t).sin() * gxy);
            if dx == 0 && dy == 0 {
                v += 1.0 / n as f64;
            }
            k[(dy + 3) as usize][(dx + 3) as usize] = v;
        }
    }
    k
}

fn correlate7(d: &Grid, k: &[[f64; 7]; 7]) -> Grid {
    let (h, w) = dims(d);
    let mut out = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            for dy in -3i64..=3 {
                for dx in -3i64..=3 {
                    out[y][x] += k[(dy + 3) as usize][(dx + 3) as usize] * d[clamp(y as i64 + dy, h)][clamp(x as i64 + dx, w)];
                }
            }
        }
    }
    out
}

struct Weighted<'a> {
    w: &'a Grid,
    total: f64,
}

impl Weighted<'_> {
    fn mean(&self, f: impl Fn(usize, usize) -> f64) -> f64 {
        let mut acc = 0.0;
        for (y, row) in self.w.iter().enumerate() {
            for (x, &wt) in row.iter().enumerate() {
                if wt != 0.0 {
                    acc += wt * f(y, x);
                }
            }
        }
        acc / self.total
    }
}

/// Every region's statistics, in schema order.
pub fn stats_oracle(gray: &Image<f64>, layout: &PoolingLayout, cfg: StatsConfig) -> Vec<Vec<f64>> {
    let (h, w) = (gray.height(), gray.width());
    let mut lowpass: Vec<Grid> = vec![(0..h).map(|y| (0..w).map(|x| gray.get(y, x, 0)).collect()).collect()];
    for s in 0..cfg.n_scales {
        let next = reduce(&lowpass[s]);
        lowpass.push(next);
    }
    let mut bands: Vec<Vec<Grid>> = Vec::new();
    for s in 0..cfg.n_scales {
        let (hs, ws) = dims(&lowpass[s]);
        let up = expand(&lowpass[s + 1], hs, ws);
        let d: Grid = (0..hs).map(|y| (0..ws).map(|x| lowpass[s][y][x] - up[y][x]).collect()).collect();
        bands.push((0..cfg.n_orientations).map(|o| correlate7(&d, &oriented_kernel(o, cfg.n_orientations))).collect());
    }
    let degenerate = |v: f64| !(v >= 1e-12);
    let r = cfg.lag_radius as i64;

    let mut out = Vec::new();
    for region in &layout.regions {
        let windows: Vec<Grid> = (0..cfg.n_scales)
            .map(|s| {
                let win = region.level_window(s, h, w);
                let (hs, ws) = dims(&lowpass[s]);
                let mut g = vec![vec![0.0; ws]; hs];
                for r in 0..win.bbox.h {
                    for c in 0..win.bbox.w {
                        g[win.bbox.y0 + r][win.bbox.x0 + c] = win.weights[r * win.bbox.w + c];
                    }
                }
                g
            })
            .collect();
        let views: Vec<Weighted> = windows
            .iter()
            .map(|g| Weighted {
                w: g,
                total: g.iter().flatten().sum(),
            })
            .collect();
        let mut v = Vec::new();

        let l0 = &lowpass[0];
        let mu = views[0].mean(|y, x| l0[y][x]);
        let m = |p: i32| views[0].mean(|y, x| (l0[y][x] - mu).powi(p));
        let m2 = m(2);
        if degenerate(m2) {
            v.extend([mu, m2, 0.0, 0.0]);
        } else {
            v.extend([mu, m2, m(3) / m2.powf(1.5), m(4) / (m2 * m2)]);
        }

        for s in 0..cfg.n_scales {
            for band in &bands[s] {
                v.push(views[s].mean(|y, x| band[y][x].abs()));
            }
        }
        for s in 0..cfg.n_scales {
            for a in 0..cfg.n_orientations {
                for b in a + 1..cfg.n_orientations {
                    let (ba, bb) = (&bands[s][a], &bands[s][b]);
                    let ma = views[s].mean(|y, x| ba[y][x].abs());
                    let mb = views[s].mean(|y, x| bb[y][x].abs());
                    let va = views[s].mean(|y, x| (ba[y][x].abs() - ma).powi(2));
                    let vb = views[s].mean(|y, x| (bb[y][x].abs() - mb).powi(2));
                    if degenerate(va) || degenerate(vb) {
                        v.push(0.0);
                    } else {
                        let cov = views[s].mean(|y, x| (ba[y][x].abs() - ma) * (bb[y][x].abs() - mb));
                        v.push(cov / (va * vb).sqrt());
                    }
                }
            }
        }
        for s in 0..cfg.n_scales {
            let l = &lowpass[s];
            let (hs, ws) = dims(l);
            let mu = views[s].mean(|y, x| l[y][x]);
            let mut raw = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    raw.push(views[s].mean(|y, x| {
                        (l[y][x] - mu) * (l[clamp(y as i64 + dy, hs)][clamp(x as i64 + dx, ws)] - mu)
                    }));
                }
            }
            let zero = raw[raw.len() / 2];
            if degenerate(zero) {
                v.extend(vec![0.0; raw.len()]);
            } else {
                v.extend(raw.iter().map(|a| a / zero));
            }
        }
        out.push(v);
    }
    out
}

/// Largest `|a - b| / max(|b|, floor)` over paired entries.
pub fn worst_relative(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Worst relative error of the texstats implementation against the oracle.
pub fn texstats_oracle_error(gray: &Image<f64>, layout: &PoolingLayout) -> f64 {
    let cfg = StatsConfig::default();
    let got = layout_stats(gray, layout, cfg).unwrap();
    let want = stats_oracle(gray, layout, cfg);
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(&want)
        .map(|(g, w)| worst_relative(&g.values, w, 1e-3))
        .fold(0.0, f64::max)
}

pub fn default_layout(n: usize) -> PoolingLayout {
    build_layout(n, n, &Fixation::centered(n, n), 0.5, 8.0)
        .unwrap()
        .normalize_weights()
        .unwrap()
}

// ---- finite-difference gradient checks ----

/// Worst relative error between the statmatch pixel gradient and central
/// differences on a random `n x n` canvas; also returns the largest
/// gradient magnitude inside the fovea, which must be exactly zero.
pub fn statmatch_gradient_check(n: usize, seed: u64) -> (f64, f64) {
    let layout = default_layout(n);
    let src = random_image(n, n, 1, seed);
    let targets = layout_stats(&src, &layout, StatsConfig::default()).unwrap();
    let problem = Problem::new(&layout, &targets).unwrap();
    let canvas = random_image(n, n, 1, seed + 1);
    let (_, grad) = problem.loss_and_grad(&canvas).unwrap();
    let fix = *layout.fixation();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut fovea_max = 0.0f64;
    for y in 0..n {
        for x in 0..n {
            let g = grad.get(y, x, 0);
            if fix.in_fovea(y, x) {
                fovea_max = fovea_max.max(g.abs());
                continue;
            }
            let mut plus = canvas.clone();
            plus.set(y, x, 0, canvas.get(y, x, 0) + h);
            let mut minus = canvas.clone();
            minus.set(y, x, 0, canvas.get(y, x, 0) - h);
            let numeric = (problem.loss(&plus).unwrap() - problem.loss(&minus).unwrap()) / (2.0 * h);
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    (worst, fovea_max)
}

/// Worst relative error between FGN parameter gradients and central
/// differences for a two-layer 3x3 network on an 8x8 input.
pub fn fgn_gradient_check(seed: u64) -> f64 {
    let arch = FgnArch {
        layers: vec![LayerSpec::new(4, 3, 3, 4), LayerSpec::new(3, 3, 3, 4)],
        activation: Activation::Tanh,
        mask_gain_per_layer: true,
    };
    let mut params = FgnParams::<f64>::init(arch, diagonal(8, 8), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for l in &mut params.layers {
        for b in &mut l.bias {
            *b = rng.gen_range(-0.3..0.3);
        }
        l.mask_gain = rng.gen_range(-0.5..0.5);
    }
    let fix = Fixation::new(4.0, 3.0, 1.5);
    let mask = build_mask(8, 8, &fix).unwrap();
    let input = attach_mask(&random_image(8, 8, 3, seed + 2), &mask, diagonal(8, 8)).unwrap();
    let target = random_image(8, 8, 3, seed + 3);
    let loss = |p: &FgnParams<f64>| fgn::loss_and_grad(p, &input, &mask, &target, PadMode::Clamp).unwrap();
    let (_, grads) = loss(&params);
    let analytic: Vec<f64> = grads.iter().flat_map(|l| l.values().copied()).collect();
    let base = params.flat();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut q = params.clone();
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + h;
        q.set_flat(&v).unwrap();
        let lp = loss(&q).0;
        v[i] = base[i] - h;
        q.set_flat(&v).unwrap();
        let lm = loss(&q).0;
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

// ---- statistic invariances ----

fn families() -> Vec<StatFamily> {
    StatSchema::new(StatsConfig::default()).entries.iter().map(|d| d.family).collect()
}

/// Relative error against `want`; dimensionless statistics (bounded
/// correlations and standardized moments) are measured against unit scale.
fn invariance_error(got: &[f64], want: &[f64], fams: &[StatFamily]) -> f64 {
    got.iter()
        .zip(want)
        .zip(fams)
        .map(|((g, w), f)| {
            let floor = match f {
                StatFamily::Mean | StatFamily::Variance | StatFamily::BandEnergy => 1e-3,
                _ => 1.0,
            };
            (g - w).abs() / w.abs().max(floor)
        })
        .fold(0.0, f64::max)
}

/// Worst deviation from the expected statistics of `f(img)`, where
/// `expect(family, value)` predicts each statistic from the original.
fn transform_error(img: &Image<f64>, f: impl Fn(f64) -> f64, expect: impl Fn(StatFamily, f64) -> f64) -> f64 {
    let layout = default_layout(img.height());
    let moved = Image::from_fn(img.height(), img.width(), 1, |y, x, _| f(img.get(y, x, 0)));
    let a = layout_stats(img, &layout, StatsConfig::default()).unwrap();
    let b = layout_stats(&moved, &layout, StatsConfig::default()).unwrap();
    let fams = families();
    a.iter()
        .zip(&b)
        .map(|(va, vb)| {
            let want: Vec<f64> = va.values.iter().zip(&fams).map(|(&v, &f)| expect(f, v)).collect();
            invariance_error(&vb.values, &want, &fams)
        })
        .fold(0.0, f64::max)
}

/// Adding `c` moves only the mean.
pub fn shift_invariance_error(img: &Image<f64>, c: f64) -> f64 {
    transform_error(img, |v| v + c, |f, v| if f == StatFamily::Mean { v + c } else { v })
}

/// Scaling by `k` scales means and band energies by `k`, variances by `k^2`,
/// and leaves the dimensionless statistics alone.
pub fn scale_invariance_error(img: &Image<f64>, k: f64) -> f64 {
    transform_error(
        img,
        |v| k * v,
        |f, v| match f {
            StatFamily::Mean | StatFamily::BandEnergy => k * v,
            StatFamily::Variance => k * k * v,
            _ => v,
        },
    )
}
