//! Eccentricity-dependent Gaussian blur: the deterministic foveation oracle.
//!
//! The standard deviation is zero out to the fovea radius and grows linearly
//! to `sigma_max` at `d_max`. Each output pixel is the clamp-to-edge
//! convolution of the input with a Gaussian truncated at `ceil(3 sigma)` on
//! each axis and renormalized over the truncated square.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::foveamask::Fixation;
use crate::imagekit::Image;
use crate::{Error, Result, Scalar};

pub const DEFAULT_SIGMA_MAX: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurProfile {
    pub sigma_max: f64,
    pub fovea_radius: f64,
    /// Eccentricity at which `sigma_max` is reached.
    pub d_max: f64,
}

impl BlurProfile {
    pub fn new(sigma_max: f64, fovea_radius: f64, d_max: f64) -> Result<Self> {
        let ok = sigma_max > 0.0
            && sigma_max.is_finite()
            && fovea_radius >= 0.0
            && d_max.is_finite()
            && d_max > fovea_radius;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "blur profile sigma_max={sigma_max} fovea_radius={fovea_radius} d_max={d_max}"
            )));
        }
        Ok(Self {
            sigma_max,
            fovea_radius,
            d_max,
        })
    }

    /// Anchors `sigma_max` at the frame corner farthest from the fixation and
    /// starts the ramp at `fix.fovea_radius`.
    pub fn for_frame(h: usize, w: usize, fix: &Fixation, sigma_max: f64) -> Result<Self> {
        Self::new(sigma_max, fix.fovea_radius, farthest_corner(h, w, fix))
    }
}

pub fn farthest_corner(h: usize, w: usize, fix: &Fixation) -> f64 {
    let (r1, c1) = (h.saturating_sub(1) as f64, w.saturating_sub(1) as f64);
    [(0.0, 0.0), (0.0, c1), (r1, 0.0), (r1, c1)]
        .iter()
        .map(|&(r, c)| fix.eccentricity(r, c))
        .fold(0.0, f64::max)
}

/// Piecewise-linear blur width at eccentricity `d`.
pub fn sigma_at(d: f64, profile: &BlurProfile) -> f64 {
    if d <= profile.fovea_radius {
        return 0.0;
    }
    let t = (d - profile.fovea_radius) / (profile.d_max - profile.fovea_radius);
    (profile.sigma_max * t).min(profile.sigma_max)
}

/// Truncation half-width for a given sigma.
#[inline]
pub fn kernel_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Unnormalized 1-D Gaussian taps over `[-r, r]`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = kernel_radius(sigma) as i64;
    let denom = 2.0 * sigma * sigma;
    (-r..=r).map(|k| (-((k * k) as f64) / denom).exp()).collect()
}

fn check_channels<T: Scalar>(img: &Image<T>) -> Result<()> {
    match img.channels() {
        1 | 3 => Ok(()),
        got => Err(Error::BadChannelCount {
            expected: "1 or 3",
            got,
        }),
    }
}

/// Reference spatially-varying blur; every pixel gets its own kernel.
pub fn radial_blur<T: Scalar>(img: &Image<T>, fix: &Fixation, profile: &BlurProfile) -> Result<Image<T>> {
    check_channels(img)?;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = img.clone();
    out.data_mut()
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(y, row)| {
            let mut acc = vec![0.0f64; c];
            let mut line = vec![0.0f64; c];
            for x in 0..w {
                let sigma = sigma_at(fix.eccentricity(y as f64, x as f64), profile);
                if sigma == 0.0 {
                    continue;
                }
                let taps = gaussian_taps(sigma);
                let r = (taps.len() / 2) as i64;
                let norm: f64 = taps.iter().sum();
                let norm = norm * norm;
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (ky, &gy) in taps.iter().enumerate() {
                    let sy = clamp_index(y as i64 + ky as i64 - r, h);
                    line.iter_mut().for_each(|a| *a = 0.0);
                    for (kx, &gx) in taps.iter().enumerate() {
                        let sx = clamp_index(x as i64 + kx as i64 - r, w);
                        let base = (sy * w + sx) * c;
                        for ch in 0..c {
                            line[ch] += gx * img.data()[base + ch].as_f64();
                        }
                    }
                    for ch in 0..c {
                        acc[ch] += gy * line[ch];
                    }
                }
                for ch in 0..c {
                    row[x * c + ch] = T::lit(acc[ch] / norm);
                }
            }
        });
    Ok(out)
}

#[inline]
pub(crate) fn clamp_index(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Blur pyramid at uniform sigmas `0, step, 2 step, ...` blended per pixel by
/// linear interpolation in sigma. Much faster than [`radial_blur`] for large
/// sigmas; pixels inside the fovea are still copied exactly.
pub fn radial_blur_layered<T: Scalar>(
    img: &Image<T>,
    fix: &Fixation,
    profile: &BlurProfile,
    step: f64,
) -> Result<Image<T>> {
    check_channels(img)?;
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("layer step {step}")));
    }
    let n_layers = (profile.sigma_max / step).ceil() as usize;
    let layers: Vec<Image<T>> = (0..=n_layers)
        .into_par_iter()
        .map(|k| {
            if k == 0 {
                img.clone()
            } else {
                uniform_blur(img, k as f64 * step)
            }
        })
        .collect();
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let out = Image::from_fn(h, w, c, |y, x, ch| {
        let sigma = sigma_at(fix.eccentricity(y as f64, x as f64), profile);
        if sigma == 0.0 {
            return img.get(y, x, ch);
        }
        let t = sigma / step;
        let k = (t.floor() as usize).min(n_layers);
        let frac = t - k as f64;
        if k == n_layers || frac == 0.0 {
            return layers[k].get(y, x, ch);
        }
        let a = layers[k].get(y, x, ch).as_f64();
        let b = layers[k + 1].get(y, x, ch).as_f64();
        T::lit(a * (1.0 - frac) + b * frac)
    });
    Ok(out)
}

/// Separable clamp-to-edge Gaussian blur with a single sigma.
pub fn uniform_blur<T: Scalar>(img: &Image<T>, sigma: f64) -> Image<T> {
    let taps = gaussian_taps(sigma);
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let r = (taps.len() / 2) as i64;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut tmp = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for (k, &g) in taps.iter().enumerate() {
                let sx = clamp_index(x as i64 + k as i64 - r, w);
                for ch in 0..c {
                    tmp[(y * w + x) * c + ch] += g * img.get(y, sx, ch).as_f64();
                }
            }
        }
    }
    Image::from_fn(h, w, c, |y, x, ch| {
        let mut acc = 0.0;
        for (k, &g) in taps.iter().enumerate() {
            let sy = clamp_index(y as i64 + k as i64 - r, h);
            acc += g * tmp[(sy * w + x) * c + ch];
        }
        T::lit(acc)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise(h: usize, w: usize, c: usize, seed: u64) -> Image<f32> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Image::from_fn(h, w, c, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32) / (1u64 << 24) as f32
        })
    }

    #[test]
    fn sigma_profile_examples() {
        let p = BlurProfile::new(4.0, 0.0, 100.0).unwrap();
        assert_eq!(sigma_at(0.0, &p), 0.0);
        assert_eq!(sigma_at(100.0, &p), 4.0);
        assert_eq!(sigma_at(50.0, &p), 2.0);
        assert_eq!(sigma_at(500.0, &p), 4.0);
        let q = BlurProfile::new(4.0, 10.0, 30.0).unwrap();
        assert_eq!(sigma_at(10.0, &q), 0.0);
        assert_eq!(sigma_at(20.0, &q), 2.0);
        assert!(sigma_at(10.0 + 1e-9, &q) < 1e-8);
        assert!(BlurProfile::new(0.0, 0.0, 1.0).is_err());
        assert!(BlurProfile::new(1.0, 5.0, 5.0).is_err());
    }

    #[test]
    fn constant_image_is_a_fixed_point() {
        let img = Image::<f32>::filled(24, 20, 3, 0.375);
        let fix = Fixation::new(3.0, 17.0, 0.0);
        let p = BlurProfile::for_frame(24, 20, &fix, 4.0).unwrap();
        assert_eq!(radial_blur(&img, &fix, &p).unwrap(), img);
    }

    #[test]
    fn fovea_is_copied_verbatim() {
        let img = noise(32, 32, 3, 5);
        let fix = Fixation::new(16.0, 16.0, 6.0);
        let p = BlurProfile::for_frame(32, 32, &fix, 4.0).unwrap();
        let out = radial_blur(&img, &fix, &p).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if fix.in_fovea(y, x) {
                    for c in 0..3 {
                        assert_eq!(out.get(y, x, c).to_bits(), img.get(y, x, c).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn four_channel_rejected() {
        let img = Image::<f32>::filled(4, 4, 4, 0.5);
        let fix = Fixation::new(2.0, 2.0, 0.0);
        let p = BlurProfile::for_frame(4, 4, &fix, 4.0).unwrap();
        assert!(matches!(radial_blur(&img, &fix, &p), Err(Error::BadChannelCount { .. })));
    }

    #[test]
    fn impulse_response_is_the_normalized_kernel() {
        // pick a profile that gives sigma exactly 2 at the impulse location
        let fix = Fixation::new(0.0, 20.0, 0.0);
        let p = BlurProfile::new(4.0, 0.0, 40.0).unwrap();
        let (iy, ix) = (20usize, 20usize);
        assert_eq!(sigma_at(fix.eccentricity(iy as f64, ix as f64), &p), 2.0);
        let mut img = Image::<f64>::filled(41, 41, 1, 0.0);
        img.set(iy, ix, 0, 1.0);
        let out = radial_blur(&img, &fix, &p).unwrap();
        // the output at (iy, ix) weighs the impulse by the centre tap
        let taps = gaussian_taps(2.0);
        let norm: f64 = taps.iter().sum::<f64>().powi(2);
        let centre = taps[taps.len() / 2];
        assert!((out.get(iy, ix, 0) - centre * centre / norm).abs() < 1e-12);
        assert_eq!(kernel_radius(2.0), 6);
    }

    #[test]
    fn layered_close_to_reference() {
        let img = noise(48, 48, 1, 11);
        let fix = Fixation::new(24.0, 24.0, 4.0);
        let p = BlurProfile::for_frame(48, 48, &fix, 4.0).unwrap();
        let exact = radial_blur(&img, &fix, &p).unwrap();
        let approx = radial_blur_layered(&img, &fix, &p, 0.5).unwrap();
        let mae: f64 = exact
            .data()
            .iter()
            .zip(approx.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / exact.data().len() as f64;
        assert!(mae < 1.5 / 255.0, "mae {mae}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn sigma_is_monotone(a in 0.0f64..200.0, b in 0.0f64..200.0, fr in 0.0f64..20.0) {
            let p = BlurProfile::new(4.0, fr, 150.0).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(sigma_at(lo, &p) <= sigma_at(hi, &p));
        }

        #[test]
        fn output_within_input_range(seed in 0u64..1000, fy in 0usize..16, fx in 0usize..16) {
            let img = noise(16, 16, 3, seed);
            let fix = Fixation::new(fx as f64, fy as f64, 0.0);
            let p = BlurProfile::for_frame(16, 16, &fix, 4.0).unwrap();
            let (lo, hi) = img.min_max();
            let out = radial_blur(&img, &fix, &p).unwrap();
            for &v in out.data() {
                prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn fourfold_symmetry_about_center() {
        let n = 17;
        let base = noise(n, n, 1, 3);
        // symmetrize the input under the dihedral group of the square
        let sym = Image::<f32>::from_fn(n, n, 1, |y, x, _| {
            let (a, b) = (y.min(n - 1 - y), x.min(n - 1 - x));
            let (a, b) = (a.min(b), a.max(b));
            base.get(a, b, 0)
        });
        let fix = Fixation::new(8.0, 8.0, 0.0);
        let p = BlurProfile::for_frame(n, n, &fix, 4.0).unwrap();
        let out = radial_blur(&sym, &fix, &p).unwrap();
        for y in 0..n {
            for x in 0..n {
                let v = out.get(y, x, 0);
                assert!((v - out.get(n - 1 - y, x, 0)).abs() < 1e-5);
                assert!((v - out.get(y, n - 1 - x, 0)).abs() < 1e-5);
                assert!((v - out.get(x, y, 0)).abs() < 1e-5);
            }
        }
    }
}
