//! The eccentricity mask used as the generator's fourth input channel.

use serde::{Deserialize, Serialize};

use crate::imagekit::Image;
use crate::{Error, Result, Scalar};

/// Fovea radius used for 512x512 inputs.
pub const DEFAULT_FOVEA_RADIUS_512: f64 = 64.0;

/// A fixation point in pixel coordinates plus the radius of the foveal disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    /// Column.
    pub fx: f64,
    /// Row.
    pub fy: f64,
    pub fovea_radius: f64,
}

impl Fixation {
    pub fn new(fx: f64, fy: f64, fovea_radius: f64) -> Self {
        Self { fx, fy, fovea_radius }
    }

    /// Fixation at `(w/2, h/2)` with the fovea scaled to `w/8` (64 pixels at 512).
    pub fn centered(h: usize, w: usize) -> Self {
        Self::new(
            (w / 2) as f64,
            (h / 2) as f64,
            DEFAULT_FOVEA_RADIUS_512 * w as f64 / 512.0,
        )
    }

    pub fn with_radius(self, fovea_radius: f64) -> Self {
        Self { fovea_radius, ..self }
    }

    /// Distance from pixel `(row, col)` to the fixation.
    #[inline]
    pub fn eccentricity(&self, row: f64, col: f64) -> f64 {
        let dy = row - self.fy;
        let dx = col - self.fx;
        (dy * dy + dx * dx).sqrt()
    }

    #[inline]
    pub fn in_fovea(&self, row: usize, col: usize) -> bool {
        self.eccentricity(row as f64, col as f64) <= self.fovea_radius
    }

    pub fn check_bounds(&self, h: usize, w: usize) -> Result<()> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx >= 0.0
            && self.fy >= 0.0
            && self.fx < w as f64
            && self.fy < h as f64
            && self.fovea_radius >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "fixation {self:?} outside a {h}x{w} frame"
            )))
        }
    }
}

/// Per-pixel distance to the fixation, zeroed inside the closed foveal disk.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskChannel {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl MaskChannel {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn max_value(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }
}

/// `d = sqrt((i - fy)^2 + (j - fx)^2)` at integer pixel indices; the mask holds
/// `d` where `d > fovea_radius` and 0 otherwise. Evaluated in double precision.
pub fn build_mask(h: usize, w: usize, fix: &Fixation) -> Result<MaskChannel> {
    fix.check_bounds(h, w)?;
    let mut values = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let d = fix.eccentricity(i as f64, j as f64);
            values.push(if d > fix.fovea_radius { d as f32 } else { 0.0 });
        }
    }
    Ok(MaskChannel {
        height: h,
        width: w,
        values,
    })
}

/// Diagonal length of an `h x w` frame, the default mask normalizer.
pub fn diagonal(h: usize, w: usize) -> f64 {
    ((h * h + w * w) as f64).sqrt()
}

/// Appends `mask / normalizer` as a fourth channel to a 3-channel image.
pub fn attach_mask<T: Scalar>(img: &Image<T>, mask: &MaskChannel, normalizer: f64) -> Result<Image<T>> {
    if img.channels() != 3 {
        return Err(Error::BadChannelCount {
            expected: "3",
            got: img.channels(),
        });
    }
    if img.height() != mask.height || img.width() != mask.width {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.height(),
            img.width(),
            mask.height,
            mask.width
        )));
    }
    if !(normalizer > 0.0 && normalizer.is_finite()) {
        return Err(Error::InvalidArgument(format!("mask normalizer {normalizer}")));
    }
    Ok(Image::from_fn(img.height(), img.width(), 4, |y, x, c| {
        if c < 3 {
            img.get(y, x, c)
        } else {
            T::lit(mask.get(y, x) as f64 / normalizer)
        }
    }))
}
