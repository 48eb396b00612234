//! Image buffers and the PNG codec.
//!
//! Samples are stored row-major as `(y, x, c)` in the unit range. Every
//! operation here keeps samples finite and inside `[0, 1]`.

use std::io::Cursor;

use sha2::{Digest, Sha256};

use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Image<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if !matches!(channels, 1 | 3 | 4) {
            return Err(Error::BadChannelCount {
                expected: "1, 3 or 4",
                got: channels,
            });
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "empty image {height}x{width}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("valid dimensions")
    }

    /// Builds an image by evaluating `f(y, x, c)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data).expect("valid dimensions")
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn same_shape<U>(&self, other: &Image<U>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Image<T> {
        assert!(c < self.channels);
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = if v.is_nan() {
                T::zero()
            } else {
                v.max(T::zero()).min(T::one())
            };
        }
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    /// SHA-256 over the dimensions and the samples widened to `f64` little-endian.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for d in [self.height, self.width, self.channels] {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in &self.data {
            hasher.update(v.as_f64().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// `(height, width)` from the PNG header, without decoding pixel data.
pub fn png_dimensions(bytes: &[u8]) -> Result<(usize, usize)> {
    let reader = png::Decoder::new(Cursor::new(bytes))
        .read_info()
        .map_err(|e| Error::MalformedInput(e.to_string()))?;
    let info = reader.info();
    Ok((info.height as usize, info.width as usize))
}

/// Decodes an 8- or 16-bit PNG into unit-range samples.
///
/// Palette images are expanded. Alpha is composited over white and dropped,
/// so the result has 1 or 3 channels.
pub fn decode_png(bytes: &[u8]) -> Result<Image<f32>> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::MalformedInput(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::MalformedInput(e.to_string()))?;
    let (color, depth) = (frame.color_type, frame.bit_depth);
    let (height, width) = (frame.height as usize, frame.width as usize);
    let src_channels = color.samples();
    let raw: Vec<f32> = match depth {
        png::BitDepth::Eight => buf[..frame.buffer_size()]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect(),
        png::BitDepth::Sixteen => buf[..frame.buffer_size()]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
            .collect(),
        other => {
            // EXPAND widens sub-byte grayscale to 8 bits, so this is unreachable
            // for well-formed streams.
            return Err(Error::MalformedInput(format!("unsupported bit depth {other:?}")));
        }
    };
    if raw.len() != height * width * src_channels {
        return Err(Error::MalformedInput("truncated frame".into()));
    }
    let has_alpha = matches!(color, png::ColorType::GrayscaleAlpha | png::ColorType::Rgba);
    let out_channels = if has_alpha { src_channels - 1 } else { src_channels };
    let data = if has_alpha {
        raw.chunks_exact(src_channels)
            .flat_map(|px| {
                let a = px[src_channels - 1];
                px[..out_channels]
                    .iter()
                    .map(move |&v| a * v + (1.0 - a))
                    .collect::<Vec<_>>()
            })
            .collect()
    } else {
        raw
    };
    let mut img = Image::new(height, width, out_channels, data)?;
    img.clamp_unit();
    Ok(img)
}

/// Encodes to an 8-bit PNG, rounding each sample to the nearest level.
pub fn encode_png<T: Scalar>(img: &Image<T>) -> Result<Vec<u8>> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        got => {
            return Err(Error::BadChannelCount {
                expected: "1, 3 or 4",
                got,
            })
        }
    };
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize_u8(v)).collect();
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::MalformedInput(e.to_string()))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::MalformedInput(e.to_string()))?;
    }
    Ok(out)
}

#[inline]
pub fn quantize_u8<T: Scalar>(v: T) -> u8 {
    let v = v.as_f64();
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

pub fn read_png(path: impl AsRef<std::path::Path>) -> Result<Image<f32>> {
    decode_png(&std::fs::read(path)?)
}

pub fn write_png<T: Scalar>(path: impl AsRef<std::path::Path>, img: &Image<T>) -> Result<()> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Rec.601 luma. Single-channel input is returned unchanged.
pub fn to_grayscale<T: Scalar>(img: &Image<T>) -> Result<Image<T>> {
    match img.channels() {
        1 => Ok(img.clone()),
        3 => {
            let w = LUMA_WEIGHTS.map(T::lit);
            let data = img
                .data()
                .chunks_exact(3)
                .map(|px| {
                    let g = w[0] * px[0] + w[1] * px[1] + w[2] * px[2];
                    // rounding can push the weighted sum a hair outside the channel range
                    let lo = px[0].min(px[1]).min(px[2]);
                    let hi = px[0].max(px[1]).max(px[2]);
                    g.max(lo).min(hi)
                })
                .collect();
            Image::new(img.height(), img.width(), 1, data)
        }
        got => Err(Error::BadChannelCount {
            expected: "1 or 3",
            got,
        }),
    }
}

/// Replicates a single-channel image into three identical channels.
pub fn gray_to_rgb<T: Scalar>(img: &Image<T>) -> Result<Image<T>> {
    match img.channels() {
        3 => Ok(img.clone()),
        1 => Ok(Image::from_fn(img.height(), img.width(), 3, |y, x, _| img.get(y, x, 0))),
        got => Err(Error::BadChannelCount {
            expected: "1 or 3",
            got,
        }),
    }
}

/// Bilinear resize with half-pixel-centred coordinates:
/// `src = (dst + 0.5) * in / out - 0.5`, clamped to the source extent.
pub fn resize_bilinear<T: Scalar>(img: &Image<T>, new_h: usize, new_w: usize) -> Result<Image<T>> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {new_h}x{new_w} is empty"
        )));
    }
    let ys = axis_taps(img.height(), new_h);
    let xs = axis_taps(img.width(), new_w);
    let c = img.channels();
    let mut data = Vec::with_capacity(new_h * new_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = lerp(img.get(y0, x0, ch), img.get(y0, x1, ch), fx);
                let bottom = lerp(img.get(y1, x0, ch), img.get(y1, x1, ch), fx);
                data.push(lerp(top, bottom, fy));
            }
        }
    }
    Image::new(new_h, new_w, c, data)
}

fn axis_taps<T: Scalar>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, T::lit(s - i0 as f64))
        })
        .collect()
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    let v = a * (T::one() - t) + b * t;
    // rounding may step one ulp outside the endpoints
    v.max(a.min(b)).min(a.max(b))
}

pub fn crop<T: Scalar>(img: &Image<T>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image<T>> {
    if h == 0 || w == 0 || y0 + h > img.height() || x0 + w > img.width() {
        return Err(Error::InvalidArgument(format!(
            "crop {h}x{w}@({y0},{x0}) outside {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(Image::from_fn(h, w, img.channels(), |y, x, c| img.get(y0 + y, x0 + x, c)))
}

/// Largest centred square crop.
pub fn center_crop_square<T: Scalar>(img: &Image<T>) -> Image<T> {
    let side = img.height().min(img.width());
    let y0 = (img.height() - side) / 2;
    let x0 = (img.width() - side) / 2;
    crop(img, y0, x0, side, side).expect("square crop fits")
}
