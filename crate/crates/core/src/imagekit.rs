//! Image decoding and the geometric / color primitives the feature code is built on.

use image::ImageFormat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default bound on the longest image side before featurization.
pub const DEFAULT_MAX_SIDE: u32 = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("unsupported image format (expected PNG or JPEG)")]
    UnsupportedFormat,
    #[error("corrupt image stream: {0}")]
    CorruptStream(String),
    #[error("crop of {width}x{height} is degenerate")]
    DegenerateCrop { width: u32, height: u32 },
    #[error("image {width}x{height} is too small: {need}")]
    ImageTooSmall { width: u32, height: u32, need: String },
    #[error("invalid dimensions {width}x{height} for {len} samples")]
    InvalidDimensions { width: u32, height: u32, len: usize },
}

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || data.len() != width as usize * height as usize * 3 {
            return Err(ImageError::InvalidDimensions { width, height, len: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self { width, height, data }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// One color plane as a real-valued image.
    pub fn channel(&self, c: usize) -> GrayImage {
        assert!(c < 3);
        let data = self.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        GrayImage { width: self.width, height: self.height, data }
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        let buf = image::RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("dimensions checked at construction");
        buf.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
        out.into_inner()
    }

    pub fn encode_jpeg(&self, quality: u8) -> Vec<u8> {
        let mut out = Vec::new();
        let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality);
        enc.encode(&self.data, self.width, self.height, image::ExtendedColorType::Rgb8)
            .expect("in-memory JPEG encoding");
        out
    }
}

/// Real-valued luminance image with samples in [0, 255].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || data.len() != width as usize * height as usize {
            return Err(ImageError::InvalidDimensions { width, height, len: data.len() });
        }
        Ok(Self {
            width,
            height,
            data: data.into_iter().map(|v| v.clamp(0.0, 255.0)).collect(),
        })
    }

    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        Self { width, height, data: vec![value.clamp(0.0, 255.0); width as usize * height as usize] }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> f64) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 255.0));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[y as usize * self.width as usize + x as usize]
    }
}

/// Common view over both raster kinds so cropping is written once.
pub trait Crop: Sized {
    fn dims(&self) -> (u32, u32);
    fn sub_image(&self, x0: u32, y0: u32, w: u32, h: u32) -> Self;
}

impl Crop for RasterImage {
    fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn sub_image(&self, x0: u32, y0: u32, w: u32, h: u32) -> Self {
        let mut data = Vec::with_capacity(w as usize * h as usize * 3);
        for y in y0..y0 + h {
            let start = (y as usize * self.width as usize + x0 as usize) * 3;
            data.extend_from_slice(&self.data[start..start + w as usize * 3]);
        }
        Self { width: w, height: h, data }
    }
}

impl Crop for GrayImage {
    fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn sub_image(&self, x0: u32, y0: u32, w: u32, h: u32) -> Self {
        let mut data = Vec::with_capacity(w as usize * h as usize);
        for y in y0..y0 + h {
            let start = y as usize * self.width as usize + x0 as usize;
            data.extend_from_slice(&self.data[start..start + w as usize]);
        }
        Self { width: w, height: h, data }
    }
}

/// Decode a PNG or JPEG stream into 8-bit RGB. Alpha is dropped and gray sources
/// are replicated across the three channels.
pub fn decode_image(bytes: &[u8]) -> Result<RasterImage, ImageError> {
    let format = match image::guess_format(bytes) {
        Ok(f @ (ImageFormat::Png | ImageFormat::Jpeg)) => f,
        Ok(_) => return Err(ImageError::UnsupportedFormat),
        Err(_) => return Err(ImageError::CorruptStream("unrecognized stream".into())),
    };
    let decoded = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| ImageError::CorruptStream(e.to_string()))?;
    let rgb = decoded.to_rgb8();
    let (width, height) = rgb.dimensions();
    RasterImage::new(width, height, rgb.into_raw())
}

/// Bilinear downscale so the longest side is `max_side`. Never upscales.
pub fn resize_max_side(img: &RasterImage, max_side: u32) -> RasterImage {
    let max_side = max_side.max(1);
    let (w, h) = (img.width, img.height);
    let longest = w.max(h);
    if longest <= max_side {
        return img.clone();
    }
    let scale = max_side as f64 / longest as f64;
    let (nw, nh) = if w >= h {
        (max_side, ((h as f64 * scale).round() as u32).max(1))
    } else {
        (((w as f64 * scale).round() as u32).max(1), max_side)
    };
    let sx = w as f64 / nw as f64;
    let sy = h as f64 / nh as f64;
    let mut data = Vec::with_capacity(nw as usize * nh as usize * 3);
    for oy in 0..nh {
        // pixel-center alignment
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as u32;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..nw {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as u32;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
            for ch in 0..3 {
                let top = a[ch] as f64 * (1.0 - tx) + b[ch] as f64 * tx;
                let bot = c[ch] as f64 * (1.0 - tx) + d[ch] as f64 * tx;
                data.push((top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RasterImage { width: nw, height: nh, data }
}

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub fn to_grayscale(img: &RasterImage) -> GrayImage {
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| {
            let l = LUMA_WEIGHTS[0] * p[0] as f64 + LUMA_WEIGHTS[1] * p[1] as f64 + LUMA_WEIGHTS[2] * p[2] as f64;
            l.clamp(0.0, 255.0)
        })
        .collect();
    GrayImage { width: img.width, height: img.height, data }
}

/// Centered crop of `round(frac * w) x round(frac * h)`. Odd leftover margins put the
/// extra pixel on the bottom/right, so the crop leans toward the top-left.
pub fn center_crop_frac<T: Crop>(img: &T, frac: f64) -> Result<T, ImageError> {
    let (w, h) = img.dims();
    let cw = (frac * w as f64).round();
    let ch = (frac * h as f64).round();
    if !(frac > 0.0 && frac <= 1.0) || cw < 1.0 || ch < 1.0 {
        return Err(ImageError::DegenerateCrop { width: cw.max(0.0) as u32, height: ch.max(0.0) as u32 });
    }
    let (cw, ch) = (cw as u32, ch as u32);
    let x0 = (w - cw) / 2;
    let y0 = (h - ch) / 2;
    Ok(img.sub_image(x0, y0, cw, ch))
}

/// Non-overlapping `rows x cols` tiling, row-major, with boundaries at
/// `floor(i * dim / n)`.
pub fn grid_partition(img: &GrayImage, rows: u32, cols: u32) -> Result<Vec<GrayImage>, ImageError> {
    let (w, h) = (img.width, img.height);
    if rows == 0 || cols == 0 || w < cols || h < rows {
        return Err(ImageError::ImageTooSmall { width: w, height: h, need: format!("at least {cols}x{rows} for the grid") });
    }
    let ybounds: Vec<u32> = (0..=rows).map(|i| (i as u64 * h as u64 / rows as u64) as u32).collect();
    let xbounds: Vec<u32> = (0..=cols).map(|j| (j as u64 * w as u64 / cols as u64) as u32).collect();
    let mut blocks = Vec::with_capacity((rows * cols) as usize);
    for yi in ybounds.windows(2) {
        for xi in xbounds.windows(2) {
            blocks.push(img.sub_image(xi[0], yi[0], xi[1] - xi[0], yi[1] - yi[0]));
        }
    }
    Ok(blocks)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn blur_plane(src: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let reflect = |i: i64, n: i64| -> usize {
        let mut i = i;
        if n == 1 {
            return 0;
        }
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * src[y * w + reflect(x as i64 + k as i64 - r, w as i64)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[reflect(y as i64 + k as i64 - r, h as i64) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Separable Gaussian blur with symmetric edge reflection. Used to synthesize
/// degraded variants and by the blur-response checks.
pub fn gaussian_blur_gray(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let data = blur_plane(&img.data, img.width as usize, img.height as usize, &k);
    GrayImage { width: img.width, height: img.height, data: data.into_iter().map(|v| v.clamp(0.0, 255.0)).collect() }
}

pub fn gaussian_blur_rgb(img: &RasterImage, sigma: f64) -> RasterImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let (w, h) = (img.width as usize, img.height as usize);
    let planes: Vec<Vec<f64>> = (0..3).map(|c| blur_plane(&img.channel(c).data, w, h, &k)).collect();
    let mut data = Vec::with_capacity(w * h * 3);
    for i in 0..w * h {
        for plane in &planes {
            data.push(plane[i].round().clamp(0.0, 255.0) as u8);
        }
    }
    RasterImage { width: img.width, height: img.height, data }
}

/// Multiply every sample by `factor` (0.2 gives the standard darkened variant).
pub fn scale_intensity(img: &RasterImage, factor: f64) -> RasterImage {
    let data = img.data.iter().map(|&v| (v as f64 * factor).round().clamp(0.0, 255.0) as u8).collect();
    RasterImage { width: img.width, height: img.height, data }
}
