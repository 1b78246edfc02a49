//! Hand-crafted quality features and the two feature-vector recipes.
//!
//! Group 1 (144 dims): for each of the 30% and 60% center crops of the
//! grayscale image and of the skin map, `LBP(26) ⊕ Fourier(2) ⊕ Lighting(8)`.
//!
//! Group 2 (383 dims): a 5x5 grid over the grayscale image, each block giving
//! `Fourier(2) ⊕ Laplacian(1) ⊕ Lighting(8)`, followed by the 30% center crop
//! featurized per R, G, B channel exactly like a Group 1 section.

mod container;
mod lbp;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::imagekit::{center_crop_frac, grid_partition, to_grayscale, GrayImage, ImageError, RasterImage};
use crate::skinmodel::SkinMap;

pub use container::{read_feature_matrix, write_feature_matrix, ContainerError, FeatureMatrix};
pub use lbp::{lbp_histogram, LbpHistogram, DEFAULT_POINTS, DEFAULT_RADIUS};

/// Bumped whenever the order or meaning of any feature dimension changes.
pub const LAYOUT_VERSION: u32 = 1;

pub const DARK_THRESHOLD: f64 = 50.0;
pub const BRIGHT_THRESHOLD: f64 = 205.0;
pub const DB_FLOOR: f64 = 1e-8;

pub const LBP_BINS: usize = DEFAULT_POINTS + 2;
pub const SECTION_DIMS: usize = LBP_BINS + 2 + 8;
pub const GROUP1_DIMS: usize = 4 * SECTION_DIMS;
pub const BLOCK_DIMS: usize = 2 + 1 + 8;
pub const GROUP2_DIMS: usize = 25 * BLOCK_DIMS + 3 * SECTION_DIMS;

pub const GROUP1_CROPS: [f64; 2] = [0.3, 0.6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Group1,
    Group2,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 2] = [FeatureGroup::Group1, FeatureGroup::Group2];

    pub fn dims(self) -> usize {
        match self {
            FeatureGroup::Group1 => GROUP1_DIMS,
            FeatureGroup::Group2 => GROUP2_DIMS,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            FeatureGroup::Group1 => 1,
            FeatureGroup::Group2 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(FeatureGroup::Group1),
            2 => Some(FeatureGroup::Group2),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::Group1 => "group1",
            FeatureGroup::Group2 => "group2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierBlurFeatures {
    pub mean_db: f64,
    pub std_db: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplacianBlurFeature {
    pub variance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightingFeatures {
    pub dark_frac: f64,
    pub bright_frac: f64,
    pub dark_q25: f64,
    pub dark_q50: f64,
    pub dark_q75: f64,
    pub bright_q25: f64,
    pub bright_q50: f64,
    pub bright_q75: f64,
}

impl LightingFeatures {
    pub fn to_array(&self) -> [f64; 8] {
        [
            self.dark_frac,
            self.bright_frac,
            self.dark_q25,
            self.dark_q50,
            self.dark_q75,
            self.bright_q25,
            self.bright_q50,
            self.bright_q75,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub group: FeatureGroup,
    pub values: Vec<f64>,
    pub layout_version: u32,
}

fn too_small(img: &GrayImage, need: &str) -> ImageError {
    ImageError::ImageTooSmall { width: img.width(), height: img.height(), need: need.to_string() }
}

/// Mean and standard deviation (dB) of the centered DFT magnitude after the
/// low-frequency square around DC has been removed.
pub fn fourier_blur(img: &GrayImage) -> Result<FourierBlurFeatures, ImageError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < 8 || h < 8 {
        return Err(too_small(img, "at least 8x8 for the Fourier blur measure"));
    }
    // Removing the mean only alters the DC bin, which is discarded below; it keeps
    // flat regions exactly zero instead of leaving round-off in every bin.
    let mean = img.data().iter().sum::<f64>() / (w * h) as f64;
    let mut buf: Vec<Complex<f64>> = img.data().iter().map(|&v| Complex::new(v - mean, 0.0)).collect();

    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }

    let radius = ((w.min(h)) / 8).max(1);
    // distance of bin k from DC after the center shift
    let dist = |k: usize, n: usize| k.min(n - k);
    let (mut sum, mut sum_sq, mut count) = (0.0, 0.0, 0usize);
    for y in 0..h {
        let dy = dist(y, h);
        for x in 0..w {
            if dy <= radius && dist(x, w) <= radius {
                continue;
            }
            let db = 20.0 * buf[y * w + x].norm().max(DB_FLOOR).log10();
            sum += db;
            sum_sq += db * db;
            count += 1;
        }
    }
    let mean_db = sum / count as f64;
    let var = (sum_sq / count as f64 - mean_db * mean_db).max(0.0);
    Ok(FourierBlurFeatures { mean_db, std_db: var.sqrt() })
}

/// Population variance of the 4-neighbour Laplacian over the valid region.
pub fn laplacian_variance(img: &GrayImage) -> Result<LaplacianBlurFeature, ImageError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < 3 || h < 3 {
        return Err(too_small(img, "at least 3x3 for the Laplacian"));
    }
    let d = img.data();
    let n = ((w - 2) * (h - 2)) as f64;
    let mut responses = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = y * w + x;
            responses.push(d[c - w] + d[c + w] + d[c - 1] + d[c + 1] - 4.0 * d[c]);
        }
    }
    let mean = responses.iter().sum::<f64>() / n;
    let variance = responses.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(LaplacianBlurFeature { variance })
}

/// Linear-interpolated quantile of sorted values.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn lighting_features(img: &GrayImage) -> LightingFeatures {
    let total = img.data().len() as f64;
    let mut dark: Vec<f64> = img.data().iter().copied().filter(|&v| v < DARK_THRESHOLD).collect();
    let mut bright: Vec<f64> = img.data().iter().copied().filter(|&v| v > BRIGHT_THRESHOLD).collect();
    dark.sort_by(f64::total_cmp);
    bright.sort_by(f64::total_cmp);
    let quartiles = |v: &[f64], sentinel: f64| -> [f64; 3] {
        if v.is_empty() {
            [sentinel; 3]
        } else {
            [quantile_sorted(v, 0.25), quantile_sorted(v, 0.5), quantile_sorted(v, 0.75)]
        }
    };
    let [dark_q25, dark_q50, dark_q75] = quartiles(&dark, DARK_THRESHOLD);
    let [bright_q25, bright_q50, bright_q75] = quartiles(&bright, BRIGHT_THRESHOLD);
    LightingFeatures {
        dark_frac: dark.len() as f64 / total,
        bright_frac: bright.len() as f64 / total,
        dark_q25,
        dark_q50,
        dark_q75,
        bright_q25,
        bright_q50,
        bright_q75,
    }
}

/// LBP ⊕ Fourier ⊕ Lighting for one sub-image (36 dims).
pub fn texture_section(img: &GrayImage) -> Result<Vec<f64>, ImageError> {
    let mut out = Vec::with_capacity(SECTION_DIMS);
    out.extend(lbp_histogram(img, DEFAULT_POINTS, DEFAULT_RADIUS)?.bins);
    let f = fourier_blur(img)?;
    out.extend([f.mean_db, f.std_db]);
    out.extend(lighting_features(img).to_array());
    Ok(out)
}

/// Fourier ⊕ Laplacian ⊕ Lighting for one grid block (11 dims).
pub fn block_section(block: &GrayImage) -> Result<Vec<f64>, ImageError> {
    let f = fourier_blur(block)?;
    let l = laplacian_variance(block)?;
    let mut out = Vec::with_capacity(BLOCK_DIMS);
    out.extend([f.mean_db, f.std_db, l.variance]);
    out.extend(lighting_features(block).to_array());
    Ok(out)
}

/// Group 1 vector. `img` is expected to be already resized; the skin map must
/// have the same dimensions.
pub fn group1_features(img: &RasterImage, skin: &SkinMap) -> Result<FeatureVector, ImageError> {
    if (skin.width(), skin.height()) != (img.width(), img.height()) {
        return Err(ImageError::InvalidDimensions {
            width: skin.width(),
            height: skin.height(),
            len: skin.probabilities().len(),
        });
    }
    let gray = to_grayscale(img);
    let skin_gray = skin.as_gray();
    let mut values = Vec::with_capacity(GROUP1_DIMS);
    for frac in GROUP1_CROPS {
        for source in [&gray, &skin_gray] {
            values.extend(texture_section(&center_crop_frac(source, frac)?)?);
        }
    }
    debug_assert_eq!(values.len(), GROUP1_DIMS);
    Ok(FeatureVector { group: FeatureGroup::Group1, values, layout_version: LAYOUT_VERSION })
}

pub fn group2_features(img: &RasterImage) -> Result<FeatureVector, ImageError> {
    if img.width() < 40 || img.height() < 40 {
        return Err(ImageError::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            need: "at least 40x40 for the grid features".into(),
        });
    }
    let gray = to_grayscale(img);
    let mut values = Vec::with_capacity(GROUP2_DIMS);
    for block in grid_partition(&gray, 5, 5)? {
        values.extend(block_section(&block)?);
    }
    let crop = center_crop_frac(img, GROUP1_CROPS[0])?;
    for c in 0..3 {
        values.extend(texture_section(&crop.channel(c))?);
    }
    debug_assert_eq!(values.len(), GROUP2_DIMS);
    Ok(FeatureVector { group: FeatureGroup::Group2, values, layout_version: LAYOUT_VERSION })
}
