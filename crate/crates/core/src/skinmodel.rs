//! Per-pixel skin probability from a pair of class-conditional Gaussian
//! mixtures (skin / non-skin) over B,G,R values, fit with EM.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagekit::{GrayImage, ImageError, RasterImage};

pub const COVARIANCE_RIDGE: f64 = 1e-6;
pub const DEFAULT_COMPONENTS: usize = 4;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 200;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error)]
pub enum SkinError {
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("need at least {k} samples, got {n}")]
    InsufficientSamples { n: usize, k: usize },
    #[error("training data has no {0} samples")]
    MissingClass(&'static str),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkinLabel {
    Skin,
    Nonskin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelSample {
    pub b: u8,
    pub g: u8,
    pub r: u8,
    pub label: SkinLabel,
}

impl PixelSample {
    pub fn bgr(&self) -> [f64; 3] {
        [self.b as f64, self.g as f64, self.r as f64]
    }
}

pub fn parse_skin_dataset(text: &str) -> Result<Vec<PixelSample>, SkinError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |message: String| SkinError::ParseError { line: line_no, message };
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let mut v = [0u8; 3];
        for (slot, f) in v.iter_mut().zip(&fields[..3]) {
            *slot = f.parse().map_err(|_| err(format!("channel value {f:?} is not in 0..=255")))?;
        }
        let label = match fields[3] {
            "1" => SkinLabel::Skin,
            "2" => SkinLabel::Nonskin,
            other => return Err(err(format!("unknown label {other:?}"))),
        };
        out.push(PixelSample { b: v[0], g: v[1], r: v[2], label });
    }
    if out.is_empty() {
        return Err(SkinError::EmptyDataset);
    }
    Ok(out)
}

pub fn load_skin_dataset(path: &Path) -> Result<Vec<PixelSample>, SkinError> {
    let text = std::fs::read_to_string(path).map_err(|source| SkinError::Io { path: path.display().to_string(), source })?;
    parse_skin_dataset(&text)
}

type Mat3 = [[f64; 3]; 3];

/// Lower Cholesky factor, or `None` when the matrix is not positive definite.
fn cholesky(a: &Mat3) -> Option<Mat3> {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: [f64; 3],
    pub covariance: Mat3,
}

/// Component with its Cholesky factor cached for repeated density evaluation.
#[derive(Clone, Debug)]
struct Prepared {
    log_weight: f64,
    mean: [f64; 3],
    chol: Mat3,
    log_norm: f64,
}

impl Prepared {
    fn new(c: &GaussianComponent) -> Self {
        let chol = cholesky(&c.covariance).unwrap_or_else(|| {
            let mut cov = c.covariance;
            for (i, row) in cov.iter_mut().enumerate() {
                row[i] += COVARIANCE_RIDGE;
            }
            cholesky(&cov).unwrap_or([[COVARIANCE_RIDGE.sqrt(), 0.0, 0.0], [0.0, COVARIANCE_RIDGE.sqrt(), 0.0], [0.0, 0.0, COVARIANCE_RIDGE.sqrt()]])
        });
        let log_det = 2.0 * (chol[0][0].ln() + chol[1][1].ln() + chol[2][2].ln());
        Self { log_weight: c.weight.ln(), mean: c.mean, chol, log_norm: -0.5 * (3.0 * LN_2PI + log_det) }
    }

    #[inline]
    fn log_weighted_density(&self, x: &[f64; 3]) -> f64 {
        let d = [x[0] - self.mean[0], x[1] - self.mean[1], x[2] - self.mean[2]];
        let l = &self.chol;
        let z0 = d[0] / l[0][0];
        let z1 = (d[1] - l[1][0] * z0) / l[1][1];
        let z2 = (d[2] - l[2][0] * z0 - l[2][1] * z1) / l[2][2];
        self.log_weight + self.log_norm - 0.5 * (z0 * z0 + z1 * z1 + z2 * z2)
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub components: Vec<GaussianComponent>,
}

impl GaussianMixture {
    fn prepared(&self) -> Vec<Prepared> {
        self.components.iter().map(Prepared::new).collect()
    }

    pub fn log_density(&self, x: &[f64; 3]) -> f64 {
        let p = self.prepared();
        let terms: Vec<f64> = p.iter().map(|c| c.log_weighted_density(x)).collect();
        log_sum_exp(&terms)
    }

    /// Mean per-sample log-likelihood.
    pub fn mean_log_likelihood(&self, samples: &[[f64; 3]]) -> f64 {
        let p = self.prepared();
        let mut terms = vec![0.0; p.len()];
        samples
            .iter()
            .map(|x| {
                for (t, c) in terms.iter_mut().zip(&p) {
                    *t = c.log_weighted_density(x);
                }
                log_sum_exp(&terms)
            })
            .sum::<f64>()
            / samples.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub mixture: GaussianMixture,
    /// Mean log-likelihood after each E-step, starting with the initial parameters.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
}

fn covariance_of(samples: &[[f64; 3]], mean: &[f64; 3]) -> Mat3 {
    let mut cov = [[0.0; 3]; 3];
    for x in samples {
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    let n = samples.len() as f64;
    for (i, row) in cov.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v /= n;
        }
        row[i] += COVARIANCE_RIDGE;
    }
    cov
}

fn mean_of(samples: &[[f64; 3]]) -> [f64; 3] {
    let mut m = [0.0; 3];
    for x in samples {
        for i in 0..3 {
            m[i] += x[i];
        }
    }
    m.map(|v| v / samples.len() as f64)
}

/// Full-covariance EM for one class.
pub fn fit_gmm(samples: &[[f64; 3]], k: usize, seed: u64, tol: f64, max_iter: usize) -> Result<GmmFit, SkinError> {
    let n = samples.len();
    if k == 0 || n < k {
        return Err(SkinError::InsufficientSamples { n, k: k.max(1) });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut means: Vec<[f64; 3]> = Vec::with_capacity(k);
    for &i in &order {
        if means.len() == k {
            break;
        }
        if !means.contains(&samples[i]) {
            means.push(samples[i]);
        }
    }
    // fewer distinct points than components: fall back to repeats
    for &i in order.iter().take(k - means.len()) {
        means.push(samples[i]);
    }

    let global_cov = covariance_of(samples, &mean_of(samples));
    let mut mixture = GaussianMixture {
        components: means
            .into_iter()
            .map(|mean| GaussianComponent { weight: 1.0 / k as f64, mean, covariance: global_cov })
            .collect(),
    };

    let mut trace = Vec::new();
    let mut resp = vec![0.0; n * k];
    let mut iterations = 0;
    loop {
        // E-step
        let prepared = mixture.prepared();
        let mut ll = 0.0;
        let mut terms = vec![0.0; k];
        for (x, r) in samples.iter().zip(resp.chunks_exact_mut(k)) {
            for (t, c) in terms.iter_mut().zip(&prepared) {
                *t = c.log_weighted_density(x);
            }
            let lse = log_sum_exp(&terms);
            ll += lse;
            for (ri, t) in r.iter_mut().zip(&terms) {
                *ri = (t - lse).exp();
            }
        }
        ll /= n as f64;
        // The tolerance applies to the total log-likelihood, not the per-sample mean.
        let converged = trace.last().is_some_and(|&prev: &f64| (ll - prev) * (n as f64) < tol);
        trace.push(ll);
        if converged || iterations >= max_iter {
            break;
        }

        // M-step
        let mut next = Vec::with_capacity(k);
        for j in 0..k {
            let nk: f64 = resp.iter().skip(j).step_by(k).sum::<f64>() + 10.0 * f64::EPSILON;
            let mut mean = [0.0; 3];
            for (x, r) in samples.iter().zip(resp.chunks_exact(k)) {
                for i in 0..3 {
                    mean[i] += r[j] * x[i];
                }
            }
            mean = mean.map(|v| v / nk);
            let mut cov = [[0.0; 3]; 3];
            for (x, r) in samples.iter().zip(resp.chunks_exact(k)) {
                let d = [x[0] - mean[0], x[1] - mean[1], x[2] - mean[2]];
                for a in 0..3 {
                    for b in a..3 {
                        cov[a][b] += r[j] * d[a] * d[b];
                    }
                }
            }
            for a in 0..3 {
                for b in a..3 {
                    cov[a][b] /= nk;
                    cov[b][a] = cov[a][b];
                }
                cov[a][a] += COVARIANCE_RIDGE;
            }
            next.push(GaussianComponent { weight: nk, mean, covariance: cov });
        }
        let total: f64 = next.iter().map(|c| c.weight).sum();
        next.iter_mut().for_each(|c| c.weight /= total);
        mixture = GaussianMixture { components: next };
        iterations += 1;
    }
    Ok(GmmFit { mixture, log_likelihood: trace, iterations })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkinGmm {
    pub skin_components: Vec<GaussianComponent>,
    pub nonskin_components: Vec<GaussianComponent>,
    /// `[skin, nonskin]`
    pub class_priors: [f64; 2],
    pub k: usize,
    pub seed: u64,
}

pub fn train_skin_model(samples: &[PixelSample], k: usize, seed: u64) -> Result<SkinGmm, SkinError> {
    let skin: Vec<[f64; 3]> = samples.iter().filter(|s| s.label == SkinLabel::Skin).map(PixelSample::bgr).collect();
    let nonskin: Vec<[f64; 3]> = samples.iter().filter(|s| s.label == SkinLabel::Nonskin).map(PixelSample::bgr).collect();
    if skin.is_empty() {
        return Err(SkinError::MissingClass("skin"));
    }
    if nonskin.is_empty() {
        return Err(SkinError::MissingClass("non-skin"));
    }
    let fit_skin = fit_gmm(&skin, k, seed, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let fit_non = fit_gmm(&nonskin, k, seed.wrapping_add(1), DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let n = samples.len() as f64;
    let prior_skin = skin.len() as f64 / n;
    Ok(SkinGmm {
        skin_components: fit_skin.mixture.components,
        nonskin_components: fit_non.mixture.components,
        class_priors: [prior_skin, 1.0 - prior_skin],
        k,
        seed,
    })
}

impl SkinGmm {
    /// Posterior probability of skin for one B,G,R value.
    pub fn posterior(&self, bgr: &[f64; 3]) -> f64 {
        PreparedSkin::new(self).posterior(bgr)
    }
}

struct PreparedSkin {
    skin: Vec<Prepared>,
    nonskin: Vec<Prepared>,
    log_priors: [f64; 2],
}

impl PreparedSkin {
    fn new(m: &SkinGmm) -> Self {
        Self {
            skin: m.skin_components.iter().map(Prepared::new).collect(),
            nonskin: m.nonskin_components.iter().map(Prepared::new).collect(),
            log_priors: [m.class_priors[0].ln(), m.class_priors[1].ln()],
        }
    }

    fn posterior(&self, x: &[f64; 3]) -> f64 {
        let lse = |cs: &[Prepared]| log_sum_exp(&cs.iter().map(|c| c.log_weighted_density(x)).collect::<Vec<_>>());
        let ls = self.log_priors[0] + lse(&self.skin);
        let ln = self.log_priors[1] + lse(&self.nonskin);
        if ls == f64::NEG_INFINITY && ln == f64::NEG_INFINITY {
            return self.log_priors[0].exp();
        }
        (1.0 / (1.0 + (ln - ls).exp())).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkinMap {
    width: u32,
    height: u32,
    probabilities: Vec<f64>,
}

impl SkinMap {
    pub fn new(width: u32, height: u32, probabilities: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || probabilities.len() != width as usize * height as usize {
            return Err(ImageError::InvalidDimensions { width, height, len: probabilities.len() });
        }
        Ok(Self { width, height, probabilities: probabilities.into_iter().map(|p| p.clamp(0.0, 1.0)).collect() })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// Probabilities scaled to the [0, 255] luminance range.
    pub fn as_gray(&self) -> GrayImage {
        GrayImage::new(self.width, self.height, self.probabilities.iter().map(|p| p * 255.0).collect())
            .expect("dimensions checked at construction")
    }
}

pub fn skin_probability_map(img: &RasterImage, model: &SkinGmm) -> SkinMap {
    let prepared = PreparedSkin::new(model);
    // 8-bit inputs repeat heavily; memoize on the packed pixel value
    let mut cache = std::collections::HashMap::new();
    let probabilities = img
        .data()
        .chunks_exact(3)
        .map(|p| {
            let key = u32::from_le_bytes([p[0], p[1], p[2], 0]);
            *cache.entry(key).or_insert_with(|| prepared.posterior(&[p[2] as f64, p[1] as f64, p[0] as f64]))
        })
        .collect();
    SkinMap { width: img.width(), height: img.height(), probabilities }
}
