//! Uniform rotation-invariant local binary patterns.
//!
//! Each interior pixel is compared against `points` samples on a circle of
//! `radius` pixels (bilinear interpolation). Patterns with at most two 0/1
//! transitions map to their count of set bits (`0..=points`); every other
//! pattern lands in the shared bin `points + 1`.

use serde::{Deserialize, Serialize};

use crate::imagekit::{GrayImage, ImageError};

pub const DEFAULT_POINTS: usize = 24;
pub const DEFAULT_RADIUS: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbpHistogram {
    pub bins: Vec<f64>,
}

impl LbpHistogram {
    pub fn entropy(&self) -> f64 {
        self.bins.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }
}

struct Tap {
    dy: i64,
    dx: i64,
    ty: f64,
    tx: f64,
}

fn taps(points: usize, radius: f64) -> Vec<Tap> {
    (0..points)
        .map(|p| {
            let angle = 2.0 * std::f64::consts::PI * p as f64 / points as f64;
            // five-decimal rounding keeps exact lattice points exact (cos(pi/2) etc.)
            let round5 = |v: f64| (v * 1e5).round() / 1e5;
            let ry = round5(-radius * angle.sin());
            let rx = round5(radius * angle.cos());
            let (fy, fx) = (ry.floor(), rx.floor());
            Tap { dy: fy as i64, dx: fx as i64, ty: ry - fy, tx: rx - fx }
        })
        .collect()
}

pub fn lbp_histogram(img: &GrayImage, points: usize, radius: f64) -> Result<LbpHistogram, ImageError> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let reach = radius.ceil() as i64;
    if (w.min(h) as f64) <= 2.0 * radius || points < 2 {
        return Err(ImageError::ImageTooSmall {
            width: w as u32,
            height: h as u32,
            need: format!("min side > {} for LBP radius {radius}", 2.0 * radius),
        });
    }
    let taps = taps(points, radius);
    let data = img.data();
    let at = |y: i64, x: i64| data[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];

    let mut counts = vec![0u64; points + 2];
    let mut bits = vec![false; points];
    for y in reach..h - reach {
        for x in reach..w - reach {
            let center = data[(y * w + x) as usize];
            for (bit, t) in bits.iter_mut().zip(&taps) {
                let (y0, x0) = (y + t.dy, x + t.dx);
                let top = at(y0, x0) * (1.0 - t.tx) + at(y0, x0 + 1) * t.tx;
                let bottom = at(y0 + 1, x0) * (1.0 - t.tx) + at(y0 + 1, x0 + 1) * t.tx;
                *bit = top * (1.0 - t.ty) + bottom * t.ty >= center;
            }
            let transitions = bits.windows(2).filter(|p| p[0] != p[1]).count();
            let code = if transitions <= 2 { bits.iter().filter(|&&b| b).count() } else { points + 1 };
            counts[code] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    Ok(LbpHistogram { bins: counts.iter().map(|&c| c as f64 / total as f64).collect() })
}
