//! Seeded procedural data: skin-like photographs, UCI-format skin pixel samples,
//! and complete labeled corpora with blur / darkening degradations. Used by the
//! benches, the CLI `make-corpus` stage and the test suites.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::{ImageRecord, PatientRecord, QualityAnnotation, Reason, Sex};
use crate::imagekit::{gaussian_blur_rgb, resize_max_side, scale_intensity, RasterImage};

/// Photograph-like RGB image: skin-toned shading, mid-scale mottling, fine grain,
/// a pigmented lesion with a crisp border and a few hairs.
pub fn natural_image(seed: u64, width: u32, height: u32) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a6e);
    let r_base: f64 = rng.gen_range(95.0..235.0);
    let tone = [r_base, r_base * rng.gen_range(0.68..0.82), r_base * rng.gen_range(0.52..0.68)];

    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let wavelength = rng.gen_range(0.4..1.5) * width.max(height) as f64;
            (angle.cos() / wavelength, angle.sin() / wavelength, rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(4.0..10.0))
        })
        .collect();

    let cell = rng.gen_range(3..8) as u32;
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mottle = rng.gen_range(6.0..14.0);
    let grain = rng.gen_range(4.0..9.0);

    let min_side = width.min(height) as f64;
    let (cx, cy) = (
        width as f64 * rng.gen_range(0.35..0.65),
        height as f64 * rng.gen_range(0.35..0.65),
    );
    let (ax, ay) = (min_side * rng.gen_range(0.08..0.22), min_side * rng.gen_range(0.08..0.22));
    let lesion = [tone[0] * 0.55, tone[1] * 0.45, tone[2] * 0.45];

    let hairs: Vec<(f64, f64, f64)> = (0..rng.gen_range(0..5))
        .map(|_| {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            (a.cos(), a.sin(), rng.gen_range(0.0..width as f64) * a.sin() - rng.gen_range(0.0..height as f64) * a.cos())
        })
        .collect();

    let mut grain_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    RasterImage::from_fn(width, height, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let shade: f64 = waves.iter().map(|(kx, ky, ph, amp)| amp * (std::f64::consts::TAU * (kx * xf + ky * yf) + ph).cos()).sum();
        let (gx, gy) = (xf / cell as f64, yf / cell as f64);
        let (ix, iy) = (gx.floor() as u32, gy.floor() as u32);
        let (tx, ty) = (gx - ix as f64, gy - iy as f64);
        let l = |i: u32, j: u32| lattice[(j * gw + i) as usize];
        let mot = (l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx) * (1.0 - ty) + (l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx) * ty;
        let d = ((xf - cx) / ax).powi(2) + ((yf - cy) / ay).powi(2);
        let inside = (1.0 - (d - 1.0) * 6.0).clamp(0.0, 1.0);
        let on_hair = hairs.iter().any(|(s, c, o)| (xf * s - yf * c - o).abs() < 0.7);
        let mut px = [0u8; 3];
        let noise: f64 = grain_rng.gen_range(-1.0..1.0) * grain;
        for ch in 0..3 {
            let mut v = tone[ch] * (1.0 - inside) + lesion[ch] * inside + shade + mot * mottle + noise;
            if on_hair {
                v *= 0.35;
            }
            px[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
        px
    })
}

/// Labeled pixels in the UCI skin segmentation text format (`B G R label`,
/// 1 = skin, 2 = non-skin).
pub fn skin_dataset_text(seed: u64, n_skin: usize, n_nonskin: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<([u8; 3], u8)> = Vec::with_capacity(n_skin + n_nonskin);
    for _ in 0..n_skin {
        let r: f64 = rng.gen_range(70.0..250.0);
        let g = r * rng.gen_range(0.62..0.85) + rng.gen_range(-6.0..6.0);
        let b = r * rng.gen_range(0.48..0.72) + rng.gen_range(-6.0..6.0);
        rows.push(([b.clamp(0.0, 255.0) as u8, g.clamp(0.0, 255.0) as u8, r.clamp(0.0, 255.0) as u8], 1));
    }
    for _ in 0..n_nonskin {
        let px = [rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()];
        rows.push((px, 2));
    }
    rows.shuffle(&mut rng);
    let mut out = String::new();
    for ([b, g, r], label) in rows {
        writeln!(out, "{b}\t{g}\t{r}\t{label}").unwrap();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Clean,
    Blurred,
    Darkened,
    /// Shrunk to a third and framed by a plain backdrop.
    ZoomedOut,
}

#[derive(Clone, Debug)]
pub struct CorpusImage {
    pub record: ImageRecord,
    pub variant: Variant,
    pub image: RasterImage,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub images: Vec<CorpusImage>,
    pub patients: Vec<PatientRecord>,
}

pub const BLUR_SIGMA: f64 = 3.0;
pub const DARKEN_FACTOR: f64 = 0.2;

pub const ZOOM_OUT_FACTOR: u32 = 3;

/// The photo shrunk by [`ZOOM_OUT_FACTOR`] and centered on a lightly textured wall.
pub fn zoom_out(img: &RasterImage, seed: u64) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    let small = resize_max_side(img, (w.max(h) / ZOOM_OUT_FACTOR).max(1));
    let (x0, y0) = ((w - small.width()) / 2, (h - small.height()) / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wall: [f64; 3] = [rng.gen_range(150.0..220.0), rng.gen_range(150.0..210.0), rng.gen_range(140.0..200.0)];
    RasterImage::from_fn(w, h, |x, y| {
        if x >= x0 && y >= y0 && x - x0 < small.width() && y - y0 < small.height() {
            small.pixel(x - x0, y - y0)
        } else {
            let grain = rng.gen_range(-6.0..6.0);
            wall.map(|c| (c + grain).clamp(0.0, 255.0) as u8)
        }
    })
}

/// `n_base` clean photos, each also present blurred (σ = 3) and darkened (×0.2),
/// plus an optional zoomed-out copy. Every base photo gets its own patient so
/// its variants share a patient and always land in the same split. Two raters
/// annotate each image.
pub fn degradation_corpus(seed: u64, n_base: usize, width: u32, height: u32, zoomed_out: bool) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0_4b05);
    let mut images = Vec::with_capacity(n_base * 3);
    let mut patients = Vec::with_capacity(n_base);
    for i in 0..n_base {
        let patient_id = format!("P{i:04}");
        patients.push(PatientRecord {
            patient_id: patient_id.clone(),
            age: rng.gen_range(18..90),
            sex: if rng.gen_bool(0.5) { Sex::Female } else { Sex::Male },
            fst: rng.gen_range(1..=6),
        });
        let clean = natural_image(seed.wrapping_add(i as u64 * 7919), width, height);
        let mut variants = vec![
            (Variant::Clean, clean.clone()),
            (Variant::Blurred, gaussian_blur_rgb(&clean, BLUR_SIGMA)),
            (Variant::Darkened, scale_intensity(&clean, DARKEN_FACTOR)),
        ];
        if zoomed_out {
            variants.push((Variant::ZoomedOut, zoom_out(&clean, seed.wrapping_add(i as u64))));
        }
        for (variant, image) in variants {
            let (quality, reason, tag) = match variant {
                Variant::Clean => (rng.gen_range(0..=1), None, "clean"),
                Variant::Blurred => (rng.gen_range(2..=4), Some(Reason::Blur), "blur"),
                Variant::Darkened => (rng.gen_range(2..=4), Some(Reason::Lighting), "dark"),
                Variant::ZoomedOut => (rng.gen_range(2..=4), Some(Reason::ZoomCrop), "zoom"),
            };
            let annotations = ["r1", "r2"]
                .iter()
                .map(|rater| QualityAnnotation::new(rater.to_string(), quality, reason.into_iter().collect()).expect("valid synthetic annotation"))
                .collect();
            let image_id = format!("img{i:04}_{tag}");
            let record = ImageRecord::new(image_id.clone(), patient_id.clone(), format!("images/{image_id}.png"), annotations);
            images.push(CorpusImage { record, variant, image });
        }
    }
    Corpus { images, patients }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_seeded() {
        assert_eq!(natural_image(4, 50, 40), natural_image(4, 50, 40));
        assert_ne!(natural_image(4, 50, 40), natural_image(5, 50, 40));
    }

    #[test]
    fn corpus_shape() {
        let c = degradation_corpus(1, 4, 64, 48, false);
        assert_eq!(c.images.len(), 12);
        let z = degradation_corpus(1, 4, 64, 48, true);
        assert_eq!(z.images.len(), 16);
        assert!(z.images.iter().filter(|i| i.variant == Variant::ZoomedOut).all(|i| i.record.has_reason(Reason::ZoomCrop)));
        assert_eq!(c.patients.len(), 4);
        assert!(c.images.iter().all(|i| i.record.is_poor() == (i.variant != Variant::Clean)));
    }

    #[test]
    fn skin_text_parses() {
        let text = skin_dataset_text(3, 10, 20);
        let samples = crate::skinmodel::parse_skin_dataset(&text).unwrap();
        assert_eq!(samples.len(), 30);
    }
}
