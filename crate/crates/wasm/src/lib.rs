//! Browser bindings for three self-contained pieces of the toolkit: per-image
//! blur and lighting measurements, an AUC / DeLong explorer and the sample
//! size calculator. Every export returns a JSON string.

use photoqa::features::{fourier_blur, laplacian_variance, lighting_features};
use photoqa::imagekit::{gaussian_blur_rgb, resize_max_side, scale_intensity, to_grayscale, RasterImage};
use photoqa::stats::{delong_test_paired, delong_variance, normal_approx_n, roc_curve, sample_size, total_from_affected, PowerSpec};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Largest side analysed in the browser; keeps the DFT interactive.
const PREVIEW_SIDE: u32 = 384;

fn measure(img: &RasterImage) -> Result<Value, String> {
    let gray = to_grayscale(img);
    let lap = laplacian_variance(&gray).map_err(|e| e.to_string())?;
    let fourier = fourier_blur(&gray).map_err(|e| e.to_string())?;
    let light = lighting_features(&gray);
    Ok(json!({ "laplacian_variance": lap.variance, "fourier": fourier, "lighting": light }))
}

/// Measurements for the photo as given, blurred (σ = `sigma`) and darkened
/// (× `factor`), so the page can show how each degradation moves them.
pub fn analyze(rgba: &[u8], width: u32, height: u32, sigma: f64, factor: f64) -> Result<Value, String> {
    if rgba.len() != width as usize * height as usize * 4 {
        return Err(format!("expected {} RGBA bytes for {width}x{height}, got {}", width as usize * height as usize * 4, rgba.len()));
    }
    let rgb: Vec<u8> = rgba.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
    let img = RasterImage::new(width, height, rgb).map_err(|e| e.to_string())?;
    let img = resize_max_side(&img, PREVIEW_SIDE);
    Ok(json!({
        "width": img.width(),
        "height": img.height(),
        "original": measure(&img)?,
        "blurred": measure(&gaussian_blur_rgb(&img, sigma))?,
        "darkened": measure(&scale_intensity(&img, factor))?,
    }))
}

/// ROC curve, AUC and DeLong variance; with a second score column, the
/// paired DeLong comparison as well.
pub fn explore_roc(scores: &[f64], labels: &[u8], other: Option<&[f64]>) -> Result<Value, String> {
    let labels: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
    let est = delong_variance(scores, &labels).map_err(|e| e.to_string())?;
    let roc = roc_curve(scores, &labels).map_err(|e| e.to_string())?;
    let se = est.variance.unwrap_or(0.0).sqrt();
    let mut out = json!({
        "auc": est.auc,
        "variance": est.variance,
        "ci95": [(est.auc - 1.96 * se).max(0.0), (est.auc + 1.96 * se).min(1.0)],
        "n_pos": est.n_pos,
        "n_neg": est.n_neg,
        "roc": roc.points,
    });
    if let Some(b) = other {
        let auc_b = delong_variance(b, &labels).map_err(|e| e.to_string())?;
        let test = delong_test_paired(scores, b, &labels).map_err(|e| e.to_string())?;
        out["comparison"] = json!({ "auc_b": auc_b.auc, "z": test.statistic, "p_value": test.p_value });
    }
    Ok(out)
}

pub fn power(delta: f64, sd: f64, alpha: f64, power: f64, prevalence: f64, t_refined: bool) -> Result<Value, String> {
    let spec = PowerSpec { delta, sd, alpha, power, prevalence };
    let (n_normal, n_affected) = if t_refined {
        let s = sample_size(&spec).map_err(|e| e.to_string())?;
        (s.n_normal, s.n_affected)
    } else {
        let n = normal_approx_n(&spec).map_err(|e| e.to_string())?;
        (n, (n.ceil() as u64).max(2))
    };
    let n_total = total_from_affected(n_affected, prevalence).map_err(|e| e.to_string())?;
    Ok(json!({ "n_normal": n_normal, "n_affected": n_affected, "n_total": n_total }))
}

fn js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = analyzeImage)]
pub fn analyze_image(rgba: &[u8], width: u32, height: u32, sigma: f64, factor: f64) -> Result<String, JsError> {
    js(analyze(rgba, width, height, sigma, factor))
}

#[wasm_bindgen(js_name = exploreRoc)]
pub fn explore_roc_js(scores: &[f64], labels: &[u8], other: Option<Vec<f64>>) -> Result<String, JsError> {
    js(explore_roc(scores, labels, other.as_deref()))
}

#[wasm_bindgen(js_name = sampleSize)]
pub fn sample_size_js(delta: f64, sd: f64, alpha: f64, power_: f64, prevalence: f64, t_refined: bool) -> Result<String, JsError> {
    js(power(delta, sd, alpha, power_, prevalence, t_refined))
}
