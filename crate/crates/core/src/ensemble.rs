//! Stacked heads over the member models, threshold calibration, the gated
//! verdict and the single-file model artifact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::datasets::{quality_letter, ImageRecord, Reason, MAX_QUALITY};
use crate::features::{group1_features, group2_features, FeatureGroup, LAYOUT_VERSION};
use crate::imagekit::{resize_max_side, ImageError, RasterImage, DEFAULT_MAX_SIDE};
use crate::learners::{sigmoid, LearnerError, MemberModel, Scaler};
use crate::skinmodel::{skin_probability_map, SkinGmm};

pub const ARTIFACT_VERSION: u32 = 1;
pub const DEFAULT_FPR_CAP: f64 = 0.3;
const EXTERNAL_PREFIX: &str = "external.";

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("training labels contain a single class")]
    SingleClassTraining,
    #[error("scores contain a single class")]
    SingleClassScores,
    #[error("unknown external channel {0:?}")]
    UnknownExternalChannel(String),
    #[error("external channels must be all present or all absent; missing {0:?}")]
    PartialExternalChannels(Vec<String>),
    #[error("external score {channel} = {value} outside [0, 1]")]
    ExternalScoreOutOfRange { channel: String, value: f64 },
    #[error("artifact version {found} is not supported (expected {expected})")]
    IncompatibleArtifactVersion { found: u64, expected: u32 },
    #[error("model artifact failed validation: {0}")]
    SchemaValidationError(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Overall,
    Blur,
    Lighting,
    ZoomCrop,
}

impl Head {
    pub const ALL: [Head; 4] = [Head::Overall, Head::Blur, Head::Lighting, Head::ZoomCrop];

    pub fn name(self) -> &'static str {
        match self {
            Head::Overall => "overall",
            Head::Blur => "blur",
            Head::Lighting => "lighting",
            Head::ZoomCrop => "zoom_crop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|h| h.name() == s)
    }

    /// The reason a sub-head explains; `None` for the overall head.
    pub fn reason(self) -> Option<Reason> {
        match self {
            Head::Overall => None,
            Head::Blur => Some(Reason::Blur),
            Head::Lighting => Some(Reason::Lighting),
            Head::ZoomCrop => Some(Reason::ZoomCrop),
        }
    }

    /// Positive = poor for the overall head, poor-for-this-reason otherwise.
    pub fn label(self, rec: &ImageRecord) -> bool {
        match self.reason() {
            None => rec.is_poor(),
            Some(r) => rec.is_poor() && rec.has_reason(r),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackingFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl StackingFit {
    pub fn score(&self, s: &[f64]) -> f64 {
        sigmoid(self.weights.iter().zip(s).map(|(w, v)| w * v).sum::<f64>() + self.intercept)
    }
}

fn stacking_loss(scores: &[f64], m: usize, labels: &[bool], w: &[f64], b: f64) -> (f64, Vec<f64>, f64) {
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; m];
    let mut gb = 0.0;
    for (row, &y) in scores.chunks_exact(m).zip(labels) {
        let z = w.iter().zip(row).map(|(a, v)| a * v).sum::<f64>() + b;
        let nz = if y { -z } else { z };
        loss += if nz > 0.0 { nz + (-nz).exp().ln_1p() } else { nz.exp().ln_1p() };
        let r = sigmoid(z) - y as u8 as f64;
        for (g, v) in gw.iter_mut().zip(row) {
            *g += r * v;
        }
        gb += r;
    }
    (loss / n, gw.into_iter().map(|g| g / n).collect(), gb / n)
}

const STACKING_ITERS: usize = 2000;

/// Non-negative logistic stacking by projected gradient descent with a
/// backtracking step. `scores` is row-major `n x m`. Weights stay ≥ 0 at
/// every iterate.
pub fn fit_ensemble_weights(scores: &[f64], m: usize, labels: &[bool]) -> Result<StackingFit, EnsembleError> {
    if m == 0 || scores.len() != m * labels.len() {
        return Err(EnsembleError::InvalidInput(format!("{} scores for {} rows of {m} members", scores.len(), labels.len())));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(EnsembleError::InvalidInput("non-finite member score".into()));
    }
    if !(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)) {
        return Err(EnsembleError::SingleClassTraining);
    }
    let mut w = vec![0.0; m];
    let mut b = 0.0;
    let mut step = 1.0;
    let (mut loss, mut gw, mut gb) = stacking_loss(scores, m, labels, &w, b);
    for _ in 0..STACKING_ITERS {
        let mut moved = false;
        for _ in 0..60 {
            let nw: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| (a - step * g).max(0.0)).collect();
            let nb = b - step * gb;
            let dw: Vec<f64> = nw.iter().zip(&w).map(|(p, q)| p - q).collect();
            let db = nb - b;
            let dist2 = dw.iter().map(|d| d * d).sum::<f64>() + db * db;
            if dist2 < 1e-24 {
                break;
            }
            let (nl, ngw, ngb) = stacking_loss(scores, m, labels, &nw, nb);
            let model = loss + gw.iter().zip(&dw).map(|(g, d)| g * d).sum::<f64>() + gb * db + dist2 / (2.0 * step);
            if nl <= model {
                w = nw;
                b = nb;
                loss = nl;
                gw = ngw;
                gb = ngb;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
        step *= 2.0;
    }
    Ok(StackingFit { weights: w, intercept: b })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    /// May be ±∞ (flag everything / nothing).
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Maximize TPR subject to FPR ≤ `fpr_cap`, flagging `score >= threshold`.
/// Candidates are midpoints between adjacent distinct scores plus ±∞; ties
/// go to the lower FPR, then the lower threshold.
pub fn calibrate_threshold(scores: &[f64], labels: &[bool], fpr_cap: f64) -> Result<ThresholdChoice, EnsembleError> {
    if scores.len() != labels.len() {
        return Err(EnsembleError::InvalidInput(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EnsembleError::InvalidInput("NaN score".into()));
    }
    if !(0.0..=1.0).contains(&fpr_cap) {
        return Err(EnsembleError::InvalidInput(format!("fpr_cap {fpr_cap} outside [0, 1]")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EnsembleError::SingleClassScores);
    }
    let mut order: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Walk thresholds upward; `tp`/`fp` count rows at or above the threshold.
    let (mut tp, mut fp) = (n_pos, n_neg);
    let mut best: Option<ThresholdChoice> = None;
    let mut consider = |threshold: f64, tp: usize, fp: usize| {
        let c = ThresholdChoice { threshold, tpr: tp as f64 / n_pos as f64, fpr: fp as f64 / n_neg as f64 };
        if c.fpr > fpr_cap {
            return;
        }
        let better = match &best {
            None => true,
            Some(b) => c.tpr > b.tpr || (c.tpr == b.tpr && c.fpr < b.fpr),
        };
        if better {
            best = Some(c);
        }
    };
    consider(f64::NEG_INFINITY, tp, fp);
    let mut i = 0;
    while i < order.len() {
        let v = order[i].0;
        while i < order.len() && order[i].0 == v {
            if order[i].1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        let threshold = match order.get(i) {
            // adjacent floats can have a midpoint that rounds back onto `v`
            Some(&(next, _)) => Some(v + 0.5 * (next - v)).filter(|&m| m > v).unwrap_or(next),
            None => f64::INFINITY,
        };
        consider(threshold, tp, fp);
    }
    Ok(best.expect("the +inf sentinel always satisfies the cap"))
}

/// Stored thresholds live in [0, 1]; infinite sentinels clamp to the ends.
pub fn storable_threshold(t: f64) -> f64 {
    t.clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadEnsemble {
    pub head: Head,
    /// Member model ids, or `external.<channel>` for file-supplied scores.
    pub member_ids: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub threshold: f64,
    /// Validation scores the threshold was chosen on, kept so a deployment
    /// can re-pick the threshold under a different FPR cap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl HeadEnsemble {
    /// Combined score. Absent external inputs drop out and the remaining
    /// weights are rescaled to keep the total weight mass.
    pub fn score(&self, inputs: &BTreeMap<String, f64>) -> f64 {
        let total: f64 = self.weights.iter().sum();
        let present: f64 = self.member_ids.iter().zip(&self.weights).filter(|(id, _)| inputs.contains_key(*id)).map(|(_, w)| w).sum();
        let scale = if present > 0.0 && present < total { total / present } else { 1.0 };
        let z: f64 = self
            .member_ids
            .iter()
            .zip(&self.weights)
            .filter_map(|(id, w)| inputs.get(id).map(|s| scale * w * s))
            .sum::<f64>()
            + self.intercept;
        sigmoid(z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub layout_version: u32,
    pub max_side: u32,
    pub group1_dims: usize,
    pub group2_dims: usize,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        Self { layout_version: LAYOUT_VERSION, max_side: DEFAULT_MAX_SIDE, group1_dims: FeatureGroup::Group1.dims(), group2_dims: FeatureGroup::Group2.dims() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub head: Head,
    pub group: FeatureGroup,
    pub model: MemberModel,
}

pub fn member_id(head: Head, group: FeatureGroup, model: &MemberModel) -> String {
    format!("{}.{}.{}", head.name(), group.name(), model.kind().name())
}

pub fn external_id(channel: &str) -> String {
    format!("{EXTERNAL_PREFIX}{channel}")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// SHA-256 of each input file, keyed by role.
    pub data_hashes: BTreeMap<String, String>,
    pub stage_timestamps: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityModel {
    pub artifact_version: u32,
    pub created_at: String,
    pub feature_layout: FeatureLayout,
    pub skin_gmm: SkinGmm,
    /// Keyed by feature group name.
    pub scalers: BTreeMap<String, Scaler>,
    pub members: BTreeMap<String, Member>,
    /// Keyed by head name.
    pub heads: BTreeMap<String, HeadEnsemble>,
    pub external_channels: Vec<String>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub overall_score: f64,
    pub is_poor: bool,
    pub reasons: BTreeSet<Reason>,
    /// Sub-head scores; only evaluated for poor images.
    pub reason_scores: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub quality_letter_hint: Option<char>,
}

impl Verdict {
    pub fn reason_names(&self) -> Vec<&'static str> {
        self.reasons.iter().map(|r| r.as_str()).collect()
    }
}

/// Image features for both groups, as the model sees them (before scaling).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub group1: Vec<f64>,
    pub group2: Vec<f64>,
}

impl ImageFeatures {
    pub fn group(&self, g: FeatureGroup) -> &[f64] {
        match g {
            FeatureGroup::Group1 => &self.group1,
            FeatureGroup::Group2 => &self.group2,
        }
    }
}

pub fn extract_features(img: &RasterImage, skin: &SkinGmm, max_side: u32) -> Result<ImageFeatures, ImageError> {
    let img = resize_max_side(img, max_side);
    let map = skin_probability_map(&img, skin);
    Ok(ImageFeatures { group1: group1_features(&img, &map)?.values, group2: group2_features(&img)?.values })
}

impl QualityModel {
    pub fn head(&self, head: Head) -> &HeadEnsemble {
        &self.heads[head.name()]
    }

    pub fn head_mut(&mut self, head: Head) -> &mut HeadEnsemble {
        self.heads.get_mut(head.name()).expect("validated model has every head")
    }

    pub fn scaler(&self, g: FeatureGroup) -> &Scaler {
        &self.scalers[g.name()]
    }

    /// Re-pick every calibrated head's threshold under a new FPR cap. Heads
    /// without a stored sample keep their threshold.
    pub fn recalibrate(&self, fpr_cap: f64) -> Result<Self, EnsembleError> {
        let mut out = self.clone();
        for h in out.heads.values_mut() {
            if let Some(c) = &h.calibration {
                h.threshold = storable_threshold(calibrate_threshold(&c.scores, &c.labels, fpr_cap)?.threshold);
            }
        }
        Ok(out)
    }

    fn check_external(&self, external: Option<&BTreeMap<String, f64>>) -> Result<(), EnsembleError> {
        let Some(ext) = external.filter(|e| !e.is_empty()) else { return Ok(()) };
        for (name, &value) in ext {
            if !self.external_channels.contains(name) {
                return Err(EnsembleError::UnknownExternalChannel(name.clone()));
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(EnsembleError::ExternalScoreOutOfRange { channel: name.clone(), value });
            }
        }
        let missing: Vec<String> = self.external_channels.iter().filter(|c| !ext.contains_key(*c)).cloned().collect();
        if !missing.is_empty() {
            return Err(EnsembleError::PartialExternalChannels(missing));
        }
        Ok(())
    }

    fn head_inputs(&self, head: Head, scaled: &BTreeMap<FeatureGroup, Vec<f64>>, external: Option<&BTreeMap<String, f64>>) -> Result<BTreeMap<String, f64>, EnsembleError> {
        let mut inputs = BTreeMap::new();
        for id in &self.head(head).member_ids {
            if let Some(channel) = id.strip_prefix(EXTERNAL_PREFIX) {
                if let Some(v) = external.and_then(|e| e.get(channel)) {
                    inputs.insert(id.clone(), *v);
                }
            } else {
                let m = &self.members[id];
                inputs.insert(id.clone(), m.model.predict_score(&scaled[&m.group])?);
            }
        }
        Ok(inputs)
    }

    fn scale(&self, features: &ImageFeatures) -> Result<BTreeMap<FeatureGroup, Vec<f64>>, EnsembleError> {
        let mut scaled = BTreeMap::new();
        for g in FeatureGroup::ALL {
            let raw = features.group(g);
            let scaler = self.scaler(g);
            if raw.len() != scaler.dims() {
                return Err(LearnerError::DimensionMismatch { expected: scaler.dims(), got: raw.len() }.into());
            }
            scaled.insert(g, scaler.transform_row(raw));
        }
        Ok(scaled)
    }

    /// Every head's combined score with no gating; used for calibration and
    /// evaluation.
    pub fn head_scores(&self, features: &ImageFeatures, external: Option<&BTreeMap<String, f64>>) -> Result<BTreeMap<Head, f64>, EnsembleError> {
        self.check_external(external)?;
        let scaled = self.scale(features)?;
        Head::ALL.into_iter().map(|h| Ok((h, self.head(h).score(&self.head_inputs(h, &scaled, external)?)))).collect()
    }

    /// Score precomputed (unscaled) features. Sub-heads are evaluated only
    /// when the overall head flags the image.
    pub fn assess_features(&self, features: &ImageFeatures, external: Option<&BTreeMap<String, f64>>) -> Result<Verdict, EnsembleError> {
        self.check_external(external)?;
        let scaled = self.scale(features)?;
        let overall = self.head(Head::Overall);
        let overall_score = overall.score(&self.head_inputs(Head::Overall, &scaled, external)?);
        let is_poor = overall_score >= overall.threshold;
        let mut reasons = BTreeSet::new();
        let mut reason_scores = BTreeMap::new();
        if is_poor {
            for head in [Head::Blur, Head::Lighting, Head::ZoomCrop] {
                let h = self.head(head);
                let s = h.score(&self.head_inputs(head, &scaled, external)?);
                reason_scores.insert(head.name().to_string(), s);
                if s >= h.threshold {
                    reasons.insert(head.reason().expect("sub-head"));
                }
            }
            if reasons.is_empty() {
                reasons.insert(Reason::Other);
            }
        }
        // Rough grade: the overall score spread evenly over the 0-4 scale.
        let grade = ((overall_score * (MAX_QUALITY as f64 + 1.0)).floor() as u8).min(MAX_QUALITY);
        Ok(Verdict { overall_score, is_poor, reasons, reason_scores, quality_letter_hint: quality_letter(grade) })
    }

    pub fn assess(&self, img: &RasterImage, external: Option<&BTreeMap<String, f64>>) -> Result<Verdict, EnsembleError> {
        self.check_external(external)?;
        let features = extract_features(img, &self.skin_gmm, self.feature_layout.max_side)?;
        self.assess_features(&features, external)
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        let bad = |m: String| Err(EnsembleError::SchemaValidationError(m));
        if self.artifact_version != ARTIFACT_VERSION {
            return Err(EnsembleError::IncompatibleArtifactVersion { found: self.artifact_version as u64, expected: ARTIFACT_VERSION });
        }
        let layout = &self.feature_layout;
        if layout.layout_version != LAYOUT_VERSION || layout.group1_dims != FeatureGroup::Group1.dims() || layout.group2_dims != FeatureGroup::Group2.dims() {
            return bad(format!("feature layout {layout:?} does not match this build"));
        }
        for g in FeatureGroup::ALL {
            match self.scalers.get(g.name()) {
                Some(s) if s.dims() == g.dims() && s.std.len() == g.dims() => {}
                Some(s) => return bad(format!("scaler {} has {} dims, expected {}", g.name(), s.dims(), g.dims())),
                None => return bad(format!("missing scaler {}", g.name())),
            }
        }
        for (id, m) in &self.members {
            if let Some(d) = m.model.dims() {
                if d != m.group.dims() {
                    return bad(format!("member {id} has {d} weights for {}", m.group.name()));
                }
            }
        }
        if self.heads.len() != Head::ALL.len() {
            return bad(format!("expected {} heads, found {}", Head::ALL.len(), self.heads.len()));
        }
        for head in Head::ALL {
            let Some(h) = self.heads.get(head.name()) else {
                return bad(format!("missing head {}", head.name()));
            };
            if h.head != head {
                return bad(format!("head {} stored under key {}", h.head.name(), head.name()));
            }
            if h.weights.len() != h.member_ids.len() {
                return bad(format!("head {}: {} weights for {} members", head.name(), h.weights.len(), h.member_ids.len()));
            }
            if h.weights.iter().any(|w| !w.is_finite() || *w < 0.0) || !h.intercept.is_finite() {
                return bad(format!("head {} has invalid weights", head.name()));
            }
            if !(0.0..=1.0).contains(&h.threshold) {
                return bad(format!("head {} threshold {} outside [0, 1]", head.name(), h.threshold));
            }
            if let Some(c) = &h.calibration {
                if c.scores.len() != c.labels.len() || c.scores.iter().any(|s| !s.is_finite()) {
                    return bad(format!("head {} has a malformed calibration sample", head.name()));
                }
            }
            for id in &h.member_ids {
                let known = match id.strip_prefix(EXTERNAL_PREFIX) {
                    Some(c) => self.external_channels.iter().any(|e| e == c),
                    None => self.members.contains_key(id),
                };
                if !known {
                    return bad(format!("head {} references unknown member {id}", head.name()));
                }
            }
        }
        Ok(())
    }
}

fn write_canonical(v: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Number(n) => match n.as_f64().filter(|_| n.is_f64()) {
            // 17 significant digits round-trip every f64 exactly
            Some(f) => write!(out, "{f:.16e}").unwrap(),
            None => write!(out, "{n}").unwrap(),
        },
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_canonical(item, indent + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push_str(": ");
                write_canonical(&map[k.as_str()], indent + 1, out);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// Sorted keys, two-space indent, floats in 17-significant-digit exponent form.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String, EnsembleError> {
    let v = serde_json::to_value(value).map_err(|e| EnsembleError::SchemaValidationError(e.to_string()))?;
    let mut out = String::new();
    write_canonical(&v, 0, &mut out);
    out.push('\n');
    Ok(out)
}

pub fn model_to_json(model: &QualityModel) -> Result<String, EnsembleError> {
    model.validate()?;
    to_canonical_json(model)
}

pub fn model_from_json(text: &str) -> Result<QualityModel, EnsembleError> {
    let v: Value = serde_json::from_str(text).map_err(|e| EnsembleError::SchemaValidationError(e.to_string()))?;
    match v.get("artifact_version").and_then(Value::as_u64) {
        Some(found) if found == ARTIFACT_VERSION as u64 => {}
        Some(found) => return Err(EnsembleError::IncompatibleArtifactVersion { found, expected: ARTIFACT_VERSION }),
        None => return Err(EnsembleError::SchemaValidationError("missing artifact_version".into())),
    }
    let model: QualityModel = serde_json::from_value(v).map_err(|e| EnsembleError::SchemaValidationError(e.to_string()))?;
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &QualityModel, path: &Path) -> Result<(), EnsembleError> {
    std::fs::write(path, model_to_json(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<QualityModel, EnsembleError> {
    model_from_json(&std::fs::read_to_string(path)?)
}

/// Parse `image_id,channel,score` rows into per-image channel maps.
pub fn parse_external_scores(text: &str) -> Result<BTreeMap<String, BTreeMap<String, f64>>, EnsembleError> {
    #[derive(Deserialize)]
    struct Row {
        image_id: String,
        channel: String,
        score: f64,
    }
    let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| EnsembleError::InvalidInput(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["image_id", "channel", "score"] {
        return Err(EnsembleError::InvalidInput(format!("external score header must be image_id,channel,score, got {headers:?}")));
    }
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(|e| EnsembleError::InvalidInput(e.to_string()))?;
        if !(0.0..=1.0).contains(&row.score) {
            return Err(EnsembleError::ExternalScoreOutOfRange { channel: row.channel, value: row.score });
        }
        out.entry(row.image_id).or_default().insert(row.channel, row.score);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::learners::{Hyperparameters, LinearParams, MemberParams};
    use crate::skinmodel::GaussianComponent;
    use crate::stats;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive search over every realizable cut: flag `score >= t` for
    /// each observed score and for +∞.
    fn oracle_threshold(scores: &[f64], labels: &[bool], cap: f64) -> (f64, f64, Vec<bool>) {
        let n_pos = labels.iter().filter(|&&l| l).count() as f64;
        let n_neg = labels.len() as f64 - n_pos;
        let mut cuts: Vec<f64> = scores.to_vec();
        cuts.push(f64::INFINITY);
        let mut best: Option<(f64, f64, Vec<bool>)> = None;
        for t in cuts {
            let flags: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
            let tp = flags.iter().zip(labels).filter(|(f, l)| **f && **l).count() as f64;
            let fp = flags.iter().zip(labels).filter(|(f, l)| **f && !**l).count() as f64;
            let (tpr, fpr) = (tp / n_pos, fp / n_neg);
            if fpr > cap {
                continue;
            }
            if best.as_ref().map_or(true, |b| tpr > b.0 || (tpr == b.0 && fpr < b.1)) {
                best = Some((tpr, fpr, flags));
            }
        }
        best.unwrap()
    }

    proptest! {
        #[test]
        fn threshold_matches_exhaustive_search(
            raw in proptest::collection::vec((0u8..20, any::<bool>()), 2..200),
            cap in 0.0f64..=1.0,
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 19.0).collect();
            let mut labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            labels[0] = true;
            labels[1] = false;
            let got = calibrate_threshold(&scores, &labels, cap).unwrap();
            let (tpr, fpr, flags) = oracle_threshold(&scores, &labels, cap);
            prop_assert_eq!(got.tpr, tpr);
            prop_assert_eq!(got.fpr, fpr);
            let got_flags: Vec<bool> = scores.iter().map(|&s| s >= got.threshold).collect();
            prop_assert_eq!(got_flags, flags);
        }

        #[test]
        fn stacking_weights_non_negative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 40;
            let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
            let scores: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let fit = fit_ensemble_weights(&scores, 3, &labels).unwrap();
            prop_assert!(fit.weights.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn threshold_examples() {
        let scores = [0.1, 0.2, 0.3, 0.6, 0.7, 0.9];
        let labels = [false, false, false, true, true, true];
        let all = calibrate_threshold(&scores, &labels, 1.0).unwrap();
        assert_eq!((all.tpr, all.fpr), (1.0, 0.0));
        assert!(all.threshold <= 0.6);
        let strict = calibrate_threshold(&scores, &labels, 0.0).unwrap();
        assert_eq!((strict.threshold, strict.tpr, strict.fpr), (0.5 * (0.3 + 0.6), 1.0, 0.0));
        // With nothing separable, only the +inf sentinel keeps FPR at zero.
        let flat = calibrate_threshold(&[0.5; 4], &[true, false, true, false], 0.0).unwrap();
        assert_eq!((flat.threshold, flat.tpr), (f64::INFINITY, 0.0));
        // Uncapped with overlapping classes: everything is flagged.
        let overlap = calibrate_threshold(&[0.2, 0.8, 0.5, 0.4], &[true, false, false, true], 1.0).unwrap();
        assert_eq!((overlap.threshold, overlap.tpr, overlap.fpr), (f64::NEG_INFINITY, 1.0, 1.0));
        assert!(matches!(calibrate_threshold(&[0.1, 0.2], &[true, true], 0.3), Err(EnsembleError::SingleClassScores)));
    }

    #[test]
    fn planted_member_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100;
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let mut scores = Vec::new();
        for &y in &labels {
            scores.push(if y { rng.gen_range(0.6..1.0) } else { rng.gen_range(0.0..0.4) });
            scores.push(rng.gen_range(0.0..1.0));
        }
        let fit = fit_ensemble_weights(&scores, 2, &labels).unwrap();
        let combined: Vec<f64> = scores.chunks(2).map(|r| fit.score(r)).collect();
        assert_eq!(stats::auc(&combined, &labels).unwrap().auc, 1.0);
    }

    #[test]
    fn fixed_weights_preserve_member_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        let scores: Vec<f64> = (0..150).map(|_| rng.gen_range(0.0..1.0)).collect();
        let fit = StackingFit { weights: vec![1.0, 0.0, 0.0], intercept: 0.0 };
        let combined: Vec<f64> = scores.chunks(3).map(|r| fit.score(r)).collect();
        let member0: Vec<f64> = scores.chunks(3).map(|r| r[0]).collect();
        assert_eq!(stats::auc(&combined, &labels).unwrap().auc, stats::auc(&member0, &labels).unwrap().auc);
        let zero = StackingFit { weights: vec![0.0; 3], intercept: 0.7 };
        assert!(scores.chunks(3).all(|r| zero.score(r) == sigmoid(0.7)));
    }

    #[test]
    fn stacking_rejects_single_class() {
        assert!(matches!(fit_ensemble_weights(&[0.1, 0.2], 1, &[true, true]), Err(EnsembleError::SingleClassTraining)));
    }

    fn unit_skin() -> SkinGmm {
        let c = |mean| GaussianComponent { weight: 1.0, mean, covariance: [[400.0, 0.0, 0.0], [0.0, 400.0, 0.0], [0.0, 0.0, 400.0]] };
        SkinGmm { skin_components: vec![c([120.0, 140.0, 200.0])], nonskin_components: vec![c([60.0, 60.0, 60.0])], class_priors: [0.3, 0.7], k: 1, seed: 0 }
    }

    /// A hand-built model: each head is a single logistic member on one
    /// standardized group-2 dimension, with the given intercepts.
    pub(crate) fn toy_model(intercepts: [f64; 4], thresholds: [f64; 4]) -> QualityModel {
        let mut members = BTreeMap::new();
        let mut heads = BTreeMap::new();
        for (i, head) in Head::ALL.into_iter().enumerate() {
            let mut w = vec![0.0; FeatureGroup::Group2.dims()];
            w[i] = 0.5;
            let model = MemberModel { params: MemberParams::Logistic(LinearParams { weights: w, bias: intercepts[i] }), hyperparameters: Hyperparameters::Linear { l2: 0.0, lr: 1.0, epochs: 0 }, seed: 0 };
            let id = member_id(head, FeatureGroup::Group2, &model);
            members.insert(id.clone(), Member { head, group: FeatureGroup::Group2, model });
            heads.insert(head.name().to_string(), HeadEnsemble { head, member_ids: vec![id], weights: vec![4.0], intercept: -2.0, threshold: thresholds[i], calibration: None });
        }
        let scaler = |d: usize| Scaler { mean: vec![100.0; d], std: vec![50.0; d] };
        QualityModel {
            artifact_version: ARTIFACT_VERSION,
            created_at: "1970-01-01T00:00:00Z".into(),
            feature_layout: FeatureLayout::default(),
            skin_gmm: unit_skin(),
            scalers: FeatureGroup::ALL.iter().map(|g| (g.name().to_string(), scaler(g.dims()))).collect(),
            members,
            heads,
            external_channels: Vec::new(),
            provenance: Provenance::default(),
        }
    }

    fn features() -> ImageFeatures {
        ImageFeatures { group1: vec![100.0; FeatureGroup::Group1.dims()], group2: vec![100.0; FeatureGroup::Group2.dims()] }
    }

    #[test]
    fn gating_contract() {
        // Standardized inputs are 0, so each member scores sigmoid(bias).
        let good = toy_model([-9.0, 9.0, 9.0, 9.0], [0.5; 4]).assess_features(&features(), None).unwrap();
        assert!(!good.is_poor);
        assert!(good.reasons.is_empty() && good.reason_scores.is_empty());

        let blur = toy_model([9.0, 9.0, -9.0, -9.0], [0.5; 4]).assess_features(&features(), None).unwrap();
        assert!(blur.is_poor);
        assert_eq!(blur.reasons, BTreeSet::from([Reason::Blur]));

        let other = toy_model([9.0, -9.0, -9.0, -9.0], [0.5; 4]).assess_features(&features(), None).unwrap();
        assert_eq!(other.reasons, BTreeSet::from([Reason::Other]));
        assert_eq!(other.reason_scores.len(), 3);
    }

    #[test]
    fn external_channels() {
        let mut m = toy_model([0.0; 4], [0.5; 4]);
        m.external_channels = vec!["deep0".into()];
        let h = m.head_mut(Head::Overall);
        h.member_ids.push(external_id("deep0"));
        h.weights.push(4.0);
        m.validate().unwrap();
        // Member score 0.5; absent channel: weight 8 on the member.
        let absent = m.assess_features(&features(), None).unwrap();
        assert!((absent.overall_score - sigmoid(8.0 * 0.5 - 2.0)).abs() < 1e-15);
        let ext = BTreeMap::from([("deep0".to_string(), 1.0)]);
        let present = m.assess_features(&features(), Some(&ext)).unwrap();
        assert!((present.overall_score - sigmoid(4.0 * 0.5 + 4.0 - 2.0)).abs() < 1e-15);
        let unknown = BTreeMap::from([("deep9".to_string(), 1.0)]);
        assert!(matches!(m.assess_features(&features(), Some(&unknown)), Err(EnsembleError::UnknownExternalChannel(_))));
    }

    #[test]
    fn artifact_round_trip() {
        let m = toy_model([0.3, -0.1, 0.2, 1e-300], [0.25, 0.5, 1.0 / 3.0, 0.0]);
        let text = model_to_json(&m).unwrap();
        let back = model_from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_json(&back).unwrap(), text);
        assert!(text.contains("\"artifact_version\": 1,"));

        let mut v: Value = serde_json::from_str(&text).unwrap();
        v["artifact_version"] = Value::from(99);
        assert!(matches!(model_from_json(&v.to_string()), Err(EnsembleError::IncompatibleArtifactVersion { found: 99, .. })));
        let mut v: Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("heads");
        assert!(matches!(model_from_json(&v.to_string()), Err(EnsembleError::SchemaValidationError(_))));
        let mut broken = m.clone();
        broken.head_mut(Head::Blur).member_ids[0] = "nope".into();
        assert!(matches!(model_to_json(&broken), Err(EnsembleError::SchemaValidationError(_))));
    }

    #[test]
    fn canonical_floats() {
        let text = to_canonical_json(&serde_json::json!({"b": 0.1, "a": [1, -2.5e-300]})).unwrap();
        assert_eq!(text, "{\n  \"a\": [\n    1,\n    -2.5000000000000000e-300\n  ],\n  \"b\": 1.0000000000000001e-1\n}\n");
    }

    #[test]
    fn external_scores_csv() {
        let parsed = parse_external_scores("image_id,channel,score\nimg1,deep0,0.25\nimg1,deep1,1\n").unwrap();
        assert_eq!(parsed["img1"]["deep1"], 1.0);
        assert!(parse_external_scores("image_id,channel,score\nimg1,deep0,1.5\n").is_err());
        assert!(parse_external_scores("id,channel,score\n").is_err());
    }
}
