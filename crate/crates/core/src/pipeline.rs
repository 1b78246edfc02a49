//! The offline stages in order: fit the skin model, featurize a manifest,
//! train members with cross-validation, fit the stacked heads on the train
//! split, calibrate thresholds on the validation split and evaluate on test.
//!
//! Stages exchange plain values; the CLI adds the file plumbing.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datasets::{split_patients, DatasetError, ImageRecord, Manifest, PatientRecord, Split, SplitAssignment, DEFAULT_SPLIT_RATIOS};
use crate::ensemble::{
    calibrate_threshold, external_id, CalibrationSample, fit_ensemble_weights, member_id, storable_threshold, EnsembleError, FeatureLayout, Head, HeadEnsemble,
    ImageFeatures, Member, Provenance, QualityModel, ThresholdChoice, ARTIFACT_VERSION, DEFAULT_FPR_CAP,
};
use crate::features::{group1_features, group2_features, ContainerError, FeatureGroup, FeatureMatrix};
use crate::imagekit::{resize_max_side, ImageError, RasterImage, DEFAULT_MAX_SIDE};
use crate::learners::{
    apply_scaler, cross_validate, fit_scaler, train_member, CvPlan, Hyperparameters, LearnerError, LearnerKind, Scaler, TrainingSet,
};
use crate::skinmodel::{skin_probability_map, train_skin_model, PixelSample, SkinError, SkinGmm, DEFAULT_COMPONENTS};
use crate::stats::{self, subgroup_report, AucEstimate, Grouping, RocCurve, ScoredSample, StatsError, SubgroupReport};

pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Skin(#[from] SkinError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("image {image_id}: {message}")]
    ImageLoad { image_id: String, message: String },
    #[error("no features for image {0}")]
    MissingFeatures(String),
    #[error("{0}")]
    Data(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub skin_components: usize,
    pub cv_folds: usize,
    pub fpr_cap: f64,
    pub max_side: u32,
    pub split_ratios: [f64; 3],
    pub learners: Vec<LearnerKind>,
    /// Replaces the grid's tree count when set (smaller forests for quick runs).
    pub forest_trees: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            skin_components: DEFAULT_COMPONENTS,
            cv_folds: CvPlan::DEFAULT_FOLDS,
            fpr_cap: DEFAULT_FPR_CAP,
            max_side: DEFAULT_MAX_SIDE,
            split_ratios: DEFAULT_SPLIT_RATIOS,
            learners: LearnerKind::ALL.to_vec(),
            forest_trees: None,
        }
    }
}

impl PipelineConfig {
    fn plan(&self, dims: usize) -> CvPlan {
        let mut plan = CvPlan::default_for(dims, self.seed);
        plan.folds = self.cv_folds;
        if let Some(n) = self.forest_trees {
            for h in plan.grid.values_mut().flatten() {
                if let Hyperparameters::Forest(p) = h {
                    p.n_trees = n;
                }
            }
        }
        plan
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn fit_skin(samples: &[PixelSample], cfg: &PipelineConfig) -> Result<SkinGmm, PipelineError> {
    Ok(train_skin_model(samples, cfg.skin_components, cfg.seed)?)
}

/// Features for both groups, row-aligned by image id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub group1: FeatureMatrix,
    pub group2: FeatureMatrix,
}

impl FeatureSet {
    pub fn get(&self, image_id: &str) -> Option<ImageFeatures> {
        let i = self.group1.index_of(image_id)?;
        let j = self.group2.index_of(image_id)?;
        Some(ImageFeatures { group1: self.group1.row(i).to_vec(), group2: self.group2.row(j).to_vec() })
    }

    fn matrix(&self, g: FeatureGroup) -> &FeatureMatrix {
        match g {
            FeatureGroup::Group1 => &self.group1,
            FeatureGroup::Group2 => &self.group2,
        }
    }
}

fn featurize_one(img: &RasterImage, skin: &SkinGmm, max_side: u32) -> Result<(Vec<f64>, Vec<f64>), ImageError> {
    let img = resize_max_side(img, max_side);
    let map = skin_probability_map(&img, skin);
    Ok((group1_features(&img, &map)?.values, group2_features(&img)?.values))
}

/// Featurize every record. `load` fetches the pixels for one record. Work is
/// spread over threads; output order follows `records`.
pub fn featurize<F>(records: &[ImageRecord], skin: &SkinGmm, max_side: u32, load: F) -> Result<FeatureSet, PipelineError>
where
    F: Fn(&ImageRecord) -> Result<RasterImage, PipelineError> + Sync,
{
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(records.len().max(1));
    let chunk = records.len().div_ceil(threads).max(1);
    let results: Vec<Result<Vec<(Vec<f64>, Vec<f64>)>, PipelineError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| {
                let load = &load;
                scope.spawn(move || {
                    part.iter()
                        .map(|rec| {
                            let img = load(rec)?;
                            featurize_one(&img, skin, max_side).map_err(|e| PipelineError::ImageLoad { image_id: rec.image_id.clone(), message: e.to_string() })
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("featurize worker panicked")).collect()
    });
    let mut set = FeatureSet { group1: FeatureMatrix::new(FeatureGroup::Group1), group2: FeatureMatrix::new(FeatureGroup::Group2) };
    let mut rows = records.iter();
    for part in results {
        for (g1, g2) in part? {
            let rec = rows.next().expect("one result per record");
            set.group1.push(rec.image_id.clone(), &g1);
            set.group2.push(rec.image_id.clone(), &g2);
        }
    }
    Ok(set)
}

fn patient_ids(manifest: &Manifest) -> Vec<String> {
    let ids: BTreeSet<&str> = manifest.images.iter().map(|r| r.patient_id.as_str()).collect();
    ids.into_iter().map(String::from).collect()
}

pub fn split_manifest(manifest: &Manifest, cfg: &PipelineConfig) -> Result<SplitAssignment, PipelineError> {
    Ok(split_patients(&patient_ids(manifest), cfg.split_ratios, cfg.seed)?)
}

/// Records of one split that have features, in manifest order.
fn split_records<'a>(manifest: &'a Manifest, split: &SplitAssignment, which: Split, features: &FeatureSet) -> Result<Vec<&'a ImageRecord>, PipelineError> {
    let recs: Vec<&ImageRecord> = manifest.images.iter().filter(|r| split.split_of(&r.patient_id) == Some(which)).collect();
    for r in &recs {
        if features.group1.index_of(&r.image_id).is_none() || features.group2.index_of(&r.image_id).is_none() {
            return Err(PipelineError::MissingFeatures(r.image_id.clone()));
        }
    }
    Ok(recs)
}

fn training_set(recs: &[&ImageRecord], features: &FeatureSet, g: FeatureGroup, head: Head) -> Result<TrainingSet, PipelineError> {
    let m = features.matrix(g);
    let mut values = Vec::with_capacity(recs.len() * g.dims());
    for r in recs {
        let i = m.index_of(&r.image_id).ok_or_else(|| PipelineError::MissingFeatures(r.image_id.clone()))?;
        values.extend_from_slice(m.row(i));
    }
    Ok(TrainingSet::new(
        values,
        g.dims(),
        recs.iter().map(|r| head.label(r)).collect(),
        recs.iter().map(|r| r.image_id.clone()).collect(),
        recs.iter().map(|r| r.patient_id.clone()).collect(),
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub chosen: Hyperparameters,
    pub candidate_mean_aucs: Vec<f64>,
}

/// Output of the train stage: fitted members plus their out-of-fold scores
/// on the train split, which the stacking stage consumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedMembers {
    pub created_at: String,
    pub config: PipelineConfig,
    pub feature_layout: FeatureLayout,
    pub skin_gmm: SkinGmm,
    pub scalers: BTreeMap<String, Scaler>,
    pub members: BTreeMap<String, Member>,
    pub cv: BTreeMap<String, CvSummary>,
    /// Row-aligned with `train_image_ids`.
    pub out_of_fold: BTreeMap<String, Vec<f64>>,
    pub train_image_ids: Vec<String>,
    /// Heads whose train split held a single class; they get no members.
    pub untrained_heads: Vec<Head>,
    pub data_hashes: BTreeMap<String, String>,
}

/// Cross-validate and fit every (head, group, learner) member on the train
/// split. Members are independent and trained on separate threads.
pub fn train(manifest: &Manifest, features: &FeatureSet, skin: &SkinGmm, cfg: &PipelineConfig, created_at: &str) -> Result<TrainedMembers, PipelineError> {
    let split = split_manifest(manifest, cfg)?;
    let recs = split_records(manifest, &split, Split::Train, features)?;
    if recs.len() < 2 {
        return Err(PipelineError::Data(format!("train split has {} images", recs.len())));
    }
    let mut scalers = BTreeMap::new();
    for g in FeatureGroup::ALL {
        let set = training_set(&recs, features, g, Head::Overall)?;
        scalers.insert(g.name().to_string(), fit_scaler(&set.features, g.dims()));
    }

    let mut untrained_heads = Vec::new();
    let mut jobs = Vec::new();
    for head in Head::ALL {
        let labels: Vec<bool> = recs.iter().map(|r| head.label(r)).collect();
        if !(labels.contains(&true) && labels.contains(&false)) {
            untrained_heads.push(head);
            continue;
        }
        for g in FeatureGroup::ALL {
            for &kind in &cfg.learners {
                jobs.push((head, g, kind));
            }
        }
    }

    type JobOutput = (Head, FeatureGroup, crate::learners::MemberModel, CvSummary, Vec<f64>);
    let run = |(head, g, kind): (Head, FeatureGroup, LearnerKind)| -> Result<JobOutput, PipelineError> {
        let set = training_set(&recs, features, g, head)?;
        let outcome = cross_validate(&set, &cfg.plan(g.dims()), kind)?;
        let scaled = TrainingSet { features: apply_scaler(&scalers[g.name()], &set.features), ..set };
        let model = train_member(kind, &outcome.chosen, &scaled, cfg.seed)?;
        let summary = CvSummary { chosen: outcome.chosen.clone(), candidate_mean_aucs: outcome.candidates.iter().map(|c| c.mean_auc).collect() };
        Ok((head, g, model, summary, outcome.out_of_fold))
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let outputs: Vec<Result<JobOutput, PipelineError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|_| {
                let (jobs, next, run) = (&jobs, &next, &run);
                scope.spawn(move || {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some(&job) = jobs.get(i) else { break };
                        done.push((i, run(job)));
                    }
                    done
                })
            })
            .collect();
        let mut all: Vec<(usize, Result<JobOutput, PipelineError>)> = handles.into_iter().flat_map(|h| h.join().expect("train worker panicked")).collect();
        all.sort_by_key(|(i, _)| *i);
        all.into_iter().map(|(_, r)| r).collect()
    });

    let mut members = BTreeMap::new();
    let mut cv = BTreeMap::new();
    let mut out_of_fold = BTreeMap::new();
    for out in outputs {
        let (head, group, model, summary, oof) = out?;
        let id = member_id(head, group, &model);
        cv.insert(id.clone(), summary);
        out_of_fold.insert(id.clone(), oof);
        members.insert(id, Member { head, group, model });
    }
    Ok(TrainedMembers {
        created_at: created_at.to_string(),
        config: cfg.clone(),
        feature_layout: FeatureLayout { max_side: cfg.max_side, ..FeatureLayout::default() },
        skin_gmm: skin.clone(),
        scalers,
        members,
        cv,
        out_of_fold,
        train_image_ids: recs.iter().map(|r| r.image_id.clone()).collect(),
        untrained_heads,
        data_hashes: BTreeMap::new(),
    })
}

pub type ExternalScores = BTreeMap<String, BTreeMap<String, f64>>;

fn external_channels(external: Option<&ExternalScores>) -> Vec<String> {
    let set: BTreeSet<&String> = external.into_iter().flat_map(|e| e.values().flat_map(|m| m.keys())).collect();
    set.into_iter().cloned().collect()
}

fn external_for<'a>(external: Option<&'a ExternalScores>, image_id: &str) -> Option<&'a BTreeMap<String, f64>> {
    external.and_then(|e| e.get(image_id))
}

/// Fit each head's stacking weights on the members' out-of-fold train scores
/// (plus any external channels). Thresholds start at 0.5 until calibrated.
pub fn fit_ensemble(trained: &TrainedMembers, manifest: &Manifest, external: Option<&ExternalScores>) -> Result<QualityModel, PipelineError> {
    let by_id: BTreeMap<&str, &ImageRecord> = manifest.images.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let recs: Vec<&ImageRecord> = trained
        .train_image_ids
        .iter()
        .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| PipelineError::Data(format!("train image {id} missing from manifest"))))
        .collect::<Result<_, _>>()?;
    let channels = external_channels(external);

    let mut heads = BTreeMap::new();
    for head in Head::ALL {
        let mut member_ids: Vec<String> = trained.members.iter().filter(|(_, m)| m.head == head).map(|(id, _)| id.clone()).collect();
        let labels: Vec<bool> = recs.iter().map(|r| head.label(r)).collect();
        let ensemble = if member_ids.is_empty() {
            // Never fires: sigmoid(0) is below the threshold.
            HeadEnsemble { head, member_ids, weights: Vec::new(), intercept: 0.0, threshold: 1.0, calibration: None }
        } else {
            let mut columns: Vec<Vec<f64>> = member_ids.iter().map(|id| trained.out_of_fold[id].clone()).collect();
            for c in &channels {
                let col = recs
                    .iter()
                    .map(|r| external_for(external, &r.image_id).and_then(|m| m.get(c)).copied().ok_or_else(|| PipelineError::Data(format!("external channel {c} missing for {}", r.image_id))))
                    .collect::<Result<Vec<f64>, _>>()?;
                columns.push(col);
                member_ids.push(external_id(c));
            }
            let m = columns.len();
            let matrix: Vec<f64> = (0..recs.len()).flat_map(|i| columns.iter().map(move |c| c[i])).collect();
            let fit = fit_ensemble_weights(&matrix, m, &labels)?;
            HeadEnsemble { head, member_ids, weights: fit.weights, intercept: fit.intercept, threshold: 0.5, calibration: None }
        };
        heads.insert(head.name().to_string(), ensemble);
    }
    let mut stage_timestamps = BTreeMap::new();
    stage_timestamps.insert("train".to_string(), trained.created_at.clone());
    let model = QualityModel {
        artifact_version: ARTIFACT_VERSION,
        created_at: trained.created_at.clone(),
        feature_layout: trained.feature_layout.clone(),
        skin_gmm: trained.skin_gmm.clone(),
        scalers: trained.scalers.clone(),
        members: trained.members.clone(),
        heads,
        external_channels: channels,
        provenance: Provenance { seed: trained.config.seed, data_hashes: trained.data_hashes.clone(), stage_timestamps },
    };
    model.validate()?;
    Ok(model)
}

/// Ungated head scores for every record, in order.
fn score_records(model: &QualityModel, recs: &[&ImageRecord], features: &FeatureSet, external: Option<&ExternalScores>) -> Result<Vec<BTreeMap<Head, f64>>, PipelineError> {
    recs.iter()
        .map(|r| {
            let f = features.get(&r.image_id).ok_or_else(|| PipelineError::MissingFeatures(r.image_id.clone()))?;
            let ext = external_for(external, &r.image_id).filter(|_| !model.external_channels.is_empty());
            Ok(model.head_scores(&f, ext)?)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub fpr_cap: f64,
    /// `None` where the validation split held a single class for the head.
    pub heads: BTreeMap<String, Option<ThresholdChoice>>,
}

/// Set each head's threshold on the validation split.
pub fn calibrate(model: &QualityModel, manifest: &Manifest, features: &FeatureSet, cfg: &PipelineConfig, external: Option<&ExternalScores>, calibrated_at: &str) -> Result<(QualityModel, CalibrationReport), PipelineError> {
    let split = split_manifest(manifest, cfg)?;
    let recs = split_records(manifest, &split, Split::Validation, features)?;
    let scores = score_records(model, &recs, features, external)?;
    let mut out = model.clone();
    let mut report = CalibrationReport { fpr_cap: cfg.fpr_cap, heads: BTreeMap::new() };
    for head in Head::ALL {
        let labels: Vec<bool> = recs.iter().map(|r| head.label(r)).collect();
        let s: Vec<f64> = scores.iter().map(|m| m[&head]).collect();
        let choice = if out.head(head).member_ids.is_empty() {
            None
        } else {
            match calibrate_threshold(&s, &labels, cfg.fpr_cap) {
                Ok(c) => Some(c),
                Err(EnsembleError::SingleClassScores) => None,
                Err(e) => return Err(e.into()),
            }
        };
        if let Some(c) = &choice {
            let h = out.head_mut(head);
            h.threshold = storable_threshold(c.threshold);
            h.calibration = Some(CalibrationSample { scores: s, labels });
        }
        report.heads.insert(head.name().to_string(), choice);
    }
    out.provenance.stage_timestamps.insert("calibrate".to_string(), calibrated_at.to_string());
    out.validate()?;
    Ok((out, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadEvaluation {
    pub n: usize,
    pub n_pos: usize,
    /// `None` when the split has a single class (or too few per class for DeLong).
    pub auc: Option<AucEstimate>,
    #[serde(skip)]
    pub roc: Option<RocCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub heads: BTreeMap<String, HeadEvaluation>,
    /// Overall-head subgroup analyses.
    pub subgroups: Vec<SubgroupReport>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = format!("evaluation on {:?} split\n", self.split);
        writeln!(out, "{:<10} {:>6} {:>6} {:>8} {:>10}", "head", "n", "pos", "auc", "variance").unwrap();
        for (name, h) in &self.heads {
            match &h.auc {
                Some(a) => writeln!(out, "{:<10} {:>6} {:>6} {:>8.3} {:>10.6}", name, h.n, h.n_pos, a.auc, a.variance.unwrap_or(f64::NAN)).unwrap(),
                None => writeln!(out, "{:<10} {:>6} {:>6} {:>8} {:>10}", name, h.n, h.n_pos, "-", "-").unwrap(),
            }
        }
        for s in &self.subgroups {
            out.push('\n');
            out.push_str(&s.to_text());
        }
        out
    }
}

/// Per-head test-split AUCs plus overall-head subgroup comparisons.
pub fn evaluate(model: &QualityModel, manifest: &Manifest, features: &FeatureSet, cfg: &PipelineConfig, external: Option<&ExternalScores>, groupings: &[Grouping]) -> Result<EvalReport, PipelineError> {
    let split = split_manifest(manifest, cfg)?;
    let recs = split_records(manifest, &split, Split::Test, features)?;
    let scores = score_records(model, &recs, features, external)?;
    let mut heads = BTreeMap::new();
    for head in Head::ALL {
        let labels: Vec<bool> = recs.iter().map(|r| head.label(r)).collect();
        let s: Vec<f64> = scores.iter().map(|m| m[&head]).collect();
        let auc = stats::delong_variance(&s, &labels).or_else(|_| stats::auc(&s, &labels)).ok();
        let roc = stats::roc_curve(&s, &labels).ok();
        heads.insert(head.name().to_string(), HeadEvaluation { n: labels.len(), n_pos: labels.iter().filter(|&&l| l).count(), auc, roc });
    }
    let patients: BTreeMap<&str, &PatientRecord> = manifest.patients.iter().map(|p| (p.patient_id.as_str(), p)).collect();
    let samples: Vec<ScoredSample<'_>> = recs
        .iter()
        .zip(&scores)
        .filter_map(|(r, s)| patients.get(r.patient_id.as_str()).map(|p| ScoredSample { patient: p, score: s[&Head::Overall], label: Head::Overall.label(r) }))
        .collect();
    let subgroups = groupings.iter().map(|&g| subgroup_report(&samples, g)).collect();
    Ok(EvalReport { split: Split::Test, heads, subgroups })
}

/// fit-skin → featurize → train → fit-ensemble → calibrate, in memory.
pub fn run_to_model<F>(skin_samples: &[PixelSample], manifest: &Manifest, load: F, cfg: &PipelineConfig, created_at: &str) -> Result<(QualityModel, FeatureSet), PipelineError>
where
    F: Fn(&ImageRecord) -> Result<RasterImage, PipelineError> + Sync,
{
    let skin = fit_skin(skin_samples, cfg)?;
    let features = featurize(&manifest.images, &skin, cfg.max_side, load)?;
    let trained = train(manifest, &features, &skin, cfg, created_at)?;
    let model = fit_ensemble(&trained, manifest, None)?;
    let (model, _) = calibrate(&model, manifest, &features, cfg, None, created_at)?;
    Ok((model, features))
}
