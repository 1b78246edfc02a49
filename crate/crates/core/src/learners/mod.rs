//! Classical member models: logistic regression, linear SVM with Platt
//! calibration and random forests, plus patient-disjoint cross-validation.

mod cv;
mod forest;
mod linear;
mod scaler;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cv::{cross_validate, patient_folds, CandidateScore, CvOutcome, CvPlan};
pub use forest::{train_random_forest, ForestParams, Node, Tree};
pub use linear::{logistic_objective, sigmoid, train_linear_svm, train_logistic, LinearParams};
pub use scaler::{apply_scaler, fit_scaler, Scaler};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error("training labels contain a single class")]
    SingleClassTraining,
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least {need} distinct patients for {need}-fold CV, got {got}")]
    TooFewPatients { need: usize, got: usize },
    #[error("invalid training set: {0}")]
    InvalidTrainingSet(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    /// Row-major `n x d`.
    pub features: Vec<f64>,
    pub dims: usize,
    /// `true` = positive = poor quality for the head being trained.
    pub labels: Vec<bool>,
    pub image_ids: Vec<String>,
    pub patient_ids: Vec<String>,
}

impl TrainingSet {
    pub fn new(features: Vec<f64>, dims: usize, labels: Vec<bool>, image_ids: Vec<String>, patient_ids: Vec<String>) -> Result<Self, LearnerError> {
        let n = labels.len();
        if dims == 0 || features.len() != n * dims || image_ids.len() != n || patient_ids.len() != n {
            return Err(LearnerError::InvalidTrainingSet(format!("{} values, {} labels, {} ids, {} patients for d = {dims}", features.len(), n, image_ids.len(), patient_ids.len())));
        }
        if n < 2 {
            return Err(LearnerError::InvalidTrainingSet("need at least two rows".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::InvalidTrainingSet("non-finite feature value".into()));
        }
        Ok(Self { features, dims, labels, image_ids, patient_ids })
    }

    /// Convenience constructor where every row is its own image and patient.
    pub fn from_rows(rows: &[Vec<f64>], labels: &[bool]) -> Result<Self, LearnerError> {
        let dims = rows.first().map_or(0, Vec::len);
        let ids: Vec<String> = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::new(rows.concat(), dims, labels.to_vec(), ids.clone(), ids)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dims)
    }

    pub fn subset(&self, idx: &[usize]) -> TrainingSet {
        TrainingSet {
            features: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            dims: self.dims,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            image_ids: idx.iter().map(|&i| self.image_ids[i].clone()).collect(),
            patient_ids: idx.iter().map(|&i| self.patient_ids[i].clone()).collect(),
        }
    }

    pub fn has_both_classes(&self) -> bool {
        self.labels.iter().any(|&l| l) && self.labels.iter().any(|&l| !l)
    }

    fn require_both_classes(&self) -> Result<(), LearnerError> {
        if self.has_both_classes() {
            Ok(())
        } else {
            Err(LearnerError::SingleClassTraining)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Logistic,
    LinearSvm,
    RandomForest,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 3] = [LearnerKind::Logistic, LearnerKind::LinearSvm, LearnerKind::RandomForest];

    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Logistic => "logistic",
            LearnerKind::LinearSvm => "linear_svm",
            LearnerKind::RandomForest => "random_forest",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Hyperparameters {
    Linear { l2: f64, lr: f64, epochs: usize },
    Forest(ForestParams),
}

impl Hyperparameters {
    /// Ordering key where smaller means lower capacity (larger λ, shallower trees).
    fn capacity(&self) -> f64 {
        match self {
            Hyperparameters::Linear { l2, .. } => -l2,
            Hyperparameters::Forest(p) => p.max_depth.map_or(f64::INFINITY, |d| d as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MemberParams {
    Logistic(LinearParams),
    LinearSvm { linear: LinearParams, platt_a: f64, platt_b: f64 },
    RandomForest { trees: Vec<Tree> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberModel {
    pub params: MemberParams,
    pub hyperparameters: Hyperparameters,
    pub seed: u64,
}

impl MemberModel {
    pub fn kind(&self) -> LearnerKind {
        match self.params {
            MemberParams::Logistic(_) => LearnerKind::Logistic,
            MemberParams::LinearSvm { .. } => LearnerKind::LinearSvm,
            MemberParams::RandomForest { .. } => LearnerKind::RandomForest,
        }
    }

    pub fn dims(&self) -> Option<usize> {
        match &self.params {
            MemberParams::Logistic(p) | MemberParams::LinearSvm { linear: p, .. } => Some(p.weights.len()),
            MemberParams::RandomForest { .. } => None,
        }
    }

    /// Probability-like score in [0, 1]. `x` must already be standardized.
    pub fn predict_score(&self, x: &[f64]) -> Result<f64, LearnerError> {
        let score = match &self.params {
            MemberParams::Logistic(p) => sigmoid(p.margin(x)?),
            MemberParams::LinearSvm { linear, platt_a, platt_b } => sigmoid(platt_a * linear.margin(x)? + platt_b),
            MemberParams::RandomForest { trees } => {
                let mut sum = 0.0;
                for t in trees {
                    sum += t.predict(x)?;
                }
                sum / trees.len() as f64
            }
        };
        Ok(score.clamp(0.0, 1.0))
    }
}

/// Train one member with fixed hyperparameters on already-standardized data.
pub fn train_member(kind: LearnerKind, hyper: &Hyperparameters, set: &TrainingSet, seed: u64) -> Result<MemberModel, LearnerError> {
    match (kind, hyper) {
        (LearnerKind::Logistic, Hyperparameters::Linear { l2, lr, epochs }) => train_logistic(set, *l2, *lr, *epochs, seed),
        (LearnerKind::LinearSvm, Hyperparameters::Linear { l2, lr, epochs }) => train_linear_svm(set, *l2, *lr, *epochs, seed),
        (LearnerKind::RandomForest, Hyperparameters::Forest(p)) => train_random_forest(set, p, seed),
        _ => Err(LearnerError::InvalidTrainingSet(format!("hyperparameters {hyper:?} do not fit learner {kind:?}"))),
    }
}
