use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_scaler, fit_scaler, train_member, ForestParams, Hyperparameters, LearnerError, LearnerKind, TrainingSet};
use crate::stats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub folds: usize,
    pub grid: BTreeMap<LearnerKind, Vec<Hyperparameters>>,
    pub seed: u64,
}

impl CvPlan {
    pub const DEFAULT_FOLDS: usize = 5;
    const LINEAR_LR: f64 = 1.0;
    const LINEAR_EPOCHS: usize = 200;

    /// The stock grid: λ over three decades for both linear learners, and
    /// depth × min_leaf for 100-tree forests with `ceil(sqrt(d))` features.
    pub fn default_for(dims: usize, seed: u64) -> Self {
        let linear: Vec<Hyperparameters> = [1e-4, 1e-2, 1.0]
            .into_iter()
            .map(|l2| Hyperparameters::Linear { l2, lr: Self::LINEAR_LR, epochs: Self::LINEAR_EPOCHS })
            .collect();
        let base = ForestParams::default_for(dims);
        let mut forest = Vec::new();
        for max_depth in [Some(6), Some(12), None] {
            for min_leaf in [1, 5] {
                forest.push(Hyperparameters::Forest(ForestParams { max_depth, min_leaf, ..base.clone() }));
            }
        }
        let grid = BTreeMap::from([
            (LearnerKind::Logistic, linear.clone()),
            (LearnerKind::LinearSvm, linear),
            (LearnerKind::RandomForest, forest),
        ]);
        Self { folds: Self::DEFAULT_FOLDS, grid, seed }
    }

    pub fn candidates(&self, kind: LearnerKind) -> &[Hyperparameters] {
        self.grid.get(&kind).map_or(&[], Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub hyperparameters: Hyperparameters,
    pub mean_auc: f64,
    /// `None` where the validation fold held a single class.
    pub fold_aucs: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub kind: LearnerKind,
    pub chosen: Hyperparameters,
    pub candidates: Vec<CandidateScore>,
    /// Fold index of every training row.
    pub folds: Vec<usize>,
    /// Validation-fold score of every row under the chosen candidate.
    pub out_of_fold: Vec<f64>,
}

impl CvOutcome {
    pub fn chosen_score(&self) -> &CandidateScore {
        self.candidates.iter().find(|c| c.hyperparameters == self.chosen).expect("chosen candidate is in the list")
    }
}

/// Fold index per row. Distinct patients are shuffled and dealt round-robin,
/// so every row of a patient lands in the same fold.
pub fn patient_folds(patient_ids: &[String], k: usize, seed: u64) -> Result<Vec<usize>, LearnerError> {
    let unique: BTreeSet<&str> = patient_ids.iter().map(String::as_str).collect();
    if k < 2 || k > unique.len() {
        return Err(LearnerError::TooFewPatients { need: k.max(2), got: unique.len() });
    }
    let mut order: Vec<&str> = unique.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: BTreeMap<&str, usize> = order.into_iter().enumerate().map(|(i, p)| (p, i % k)).collect();
    Ok(patient_ids.iter().map(|p| fold_of[p.as_str()]).collect())
}

/// Scores for the validation rows of one fold, or `None` when the training
/// part is single-class.
fn fold_scores(set: &TrainingSet, kind: LearnerKind, hyper: &Hyperparameters, train_idx: &[usize], val_idx: &[usize], seed: u64) -> Result<Option<Vec<f64>>, LearnerError> {
    let train = set.subset(train_idx);
    if !train.has_both_classes() {
        return Ok(None);
    }
    let scaler = fit_scaler(&train.features, set.dims);
    let train = TrainingSet { features: apply_scaler(&scaler, &train.features), ..train };
    let model = train_member(kind, hyper, &train, seed)?;
    val_idx.iter().map(|&i| model.predict_score(&scaler.transform_row(set.row(i)))).collect::<Result<Vec<_>, _>>().map(Some)
}

/// Patient-disjoint k-fold selection. Each fold standardizes with a scaler fit
/// on its own training part. Highest mean validation AUC wins; ties go to the
/// lower-capacity candidate, then to grid order.
pub fn cross_validate(set: &TrainingSet, plan: &CvPlan, kind: LearnerKind) -> Result<CvOutcome, LearnerError> {
    set.require_both_classes()?;
    let grid = plan.candidates(kind);
    if grid.is_empty() {
        return Err(LearnerError::InvalidTrainingSet(format!("empty grid for {}", kind.name())));
    }
    let folds = patient_folds(&set.patient_ids, plan.folds, plan.seed)?;
    let parts: Vec<(Vec<usize>, Vec<usize>)> = (0..plan.folds)
        .map(|f| (0..set.len()).partition(|&i| folds[i] != f))
        .collect();

    let mut candidates = Vec::with_capacity(grid.len());
    let mut oof_by_candidate = Vec::with_capacity(grid.len());
    for hyper in grid {
        let mut oof = vec![0.5; set.len()];
        let mut fold_aucs = Vec::with_capacity(plan.folds);
        for (train_idx, val_idx) in &parts {
            let scores = fold_scores(set, kind, hyper, train_idx, val_idx, plan.seed)?;
            let fold_auc = scores.and_then(|scores| {
                for (&i, &s) in val_idx.iter().zip(&scores) {
                    oof[i] = s;
                }
                let labels: Vec<bool> = val_idx.iter().map(|&i| set.labels[i]).collect();
                stats::auc(&scores, &labels).ok().map(|a| a.auc)
            });
            fold_aucs.push(fold_auc);
        }
        let valid: Vec<f64> = fold_aucs.iter().flatten().copied().collect();
        let mean_auc = if valid.is_empty() { 0.5 } else { valid.iter().sum::<f64>() / valid.len() as f64 };
        candidates.push(CandidateScore { hyperparameters: hyper.clone(), mean_auc, fold_aucs });
        oof_by_candidate.push(oof);
    }

    let mut best = 0;
    for i in 1..candidates.len() {
        let (a, b) = (&candidates[i], &candidates[best]);
        let better = if (a.mean_auc - b.mean_auc).abs() <= 1e-12 {
            a.hyperparameters.capacity() < b.hyperparameters.capacity()
        } else {
            a.mean_auc > b.mean_auc
        };
        if better {
            best = i;
        }
    }
    Ok(CvOutcome {
        kind,
        chosen: candidates[best].hyperparameters.clone(),
        out_of_fold: oof_by_candidate.swap_remove(best),
        candidates,
        folds,
    })
}
