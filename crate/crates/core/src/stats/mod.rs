//! Evaluation statistics: ROC / AUC, DeLong variance and tests, paired t-tests,
//! sample-size planning and the subgroup / pilot reports.

mod power;
mod reports;
mod roc;
mod ttest;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use power::{normal_approx_n, sample_size, total_from_affected, PowerSpec, SampleSize};
pub use reports::{
    pilot_report, subgroup_report, GroupAuc, Grouping, LabeledAttempt, MeanSd, PairwiseComparison, PilotReport, PilotSession,
    Rollup, ScoredSample, Stratum, SubgroupReport,
};
pub use roc::{
    auc, delong_test_paired, delong_test_unpaired, delong_variance, midranks, roc_curve, structural_components, AucEstimate,
    RocCurve, RocPoint, StructuralComponents,
};
pub use ttest::{ln_gamma, paired_ttest, regularized_beta, t_cdf, t_two_sided_p};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("scores contain a single class")]
    SingleClassScores,
    #[error("need at least two samples per class (got {n_pos} positive, {n_neg} negative)")]
    TooFewPerClass { n_pos: usize, n_neg: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("scores contain NaN")]
    NonFinite,
    #[error("invalid power spec: {0}")]
    InvalidSpec(String),
    #[error("session {0} has an unlabeled or missing attempt")]
    UnlabeledAttempt(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    DelongPaired,
    DelongUnpaired,
    PairedT,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub test_kind: TestKind,
    /// The statistic had no spread to divide by; see the owning test for the convention.
    #[serde(default)]
    pub zero_variance: bool,
}

/// Two-sided p-value of a standard normal statistic.
pub fn normal_two_sided_p(z: f64) -> f64 {
    if z.is_infinite() {
        return 0.0;
    }
    statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

#[cfg(test)]
pub(crate) mod oracle {
    /// Exhaustive pairwise AUC, half credit for ties.
    pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    total += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        total / pairs
    }
}
