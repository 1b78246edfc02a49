//! ROC curves, Mann-Whitney AUC and DeLong variance / tests computed from
//! midranks in `O(n log n)`.

use serde::{Deserialize, Serialize};

use super::{normal_two_sided_p, StatsError, TestKind, TestResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn trapezoid_area(&self) -> f64 {
        self.points.windows(2).map(|p| (p[1].fpr - p[0].fpr) * (p[1].tpr + p[0].tpr) / 2.0).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucEstimate {
    pub auc: f64,
    /// DeLong variance; `None` for the bare point estimate.
    pub variance: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), StatsError> {
    if scores.len() != labels.len() {
        return Err(StatsError::LengthMismatch { left: scores.len(), right: labels.len() });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

fn split_by_label(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let pos = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    (pos, neg)
}

/// 1-based midranks (ties share the average of their positions).
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    ranks
}

pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve, StatsError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(StatsError::SingleClassScores);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold: s, fpr: fp as f64 / n_neg as f64, tpr: tp as f64 / n_pos as f64 });
    }
    Ok(RocCurve { points })
}

/// Mann-Whitney AUC with half credit for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<AucEstimate, StatsError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(StatsError::SingleClassScores);
    }
    let ranks = midranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let auc = (pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64);
    Ok(AucEstimate { auc, variance: None, n_pos, n_neg })
}

/// DeLong structural components: `V10` (one per positive) and `V01` (one per negative).
#[derive(Clone, Debug)]
pub struct StructuralComponents {
    pub v10: Vec<f64>,
    pub v01: Vec<f64>,
}

impl StructuralComponents {
    pub fn auc(&self) -> f64 {
        self.v10.iter().sum::<f64>() / self.v10.len() as f64
    }
}

fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

/// Structural components from midranks.
pub fn structural_components(scores: &[f64], labels: &[bool]) -> Result<StructuralComponents, StatsError> {
    check_lengths(scores, labels)?;
    let (pos, neg) = split_by_label(scores, labels);
    if pos.len() < 2 || neg.len() < 2 {
        return Err(StatsError::TooFewPerClass { n_pos: pos.len(), n_neg: neg.len() });
    }
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let tx = midranks(&pos);
    let ty = midranks(&neg);
    let mut all = pos.clone();
    all.extend_from_slice(&neg);
    let tz = midranks(&all);
    let v10 = (0..pos.len()).map(|i| (tz[i] - tx[i]) / n).collect();
    let v01 = (0..neg.len()).map(|j| 1.0 - (tz[pos.len() + j] - ty[j]) / m).collect();
    Ok(StructuralComponents { v10, v01 })
}

fn variance_of(c: &StructuralComponents) -> f64 {
    let s10 = sample_cov(&c.v10, &c.v10);
    let s01 = sample_cov(&c.v01, &c.v01);
    (s10 / c.v10.len() as f64 + s01 / c.v01.len() as f64).max(0.0)
}

pub fn delong_variance(scores: &[f64], labels: &[bool]) -> Result<AucEstimate, StatsError> {
    let c = structural_components(scores, labels)?;
    Ok(AucEstimate { auc: c.auc(), variance: Some(variance_of(&c)), n_pos: c.v10.len(), n_neg: c.v01.len() })
}

fn z_test(diff: f64, var: f64, test_kind: TestKind) -> TestResult {
    let statistic = if var > 0.0 {
        diff / var.sqrt()
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    };
    TestResult { statistic, p_value: normal_two_sided_p(statistic), test_kind, zero_variance: var <= 0.0 }
}

/// Two AUCs estimated on disjoint samples.
pub fn delong_test_unpaired(a_scores: &[f64], a_labels: &[bool], b_scores: &[f64], b_labels: &[bool]) -> Result<TestResult, StatsError> {
    let a = delong_variance(a_scores, a_labels)?;
    let b = delong_variance(b_scores, b_labels)?;
    Ok(z_test(a.auc - b.auc, a.variance.unwrap_or(0.0) + b.variance.unwrap_or(0.0), TestKind::DelongUnpaired))
}

/// Two classifiers scored on the same samples.
pub fn delong_test_paired(scores_1: &[f64], scores_2: &[f64], labels: &[bool]) -> Result<TestResult, StatsError> {
    if scores_1.len() != scores_2.len() {
        return Err(StatsError::LengthMismatch { left: scores_1.len(), right: scores_2.len() });
    }
    let c1 = structural_components(scores_1, labels)?;
    let c2 = structural_components(scores_2, labels)?;
    let (m, n) = (c1.v10.len() as f64, c1.v01.len() as f64);
    let var = (sample_cov(&c1.v10, &c1.v10) + sample_cov(&c2.v10, &c2.v10) - 2.0 * sample_cov(&c1.v10, &c2.v10)) / m
        + (sample_cov(&c1.v01, &c1.v01) + sample_cov(&c2.v01, &c2.v01) - 2.0 * sample_cov(&c1.v01, &c2.v01)) / n;
    let diff = c1.auc() - c2.auc();
    // identical rank structure leaves only round-off in both terms
    let var = if var.abs() < 1e-15 { 0.0 } else { var.max(0.0) };
    let diff = if diff.abs() < 1e-15 { 0.0 } else { diff };
    Ok(z_test(diff, var, TestKind::DelongPaired))
}
