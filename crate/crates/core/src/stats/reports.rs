//! Subgroup fairness comparison and pilot-study improvement analytics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::roc::{delong_test_unpaired, delong_variance, AucEstimate};
use super::ttest::paired_ttest;
use super::{StatsError, TestResult};
use crate::datasets::{is_poor_quality, PatientRecord, Sex, MAX_QUALITY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Fitzpatrick I-III vs IV-VI.
    Fst,
    /// 18-32, 33-52, >52 (an age of exactly 32 falls in the younger bin).
    Age,
    Sex,
}

impl Grouping {
    pub fn group_names(self) -> &'static [&'static str] {
        match self {
            Grouping::Fst => &["FST I-III", "FST IV-VI"],
            Grouping::Age => &["18-32", "33-52", ">52"],
            Grouping::Sex => &["female", "male"],
        }
    }

    /// Group index for a patient, or `None` when the patient falls outside every bin.
    pub fn assign(self, p: &PatientRecord) -> Option<usize> {
        match self {
            Grouping::Fst => Some(if p.fst <= 3 { 0 } else { 1 }),
            Grouping::Age => match p.age {
                18..=32 => Some(0),
                33..=52 => Some(1),
                a if a > 52 => Some(2),
                _ => None,
            },
            Grouping::Sex => Some(match p.sex {
                Sex::Female => 0,
                Sex::Male => 1,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAuc {
    pub group: String,
    pub n: usize,
    pub estimate: AucEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub group_a: String,
    pub group_b: String,
    pub result: TestResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub grouping: Grouping,
    pub groups: Vec<GroupAuc>,
    pub comparisons: Vec<PairwiseComparison>,
    /// Groups left out, with the reason (single class, too few samples, empty).
    pub skipped: Vec<(String, String)>,
    pub unassigned: usize,
}

/// One scored, labeled sample for subgroup analysis.
#[derive(Clone, Debug)]
pub struct ScoredSample<'a> {
    pub patient: &'a PatientRecord,
    pub score: f64,
    pub label: bool,
}

pub fn subgroup_report(samples: &[ScoredSample<'_>], grouping: Grouping) -> SubgroupReport {
    let names = grouping.group_names();
    let mut buckets: Vec<(Vec<f64>, Vec<bool>)> = vec![(Vec::new(), Vec::new()); names.len()];
    let mut unassigned = 0;
    for s in samples {
        match grouping.assign(s.patient) {
            Some(g) => {
                buckets[g].0.push(s.score);
                buckets[g].1.push(s.label);
            }
            None => unassigned += 1,
        }
    }
    let mut groups = Vec::new();
    let mut usable = Vec::new();
    let mut skipped = Vec::new();
    for (name, (scores, labels)) in names.iter().zip(&buckets) {
        match delong_variance(scores, labels) {
            Ok(estimate) => {
                groups.push(GroupAuc { group: name.to_string(), n: scores.len(), estimate });
                usable.push((name, scores, labels));
            }
            Err(e) => skipped.push((name.to_string(), e.to_string())),
        }
    }
    let mut comparisons = Vec::new();
    for i in 0..usable.len() {
        for j in i + 1..usable.len() {
            let (na, sa, la) = usable[i];
            let (nb, sb, lb) = usable[j];
            let result = delong_test_unpaired(sa, la, sb, lb).expect("both groups validated");
            comparisons.push(PairwiseComparison { group_a: na.to_string(), group_b: nb.to_string(), result });
        }
    }
    SubgroupReport { grouping, groups, comparisons, skipped, unassigned }
}

impl SubgroupReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("subgroups by {:?}\n", self.grouping);
        writeln!(out, "{:<12} {:>6} {:>8} {:>10}", "group", "n", "auc", "variance").unwrap();
        for g in &self.groups {
            writeln!(out, "{:<12} {:>6} {:>8.3} {:>10.6}", g.group, g.n, g.estimate.auc, g.estimate.variance.unwrap_or(f64::NAN)).unwrap();
        }
        for c in &self.comparisons {
            writeln!(out, "{} vs {}: z = {:.3}, p = {:.4}", c.group_a, c.group_b, c.result.statistic, c.result.p_value).unwrap();
        }
        for (g, why) in &self.skipped {
            writeln!(out, "skipped {g}: {why}").unwrap();
        }
        out
    }
}

/// One attempt from a finished capture session, with its clinician grade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledAttempt {
    pub quality: u8,
    /// Seconds since the session's first attempt.
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotSession {
    pub session_id: String,
    pub attempts: Vec<LabeledAttempt>,
    /// Index into `attempts` of the submitted photo.
    pub final_index: usize,
    /// Terminated because the model accepted a photo (not the best-of fallback).
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub initial_quality: u8,
    pub count: usize,
    pub mean_improvement: f64,
    pub sd_improvement: f64,
    /// Paired t-test of initial vs final grade, for poor strata with at least two sessions.
    pub test: Option<TestResult>,
    /// Percent of sessions in a poor stratum whose final photo is no longer poor.
    pub reduction_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Sample standard deviation (n - 1); zero for fewer than two values.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: 0.0, sd: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 { 0.0 } else { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
        Self { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollup {
    pub patients: usize,
    pub images_per_patient: MeanSd,
    pub extra_time_s: MeanSd,
    pub initial_poor: usize,
    pub final_poor: usize,
    /// `(initial_poor - final_poor) / initial_poor`, in percent.
    pub poor_patient_reduction_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotReport {
    pub strata: Vec<Stratum>,
    pub all: Rollup,
    pub accepted_only: Rollup,
}

fn rollup(sessions: &[&PilotSession]) -> Rollup {
    let images: Vec<f64> = sessions.iter().map(|s| s.attempts.len() as f64).collect();
    let extra: Vec<f64> = sessions.iter().map(|s| s.attempts.last().map_or(0.0, |a| a.elapsed_s) - s.attempts[0].elapsed_s).collect();
    let initial_poor = sessions.iter().filter(|s| is_poor_quality(s.attempts[0].quality)).count();
    let final_poor = sessions.iter().filter(|s| is_poor_quality(s.attempts[s.final_index].quality)).count();
    Rollup {
        patients: sessions.len(),
        images_per_patient: MeanSd::of(&images),
        extra_time_s: MeanSd::of(&extra),
        initial_poor,
        final_poor,
        poor_patient_reduction_pct: (initial_poor > 0)
            .then(|| 100.0 * (initial_poor as f64 - final_poor as f64) / initial_poor as f64),
    }
}

pub fn pilot_report(sessions: &[PilotSession]) -> Result<PilotReport, StatsError> {
    for s in sessions {
        if s.attempts.is_empty() || s.final_index >= s.attempts.len() {
            return Err(StatsError::UnlabeledAttempt(s.session_id.clone()));
        }
        if s.attempts.iter().any(|a| a.quality > MAX_QUALITY) {
            return Err(StatsError::UnlabeledAttempt(s.session_id.clone()));
        }
    }
    let mut strata = Vec::new();
    for q in 0..=MAX_QUALITY {
        let members: Vec<&PilotSession> = sessions.iter().filter(|s| s.attempts[0].quality == q).collect();
        if members.is_empty() {
            continue;
        }
        let initial: Vec<f64> = members.iter().map(|s| s.attempts[0].quality as f64).collect();
        let fin: Vec<f64> = members.iter().map(|s| s.attempts[s.final_index].quality as f64).collect();
        let improvement: Vec<f64> = initial.iter().zip(&fin).map(|(a, b)| a - b).collect();
        let stats = MeanSd::of(&improvement);
        let poor = is_poor_quality(q);
        let test = if poor && members.len() >= 2 { Some(paired_ttest(&initial, &fin)?) } else { None };
        let reduction_pct = poor.then(|| {
            let fixed = fin.iter().filter(|&&f| !is_poor_quality(f as u8)).count();
            100.0 * fixed as f64 / members.len() as f64
        });
        strata.push(Stratum {
            initial_quality: q,
            count: members.len(),
            mean_improvement: stats.mean,
            sd_improvement: stats.sd,
            test,
            reduction_pct,
        });
    }
    let all: Vec<&PilotSession> = sessions.iter().collect();
    let accepted: Vec<&PilotSession> = sessions.iter().filter(|s| s.accepted).collect();
    Ok(PilotReport { strata, all: rollup(&all), accepted_only: rollup(&accepted) })
}

impl PilotReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:>8} {:>6} {:>18} {:>12} {:>10}", "initial", "n", "improvement", "p", "reduction").unwrap();
        for s in &self.strata {
            let p = s.test.as_ref().map_or("-".to_string(), |t| format!("{:.3e}", t.p_value));
            let red = s.reduction_pct.map_or("-".to_string(), |r| format!("{r:.1}%"));
            writeln!(out, "{:>8} {:>6} {:>9.2} (+/-{:.2}) {:>12} {:>10}", s.initial_quality, s.count, s.mean_improvement, s.sd_improvement, p, red).unwrap();
        }
        for (name, r) in [("entire dataset", &self.all), ("model-terminated", &self.accepted_only)] {
            writeln!(
                out,
                "{name}: patients {}, images/patient {:.1} (+/-{:.1}), extra time {:.1}s (+/-{:.1}), poor {} -> {} ({})",
                r.patients,
                r.images_per_patient.mean,
                r.images_per_patient.sd,
                r.extra_time_s.mean,
                r.extra_time_s.sd,
                r.initial_poor,
                r.final_poor,
                r.poor_patient_reduction_pct.map_or("-".into(), |p| format!("{p:.1}% reduction")),
            )
            .unwrap();
        }
        out
    }
}
