//! Annotation schema, manifest ingestion, rater aggregation, patient-level
//! splitting and rater concordance.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Quality grades run 0 (crisp) to 4 (unusable).
pub const MAX_QUALITY: u8 = 4;
/// Lowest grade counted as poor quality.
pub const POOR_QUALITY_MIN: u8 = 2;

/// The single binary quality rule used everywhere.
#[inline]
pub fn is_poor_quality(quality: u8) -> bool {
    quality >= POOR_QUALITY_MIN
}

pub fn quality_letter(quality: u8) -> Option<char> {
    ['A', 'B', 'C', 'D', 'F'].get(quality as usize).copied()
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest schema: {0}")]
    SchemaError(String),
    #[error("patient {0} has inconsistent demographics across rows")]
    InconsistentDemographics(String),
    #[error("manifest csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("need at least {need} patients, got {got}")]
    TooFewPatients { need: usize, got: usize },
    #[error("split ratios must sum to 1, got {0}")]
    BadRatios(f64),
    #[error("raters have no images in common")]
    NoCommonImages,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Blur,
    Lighting,
    ZoomCrop,
    Other,
}

impl Reason {
    pub const ALL: [Reason; 4] = [Reason::Blur, Reason::Lighting, Reason::ZoomCrop, Reason::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Reason::Blur => "blur",
            Reason::Lighting => "lighting",
            Reason::ZoomCrop => "zoom_crop",
            Reason::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityAnnotation {
    pub rater_id: String,
    pub quality: u8,
    pub reasons: BTreeSet<Reason>,
}

impl QualityAnnotation {
    pub fn new(rater_id: String, quality: u8, reasons: BTreeSet<Reason>) -> Result<Self, DatasetError> {
        if quality > MAX_QUALITY {
            return Err(DatasetError::SchemaError(format!("quality {quality} outside 0..=4")));
        }
        if !reasons.is_empty() && !is_poor_quality(quality) {
            return Err(DatasetError::SchemaError(format!("rater {rater_id}: reasons given for good-quality grade {quality}")));
        }
        Ok(Self { rater_id, quality, reasons })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub age: u32,
    pub sex: Sex,
    /// Fitzpatrick skin type, 1..=6.
    pub fst: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub file_path: String,
    pub annotations: Vec<QualityAnnotation>,
    pub aggregated_quality: u8,
    pub aggregated_reasons: BTreeSet<Reason>,
}

impl ImageRecord {
    /// Builds the record and its aggregated label. `annotations` must be non-empty.
    pub fn new(image_id: String, patient_id: String, file_path: String, annotations: Vec<QualityAnnotation>) -> Self {
        let (aggregated_quality, aggregated_reasons) = aggregate_labels(&annotations);
        Self { image_id, patient_id, file_path, annotations, aggregated_quality, aggregated_reasons }
    }

    pub fn is_poor(&self) -> bool {
        is_poor_quality(self.aggregated_quality)
    }

    pub fn has_reason(&self, r: Reason) -> bool {
        self.aggregated_reasons.contains(&r)
    }
}

/// Median quality (upper median for even counts); a reason survives when the
/// image is poor and at least half of the poor-voting raters flagged it.
pub fn aggregate_labels(annotations: &[QualityAnnotation]) -> (u8, BTreeSet<Reason>) {
    assert!(!annotations.is_empty(), "aggregation needs at least one annotation");
    let mut scores: Vec<u8> = annotations.iter().map(|a| a.quality).collect();
    scores.sort_unstable();
    let quality = scores[scores.len() / 2];
    let mut reasons = BTreeSet::new();
    if is_poor_quality(quality) {
        let poor_voters: Vec<&QualityAnnotation> = annotations.iter().filter(|a| is_poor_quality(a.quality)).collect();
        for r in Reason::ALL {
            let votes = poor_voters.iter().filter(|a| a.reasons.contains(&r)).count();
            if votes > 0 && 2 * votes >= poor_voters.len() {
                reasons.insert(r);
            }
        }
    }
    (quality, reasons)
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    image_id: String,
    patient_id: String,
    file_path: String,
    rater_id: String,
    quality: u8,
    blur: u8,
    lighting: u8,
    zoom_crop: u8,
    other: u8,
    age: u32,
    sex: String,
    fst: u8,
}

pub const MANIFEST_HEADER: [&str; 12] =
    ["image_id", "patient_id", "file_path", "rater_id", "quality", "blur", "lighting", "zoom_crop", "other", "age", "sex", "fst"];

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub images: Vec<ImageRecord>,
    pub patients: Vec<PatientRecord>,
    /// Non-fatal problems such as image paths that do not exist.
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn patient(&self, id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.patient_id == id)
    }
}

fn parse_sex(s: &str) -> Result<Sex, DatasetError> {
    match s.to_ascii_lowercase().as_str() {
        "female" | "f" => Ok(Sex::Female),
        "male" | "m" => Ok(Sex::Male),
        other => Err(DatasetError::SchemaError(format!("unknown sex {other:?}"))),
    }
}

/// Parse manifest CSV text. `base_dir`, when given, is used to resolve
/// relative image paths for the dangling-file check.
pub fn parse_manifest(text: &str, base_dir: Option<&Path>) -> Result<Manifest, DatasetError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != MANIFEST_HEADER {
        return Err(DatasetError::SchemaError(format!("header must be {}", MANIFEST_HEADER.join(","))));
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows_by_image: BTreeMap<String, (String, String, Vec<QualityAnnotation>)> = BTreeMap::new();
    let mut patients: BTreeMap<String, PatientRecord> = BTreeMap::new();
    let mut patient_order: Vec<String> = Vec::new();
    for (i, row) in rdr.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| DatasetError::SchemaError(format!("row {}: {e}", i + 2)))?;
        let mut reasons = BTreeSet::new();
        for (flag, reason) in [(row.blur, Reason::Blur), (row.lighting, Reason::Lighting), (row.zoom_crop, Reason::ZoomCrop), (row.other, Reason::Other)] {
            match flag {
                0 => {}
                1 => {
                    reasons.insert(reason);
                }
                v => return Err(DatasetError::SchemaError(format!("row {}: reason flag {v} is not 0/1", i + 2))),
            }
        }
        let ann = QualityAnnotation::new(row.rater_id, row.quality, reasons)
            .map_err(|e| DatasetError::SchemaError(format!("row {}: {e}", i + 2)))?;
        if !(1..=6).contains(&row.fst) {
            return Err(DatasetError::SchemaError(format!("row {}: fst {} outside 1..=6", i + 2, row.fst)));
        }
        let patient = PatientRecord { patient_id: row.patient_id.clone(), age: row.age, sex: parse_sex(&row.sex)?, fst: row.fst };
        match patients.get(&row.patient_id) {
            Some(existing) if *existing != patient => return Err(DatasetError::InconsistentDemographics(row.patient_id)),
            Some(_) => {}
            None => {
                patient_order.push(row.patient_id.clone());
                patients.insert(row.patient_id.clone(), patient);
            }
        }
        let entry = rows_by_image.entry(row.image_id.clone()).or_insert_with(|| {
            order.push(row.image_id.clone());
            (row.patient_id.clone(), row.file_path.clone(), Vec::new())
        });
        if entry.0 != row.patient_id || entry.1 != row.file_path {
            return Err(DatasetError::SchemaError(format!("image {} has conflicting patient or path", row.image_id)));
        }
        if entry.2.iter().any(|a| a.rater_id == ann.rater_id) {
            return Err(DatasetError::SchemaError(format!("image {} rated twice by {}", row.image_id, ann.rater_id)));
        }
        entry.2.push(ann);
    }
    let mut warnings = Vec::new();
    let images = order
        .into_iter()
        .map(|id| {
            let (patient_id, file_path, anns) = rows_by_image.remove(&id).expect("grouped above");
            if let Some(base) = base_dir {
                if !base.join(&file_path).exists() {
                    warnings.push(format!("dangling file: image {id} -> {file_path}"));
                }
            }
            ImageRecord::new(id, patient_id, file_path, anns)
        })
        .collect();
    let patients = patient_order.into_iter().map(|id| patients.remove(&id).expect("inserted")).collect();
    Ok(Manifest { images, patients, warnings })
}

pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::SchemaError(format!("{}: {e}", path.display())))?;
    parse_manifest(&text, path.parent())
}

/// Inverse of [`parse_manifest`], one row per (image, rater).
pub fn write_manifest(images: &[ImageRecord], patients: &[PatientRecord]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER).unwrap();
    for img in images {
        let p = patients.iter().find(|p| p.patient_id == img.patient_id).expect("patient present");
        for a in &img.annotations {
            let flag = |r| if a.reasons.contains(&r) { "1" } else { "0" };
            let sex = match p.sex {
                Sex::Female => "female",
                Sex::Male => "male",
            };
            w.write_record([
                img.image_id.as_str(),
                img.patient_id.as_str(),
                img.file_path.as_str(),
                a.rater_id.as_str(),
                &a.quality.to_string(),
                flag(Reason::Blur),
                flag(Reason::Lighting),
                flag(Reason::ZoomCrop),
                flag(Reason::Other),
                &p.age.to_string(),
                sex,
                &p.fst.to_string(),
            ])
            .unwrap();
        }
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.539, 0.252, 0.209];

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn split_of(&self, patient_id: &str) -> Option<Split> {
        self.assignment.get(patient_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|&&s| s == split).count()
    }
}

/// Largest-remainder apportionment of `n` items by `ratios`.
pub fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    // stable: ties keep declaration order
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    counts
}

pub fn split_patients(patient_ids: &[String], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment, DatasetError> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || ratios.iter().any(|r| *r < 0.0) {
        return Err(DatasetError::BadRatios(sum));
    }
    let mut ids: Vec<String> = patient_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < 3 {
        return Err(DatasetError::TooFewPatients { need: 3, got: ids.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let counts = apportion(ids.len(), &ratios);
    let mut assignment = BTreeMap::new();
    let mut it = ids.into_iter();
    for (split, count) in [Split::Train, Split::Validation, Split::Test].into_iter().zip(counts) {
        for id in it.by_ref().take(count) {
            assignment.insert(id, split);
        }
    }
    Ok(SplitAssignment { assignment })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceEntry {
    pub rater_i: String,
    pub rater_j: String,
    pub n_common: usize,
    /// Mean of `quality_j - quality_i` over the images both raters graded.
    pub mean_diff: f64,
    /// Population standard deviation of the same differences.
    pub std_diff: f64,
    pub binary_agreement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceTable {
    pub raters: Vec<String>,
    /// Row-major `raters x raters`; `None` where two raters share no image.
    pub entries: Vec<Option<ConcordanceEntry>>,
}

impl ConcordanceTable {
    pub fn get(&self, i: usize, j: usize) -> Option<&ConcordanceEntry> {
        self.entries[i * self.raters.len() + j].as_ref()
    }
}

pub fn concordance_table(images: &[ImageRecord]) -> Result<ConcordanceTable, DatasetError> {
    let raters: Vec<String> =
        images.iter().flat_map(|i| i.annotations.iter().map(|a| a.rater_id.clone())).collect::<BTreeSet<_>>().into_iter().collect();
    let mut entries = Vec::with_capacity(raters.len() * raters.len());
    let mut any_pair = false;
    for ri in &raters {
        for rj in &raters {
            let pairs: Vec<(u8, u8)> = images
                .iter()
                .filter_map(|img| {
                    let qi = img.annotations.iter().find(|a| &a.rater_id == ri)?.quality;
                    let qj = img.annotations.iter().find(|a| &a.rater_id == rj)?.quality;
                    Some((qi, qj))
                })
                .collect();
            if pairs.is_empty() {
                entries.push(None);
                continue;
            }
            if ri != rj {
                any_pair = true;
            }
            let n = pairs.len() as f64;
            let diffs: Vec<f64> = pairs.iter().map(|&(a, b)| b as f64 - a as f64).collect();
            let mean = diffs.iter().sum::<f64>() / n;
            let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
            let agree = pairs.iter().filter(|&&(a, b)| is_poor_quality(a) == is_poor_quality(b)).count() as f64 / n;
            entries.push(Some(ConcordanceEntry {
                rater_i: ri.clone(),
                rater_j: rj.clone(),
                n_common: pairs.len(),
                mean_diff: mean,
                std_diff: std,
                binary_agreement: agree,
            }));
        }
    }
    if !any_pair {
        return Err(DatasetError::NoCommonImages);
    }
    Ok(ConcordanceTable { raters, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ann(rater: &str, q: u8, reasons: &[Reason]) -> QualityAnnotation {
        QualityAnnotation::new(rater.into(), q, reasons.iter().copied().collect()).unwrap()
    }

    const HEADER: &str = "image_id,patient_id,file_path,rater_id,quality,blur,lighting,zoom_crop,other,age,sex,fst\n";

    #[test]
    fn manifest_single_row() {
        let m = parse_manifest(&format!("{HEADER}i1,p1,a.png,r1,0,0,0,0,0,40,female,2\n"), None).unwrap();
        assert_eq!(m.images.len(), 1);
        assert_eq!(m.images[0].aggregated_quality, 0);
        assert_eq!(m.patients[0], PatientRecord { patient_id: "p1".into(), age: 40, sex: Sex::Female, fst: 2 });
    }

    #[test]
    fn manifest_errors() {
        let bad_reason = format!("{HEADER}i1,p1,a.png,r1,1,1,0,0,0,40,female,2\n");
        assert!(matches!(parse_manifest(&bad_reason, None), Err(DatasetError::SchemaError(_))));
        let bad_fst = format!("{HEADER}i1,p1,a.png,r1,0,0,0,0,0,40,female,2\ni2,p1,b.png,r1,0,0,0,0,0,40,female,3\n");
        assert!(matches!(parse_manifest(&bad_fst, None), Err(DatasetError::InconsistentDemographics(_))));
        let bad_flag = format!("{HEADER}i1,p1,a.png,r1,3,2,0,0,0,40,female,2\n");
        assert!(matches!(parse_manifest(&bad_flag, None), Err(DatasetError::SchemaError(_))));
        assert!(matches!(parse_manifest("a,b\n1,2\n", None), Err(DatasetError::SchemaError(_))));
    }

    #[test]
    fn manifest_dangling_file_warns() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"x").unwrap();
        let text = format!("{HEADER}i1,p1,a.png,r1,0,0,0,0,0,40,male,2\ni2,p1,missing.png,r1,0,0,0,0,0,40,male,2\n");
        let m = parse_manifest(&text, Some(dir.path())).unwrap();
        assert_eq!(m.warnings.len(), 1);
        assert!(m.warnings[0].contains("missing.png"));
    }

    #[test]
    fn manifest_round_trip() {
        let text = format!("{HEADER}i1,p1,a.png,r1,3,1,0,0,0,40,male,5\ni1,p1,a.png,r2,2,1,1,0,0,40,male,5\ni2,p2,b.png,r1,0,0,0,0,0,71,female,1\n");
        let m = parse_manifest(&text, None).unwrap();
        assert_eq!(write_manifest(&m.images, &m.patients), text);
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(aggregate_labels(&[ann("a", 0, &[]), ann("b", 1, &[]), ann("c", 2, &[])]).0, 1);
        assert_eq!(aggregate_labels(&[ann("a", 1, &[]), ann("b", 2, &[])]).0, 2);
        let (q, r) = aggregate_labels(&[ann("a", 2, &[Reason::Blur]), ann("b", 2, &[Reason::Blur]), ann("c", 3, &[Reason::Lighting])]);
        assert_eq!(q, 2);
        assert_eq!(r, [Reason::Blur].into_iter().collect());
        let (q, r) = aggregate_labels(&[ann("a", 0, &[]), ann("b", 1, &[]), ann("c", 4, &[Reason::Blur])]);
        assert_eq!((q, r.len()), (1, 0));
    }

    #[test]
    fn aggregation_of_single_annotation_is_identity() {
        for q in 0..=4 {
            assert_eq!(aggregate_labels(&[ann("a", q, &[])]).0, q);
        }
    }

    #[test]
    fn split_of_650_patients() {
        let ids: Vec<String> = (0..650).map(|i| format!("p{i}")).collect();
        let s = split_patients(&ids, DEFAULT_SPLIT_RATIOS, 7).unwrap();
        assert_eq!((s.count(Split::Train), s.count(Split::Validation), s.count(Split::Test)), (350, 164, 136));
        assert_eq!(split_patients(&ids, DEFAULT_SPLIT_RATIOS, 7).unwrap(), s);
        let three: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let s = split_patients(&three, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 1).unwrap();
        assert_eq!((s.count(Split::Train), s.count(Split::Validation), s.count(Split::Test)), (1, 1, 1));
        assert!(matches!(split_patients(&three[..2], [0.5, 0.25, 0.25], 1), Err(DatasetError::TooFewPatients { .. })));
        assert!(matches!(split_patients(&three, [0.5, 0.5, 0.5], 1), Err(DatasetError::BadRatios(_))));
    }

    #[test]
    fn concordance_examples() {
        let mk = |i: usize, a: u8, b: u8| {
            ImageRecord::new(format!("i{i}"), "p".into(), "f".into(), vec![ann("A", a, &[]), ann("B", b, &[])])
        };
        let imgs = vec![mk(0, 0, 1), mk(1, 2, 2), mk(2, 3, 1)];
        let t = concordance_table(&imgs).unwrap();
        let ab = t.get(0, 1).unwrap();
        assert!((ab.mean_diff - (-1.0 / 3.0)).abs() < 1e-12);
        assert!((ab.std_diff - 1.247).abs() < 5e-4);
        assert!((ab.binary_agreement - 2.0 / 3.0).abs() < 1e-12);
        let aa = t.get(0, 0).unwrap();
        assert_eq!((aa.mean_diff, aa.std_diff, aa.binary_agreement), (0.0, 0.0, 1.0));
        assert_eq!(t.get(1, 0).unwrap().mean_diff, -ab.mean_diff);

        let solo = vec![ImageRecord::new("x".into(), "p".into(), "f".into(), vec![ann("A", 0, &[])])];
        assert!(matches!(concordance_table(&solo), Err(DatasetError::NoCommonImages)));
    }

    proptest! {
        #[test]
        fn splits_partition_patients(n in 3usize..300, seed in any::<u64>()) {
            let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
            let s = split_patients(&ids, DEFAULT_SPLIT_RATIOS, seed).unwrap();
            prop_assert_eq!(s.assignment.len(), n);
            prop_assert!(ids.iter().all(|id| s.split_of(id).is_some()));
            let counts = [s.count(Split::Train), s.count(Split::Validation), s.count(Split::Test)];
            for (c, r) in counts.iter().zip(DEFAULT_SPLIT_RATIOS) {
                prop_assert!((*c as f64 - r * n as f64).abs() < 1.0 + 1e-9);
            }
        }

        #[test]
        fn concordance_antisymmetric(labels in proptest::collection::vec((0u8..=4, 0u8..=4), 1..30)) {
            let imgs: Vec<ImageRecord> = labels.iter().enumerate()
                .map(|(i, &(a, b))| ImageRecord::new(format!("i{i}"), "p".into(), "f".into(), vec![ann("A", a, &[]), ann("B", b, &[])]))
                .collect();
            let t = concordance_table(&imgs).unwrap();
            prop_assert_eq!(t.get(0, 1).unwrap().mean_diff, -t.get(1, 0).unwrap().mean_diff);
        }
    }
}
