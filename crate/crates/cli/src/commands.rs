use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};
use std::path::{Path, PathBuf};

use photoqa::datasets::{load_manifest, write_manifest, ImageRecord, Manifest};
use photoqa::ensemble::{load_model, model_to_json, parse_external_scores, to_canonical_json, Head};
use photoqa::features::{read_feature_matrix, write_feature_matrix, FeatureGroup};
use photoqa::imagekit::decode_image;
use photoqa::learners::LearnerKind;
use photoqa::pipeline::{self, sha256_hex, ExternalScores, FeatureSet, PipelineConfig, PipelineError, TrainedMembers};
use photoqa::session;
use photoqa::skinmodel::{load_skin_dataset, SkinGmm};
use photoqa::stats::{pilot_report, sample_size, total_from_affected, normal_approx_n, Grouping, PowerSpec};
use photoqa::synth;
use photoqa_server::ServerConfig;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::{Cli, CliError, Command, Format, GroupingArg, LearnerArg, PowerMethod};

fn data<E: Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Internal(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_artifact<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_file(path, to_canonical_json(value).map_err(|e| CliError::Internal(e.to_string()))?.as_bytes())
}

fn file_hash(path: &Path) -> Result<String, CliError> {
    std::fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// RFC 3339 stamp; `SOURCE_DATE_EPOCH` pins it for reproducible artifacts.
fn timestamp() -> Result<String, CliError> {
    let t = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(s) => {
            let secs: i64 = s.trim().parse().map_err(|_| CliError::Usage(format!("SOURCE_DATE_EPOCH {s:?} is not an integer")))?;
            time::OffsetDateTime::from_unix_timestamp(secs).map_err(|e| CliError::Usage(format!("SOURCE_DATE_EPOCH: {e}")))?
        }
        Err(_) => time::OffsetDateTime::now_utc(),
    };
    t.format(&time::format_description::well_known::Rfc3339).map_err(|e| CliError::Internal(e.to_string()))
}

struct Ctx {
    format: Option<Format>,
    config: Option<PathBuf>,
    seed: Option<u64>,
}

impl Ctx {
    /// Config file first, then `--seed`, then the subcommand's own flags.
    fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = read_text(p)?;
                if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
                    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
                } else {
                    toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
                }
            }
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    /// Print (or write to `out`) a report in the chosen format.
    fn emit(&self, default: Format, value: &Value, text: &str, out: Option<&Path>) -> Result<(), CliError> {
        let body = match self.format.unwrap_or(default) {
            Format::Json => serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))? + "\n",
            Format::Text => text.to_string(),
        };
        match out {
            Some(p) => write_file(p, body.as_bytes()),
            None => {
                print!("{body}");
                Ok(())
            }
        }
    }
}

fn manifest(path: &Path) -> Result<Manifest, CliError> {
    let m = load_manifest(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    Ok(m)
}

fn feature_paths(dir: &Path) -> [(FeatureGroup, PathBuf); 2] {
    FeatureGroup::ALL.map(|g| (g, dir.join(format!("{}.pqfm", g.name()))))
}

fn read_features(dir: &Path) -> Result<FeatureSet, CliError> {
    let [(_, p1), (_, p2)] = feature_paths(dir);
    let group1 = read_feature_matrix(&p1).map_err(|e| CliError::Data(format!("{}: {e}", p1.display())))?;
    let group2 = read_feature_matrix(&p2).map_err(|e| CliError::Data(format!("{}: {e}", p2.display())))?;
    Ok(FeatureSet { group1, group2 })
}

fn external(path: Option<&PathBuf>) -> Result<Option<ExternalScores>, CliError> {
    path.map(|p| parse_external_scores(&read_text(p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))).transpose()
}

fn resolve(base: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = Ctx { format: cli.format, config: cli.config, seed: cli.seed };
    match cli.command {
        Command::FitSkin { input, components, out } => {
            let mut cfg = ctx.pipeline()?;
            if let Some(k) = components {
                cfg.skin_components = k;
            }
            let samples = load_skin_dataset(&input).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
            let skin = pipeline::fit_skin(&samples, &cfg).map_err(data)?;
            write_artifact(&out, &skin)?;
            let text = format!("fit {} skin and {} non-skin components on {} pixels (skin prior {:.4}); wrote {}\n", skin.skin_components.len(), skin.nonskin_components.len(), samples.len(), skin.class_priors[0], out.display());
            ctx.emit(Format::Text, &json!({ "out": out, "pixels": samples.len(), "k": skin.k, "seed": skin.seed }), &text, None)
        }
        Command::Featurize { manifest: mpath, skin, max_side, out } => {
            let mut cfg = ctx.pipeline()?;
            if let Some(m) = max_side {
                cfg.max_side = m;
            }
            let m = manifest(&mpath)?;
            let gmm: SkinGmm = read_json(&skin)?;
            let base = mpath.parent().unwrap_or(Path::new(".")).to_path_buf();
            let load = |r: &ImageRecord| {
                let path = resolve(&base, &r.file_path);
                let bytes = std::fs::read(&path).map_err(|e| PipelineError::ImageLoad { image_id: r.image_id.clone(), message: format!("{}: {e}", path.display()) })?;
                decode_image(&bytes).map_err(|e| PipelineError::ImageLoad { image_id: r.image_id.clone(), message: e.to_string() })
            };
            let set = pipeline::featurize(&m.images, &gmm, cfg.max_side, load).map_err(data)?;
            std::fs::create_dir_all(&out).map_err(|e| CliError::Internal(format!("{}: {e}", out.display())))?;
            let [(_, p1), (_, p2)] = feature_paths(&out);
            write_feature_matrix(&p1, &set.group1).map_err(|e| CliError::Internal(e.to_string()))?;
            write_feature_matrix(&p2, &set.group2).map_err(|e| CliError::Internal(e.to_string()))?;
            let text = format!("featurized {} images into {}\n", set.group1.rows(), out.display());
            ctx.emit(Format::Text, &json!({ "out": out, "images": set.group1.rows() }), &text, None)
        }
        Command::Train { manifest: mpath, features, skin, folds, learners, forest_trees, out } => {
            let mut cfg = ctx.pipeline()?;
            if let Some(f) = folds {
                cfg.cv_folds = f;
            }
            if !learners.is_empty() {
                cfg.learners = learners
                    .iter()
                    .map(|l| match l {
                        LearnerArg::Logistic => LearnerKind::Logistic,
                        LearnerArg::LinearSvm => LearnerKind::LinearSvm,
                        LearnerArg::RandomForest => LearnerKind::RandomForest,
                    })
                    .collect();
            }
            if forest_trees.is_some() {
                cfg.forest_trees = forest_trees;
            }
            let m = manifest(&mpath)?;
            let set = read_features(&features)?;
            let gmm: SkinGmm = read_json(&skin)?;
            let mut trained = pipeline::train(&m, &set, &gmm, &cfg, &timestamp()?).map_err(data)?;
            trained.data_hashes.insert("manifest".into(), file_hash(&mpath)?);
            trained.data_hashes.insert("skin".into(), file_hash(&skin)?);
            for (g, p) in feature_paths(&features) {
                trained.data_hashes.insert(format!("features.{}", g.name()), file_hash(&p)?);
            }
            write_artifact(&out, &trained)?;
            let mut text = String::new();
            for (id, cv) in &trained.cv {
                let best = cv.candidate_mean_aucs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                writeln!(text, "{id:<40} cv auc {best:.3}").unwrap();
            }
            for h in &trained.untrained_heads {
                writeln!(text, "head {} has a single class in the train split; left untrained", h.name()).unwrap();
            }
            writeln!(text, "wrote {}", out.display()).unwrap();
            let cv: BTreeMap<&String, f64> = trained.cv.iter().map(|(id, c)| (id, c.candidate_mean_aucs.iter().cloned().fold(f64::NEG_INFINITY, f64::max))).collect();
            ctx.emit(Format::Text, &json!({ "out": out, "cv_auc": cv, "untrained_heads": trained.untrained_heads }), &text, None)
        }
        Command::FitEnsemble { trained, manifest: mpath, external: ext, out } => {
            let t: TrainedMembers = read_json(&trained)?;
            let m = manifest(&mpath)?;
            let ext = external(ext.as_ref())?;
            let model = pipeline::fit_ensemble(&t, &m, ext.as_ref()).map_err(data)?;
            write_file(&out, model_to_json(&model).map_err(|e| CliError::Internal(e.to_string()))?.as_bytes())?;
            let mut text = String::new();
            for head in Head::ALL {
                let h = model.head(head);
                writeln!(text, "{:<10} {} inputs, weight sum {:.3}, intercept {:.3}", head.name(), h.member_ids.len(), h.weights.iter().sum::<f64>(), h.intercept).unwrap();
            }
            writeln!(text, "wrote {}", out.display()).unwrap();
            ctx.emit(Format::Text, &json!({ "out": out, "heads": model.heads }), &text, None)
        }
        Command::Calibrate { model, manifest: mpath, features, external: ext, fpr_cap, out } => {
            let mut cfg = ctx.pipeline()?;
            if let Some(c) = fpr_cap {
                if !(0.0..=1.0).contains(&c) {
                    return Err(CliError::Usage(format!("--fpr-cap {c} outside [0, 1]")));
                }
                cfg.fpr_cap = c;
            }
            let qm = load_model(&model).map_err(|e| CliError::Data(format!("{}: {e}", model.display())))?;
            let m = manifest(&mpath)?;
            let set = read_features(&features)?;
            let ext = external(ext.as_ref())?;
            let (calibrated, report) = pipeline::calibrate(&qm, &m, &set, &cfg, ext.as_ref(), &qm.created_at).map_err(data)?;
            write_file(&out, model_to_json(&calibrated).map_err(|e| CliError::Internal(e.to_string()))?.as_bytes())?;
            let mut text = format!("fpr cap {}\n", report.fpr_cap);
            for (name, c) in &report.heads {
                match c {
                    Some(c) => writeln!(text, "{name:<10} threshold {:.4} tpr {:.3} fpr {:.3}", calibrated.heads[name].threshold, c.tpr, c.fpr).unwrap(),
                    None => writeln!(text, "{name:<10} not calibrated (single class or untrained); threshold {:.4}", calibrated.heads[name].threshold).unwrap(),
                }
            }
            writeln!(text, "wrote {}", out.display()).unwrap();
            ctx.emit(Format::Text, &serde_json::to_value(&report).map_err(data)?, &text, None)
        }
        Command::Eval { model, manifest: mpath, features, external: ext, subgroups, roc_dir, out } => {
            let cfg = ctx.pipeline()?;
            let qm = load_model(&model).map_err(|e| CliError::Data(format!("{}: {e}", model.display())))?;
            let m = manifest(&mpath)?;
            let set = read_features(&features)?;
            let ext = external(ext.as_ref())?;
            let groupings: Vec<Grouping> = subgroups
                .iter()
                .map(|g| match g {
                    GroupingArg::Fst => Grouping::Fst,
                    GroupingArg::Age => Grouping::Age,
                    GroupingArg::Sex => Grouping::Sex,
                })
                .collect();
            let report = pipeline::evaluate(&qm, &m, &set, &cfg, ext.as_ref(), &groupings).map_err(data)?;
            if let Some(dir) = &roc_dir {
                for (name, h) in &report.heads {
                    if let Some(roc) = &h.roc {
                        write_file(&dir.join(format!("roc_{name}.csv")), roc.to_csv().as_bytes())?;
                    }
                }
            }
            ctx.emit(Format::Text, &serde_json::to_value(&report).map_err(data)?, &report.to_text(), out.as_deref())
        }
        Command::Assess { model, image, external: ext, out } => {
            let qm = load_model(&model).map_err(|e| CliError::Data(format!("{}: {e}", model.display())))?;
            let bytes = std::fs::read(&image).map_err(|e| CliError::Data(format!("{}: {e}", image.display())))?;
            let img = decode_image(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", image.display())))?;
            let mut scores = BTreeMap::new();
            for kv in &ext {
                let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--external expects channel=score, got {kv:?}")))?;
                let v: f64 = v.parse().map_err(|_| CliError::Usage(format!("--external score {v:?} is not a number")))?;
                scores.insert(k.to_string(), v);
            }
            let verdict = qm.assess(&img, (!scores.is_empty()).then_some(&scores)).map_err(data)?;
            let reasons = verdict.reason_names().join(", ");
            let text = if verdict.is_poor {
                format!("poor ({reasons}), score {:.3}\n", verdict.overall_score)
            } else {
                format!("acceptable, score {:.3}\n", verdict.overall_score)
            };
            ctx.emit(Format::Json, &serde_json::to_value(&verdict).map_err(data)?, &text, out.as_deref())
        }
        Command::Serve { bind, port, model, storage_dir, event_log, attempt_cap, fpr_cap, static_dir } => {
            let mut cfg = match &ctx.config {
                Some(p) => ServerConfig::load(p).map_err(data)?,
                None => ServerConfig::default(),
            };
            macro_rules! set {
                ($($f:ident),*) => { $( if let Some(v) = $f { cfg.$f = v; } )* };
            }
            set!(bind, port, storage_dir, event_log, attempt_cap);
            if model.is_some() {
                cfg.model_path = model;
            }
            if fpr_cap.is_some() {
                cfg.fpr_cap = fpr_cap;
            }
            if static_dir.is_some() {
                cfg.static_dir = static_dir;
            }
            cfg.check().map_err(|e| CliError::Usage(e.to_string()))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
            rt.block_on(photoqa_server::run(cfg)).map_err(data)
        }
        Command::PilotReport { log, labels, out } => {
            let entries = session::parse_jsonl(&read_text(&log)?).map_err(data)?;
            let sessions = session::replay(&entries).map_err(data)?;
            let mut grades: BTreeMap<String, BTreeMap<u32, u8>> = BTreeMap::new();
            let mut rdr = csv::Reader::from_path(&labels).map_err(|e| CliError::Data(format!("{}: {e}", labels.display())))?;
            for row in rdr.deserialize::<(String, u32, u8)>() {
                let (id, n, q) = row.map_err(|e| CliError::Data(format!("{}: {e}", labels.display())))?;
                grades.entry(id).or_default().insert(n, q);
            }
            let mut pilot = Vec::new();
            for (id, s) in &sessions {
                let g: Option<Vec<u8>> = s.attempts.iter().map(|a| grades.get(id).and_then(|m| m.get(&a.attempt_number)).copied()).collect();
                match g.and_then(|g| s.to_pilot(&g)) {
                    Some(p) => pilot.push(p),
                    None => eprintln!("warning: session {id} skipped (not finished or not fully graded)"),
                }
            }
            let report = pilot_report(&pilot).map_err(data)?;
            ctx.emit(Format::Text, &serde_json::to_value(&report).map_err(data)?, &report.to_text(), out.as_deref())
        }
        Command::Power { delta, sd, alpha, power, prevalence, n_affected, method, out } => {
            let (n_normal, n_aff) = match n_affected {
                Some(n) => (None, n),
                None => {
                    let (Some(delta), Some(sd)) = (delta, sd) else {
                        return Err(CliError::Usage("power needs --delta and --sd, or --n-affected".into()));
                    };
                    let spec = PowerSpec { delta, sd, alpha, power, prevalence };
                    match method {
                        PowerMethod::Normal => {
                            let n = normal_approx_n(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
                            (Some(n), (n.ceil() as u64).max(2))
                        }
                        PowerMethod::T => {
                            let s = sample_size(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
                            (Some(s.n_normal), s.n_affected)
                        }
                    }
                }
            };
            let n_total = total_from_affected(n_aff, prevalence).map_err(|e| CliError::Usage(e.to_string()))?;
            let text = format!("n_affected {n_aff}\nn_total {n_total}\n");
            ctx.emit(Format::Text, &json!({ "n_normal": n_normal, "n_affected": n_aff, "n_total": n_total, "prevalence": prevalence }), &text, out.as_deref())
        }
        Command::MakeCorpus { n_base, width, height, zoom, out } => {
            let seed = ctx.pipeline()?.seed;
            if width < 40 || height < 40 {
                return Err(CliError::Usage("corpus images must be at least 40x40".into()));
            }
            let corpus = synth::degradation_corpus(seed, n_base, width, height, zoom);
            for img in &corpus.images {
                write_file(&out.join(&img.record.file_path), &img.image.encode_png())?;
            }
            let records: Vec<ImageRecord> = corpus.images.iter().map(|i| i.record.clone()).collect();
            write_file(&out.join("manifest.csv"), write_manifest(&records, &corpus.patients).as_bytes())?;
            write_file(&out.join("skin.txt"), synth::skin_dataset_text(seed, 2000, 4000).as_bytes())?;
            let text = format!("wrote {} images for {} patients, manifest.csv and skin.txt under {}\n", records.len(), corpus.patients.len(), out.display());
            ctx.emit(Format::Text, &json!({ "out": out, "images": records.len(), "patients": corpus.patients.len() }), &text, None)
        }
    }
}
