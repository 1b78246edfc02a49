use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use photoqa::datasets::Reason;
use photoqa::ensemble::Verdict;
use photoqa::imagekit::RasterImage;
use photoqa::session::{to_jsonl, CaptureSession};
use serde_json::Value;

fn photoqa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_photoqa")).current_dir(dir).env("SOURCE_DATE_EPOCH", "1700000000").args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = photoqa(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// make-corpus through calibrate into `dir/<tag>`; returns the model path.
fn build_model(dir: &Path, tag: &str) -> std::path::PathBuf {
    let d = dir.join(tag);
    std::fs::create_dir_all(&d).unwrap();
    ok(&d, &["make-corpus", "--n-base", "12", "--width", "96", "--height", "72", "--zoom", "--out", "corpus"]);
    ok(&d, &["fit-skin", "--input", "corpus/skin.txt", "--out", "skin.json"]);
    ok(&d, &["featurize", "--manifest", "corpus/manifest.csv", "--skin", "skin.json", "--out", "feats"]);
    ok(&d, &["train", "--manifest", "corpus/manifest.csv", "--features", "feats", "--skin", "skin.json", "--folds", "3", "--learners", "logistic,random_forest", "--forest-trees", "8", "--out", "trained.json"]);
    ok(&d, &["fit-ensemble", "--trained", "trained.json", "--manifest", "corpus/manifest.csv", "--out", "model0.json"]);
    ok(&d, &["calibrate", "--model", "model0.json", "--manifest", "corpus/manifest.csv", "--features", "feats", "--fpr-cap", "0.3", "--out", "model.json"]);
    d.join("model.json")
}

#[test]
fn pipeline_stages_assess_and_reproduce() {
    let tmp = tempfile::tempdir().unwrap();
    let a = build_model(tmp.path(), "a");
    let b = build_model(tmp.path(), "b");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), "model artifacts differ between identical runs");
    assert_eq!(std::fs::read(tmp.path().join("a/trained.json")).unwrap(), std::fs::read(tmp.path().join("b/trained.json")).unwrap());

    let gray = tmp.path().join("gray.png");
    std::fs::write(&gray, RasterImage::filled(512, 512, [128, 128, 128]).encode_png()).unwrap();
    let stdout = ok(tmp.path(), &["assess", "--model", a.to_str().unwrap(), gray.to_str().unwrap()]);
    let verdict: Verdict = serde_json::from_str(&stdout).unwrap();
    assert!((0.0..=1.0).contains(&verdict.overall_score));
    assert_eq!(verdict.is_poor, !verdict.reasons.is_empty());

    let d = tmp.path().join("a");
    let report: Value = serde_json::from_str(&ok(&d, &["eval", "--model", "model.json", "--manifest", "corpus/manifest.csv", "--features", "feats", "--subgroups", "sex", "--roc-dir", "roc", "--format", "json"])).unwrap();
    assert_eq!(report["heads"].as_object().unwrap().len(), 4);
    assert_eq!(report["subgroups"].as_array().unwrap().len(), 1);
    assert!(d.join("roc/roc_overall.csv").exists());

    ok(&d, &["eval", "--model", "model.json", "--manifest", "corpus/manifest.csv", "--features", "feats", "--out", "eval.txt"]);
    assert!(std::fs::read_to_string(d.join("eval.txt")).unwrap().contains("overall"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = photoqa(tmp.path(), &["--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(photoqa(tmp.path(), &["power", "--prevalence", "0.3"]).status.code(), Some(1));
    assert_eq!(photoqa(tmp.path(), &["--help"]).status.code(), Some(0));

    let out = photoqa(tmp.path(), &["fit-skin", "--input", "missing.txt", "--out", "skin.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
    std::fs::write(tmp.path().join("junk.png"), b"not a png").unwrap();
    std::fs::write(tmp.path().join("model.json"), b"{}").unwrap();
    assert_eq!(photoqa(tmp.path(), &["assess", "--model", "model.json", "junk.png"]).status.code(), Some(2));
    assert!(!tmp.path().join("skin.json").exists());
}

#[test]
fn power_matches_the_enrolment_target() {
    let tmp = tempfile::tempdir().unwrap();
    let v: Value = serde_json::from_str(&ok(tmp.path(), &["power", "--delta", "0.6", "--sd", "0.71", "--alpha", "0.05", "--power", "0.8", "--prevalence", "0.3765", "--format", "json"])).unwrap();
    assert_eq!((v["n_affected"].as_u64(), v["n_total"].as_u64()), (Some(11), Some(30)));
    let v: Value = serde_json::from_str(&ok(tmp.path(), &["power", "--n-affected", "11", "--prevalence", "0.3765", "--format", "json"])).unwrap();
    assert_eq!(v["n_total"], 30);
    let v: Value = serde_json::from_str(&ok(tmp.path(), &["power", "--delta", "0.6", "--sd", "0.71", "--prevalence", "0.3765", "--method", "t", "--format", "json"])).unwrap();
    assert!(v["n_affected"].as_u64().unwrap() > 11);
    ok(tmp.path(), &["power", "--n-affected", "11", "--prevalence", "0.3765", "--out", "power.txt"]);
    assert_eq!(std::fs::read_to_string(tmp.path().join("power.txt")).unwrap(), "n_affected 11\nn_total 30\n");
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("cfg.toml"), "seed = 3\n").unwrap();
    let manifest = |tag: &str, args: &[&str]| {
        let mut a = args.to_vec();
        a.extend(["make-corpus", "--n-base", "2", "--width", "48", "--height", "48", "--out", tag]);
        ok(tmp.path(), &a);
        std::fs::read(tmp.path().join(tag).join("images/img0000_clean.png")).unwrap()
    };
    let from_file = manifest("c1", &["--config", "cfg.toml"]);
    assert_eq!(from_file, manifest("c2", &["--seed", "3"]));
    assert_eq!(manifest("c3", &["--config", "cfg.toml", "--seed", "5"]), manifest("c4", &["--seed", "5"]));
    assert_ne!(from_file, manifest("c5", &[]));
}

fn verdict(score: f64, poor: bool) -> Verdict {
    Verdict {
        overall_score: score,
        is_poor: poor,
        reasons: if poor { BTreeSet::from([Reason::Blur]) } else { BTreeSet::new() },
        reason_scores: BTreeMap::new(),
        quality_letter_hint: None,
    }
}

#[test]
fn pilot_report_from_log_and_grades() {
    let tmp = tempfile::tempdir().unwrap();
    let mut log = Vec::new();
    let mut labels = String::from("session_id,attempt_number,quality\n");
    // Two sessions start at grade 2 and end at 0 and 1; one is good at once.
    for (id, grades, t0) in [("s1", vec![2, 0], 0u64), ("s2", vec![2, 3, 1], 10_000), ("s3", vec![0], 20_000)] {
        let (mut s, e) = CaptureSession::create(id.into(), 4, t0).unwrap();
        log.push(e);
        for (i, &g) in grades.iter().enumerate() {
            let last = i + 1 == grades.len();
            let (_, es) = s.submit(format!("sha256:{id}{i}"), verdict(if last { 0.1 } else { 0.9 }, !last), t0 + 1000 * i as u64).unwrap();
            log.extend(es);
            labels.push_str(&format!("{id},{},{g}\n", i + 1));
        }
    }
    std::fs::write(tmp.path().join("events.jsonl"), to_jsonl(&log)).unwrap();
    std::fs::write(tmp.path().join("labels.csv"), labels).unwrap();
    let v: Value = serde_json::from_str(&ok(tmp.path(), &["pilot-report", "--log", "events.jsonl", "--labels", "labels.csv", "--format", "json"])).unwrap();
    let strata = v["strata"].as_array().unwrap();
    let two = strata.iter().find(|s| s["initial_quality"] == 2).unwrap();
    assert_eq!(two["count"], 2);
    assert_eq!(two["mean_improvement"], 1.5);
    assert_eq!(v["all"]["patients"], 3);
    assert_eq!(v["all"]["poor_patient_reduction_pct"], 100.0);
}

#[test]
fn serve_answers_healthz() {
    let tmp = tempfile::tempdir().unwrap();
    let model = build_model(tmp.path(), "m");
    let mut child = Command::new(env!("CARGO_BIN_EXE_photoqa"))
        .current_dir(tmp.path())
        .args(["serve", "--port", "0", "--model", model.to_str().unwrap(), "--storage-dir", "store", "--event-log", "events.jsonl"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited early").unwrap();
        if let Some(a) = line.strip_prefix("listening on http://") {
            break a.to_string();
        }
    };
    let mut stream = std::net::TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /v1/healthz HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"model_version\":\"v1-"), "{response}");
}
