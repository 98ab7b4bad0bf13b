use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use time_drs::data::{
    load_cohort, load_features, load_nuclei, save_nuclei, save_survival, Arm, Endpoint, Marker, NucleusEntry,
    NucleusRecord, Panel, Point2, Positivity, SurvivalRecord,
};
use time_drs::phenotype::DEFAULT_EXTENT_UM;
use time_drs::registration::{save_keypoints, Keypoint, RigidTransform};

fn time_drs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_time-drs")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = time_drs(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

struct Work(TempDir);

impl Work {
    fn new() -> Self {
        Work(tempfile::tempdir().unwrap())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn featurize_matches_library() {
    let w = Work::new();
    ok(&["synth", "--n-patients", "15", "--coef", "CK+=1", "--seed", "3", "--out-dir", &w.s("c")]);
    ok(&["featurize", "--cohort-dir", &w.s("c"), "--out", &w.s("f.csv")]);
    let c = w.path("c");
    let cohort = load_cohort(&c.join("nuclei.jsonl"), &c.join("masks"), &c.join("survival.csv")).unwrap();
    assert_eq!(load_features(&w.path("f.csv")).unwrap(), cohort.features(DEFAULT_EXTENT_UM).unwrap());
    assert!(w.path("f.csv.manifest.json").exists());
    let truth = read_json(&c.join("truth.json"));
    assert!(truth.is_object() || truth.is_array());
}

fn keypoint_pair(w: &Work, t: &RigidTransform, n: usize, scramble: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let src: Vec<Keypoint> = (0..n)
        .map(|_| Keypoint {
            position_um: Point2::new(rng.random_range(200.0..1800.0), rng.random_range(200.0..1800.0)),
            descriptor: (0..8).map(|_| rng.random_range(0.0..1.0)).collect(),
        })
        .collect();
    let dst: Vec<Keypoint> = src
        .iter()
        .map(|k| Keypoint {
            position_um: if scramble {
                Point2::new(rng.random_range(0.0..2000.0), rng.random_range(0.0..2000.0))
            } else {
                t.apply(k.position_um)
            },
            descriptor: k.descriptor.clone(),
        })
        .collect();
    save_keypoints(&w.path("src.jsonl"), &src).unwrap();
    save_keypoints(&w.path("ref.jsonl"), &dst).unwrap();
    let pos = Positivity::from_pairs(Panel::Panel2.markers().iter().map(|m| (*m, *m == Marker::Cd4)));
    let nuclei: Vec<NucleusEntry> = (0..5)
        .map(|i| NucleusEntry {
            patient_id: "P1".into(),
            piece: 0,
            record: NucleusRecord::new(i, Point2::new(500.0 + 10.0 * i as f64, 700.0), Panel::Panel2, pos.clone()).unwrap(),
        })
        .collect();
    save_nuclei(&w.path("nuclei.jsonl"), &nuclei).unwrap();
}

fn register(w: &Work, extra: &[&str]) -> Output {
    let mut args = vec![
        "register".to_string(), "--keypoints-src".into(), w.s("src.jsonl"), "--keypoints-ref".into(), w.s("ref.jsonl"),
        "--nuclei".into(), w.s("nuclei.jsonl"), "--out".into(), w.s("reg"),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    time_drs(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn register_recovers_planted_motion() {
    for t in [RigidTransform::IDENTITY, RigidTransform::new(0.3, 40.0, -25.0)] {
        let w = Work::new();
        keypoint_pair(&w, &t, 60, false);
        let out = register(&w, &[]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let got = read_json(&w.path("reg/transform.json"));
        assert!((got["rotation_rad"].as_f64().unwrap() - t.rotation_rad).abs() < 1e-9);
        assert!((got["translation_um"][0].as_f64().unwrap() - t.translation_um.x).abs() < 1e-6);
        let moved = load_nuclei(&w.path("reg/nuclei.jsonl")).unwrap();
        let orig = load_nuclei(&w.path("nuclei.jsonl")).unwrap();
        for (m, o) in moved.iter().zip(&orig) {
            assert!(m.record.centroid_um.distance(t.apply(o.record.centroid_um)) < 1e-6);
        }
        assert_eq!(read_json(&w.path("reg/quality.json"))["inliers"], 60);
        assert!(w.path("reg/manifest.json").exists());
    }
}

#[test]
fn registration_failure_exits_two() {
    let w = Work::new();
    keypoint_pair(&w, &RigidTransform::IDENTITY, 40, true);
    let out = register(&w, &["--min-inliers", "30", "--threshold-um", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_names_the_path() {
    let w = Work::new();
    let out = time_drs(&["featurize", "--cohort-dir", &w.s("nowhere"), "--out", &w.s("f.csv")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
    assert_eq!(time_drs(&["no-such-command"]).status.code(), Some(1));
}

fn protocol_inputs(w: &Work, n: &str) {
    ok(&["synth", "--n-patients", n, "--coef", "CK+=1", "--coef", "CD8+=-1", "--seed", "1", "--out-dir", &w.s("a1")]);
    ok(&["synth", "--n-patients", n, "--coef", "CK+=1", "--coef", "CD8+=-1", "--seed", "2", "--arm", "ARM3", "--out-dir", &w.s("a3")]);
    ok(&["featurize", "--cohort-dir", &w.s("a1"), "--out", &w.s("f1.csv")]);
    ok(&["featurize", "--cohort-dir", &w.s("a3"), "--out", &w.s("f3.csv")]);
}

fn run_protocol(w: &Work, out: &str, splits: &str, points: &str) {
    ok(&[
        "run-protocol", "--features", &w.s("f1.csv"), "--features", &w.s("f3.csv"), "--survival", &w.s("a1/survival.csv"),
        "--survival", &w.s("a3/survival.csv"), "--arm", "ARM1", "--endpoint", "PFS", "--splits", splits, "--search-points", points,
        "--seed", "9", "--out-dir", &w.s(out),
    ]);
}

#[test]
fn protocol_is_deterministic_and_complete() {
    let w = Work::new();
    protocol_inputs(&w, "40");
    run_protocol(&w, "r1", "5", "4");
    run_protocol(&w, "r2", "5", "4");
    for f in ["drs.csv", "models.json", "shap.csv"] {
        assert_eq!(std::fs::read(w.path("r1").join(f)).unwrap(), std::fs::read(w.path("r2").join(f)).unwrap(), "{f}");
    }
    for f in ["km_intra_arm.svg", "km_cross_arm.svg", "stratification.json", "shap_summary.json", "manifest.json"] {
        assert!(w.path("r1").join(f).exists(), "{f}");
    }
    let drs = std::fs::read_to_string(w.path("r1/drs.csv")).unwrap();
    assert_eq!(drs.lines().next(), Some("patient_id,drs,source,group"));
    assert_eq!(drs.lines().filter(|l| l.contains("intra_arm")).count(), 40);
    assert_eq!(drs.lines().filter(|l| l.contains("cross_arm")).count(), 40);

    ok(&["score", "--models", &w.s("r1/models.json"), "--features", &w.s("f3.csv"), "--out", &w.s("scored.csv")]);
    let scored = std::fs::read_to_string(w.path("scored.csv")).unwrap();
    let cross: Vec<&str> = drs.lines().filter(|l| l.contains("cross_arm")).collect();
    assert_eq!(scored.lines().skip(1).collect::<Vec<_>>(), cross);

    ok(&["report", "--drs", &w.s("r1/drs.csv"), "--survival", &w.s("a1/survival.csv"), "--survival", &w.s("a3/survival.csv"),
        "--features", &w.s("f1.csv"), "--features", &w.s("f3.csv"), "--out-dir", &w.s("rep")]);
    for f in ["km_intra_arm_pfs.svg", "km_cross_arm_os.svg", "tests.json", "comparison.csv"] {
        assert!(w.path("rep").join(f).exists(), "{f}");
    }
}

#[test]
fn single_split_runs() {
    let w = Work::new();
    protocol_inputs(&w, "30");
    run_protocol(&w, "r", "1", "2");
    let models = read_json(&w.path("r/models.json"));
    assert_eq!(models["models"].as_array().unwrap().len(), 1);
}

#[test]
fn desk_run_stratifies_planted_cohort() {
    let w = Work::new();
    protocol_inputs(&w, "120");
    run_protocol(&w, "r", "5", "24");
    let strata = read_json(&w.path("r/stratification.json"));
    let p = strata[0]["log_rank"]["p_value"].as_f64().unwrap();
    assert!(p < 0.05, "intra-arm p = {p}");
}

#[test]
fn identical_groups_report_unit_p() {
    let w = Work::new();
    let mut surv = Vec::new();
    let mut drs = String::from("patient_id,drs,source,group\n");
    for (i, (t, e)) in [(3.0, true), (5.0, false), (8.0, true)].iter().enumerate() {
        for (g, label) in [("H", "HighRisk"), ("L", "LowRisk")] {
            let id = format!("{g}{i}");
            surv.push(SurvivalRecord::new(&id, Arm::Arm1, Endpoint::Pfs, *t, *e).unwrap());
            drs.push_str(&format!("{id},0.5,intra_arm,{label}\n"));
        }
    }
    save_survival(&w.path("s.csv"), &surv).unwrap();
    std::fs::write(w.path("drs.csv"), drs).unwrap();
    ok(&["report", "--drs", &w.s("drs.csv"), "--survival", &w.s("s.csv"), "--out-dir", &w.s("rep")]);
    let svg = std::fs::read_to_string(w.path("rep/km_intra_arm_pfs.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert_eq!(svg.matches("class=\"km-step\"").count(), 2);
    assert!(svg.contains("log-rank p = 1.0000"), "{svg}");
}

#[test]
fn evaluate_reports_detection_and_dice() {
    let w = Work::new();
    std::fs::write(w.path("pred.csv"), "x_um,y_um\n0,0\n10,10\n").unwrap();
    std::fs::write(w.path("truth.csv"), "x_um,y_um\n1,0\n30,30\n").unwrap();
    ok(&["evaluate", "--predicted", &w.s("pred.csv"), "--truth", &w.s("truth.csv"), "--out", &w.s("eval.json")]);
    let rep = read_json(&w.path("eval.json"));
    assert_eq!(rep["detection"]["true_positive"], 1);
    assert_eq!(rep["detection"]["false_positive"], 1);
    assert_eq!(rep["detection"]["false_negative"], 1);
}
