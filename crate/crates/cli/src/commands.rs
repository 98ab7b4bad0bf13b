use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;
use time_drs::data::{
    generate_synthetic_cohort, load_cohort, load_features, load_mask, load_nuclei, load_survival, patient_features,
    save_cohort, save_features, save_nuclei, write_atomic, Endpoint, FeatureVector, NucleusEntry, SurvivalRecord,
    SyntheticCohortSpec, COHORT_MASKS_DIR, COHORT_NUCLEI_FILE, COHORT_SURVIVAL_FILE,
};
use time_drs::gbm::FeatureMatrix;
use time_drs::metrics::{detection_f1, dice};
use time_drs::phenotype::{Phenotype, N_PHENOTYPES};
use time_drs::protocol::{run_cross_arm, run_protocol as protocol, Dataset, DrsResult, DrsSource, ProtocolConfig, RiskGroup};
use time_drs::registration::{
    apply_transform, estimate_rigid, load_keypoints, match_keypoints, registration_quality, RansacConfig, Raster,
};
use time_drs::shap::{shap_summary, shap_values, ShapRow};
use time_drs::stats::{log_rank, logistic_separability, mann_whitney_u, students_t, TestResult};

use crate::files::{drs_csv, load_centroids, load_drs, ModelBundle};
use crate::manifest::{now_unix, RunManifest};
use crate::plot::{km_csv, km_svg, KmSeries};
use crate::{EvaluateArgs, FeaturizeArgs, RegisterArgs, ReportArgs, RunProtocolArgs, ScoreArgs, SynthArgs};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    write_atomic(path, contents.as_ref())?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

/// Manifest path for a single-file output: `<out>.manifest.json`.
fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn warn(msg: impl std::fmt::Display) {
    eprintln!("warning: {msg}");
}

pub fn register(args: &RegisterArgs) -> Result<()> {
    let started = now_unix();
    let src = load_keypoints(&args.keypoints_src)?;
    let reference = load_keypoints(&args.keypoints_ref)?;
    let nuclei = load_nuclei(&args.nuclei)?;
    let cfg = RansacConfig {
        inlier_threshold_um: args.threshold_um,
        max_iterations: args.max_iterations,
        min_inliers: args.min_inliers,
        rng_seed: args.seed,
    };
    cfg.validate()?;
    let matches = match_keypoints(&src, &reference)?;
    let pairs: Vec<_> = matches.iter().map(|&(i, j)| (src[i].position_um, reference[j].position_um)).collect();
    let (transform, inliers) = estimate_rigid(&pairs, &cfg)?;

    let moved_records = apply_transform(&transform, &nuclei.iter().map(|e| e.record.clone()).collect::<Vec<_>>());
    let moved: Vec<NucleusEntry> = nuclei
        .iter()
        .zip(moved_records)
        .map(|(e, record)| NucleusEntry { patient_id: e.patient_id.clone(), piece: e.piece, record })
        .collect();

    let residuals: Vec<f64> = pairs
        .iter()
        .zip(&inliers)
        .filter(|(_, &ok)| ok)
        .map(|((s, r), _)| transform.apply(*s).distance(*r))
        .collect();
    let rms = (residuals.iter().map(|d| d * d).sum::<f64>() / residuals.len().max(1) as f64).sqrt();
    let mut quality = json!({
        "matches": pairs.len(),
        "inliers": residuals.len(),
        "inlier_fraction": residuals.len() as f64 / pairs.len().max(1) as f64,
        "rms_residual_um": rms,
    });
    if let (Some(si), Some(ri)) = (&args.src_image, &args.ref_image) {
        let moved_img = Raster::load_pgm(si)?.warp(&transform, args.image_pixel_um);
        let q = registration_quality(&Raster::load_pgm(ri)?, &moved_img)?;
        quality["ssim"] = json!(q.ssim);
        quality["pcc"] = json!(q.pcc);
    }

    write_json(
        &args.out.join("transform.json"),
        &json!({
            "rotation_rad": transform.rotation_rad,
            "rotation_deg": transform.rotation_rad.to_degrees(),
            "translation_um": [transform.translation_um.x, transform.translation_um.y],
        }),
    )?;
    save_nuclei(&args.out.join("nuclei.jsonl"), &moved)?;
    write_json(&args.out.join("quality.json"), &quality)?;

    let mut manifest = RunManifest::new("register", args, Some(args.seed), started)?;
    for p in [&args.keypoints_src, &args.keypoints_ref, &args.nuclei] {
        manifest.add_input(p)?;
    }
    for p in args.src_image.iter().chain(&args.ref_image) {
        manifest.add_input(p)?;
    }
    manifest.write(&args.out.join("manifest.json"))
}

pub fn featurize(args: &FeaturizeArgs) -> Result<()> {
    let started = now_unix();
    let dir = &args.cohort_dir;
    let cohort = load_cohort(
        &dir.join(COHORT_NUCLEI_FILE),
        &dir.join(COHORT_MASKS_DIR),
        &dir.join(COHORT_SURVIVAL_FILE),
    )?;
    for r in &cohort.rejections {
        warn(format!("patient {} excluded: {}", r.patient_id, r.reasons.join("; ")));
    }
    let mut rows = Vec::new();
    for p in &cohort.patients {
        match patient_features(p, args.extent_um) {
            Ok(f) => rows.push(f),
            Err(e @ time_drs::Error::EmptyRegion(_)) => warn(format!("patient {} omitted: {e}", p.patient_id)),
            Err(e) => return Err(e.into()),
        }
    }
    save_features(&args.out, &rows)?;
    let mut manifest = RunManifest::new("featurize", args, None, started)?;
    manifest.add_input(dir)?;
    manifest.details = Some(json!({
        "patients_written": rows.len(),
        "rejections": cohort.rejections,
    }));
    manifest.write(&sibling_manifest(&args.out))
}

fn load_all_features(paths: &[PathBuf]) -> Result<Vec<FeatureVector>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for p in paths {
        for f in load_features(p)? {
            if !seen.insert(f.patient_id.clone()) {
                bail!("patient {} appears in more than one feature row", f.patient_id);
            }
            out.push(f);
        }
    }
    Ok(out)
}

fn load_all_survival(paths: &[PathBuf]) -> Result<Vec<SurvivalRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for p in paths {
        for r in load_survival(p)? {
            if !seen.insert((r.patient_id.clone(), r.endpoint)) {
                bail!("patient {} has more than one {} record", r.patient_id, r.endpoint);
            }
            out.push(r);
        }
    }
    Ok(out)
}

fn split_groups<'a>(rows: impl Iterator<Item = (RiskGroup, &'a SurvivalRecord)>) -> (Vec<SurvivalRecord>, Vec<SurvivalRecord>) {
    let (mut high, mut low) = (Vec::new(), Vec::new());
    for (g, r) in rows {
        match g {
            RiskGroup::HighRisk => high.push(r.clone()),
            RiskGroup::LowRisk => low.push(r.clone()),
        }
    }
    (high, low)
}

#[derive(Serialize)]
struct Stratification {
    source: String,
    endpoint: Endpoint,
    censor_at_months: f64,
    n_high: usize,
    n_low: usize,
    median_high: Option<f64>,
    median_low: Option<f64>,
    log_rank: Option<TestResult>,
    note: Option<String>,
}

/// KM curves and log-rank test of High vs Low risk; writes `<stem>.svg/.csv`.
fn stratify_and_plot(
    out_dir: &Path,
    stem: &str,
    source: &str,
    endpoint: Endpoint,
    censor_at: f64,
    high: &[SurvivalRecord],
    low: &[SurvivalRecord],
) -> Result<Stratification> {
    let mut series = Vec::new();
    if !high.is_empty() {
        series.push(KmSeries::new("High Risk", high, Some(censor_at))?);
    }
    if !low.is_empty() {
        series.push(KmSeries::new("Low Risk", low, Some(censor_at))?);
    }
    let (test, note) = if high.is_empty() || low.is_empty() {
        (None, Some("one risk group is empty".to_string()))
    } else {
        match log_rank(high, low, Some(censor_at)) {
            Ok(t) => (Some(t), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    let title = format!("{source} {endpoint} (censored at {censor_at} months)");
    write(&out_dir.join(format!("{stem}.svg")), km_svg(&title, &series, test.as_ref().map(|t| t.p_value)))?;
    write(&out_dir.join(format!("{stem}.csv")), km_csv(&series))?;
    let median = |label: &str| series.iter().find(|s| s.label == label).and_then(|s| s.curve.median());
    Ok(Stratification {
        source: source.to_string(),
        endpoint,
        censor_at_months: censor_at,
        n_high: high.len(),
        n_low: low.len(),
        median_high: median("High Risk"),
        median_low: median("Low Risk"),
        log_rank: test,
        note,
    })
}

fn phenotype_names() -> Vec<String> {
    Phenotype::ALL[..N_PHENOTYPES].iter().map(|p| p.name().to_string()).collect()
}

/// SHAP rows of the all-model mean prediction (attributions are linear in the model).
fn ensemble_shap(bundle_models: &[&time_drs::gbm::TreeEnsemble], ids: &[String], x: &FeatureMatrix) -> Result<Vec<ShapRow>> {
    let mut acc: Option<Vec<ShapRow>> = None;
    for m in bundle_models {
        let rows = shap_values(m, ids, x)?;
        acc = Some(match acc {
            None => rows,
            Some(mut a) => {
                for (r, s) in a.iter_mut().zip(rows) {
                    r.base_value += s.base_value;
                    for (p, q) in r.phi.iter_mut().zip(s.phi) {
                        *p += q;
                    }
                }
                a
            }
        });
    }
    let k = bundle_models.len() as f64;
    let mut rows = acc.unwrap_or_default();
    for r in rows.iter_mut() {
        r.base_value /= k;
        r.phi.iter_mut().for_each(|p| *p /= k);
    }
    Ok(rows)
}

fn shap_csv(summary: &time_drs::shap::ShapSummary, names: &[String]) -> String {
    let mut out = String::from("patient_id,feature,feature_value,feature_percentile,phi\n");
    for p in &summary.points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.patient_id, names[p.feature], p.feature_value, p.feature_percentile, p.phi
        ));
    }
    out
}

pub fn run_protocol(args: &RunProtocolArgs) -> Result<()> {
    let started = now_unix();
    let features = load_all_features(&args.features)?;
    let survival = load_all_survival(&args.survival)?;
    let records: HashMap<&str, &SurvivalRecord> = survival
        .iter()
        .filter(|r| r.endpoint == args.endpoint)
        .map(|r| (r.patient_id.as_str(), r))
        .collect();
    let (mut discovery, mut external) = (Vec::new(), Vec::new());
    for f in &features {
        match records.get(f.patient_id.as_str()) {
            Some(r) if r.arm == args.arm => discovery.push(f.clone()),
            Some(_) => external.push(f.clone()),
            None => warn(format!("patient {} has no {} record and is skipped", f.patient_id, args.endpoint)),
        }
    }
    let endpoint_records: Vec<SurvivalRecord> = records.values().map(|r| (*r).clone()).collect();
    let data = Dataset::new(&discovery, &endpoint_records)?;
    let cfg = ProtocolConfig {
        n_splits: args.splits,
        search_points: args.search_points,
        master_seed: args.seed,
        ..ProtocolConfig::default()
    };
    let run = protocol(&data, &cfg)?;
    let models = run.discovery.ensembles();
    let threshold = run.discovery.threshold;
    let cross = run_cross_arm(&models, &external, threshold)?;

    let out = &args.out_dir;
    let all: Vec<DrsResult> = run.discovery.intra_arm.iter().chain(&cross).cloned().collect();
    write(&out.join("drs.csv"), drs_csv(&all))?;
    let bundle = ModelBundle {
        arm: args.arm,
        endpoint: args.endpoint,
        threshold,
        selected_config: run.search.best.clone(),
        models: models.iter().map(|m| (*m).clone()).collect(),
    };
    write_json(&out.join("models.json"), &bundle)?;

    let censor_at = args.censor_months.unwrap_or(args.endpoint.default_censor_months());
    let mut strata = Vec::new();
    for (source, rows) in [("intra_arm", &run.discovery.intra_arm), ("cross_arm", &cross)] {
        if rows.is_empty() {
            continue;
        }
        let (high, low) = split_groups(rows.iter().map(|r| (r.group, records[r.patient_id.as_str()])));
        strata.push(stratify_and_plot(out, &format!("km_{source}"), source, args.endpoint, censor_at, &high, &low)?);
    }
    write_json(&out.join("stratification.json"), &strata)?;

    let population: Vec<FeatureVector> = discovery.iter().chain(&external).cloned().collect();
    let ids: Vec<String> = population.iter().map(|f| f.patient_id.clone()).collect();
    let x = FeatureMatrix::from_rows(&population.iter().map(|f| f.values.to_vec()).collect::<Vec<_>>())?;
    let names = phenotype_names();
    let shap_rows = ensemble_shap(&models, &ids, &x)?;
    let summary = shap_summary(&shap_rows, &x, &names)?;
    write(&out.join("shap.csv"), shap_csv(&summary, &names))?;
    write_json(&out.join("shap_summary.json"), &json!({ "ranking": summary.ranking, "base_value": shap_rows[0].base_value }))?;

    let mut manifest = RunManifest::new("run-protocol", args, Some(args.seed), started)?;
    for p in args.features.iter().chain(&args.survival) {
        manifest.add_input(p)?;
    }
    manifest.details = Some(json!({
        "seeds": {
            "splits": args.seed,
            "search": args.seed,
            "refit": format!("{} + split_id", args.seed),
        },
        "discovery_patients": data.len(),
        "cross_arm_patients": external.len(),
        "search_best_index": run.search.best_index,
        "search_best_mean_validation_c_index": run.search.scores[run.search.best_index],
        "selected_config": run.search.best,
        "threshold": threshold,
        "splits": run.discovery.models.iter().zip(&run.plans).map(|(m, p)| json!({
            "split_id": m.split_id,
            "n_train": p.train.len(),
            "n_validation": p.validation.len(),
            "n_test": p.test.len(),
            "validation_median_drs": m.validation_median,
            "validation_c_index": m.validation_c_index,
            "test_c_index": m.test_c_index,
        })).collect::<Vec<_>>(),
    }));
    manifest.write(&out.join("manifest.json"))
}

pub fn score(args: &ScoreArgs) -> Result<()> {
    let started = now_unix();
    let bundle = ModelBundle::load(&args.models)?;
    let features = load_all_features(&args.features)?;
    let models: Vec<_> = bundle.models.iter().collect();
    let rows = run_cross_arm(&models, &features, bundle.threshold)?;
    write(&args.out, drs_csv(&rows))?;
    let mut manifest = RunManifest::new("score", args, None, started)?;
    manifest.add_input(&args.models)?;
    for p in &args.features {
        manifest.add_input(p)?;
    }
    manifest.write(&sibling_manifest(&args.out))
}

#[derive(Serialize)]
struct ComparisonRow {
    source: String,
    phenotype: String,
    n_high: usize,
    n_low: usize,
    mann_whitney: Option<TestResult>,
    welch_t: Option<TestResult>,
    logistic: Option<TestResult>,
    logistic_separated: Option<bool>,
}

fn opt_p(t: &Option<TestResult>) -> String {
    t.as_ref().map_or(String::new(), |t| t.p_value.to_string())
}

fn opt_stat(t: &Option<TestResult>) -> String {
    t.as_ref().map_or(String::new(), |t| t.statistic.to_string())
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let started = now_unix();
    let drs = load_drs(&args.drs)?;
    let survival = load_all_survival(&args.survival)?;
    let out = &args.out_dir;
    let mut strata = Vec::new();
    for source in [DrsSource::IntraArm, DrsSource::CrossArm] {
        let rows: Vec<_> = drs.iter().filter(|r| r.source == source).collect();
        if rows.is_empty() {
            continue;
        }
        for endpoint in [Endpoint::Pfs, Endpoint::Os] {
            let by_id: HashMap<&str, &SurvivalRecord> = survival
                .iter()
                .filter(|r| r.endpoint == endpoint)
                .map(|r| (r.patient_id.as_str(), r))
                .collect();
            let matched: Vec<_> = rows.iter().filter_map(|r| by_id.get(r.patient_id.as_str()).map(|s| (r.group, *s))).collect();
            if matched.is_empty() {
                continue;
            }
            if matched.len() < rows.len() {
                warn(format!("{} of {} {} patients lack a {endpoint} record", rows.len() - matched.len(), rows.len(), source.as_str()));
            }
            let censor_at = match endpoint {
                Endpoint::Pfs => args.censor_pfs,
                Endpoint::Os => args.censor_os,
            };
            let (high, low) = split_groups(matched.into_iter());
            let stem = format!("km_{}_{}", source.as_str(), endpoint.to_string().to_lowercase());
            strata.push(stratify_and_plot(out, &stem, source.as_str(), endpoint, censor_at, &high, &low)?);
        }
    }
    if strata.is_empty() {
        bail!("no DRS patient in {} has a survival record", args.drs.display());
    }
    write_json(&out.join("tests.json"), &strata)?;

    if !args.features.is_empty() {
        let features = load_all_features(&args.features)?;
        let by_id: HashMap<&str, &FeatureVector> = features.iter().map(|f| (f.patient_id.as_str(), f)).collect();
        let names = phenotype_names();
        let mut table = Vec::new();
        for source in [DrsSource::IntraArm, DrsSource::CrossArm] {
            let rows: Vec<_> = drs
                .iter()
                .filter(|r| r.source == source)
                .filter_map(|r| by_id.get(r.patient_id.as_str()).map(|f| (r.group, *f)))
                .collect();
            if rows.is_empty() {
                continue;
            }
            for (k, name) in names.iter().enumerate() {
                let high: Vec<f64> = rows.iter().filter(|r| r.0 == RiskGroup::HighRisk).map(|r| r.1.values[k]).collect();
                let low: Vec<f64> = rows.iter().filter(|r| r.0 == RiskGroup::LowRisk).map(|r| r.1.values[k]).collect();
                let values: Vec<f64> = rows.iter().map(|r| r.1.values[k]).collect();
                let labels: Vec<bool> = rows.iter().map(|r| r.0 == RiskGroup::HighRisk).collect();
                let logistic = logistic_separability(&values, &labels).ok();
                table.push(ComparisonRow {
                    source: source.as_str().to_string(),
                    phenotype: name.clone(),
                    n_high: high.len(),
                    n_low: low.len(),
                    mann_whitney: mann_whitney_u(&high, &low).ok(),
                    welch_t: students_t(&high, &low).ok(),
                    logistic_separated: logistic.as_ref().map(|l| l.separated),
                    logistic: logistic.map(|l| l.test),
                });
            }
        }
        let mut csv = String::from(
            "source,phenotype,n_high,n_low,mann_whitney_u,mann_whitney_p,welch_t,welch_p,logistic_lrt,logistic_p,logistic_separated\n",
        );
        for r in &table {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.source,
                r.phenotype,
                r.n_high,
                r.n_low,
                opt_stat(&r.mann_whitney),
                opt_p(&r.mann_whitney),
                opt_stat(&r.welch_t),
                opt_p(&r.welch_t),
                opt_stat(&r.logistic),
                opt_p(&r.logistic),
                r.logistic_separated.map_or(String::new(), |s| s.to_string()),
            ));
        }
        write(&out.join("comparison.csv"), csv)?;
        write_json(&out.join("comparison.json"), &table)?;
    }

    let mut manifest = RunManifest::new("report", args, None, started)?;
    manifest.add_input(&args.drs)?;
    for p in args.survival.iter().chain(&args.features) {
        manifest.add_input(p)?;
    }
    manifest.write(&out.join("manifest.json"))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let started = now_unix();
    let mut result = BTreeMap::new();
    let mut manifest = RunManifest::new("evaluate", args, None, started)?;
    if let (Some(p), Some(t)) = (&args.predicted, &args.truth) {
        let report = detection_f1(&load_centroids(p)?, &load_centroids(t)?, args.gate_um)?;
        result.insert("detection", serde_json::to_value(report)?);
        manifest.add_input(p)?;
        manifest.add_input(t)?;
    }
    if let (Some(a), Some(b)) = (&args.mask_pred, &args.mask_truth) {
        result.insert("dice", json!(dice(&load_mask(a)?, &load_mask(b)?)?));
        manifest.add_input(a)?;
        manifest.add_input(b)?;
    }
    if result.is_empty() {
        bail!("nothing to evaluate: give --predicted/--truth and/or --mask-pred/--mask-truth");
    }
    write_json(&args.out, &result)?;
    manifest.write(&sibling_manifest(&args.out))
}

fn parse_coefficients(specs: &[String]) -> Result<[f64; N_PHENOTYPES]> {
    let mut coef = [0.0; N_PHENOTYPES];
    for s in specs {
        let (name, value) = s.split_once('=').with_context(|| format!("coefficient {s:?} is not NAME=VALUE"))?;
        let idx = Phenotype::from_name(name.trim())
            .and_then(Phenotype::index)
            .with_context(|| format!("unknown phenotype {name:?}"))?;
        coef[idx] = value.trim().parse().with_context(|| format!("coefficient value {value:?} is not a number"))?;
    }
    Ok(coef)
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let started = now_unix();
    let spec = SyntheticCohortSpec {
        n_patients: args.n_patients,
        planted_coefficients: parse_coefficients(&args.coefficients)?,
        censoring_rate: args.censoring_rate,
        baseline_hazard: args.baseline_hazard,
        rng_seed: args.seed,
        arm: args.arm,
    };
    let (cohort, truth) = generate_synthetic_cohort(&spec)?;
    save_cohort(&args.out_dir, &cohort)?;
    write_json(
        &args.out_dir.join("truth.json"),
        &json!({
            "planted_coefficients": spec.planted_coefficients,
            "patient_ids": truth.patient_ids,
            "log_hazard": truth.log_hazard,
        }),
    )?;
    let manifest = RunManifest::new("synth", args, Some(args.seed), started)?;
    manifest.write(&args.out_dir.join("manifest.json"))
}
