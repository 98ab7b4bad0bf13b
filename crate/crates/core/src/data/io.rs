//! File formats: nuclei JSON-lines, PGM tumour masks with JSON sidecars,
//! survival CSV and feature CSV.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    Arm, Cohort, Endpoint, FeatureVector, NucleusRecord, Panel, PatientSlides, Point2,
    Positivity, RegionMask, Rejection, SurvivalRecord, TissuePiece,
};
use crate::error::{Error, Result};
use crate::phenotype::{Phenotype, N_PHENOTYPES};

pub const COHORT_NUCLEI_FILE: &str = "nuclei.jsonl";
pub const COHORT_MASKS_DIR: &str = "masks";
pub const COHORT_SURVIVAL_FILE: &str = "survival.csv";

const SURVIVAL_HEADER: [&str; 5] = ["patient_id", "arm", "endpoint", "time_months", "event"];

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn file_label(path: &Path) -> String {
    path.display().to_string()
}

#[derive(Serialize, Deserialize)]
struct NucleusRow {
    patient: String,
    #[serde(default, skip_serializing_if = "is_zero")]
    piece: u32,
    panel: Panel,
    x_um: f64,
    y_um: f64,
    pos: Positivity,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

/// A nucleus row as stored on disk: owning patient, tissue piece, record.
#[derive(Clone, Debug, PartialEq)]
pub struct NucleusEntry {
    pub patient_id: String,
    pub piece: u32,
    pub record: NucleusRecord,
}

/// Read nuclei JSON-lines. Record ids are the 0-based line index.
pub fn load_nuclei(path: &Path) -> Result<Vec<NucleusEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: NucleusRow = serde_json::from_str(&line)
            .map_err(|e| Error::parse(file_label(path), idx + 1, e.to_string()))?;
        let record = NucleusRecord::new(idx as u64, Point2::new(row.x_um, row.y_um), row.panel, row.pos)
            .map_err(|e| Error::parse(file_label(path), idx + 1, e.to_string()))?;
        out.push(NucleusEntry {
            patient_id: row.patient,
            piece: row.piece,
            record,
        });
    }
    Ok(out)
}

pub fn save_nuclei(path: &Path, entries: &[NucleusEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        let row = NucleusRow {
            patient: e.patient_id.clone(),
            piece: e.piece,
            panel: e.record.panel,
            x_um: e.record.centroid_um.x,
            y_um: e.record.centroid_um.y,
            pos: e.record.positivity.clone(),
        };
        serde_json::to_writer(&mut buf, &row).expect("nucleus rows serialize");
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

#[derive(Serialize, Deserialize)]
struct MaskSidecar {
    pixel_size_um: f64,
    origin_um: [f64; 2],
}

fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

/// Read a binary PGM mask (non-zero = foreground) and its JSON sidecar.
pub fn load_mask(pgm: &Path) -> Result<RegionMask> {
    let img = image::open(pgm)
        .map_err(|e| Error::parse(file_label(pgm), 1, e.to_string()))?
        .into_luma8();
    let side = sidecar_path(pgm);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: MaskSidecar = serde_json::from_str(&text)
        .map_err(|e| Error::parse(file_label(&side), e.line(), e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let grid = img.pixels().map(|p| p.0[0] != 0).collect();
    RegionMask::new(w, h, grid, meta.pixel_size_um, Point2::new(meta.origin_um[0], meta.origin_um[1]))
}

pub fn save_mask(pgm: &Path, mask: &RegionMask) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    bytes.extend(mask.grid().iter().map(|&b| if b { 255u8 } else { 0 }));
    write_atomic(pgm, &bytes)?;
    let meta = MaskSidecar {
        pixel_size_um: mask.pixel_size_um(),
        origin_um: [mask.origin_um().x, mask.origin_um().y],
    };
    write_atomic(
        &sidecar_path(pgm),
        serde_json::to_string(&meta).expect("sidecar serializes").as_bytes(),
    )
}

fn parse_event(s: &str) -> Option<bool> {
    match s {
        "1" | "true" | "TRUE" | "True" => Some(true),
        "0" | "false" | "FALSE" | "False" => Some(false),
        _ => None,
    }
}

/// Read the survival CSV. Duplicate (patient, endpoint) pairs are a conflict.
pub fn load_survival(path: &Path) -> Result<Vec<SurvivalRecord>> {
    let label = file_label(path);
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != SURVIVAL_HEADER {
        return Err(Error::parse(label, 1, format!("expected header {}", SURVIVAL_HEADER.join(","))));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |m: String| Error::parse(label.clone(), line, m);
        let arm: Arm = row[1].parse().map_err(|e: Error| bad(e.to_string()))?;
        let endpoint: Endpoint = row[2].parse().map_err(|e: Error| bad(e.to_string()))?;
        let time: f64 = row[3]
            .parse()
            .map_err(|_| bad(format!("time_months {:?} is not a number", &row[3])))?;
        let event = parse_event(&row[4]).ok_or_else(|| bad(format!("event {:?} is not 0/1", &row[4])))?;
        let rec = SurvivalRecord::new(&row[0], arm, endpoint, time, event).map_err(|e| bad(e.to_string()))?;
        if !seen.insert((rec.patient_id.clone(), endpoint)) {
            return Err(Error::Conflict(format!(
                "{label}:{line}: duplicate record for patient {} endpoint {endpoint}",
                rec.patient_id
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::parse(file_label(path), line, e.to_string())
}

pub fn save_survival(path: &Path, records: &[SurvivalRecord]) -> Result<()> {
    let mut s = SURVIVAL_HEADER.join(",");
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.patient_id,
            r.arm,
            r.endpoint,
            r.time_months,
            u8::from(r.event)
        ));
    }
    write_atomic(path, s.as_bytes())
}

fn features_header() -> String {
    std::iter::once("patient_id")
        .chain(Phenotype::ALL.iter().map(|p| p.name()))
        .collect::<Vec<_>>()
        .join(",")
}

/// Write features as CSV with shortest round-trip decimal formatting.
pub fn save_features(path: &Path, features: &[FeatureVector]) -> Result<()> {
    let mut s = features_header();
    s.push('\n');
    for fv in features {
        fv.validate()?;
        s.push_str(&fv.patient_id);
        for v in fv.values {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureVector>> {
    let label = file_label(path);
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().collect::<Vec<_>>().join(",") != features_header() {
        return Err(Error::parse(label, 1, "feature header must be patient_id followed by the 14 phenotypes"));
    }
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let mut values = [0.0; N_PHENOTYPES];
        for (i, v) in values.iter_mut().enumerate() {
            *v = row[i + 1]
                .parse()
                .map_err(|_| Error::parse(label.clone(), line, format!("bad value {:?}", &row[i + 1])))?;
        }
        let fv = FeatureVector::new(&row[0], values).map_err(|e| Error::parse(label.clone(), line, e.to_string()))?;
        if !seen.insert(fv.patient_id.clone()) {
            return Err(Error::Conflict(format!("{label}:{line}: duplicate patient {}", fv.patient_id)));
        }
        out.push(fv);
    }
    Ok(out)
}

/// Mask file name for a patient piece: `<patient>.pgm` or `<patient>@<piece>.pgm`.
fn mask_file_name(patient: &str, piece: u32) -> String {
    if piece == 0 {
        format!("{patient}.pgm")
    } else {
        format!("{patient}@{piece}.pgm")
    }
}

fn parse_mask_file_name(name: &str) -> Option<(String, u32)> {
    let stem = name.strip_suffix(".pgm")?;
    match stem.rsplit_once('@') {
        Some((patient, piece)) => Some((patient.to_string(), piece.parse().ok()?)),
        None => Some((stem.to_string(), 0)),
    }
}

/// Load a cohort, applying the inclusion rule: every patient needs nuclei from
/// both panels, a tumour mask for each tissue piece, and survival records.
pub fn load_cohort(nuclei_path: &Path, masks_dir: &Path, survival_path: &Path) -> Result<Cohort> {
    let nuclei = load_nuclei(nuclei_path)?;
    let survival = load_survival(survival_path)?;

    let mut masks: BTreeMap<String, BTreeMap<u32, RegionMask>> = BTreeMap::new();
    let mut names: Vec<PathBuf> = fs::read_dir(masks_dir)
        .map_err(|e| Error::io(masks_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    names.sort();
    for path in names {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some((patient, piece)) = parse_mask_file_name(name) {
            masks.entry(patient).or_default().insert(piece, load_mask(&path)?);
        }
    }

    let mut by_patient: BTreeMap<String, BTreeMap<u32, Vec<NucleusRecord>>> = BTreeMap::new();
    for e in nuclei {
        by_patient
            .entry(e.patient_id)
            .or_default()
            .entry(e.piece)
            .or_default()
            .push(e.record);
    }

    let mut all_ids: BTreeSet<String> = by_patient.keys().cloned().collect();
    all_ids.extend(masks.keys().cloned());
    all_ids.extend(survival.iter().map(|s| s.patient_id.clone()));

    let mut cohort = Cohort::default();
    for id in all_ids {
        let mut reasons = Vec::new();
        let pieces = by_patient.remove(&id).unwrap_or_default();
        let has_panel = |panel: Panel| pieces.values().flatten().any(|n| n.panel == panel);
        if !has_panel(Panel::Panel1) {
            reasons.push("no Panel 1 nuclei".to_string());
        }
        if !has_panel(Panel::Panel2) {
            reasons.push("no Panel 2 nuclei".to_string());
        }
        let mut patient_masks = masks.remove(&id).unwrap_or_default();
        if patient_masks.is_empty() {
            reasons.push("no tumour mask".to_string());
        }
        for piece in pieces.keys() {
            if !patient_masks.is_empty() && !patient_masks.contains_key(piece) {
                reasons.push(format!("tissue piece {piece} has no tumour mask"));
            }
        }
        if !survival.iter().any(|s| s.patient_id == id) {
            reasons.push("no survival records".to_string());
        }
        if !reasons.is_empty() {
            cohort.rejections.push(Rejection {
                patient_id: id,
                reasons,
            });
            continue;
        }
        let mut pieces = pieces;
        let slides = PatientSlides {
            patient_id: id.clone(),
            pieces: std::mem::take(&mut patient_masks)
                .into_iter()
                .map(|(k, tumour)| TissuePiece {
                    nuclei: pieces.remove(&k).unwrap_or_default(),
                    tumour,
                })
                .collect(),
        };
        cohort.patients.push(slides);
        cohort
            .survival
            .extend(survival.iter().filter(|s| s.patient_id == id).cloned());
    }
    Ok(cohort)
}

/// Write a cohort in the directory layout read by [`load_cohort`].
pub fn save_cohort(dir: &Path, cohort: &Cohort) -> Result<()> {
    let mut entries = Vec::new();
    let masks_dir = dir.join(COHORT_MASKS_DIR);
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    for p in &cohort.patients {
        for (k, piece) in p.pieces.iter().enumerate() {
            let k = k as u32;
            save_mask(&masks_dir.join(mask_file_name(&p.patient_id, k)), &piece.tumour)?;
            entries.extend(piece.nuclei.iter().map(|n| NucleusEntry {
                patient_id: p.patient_id.clone(),
                piece: k,
                record: n.clone(),
            }));
        }
    }
    save_nuclei(&dir.join(COHORT_NUCLEI_FILE), &entries)?;
    save_survival(&dir.join(COHORT_SURVIVAL_FILE), &cohort.survival)
}
