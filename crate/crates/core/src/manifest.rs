//! JSON dataset manifest: one entry per breast.
//!
//! ```json
//! [{"patient_id": "p1", "laterality": "L", "label": "malignant", "acr": "b",
//!   "phase": "early",
//!   "images": {"F_CC": "p1_L_fcc.pgm", "F_MLO": "p1_L_fmlo.pgm",
//!              "C_CC": null, "C_MLO": null}}]
//! ```
//!
//! Image paths are relative to the directory holding the manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{
    AcrCategory, BiopsyLabel, Channel, Laterality, Modality, Phase, RecordKey, StudyRecord, View,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<StudyRecord>,
    pub root: PathBuf,
}

#[derive(Deserialize)]
struct RawRecord {
    patient_id: Option<String>,
    laterality: Option<String>,
    label: Option<String>,
    #[serde(default)]
    acr: Option<String>,
    phase: Option<String>,
    images: Option<BTreeMap<String, Option<String>>>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    patient_id: &'a str,
    laterality: &'a str,
    label: &'a str,
    acr: Option<&'a str>,
    phase: Phase,
    images: BTreeMap<String, Option<String>>,
}

/// Loads a manifest and checks that every referenced image exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_with(path, true)
}

/// Like [`load_manifest`]; `resolve_paths = false` skips the file-existence check,
/// which score-table replay uses since it never touches pixels.
pub fn load_manifest_with(path: &Path, resolve_paths: bool) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    parse_manifest(&text, root, resolve_paths)
}

pub fn parse_manifest(text: &str, root: PathBuf, resolve_paths: bool) -> Result<DatasetManifest> {
    let raw: Vec<RawRecord> =
        serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(raw.len());
    for (index, r) in raw.into_iter().enumerate() {
        let record = convert(index, r)?;
        if !seen.insert(record.key()) {
            return Err(Error::DuplicateRecord {
                patient_id: record.patient_id,
                laterality: record.laterality.code().into(),
            });
        }
        if resolve_paths {
            for p in record.images.values() {
                let full = root.join(p);
                if !full.is_file() {
                    return Err(Error::UnresolvablePath {
                        record: record.key().to_string(),
                        path: full,
                    });
                }
            }
        }
        records.push(record);
    }
    Ok(DatasetManifest { records, root })
}

fn convert(index: usize, r: RawRecord) -> Result<StudyRecord> {
    let name = match (&r.patient_id, &r.laterality) {
        (Some(p), Some(l)) => format!("{p}/{l}"),
        (Some(p), None) => p.clone(),
        _ => format!("#{index}"),
    };
    let missing = |field: &str| Error::MissingField {
        record: name.clone(),
        field: field.into(),
    };
    let patient_id = r.patient_id.clone().ok_or_else(|| missing("patient_id"))?;
    if patient_id.is_empty() {
        return Err(missing("patient_id"));
    }
    let laterality: Laterality = r.laterality.as_deref().ok_or_else(|| missing("laterality"))?.parse()?;
    let label: BiopsyLabel = r.label.as_deref().ok_or_else(|| missing("label"))?.parse()?;
    let acr = AcrCategory::from_code(r.acr.as_deref())?;
    let phase: Phase = r.phase.as_deref().ok_or_else(|| missing("phase"))?.parse()?;
    let raw_images = r.images.ok_or_else(|| missing("images"))?;

    let mut images = BTreeMap::new();
    for (key, value) in raw_images {
        let channel: Channel = key.parse()?;
        if let Some(p) = value {
            images.insert(channel, PathBuf::from(p));
        }
    }
    for view in View::ALL {
        let ffdm = Channel::new(Modality::F, view);
        if !images.contains_key(&ffdm) {
            return Err(missing(&format!("images.{ffdm}")));
        }
    }
    // CESM is either present in both views or absent: a lone CESM view is a missing view.
    let cesm: Vec<Channel> = View::ALL
        .iter()
        .map(|&v| Channel::new(Modality::C, v))
        .collect();
    let present = cesm.iter().filter(|c| images.contains_key(c)).count();
    if present == 1 {
        let absent = cesm.iter().find(|c| !images.contains_key(c)).unwrap();
        return Err(missing(&format!("images.{absent}")));
    }

    Ok(StudyRecord {
        patient_id,
        laterality,
        label,
        acr,
        phase,
        images,
    })
}

impl DatasetManifest {
    pub fn from_records(records: Vec<StudyRecord>, root: PathBuf) -> Self {
        DatasetManifest { records, root }
    }

    /// Serializes back to the manifest schema.
    pub fn to_json(&self) -> String {
        let out: Vec<OutRecord<'_>> = self
            .records
            .iter()
            .map(|r| OutRecord {
                patient_id: &r.patient_id,
                laterality: r.laterality.code(),
                label: r.label.as_str(),
                acr: r.acr.code(),
                phase: r.phase,
                images: Channel::ALL
                    .iter()
                    .map(|c| {
                        (
                            c.to_string(),
                            r.images.get(c).map(|p| p.to_string_lossy().into_owned()),
                        )
                    })
                    .collect(),
            })
            .collect();
        serde_json::to_string_pretty(&out).expect("manifest serialization is infallible")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Records admitted to classification (early phase only).
    pub fn biopsy_records(&self) -> Vec<&StudyRecord> {
        self.records
            .iter()
            .filter(|r| r.is_biopsy_eligible())
            .collect()
    }

    pub fn find(&self, key: &RecordKey) -> Option<&StudyRecord> {
        self.records.iter().find(|r| &r.key() == key)
    }

    pub fn label_histogram(&self) -> BTreeMap<BiopsyLabel, usize> {
        let mut h = BTreeMap::new();
        for r in &self.records {
            *h.entry(r.label).or_insert(0) += 1;
        }
        h
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(pid: &str, lat: &str, label: &str, cesm: bool) -> serde_json::Value {
        let c = |name: &str| {
            if cesm {
                serde_json::Value::String(format!("{pid}_{lat}_{name}.pgm"))
            } else {
                serde_json::Value::Null
            }
        };
        serde_json::json!({
            "patient_id": pid, "laterality": lat, "label": label, "acr": "b", "phase": "early",
            "images": {
                "F_CC": format!("{pid}_{lat}_fcc.pgm"), "F_MLO": format!("{pid}_{lat}_fmlo.pgm"),
                "C_CC": c("ccc"), "C_MLO": c("cmlo")
            }
        })
    }

    fn parse(v: serde_json::Value) -> Result<DatasetManifest> {
        parse_manifest(&v.to_string(), PathBuf::from("."), false)
    }

    #[test]
    fn parses_two_records() {
        let m = parse(serde_json::json!([
            entry("p1", "L", "malignant", true),
            entry("p1", "R", "benign", false)
        ]))
        .unwrap();
        assert_eq!(m.records.len(), 2);
        assert!(m.records[0].has_cesm());
        assert!(!m.records[1].has_cesm());
        assert_eq!(m.records[1].laterality, Laterality::Right);
    }

    #[test]
    fn missing_ffdm_view_names_the_record() {
        let mut e = entry("p9", "L", "benign", false);
        e["images"].as_object_mut().unwrap().remove("F_CC");
        match parse(serde_json::json!([e])) {
            Err(Error::MissingField { record, field }) => {
                assert_eq!(record, "p9/L");
                assert_eq!(field, "images.F_CC");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lone_cesm_view_is_rejected() {
        let mut e = entry("p2", "R", "benign", true);
        e["images"]["C_MLO"] = serde_json::Value::Null;
        assert!(matches!(
            parse(serde_json::json!([e])),
            Err(Error::MissingField { field, .. }) if field == "images.C_MLO"
        ));
    }

    #[test]
    fn duplicate_breast_is_rejected() {
        let r = parse(serde_json::json!([
            entry("p1", "L", "malignant", true),
            entry("p1", "L", "benign", true)
        ]));
        assert!(matches!(r, Err(Error::DuplicateRecord { .. })));
    }

    #[test]
    fn invalid_enums_are_reported() {
        let mut e = entry("p1", "X", "malignant", true);
        assert!(matches!(
            parse(serde_json::json!([e.clone()])),
            Err(Error::InvalidEnum { field, .. }) if field == "laterality"
        ));
        e["laterality"] = "L".into();
        e["phase"] = "middle".into();
        assert!(matches!(
            parse(serde_json::json!([e])),
            Err(Error::InvalidEnum { field, .. }) if field == "phase"
        ));
    }

    #[test]
    fn unresolvable_paths_fail_when_checked() {
        let text = serde_json::json!([entry("p1", "L", "malignant", false)]).to_string();
        let r = parse_manifest(&text, PathBuf::from("/nonexistent-root"), true);
        assert!(matches!(r, Err(Error::UnresolvablePath { .. })));
    }

    #[test]
    fn label_histogram_matches_dataset_counts() {
        let entries: Vec<_> = (0..115)
            .map(|i| {
                let label = if i < 83 { "malignant" } else { "benign" };
                entry(&format!("p{i}"), "L", label, true)
            })
            .collect();
        let m = parse(serde_json::Value::Array(entries)).unwrap();
        let h = m.label_histogram();
        assert_eq!(h[&BiopsyLabel::Malignant], 83);
        assert_eq!(h[&BiopsyLabel::Benign], 32);
    }

    #[test]
    fn late_phase_is_loaded_but_not_eligible() {
        let mut e = entry("p1", "L", "malignant", true);
        e["phase"] = "late".into();
        let m = parse(serde_json::json!([e, entry("p2", "R", "benign", true)])).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.biopsy_records().len(), 1);
    }

    #[test]
    fn serialization_round_trips() {
        let mut e = entry("p3", "R", "benign", true);
        e["acr"] = serde_json::Value::Null;
        let m = parse(serde_json::json!([entry("p1", "L", "malignant", false), e])).unwrap();
        let again = parse_manifest(&m.to_json(), m.root.clone(), false).unwrap();
        assert_eq!(again, m);
        assert_eq!(again.to_json(), m.to_json());
    }
}
