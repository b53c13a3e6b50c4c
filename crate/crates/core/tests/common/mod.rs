//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fusionbiopsy::config::ExperimentConfig;
use fusionbiopsy::fixture::{write_fixture, FixtureSpec};
use fusionbiopsy::harness::{RobustnessConfig, Setting};
use fusionbiopsy::manifest::DatasetManifest;
use fusionbiopsy::scorers::{ChannelKey, ScoreMatrix};
use fusionbiopsy::{AcrCategory, BiopsyLabel, Channel, Laterality, Phase, RecordKey, StudyRecord};

/// Writes a fixture under `dir` and a config next to it, edited by `edit`.
/// Returns the path of the edited config.
pub fn fixture_with_config(
    dir: &Path,
    spec: &FixtureSpec,
    edit: impl FnOnce(&mut ExperimentConfig),
) -> PathBuf {
    let summary = write_fixture(dir, spec).expect("fixture writes");
    let mut cfg = ExperimentConfig::load(&summary.config).expect("fixture config loads");
    cfg.manifest = PathBuf::from("manifest.json");
    edit(&mut cfg);
    let path = dir.join("edited_config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// A small sweep: the given percentages with a few repetitions.
pub fn small_sweep(percentages: &[u8], repetitions: usize) -> Option<RobustnessConfig> {
    Some(RobustnessConfig {
        percentages: percentages.to_vec(),
        repetitions,
    })
}

pub fn unstarred() -> Vec<Setting> {
    vec![
        Setting::F,
        Setting::C,
        Setting::Chat,
        Setting::FplusC,
        Setting::FplusChat,
    ]
}

/// One right-breast record per `(patient, label, acr)`, with placeholder image paths.
pub fn records(rows: &[(&str, BiopsyLabel, AcrCategory)]) -> Vec<StudyRecord> {
    rows.iter()
        .map(|&(pid, label, acr)| StudyRecord {
            patient_id: pid.to_string(),
            laterality: Laterality::Right,
            label,
            acr,
            phase: Phase::Early,
            images: Channel::ALL
                .into_iter()
                .map(|c| (c, PathBuf::from(format!("{pid}_{}.pgm", c))))
                .collect(),
        })
        .collect()
}

pub fn manifest(rows: &[(&str, BiopsyLabel, AcrCategory)]) -> DatasetManifest {
    DatasetManifest::from_records(records(rows), PathBuf::from("."))
}

/// Score matrix from `(patient, [p_fcc, p_fmlo, p_ccc, p_cmlo])` rows on right breasts.
pub fn scores(rows: &[(&str, [f64; 4])]) -> ScoreMatrix {
    let mut m = ScoreMatrix::new();
    for (pid, ps) in rows {
        for c in Channel::ALL {
            m.insert(
                ChannelKey::new(RecordKey::new(*pid, Laterality::Right), c),
                ps[c.index()],
            )
            .unwrap();
        }
    }
    m
}

pub fn score_csv(m: &ScoreMatrix) -> String {
    fusionbiopsy::scorers::write_score_table(m)
}

/// Patients `p00..` with alternating labels, all ACR b.
pub fn alternating(n: usize) -> Vec<(String, BiopsyLabel)> {
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 {
                BiopsyLabel::Malignant
            } else {
                BiopsyLabel::Benign
            };
            (format!("p{i:02}"), label)
        })
        .collect()
}

pub fn label_map(rows: &[(String, BiopsyLabel)]) -> BTreeMap<String, BiopsyLabel> {
    rows.iter().cloned().collect()
}
