//! Synthetic desk-scale datasets whose class signal strength is set per channel.
//!
//! Every image holds a faint background gradient with pixel noise, a bright
//! square marker (which pins the upper stretch percentile so intensities stay
//! comparable after preprocessing) and a round lesion whose brightness is
//! shifted up for malignant and down for benign cases by half the channel's
//! margin. Left breasts are written mirrored, as on a real detector.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ScorerBackendSpec, ScorerSpec};
use crate::domain::{
    AcrCategory, BiopsyLabel, Channel, GrayImage, Laterality, Modality, Phase, StudyRecord, View,
};
use crate::error::{Error, Result};
use crate::generators::{GeneratorKind, GeneratorSpec};
use crate::harness::RobustnessConfig;
use crate::manifest::DatasetManifest;
use crate::preprocess::PreprocessConfig;
use crate::raster::write_normalized_pgm;
use crate::scorers::TrainHyper;
use crate::seed::{derive_rng, SeedPath};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    pub patients: usize,
    pub malignant_frac: f64,
    pub image_size: usize,
    /// Lesion brightness gap between classes, FFDM channels.
    pub margin_f: f64,
    /// Lesion brightness gap between classes, CESM channels.
    pub margin_c: f64,
    /// Per-image spread of lesion brightness.
    pub lesion_sd: f64,
    /// Per-pixel noise.
    pub noise: f64,
    /// Fraction of patients with a second, contralateral record.
    pub bilateral_frac: f64,
    pub missing_cesm_frac: f64,
    /// Fraction of records acquired in the late phase.
    pub late_frac: f64,
    /// Noise of the synthetic-CESM generator written into the config.
    pub generator_sigma: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            patients: 60,
            malignant_frac: 0.6,
            image_size: 32,
            margin_f: 0.08,
            margin_c: 0.24,
            lesion_sd: 0.0,
            noise: 0.3,
            bilateral_frac: 0.0,
            missing_cesm_frac: 0.0,
            late_frac: 0.0,
            generator_sigma: 0.02,
            seed: 0,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        frac("malignant_frac", self.malignant_frac)?;
        frac("bilateral_frac", self.bilateral_frac)?;
        frac("missing_cesm_frac", self.missing_cesm_frac)?;
        frac("late_frac", self.late_frac)?;
        if self.patients == 0 {
            return Err(Error::InvalidConfig("patients must be positive".into()));
        }
        if self.image_size < 16 {
            return Err(Error::InvalidConfig("image_size must be at least 16".into()));
        }
        for (name, v) in [
            ("margin_f", self.margin_f),
            ("margin_c", self.margin_c),
            ("lesion_sd", self.lesion_sd),
            ("noise", self.noise),
            ("generator_sigma", self.generator_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn margin(&self, m: Modality) -> f64 {
        match m {
            Modality::F => self.margin_f,
            Modality::C => self.margin_c,
        }
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Lesion center as fractions of the image side, before any mirroring.
fn lesion_center(view: View) -> (f64, f64) {
    match view {
        View::CC => (0.6, 0.4),
        View::MLO => (0.55, 0.55),
    }
}

/// Renders one channel image in right-breast orientation, then mirrors left breasts.
pub fn render_image(
    spec: &FixtureSpec,
    channel: Channel,
    label: BiopsyLabel,
    laterality: Laterality,
    seed: &SeedPath,
) -> Result<GrayImage> {
    let mut rng = derive_rng(seed);
    let s = spec.image_size;
    let sf = s as f64;
    let sign = if label.is_positive() { 1.0 } else { -1.0 };
    let lesion = 0.5 + sign * spec.margin(channel.modality) / 2.0 + spec.lesion_sd * gaussian(&mut rng);
    let (cx, cy) = lesion_center(channel.view);
    let radius = 0.18 * sf;
    let marker_x = (0.06 * sf) as usize..(0.22 * sf) as usize;
    let marker_y = (0.74 * sf) as usize..(0.9 * sf) as usize;
    let mut pixels = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let base = if marker_x.contains(&x) && marker_y.contains(&y) {
                1.0
            } else if (px - cx * sf).hypot(py - cy * sf) <= radius {
                lesion
            } else {
                0.15 + 0.1 * px / sf
            };
            pixels.push((base + spec.noise * gaussian(&mut rng)).clamp(0.0, 1.0));
        }
    }
    if laterality == Laterality::Left {
        for row in pixels.chunks_mut(s) {
            row.reverse();
        }
    }
    GrayImage::new_normalized(s, s, pixels)
}

fn acr_for(u: f64) -> AcrCategory {
    match u {
        u if u < 0.1 => AcrCategory::A,
        u if u < 0.5 => AcrCategory::B,
        u if u < 0.85 => AcrCategory::C,
        u if u < 0.95 => AcrCategory::D,
        _ => AcrCategory::NotReported,
    }
}

/// Builds records and images in memory; image paths are relative to the dataset root.
pub fn synthesize(spec: &FixtureSpec) -> Result<(Vec<StudyRecord>, BTreeMap<PathBuf, GrayImage>)> {
    spec.validate()?;
    let root = SeedPath::root(spec.seed).child("fixture", 0);
    let mut rng = derive_rng(&root.child("layout", 0));
    let n_malignant = (spec.patients as f64 * spec.malignant_frac).round() as usize;
    let mut labels: Vec<BiopsyLabel> = (0..spec.patients)
        .map(|i| if i < n_malignant { BiopsyLabel::Malignant } else { BiopsyLabel::Benign })
        .collect();
    labels.shuffle(&mut rng);

    let mut records = Vec::new();
    let mut images = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        let pid = format!("p{i:03}");
        let first = if rng.random::<bool>() { Laterality::Right } else { Laterality::Left };
        let mut sides = vec![first];
        if rng.random::<f64>() < spec.bilateral_frac {
            sides.push(match first {
                Laterality::Left => Laterality::Right,
                Laterality::Right => Laterality::Left,
            });
        }
        for lat in sides {
            let acr = acr_for(rng.random::<f64>());
            let missing_cesm = rng.random::<f64>() < spec.missing_cesm_frac;
            let phase = if rng.random::<f64>() < spec.late_frac { Phase::Late } else { Phase::Early };
            let mut paths = BTreeMap::new();
            for c in Channel::ALL {
                if missing_cesm && c.modality == Modality::C {
                    continue;
                }
                let rel = PathBuf::from(format!("images/{pid}_{}_{}_{}.pgm", lat.code(), c.modality, c.view));
                let seed = root.child(&format!("image:{pid}:{}", lat.code()), c.index() as u64);
                images.insert(rel.clone(), render_image(spec, c, label, lat, &seed)?);
                paths.insert(c, rel);
            }
            records.push(StudyRecord {
                patient_id: pid.clone(),
                laterality: lat,
                label,
                acr,
                phase,
                images: paths,
            });
        }
    }
    Ok((records, images))
}

/// A config running every unstarred setting plus the robustness sweep with
/// reference scorers tuned for fixture-sized images.
pub fn fixture_config(spec: &FixtureSpec) -> ExperimentConfig {
    let hyper = TrainHyper {
        learning_rate: 0.1,
        max_epochs: 200,
        patience: 20,
        warmup: 10,
        lr_drop_patience: 10,
        feature_side: spec.image_size / 4,
        ..TrainHyper::default()
    };
    ExperimentConfig {
        manifest: PathBuf::from("manifest.json"),
        k: 5,
        settings: vec![
            crate::harness::Setting::F,
            crate::harness::Setting::C,
            crate::harness::Setting::Chat,
            crate::harness::Setting::FplusC,
            crate::harness::Setting::FplusChat,
        ],
        robustness: Some(RobustnessConfig::default()),
        scorers: Channel::ALL
            .into_iter()
            .map(|c| ScorerSpec {
                modality: c.modality,
                view: c.view,
                backend: ScorerBackendSpec::Reference { hyper: hyper.clone() },
            })
            .collect(),
        generators: View::ALL
            .into_iter()
            .map(|view| GeneratorSpec {
                view,
                kind: GeneratorKind::NoisyIdentity {
                    sigma: spec.generator_sigma,
                },
            })
            .collect(),
        preprocess: PreprocessConfig {
            target_size: spec.image_size,
            ..PreprocessConfig::default()
        },
        augment: None,
        augment_copies: 0,
        fusion_floor: crate::fusion::DEFAULT_FLOOR,
        root_seed: spec.seed,
    }
}

/// Summary returned by [`write_fixture`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureSummary {
    pub records: usize,
    pub images: usize,
    pub malignant: usize,
    pub benign: usize,
    pub manifest: PathBuf,
    pub config: PathBuf,
}

/// Writes `manifest.json`, `config.json` and `images/*.pgm` under `out`.
pub fn write_fixture(out: &Path, spec: &FixtureSpec) -> Result<FixtureSummary> {
    let (records, images) = synthesize(spec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (rel, img) in &images {
        write_normalized_pgm(&out.join(rel), img)?;
    }
    let malignant = records.iter().filter(|r| r.label.is_positive()).count();
    let manifest = DatasetManifest::from_records(records, out.to_path_buf());
    let manifest_path = out.join("manifest.json");
    manifest.save(&manifest_path)?;
    let config_path = out.join("config.json");
    let text = serde_json::to_string_pretty(&fixture_config(spec)).expect("config serializes");
    fs::write(&config_path, text).map_err(|e| Error::io(&config_path, e))?;
    Ok(FixtureSummary {
        records: manifest.records.len(),
        images: images.len(),
        malignant,
        benign: manifest.records.len() - malignant,
        manifest: manifest_path,
        config: config_path,
    })
}
