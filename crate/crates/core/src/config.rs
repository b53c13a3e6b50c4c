//! Experiment configuration file and its translation into harness options.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{Channel, Modality, View};
use crate::error::{Error, Result};
use crate::fusion::DEFAULT_FLOOR;
use crate::generators::GeneratorSpec;
use crate::harness::{ChannelBackend, HarnessOptions, RobustnessConfig, Setting};
use crate::manifest::{load_manifest, DatasetManifest};
use crate::preprocess::{AugmentConfig, PreprocessConfig};
use crate::scorers::{load_score_table, ScoreMatrix, TrainHyper};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerBackendSpec {
    /// Probabilities replayed from CSV; `synthetic_path` scores generated CESM.
    Table {
        path: PathBuf,
        #[serde(default)]
        synthetic_path: Option<PathBuf>,
    },
    Reference {
        #[serde(default)]
        hyper: TrainHyper,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerSpec {
    pub modality: Modality,
    pub view: View,
    #[serde(flatten)]
    pub backend: ScorerBackendSpec,
}

impl ScorerSpec {
    pub fn channel(&self) -> Channel {
        Channel::new(self.modality, self.view)
    }
}

fn default_k() -> usize {
    5
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

fn default_settings() -> Vec<Setting> {
    vec![
        Setting::F,
        Setting::C,
        Setting::Chat,
        Setting::FplusC,
        Setting::FplusChat,
    ]
}

/// Contents of an experiment config file. Relative paths are resolved against
/// the directory holding the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_settings")]
    pub settings: Vec<Setting>,
    #[serde(default)]
    pub robustness: Option<RobustnessConfig>,
    /// One entry per channel; reference scorers with default hyperparameters
    /// are used for channels left out when the list is empty.
    #[serde(default)]
    pub scorers: Vec<ScorerSpec>,
    #[serde(default)]
    pub generators: Vec<GeneratorSpec>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    #[serde(default)]
    pub augment_copies: usize,
    #[serde(default = "default_floor")]
    pub fusion_floor: f64,
    #[serde(default)]
    pub root_seed: u64,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads a config and makes its paths absolute relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.manifest);
        for s in &mut self.scorers {
            if let ScorerBackendSpec::Table {
                path,
                synthetic_path,
            } = &mut s.backend
            {
                join(path);
                if let Some(p) = synthetic_path {
                    join(p);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!("k must be at least 2, got {}", self.k)));
        }
        self.preprocess.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        if let Some(r) = &self.robustness {
            r.validate()?;
        }
        for s in &self.settings {
            s.validate()?;
        }
        if self.fusion_floor.is_nan() || self.fusion_floor <= 0.0 {
            return Err(Error::InvalidConfig("fusion_floor must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.scorers {
            if !seen.insert(s.channel()) {
                return Err(Error::InvalidConfig(format!(
                    "more than one scorer for channel {}",
                    s.channel()
                )));
            }
            if let ScorerBackendSpec::Reference { hyper } = &s.backend {
                hyper.validate()?;
            }
        }
        let mut views = std::collections::BTreeSet::new();
        for g in &self.generators {
            if !views.insert(g.view) {
                return Err(Error::InvalidConfig(format!(
                    "more than one generator for view {}",
                    g.view
                )));
            }
        }
        Ok(())
    }

    /// Settings actually run: the configured list followed by the robustness
    /// sweep's settings, without duplicates.
    pub fn effective_settings(&self) -> Vec<Setting> {
        let mut out: Vec<Setting> = Vec::new();
        let extra = self.robustness.as_ref().map(RobustnessConfig::settings).unwrap_or_default();
        for s in self.settings.iter().copied().chain(extra) {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    /// Builds per-channel backends, loading each score table once.
    pub fn backends(&self) -> Result<BTreeMap<Channel, ChannelBackend>> {
        let mut tables: BTreeMap<PathBuf, ScoreMatrix> = BTreeMap::new();
        let mut load = |p: &Path| -> Result<ScoreMatrix> {
            if let Some(m) = tables.get(p) {
                return Ok(m.clone());
            }
            let m = load_score_table(p)?;
            tables.insert(p.to_path_buf(), m.clone());
            Ok(m)
        };
        let mut out = BTreeMap::new();
        for s in &self.scorers {
            let backend = match &s.backend {
                ScorerBackendSpec::Table {
                    path,
                    synthetic_path,
                } => ChannelBackend::Table {
                    real: load(path)?,
                    synthetic: synthetic_path.as_deref().map(&mut load).transpose()?,
                },
                ScorerBackendSpec::Reference { hyper } => ChannelBackend::Reference {
                    hyper: hyper.clone(),
                },
            };
            out.insert(s.channel(), backend);
        }
        if self.scorers.is_empty() {
            for c in Channel::ALL {
                out.insert(
                    c,
                    ChannelBackend::Reference {
                        hyper: TrainHyper::default(),
                    },
                );
            }
        }
        Ok(out)
    }

    /// Loads the manifest and assembles harness options.
    pub fn prepare(&self) -> Result<(DatasetManifest, HarnessOptions)> {
        self.validate()?;
        let manifest = load_manifest(&self.manifest)?;
        let mut opts = HarnessOptions::new(self.backends()?, self.effective_settings());
        opts.k = self.k;
        opts.repetitions = self.robustness.as_ref().map_or(10, |r| r.repetitions);
        opts.floor = self.fusion_floor;
        opts.root_seed = self.root_seed;
        opts.preprocess = self.preprocess.clone();
        opts.augment = self.augment.clone();
        opts.augment_copies = self.augment_copies;
        opts.generators = self.generators.clone();
        Ok((manifest, opts))
    }
}
