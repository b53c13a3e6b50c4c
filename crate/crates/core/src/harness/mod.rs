//! Cross-validated execution of the virtual biopsy pipeline over experimental
//! settings, including the missing-modality robustness sweep.

pub mod aggregate;
pub mod cv;
pub mod scoring;
pub mod setting;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{AcrCategory, BiopsyLabel, Channel, Modality, RecordKey, StudyRecord, View};
use crate::error::{Error, Result};
use crate::fusion::{classify_probs, compute_weights_for, FusionWeights, DEFAULT_FLOOR};
use crate::generators::GeneratorSpec;
use crate::manifest::DatasetManifest;
use crate::metrics::{confusion, ConfusionCounts, MetricsTriple};
use crate::preprocess::{AugmentConfig, PreprocessConfig};
use crate::scorers::{predict_class, ChannelKey, ScoreMatrix};
use crate::seed::{derive_rng, SeedPath};

pub use aggregate::{aggregate, aggregate_nested, Aggregate};
pub use cv::{stratified_group_kfold, FoldSplit};
pub use scoring::{score_fold, ChannelBackend, FoldScores, ImageCache, TrainingSummary};
pub use setting::{CesmSource, Setting};

pub const REPORT_FORMAT: &str = "fusionbiopsy-report/1";

/// Percentages of test patients switched to synthetic CESM, and how often each
/// random selection is redrawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub percentages: Vec<u8>,
    pub repetitions: usize,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            percentages: (1..=10).map(|i| i * 10).collect(),
            repetitions: 10,
        }
    }
}

impl RobustnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::InvalidConfig("repetitions must be at least 1".into()));
        }
        if let Some(n) = self.percentages.iter().find(|n| **n > 100) {
            return Err(Error::InvalidConfig(format!("percentage {n} exceeds 100")));
        }
        Ok(())
    }

    /// The F baseline followed by both starred settings at every percentage.
    pub fn settings(&self) -> Vec<Setting> {
        let mut out = vec![Setting::F];
        out.extend(self.percentages.iter().map(|&n| Setting::Cstar(n)));
        out.extend(self.percentages.iter().map(|&n| Setting::FplusCstar(n)));
        out
    }
}

/// Everything the harness needs besides the manifest.
#[derive(Clone, Debug)]
pub struct HarnessOptions {
    pub k: usize,
    pub settings: Vec<Setting>,
    /// Samplings per starred setting with a percentage strictly between 0 and 100.
    pub repetitions: usize,
    pub floor: f64,
    pub root_seed: u64,
    pub preprocess: PreprocessConfig,
    pub augment: Option<AugmentConfig>,
    pub augment_copies: usize,
    pub generators: Vec<GeneratorSpec>,
    pub backends: BTreeMap<Channel, ChannelBackend>,
    /// Precomputed folds; drawn with [`stratified_group_kfold`] when absent.
    pub splits: Option<Vec<FoldSplit>>,
    /// Worker threads; the rayon default when absent.
    pub threads: Option<usize>,
}

impl HarnessOptions {
    pub fn new(backends: BTreeMap<Channel, ChannelBackend>, settings: Vec<Setting>) -> Self {
        HarnessOptions {
            k: 5,
            settings,
            repetitions: 10,
            floor: DEFAULT_FLOOR,
            root_seed: 0,
            preprocess: PreprocessConfig::default(),
            augment: None,
            augment_copies: 0,
            generators: Vec::new(),
            backends,
            splits: None,
            threads: None,
        }
    }

    fn repetitions_for(&self, setting: Setting) -> usize {
        match setting.cesm_source() {
            CesmSource::Mixed(n) if n > 0 && n < 100 => self.repetitions,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub record: RecordKey,
    pub label: BiopsyLabel,
    pub p: f64,
    pub class: BiopsyLabel,
    /// Whether the CESM views used for this record were generated.
    pub synthetic_cesm: bool,
}

/// One evaluation of one setting on one fold's test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOutcome {
    pub repetition: usize,
    /// Test patients deliberately switched to synthetic CESM.
    pub synthetic_patients: usize,
    pub metrics: MetricsTriple,
    pub counts: ConfusionCounts,
    pub predictions: Vec<Prediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldRuns {
    pub fold: usize,
    pub test_patients: usize,
    pub runs: Vec<RunOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricAggregates {
    pub auc: Aggregate,
    pub gmean: Aggregate,
    pub mcc: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingResult {
    pub repetitions: usize,
    pub folds: Vec<FoldRuns>,
    /// Repetitions are averaged within a fold before aggregating across folds.
    pub aggregate: MetricAggregates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingReport {
    pub setting: Setting,
    pub result: SettingResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldInfo {
    pub fold: usize,
    pub train: Vec<RecordKey>,
    pub val: Vec<RecordKey>,
    pub test: Vec<RecordKey>,
    pub weights: FusionWeights,
    /// Weights that fusion raised to the floor.
    pub floored_weights: Vec<String>,
    pub training: Vec<TrainingSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcrCell {
    pub acr: AcrCategory,
    pub records: usize,
    pub malignant: usize,
    pub benign: usize,
    /// Metrics are absent when the category has no test records.
    pub metrics: Option<MetricsTriple>,
    pub counts: ConfusionCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcrReport {
    pub setting: Setting,
    pub cells: Vec<AcrCell>,
    /// Counts for records without a reported density grade.
    pub not_reported: ConfusionCounts,
    pub overall: ConfusionCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentReport {
    pub format: String,
    pub root_seed: u64,
    pub k: usize,
    pub floor: f64,
    pub records: usize,
    pub folds: Vec<FoldInfo>,
    pub settings: Vec<SettingReport>,
    pub acr: Vec<AcrReport>,
}

impl ExperimentReport {
    pub fn setting(&self, s: Setting) -> Option<&SettingResult> {
        self.settings.iter().find(|e| e.setting == s).map(|e| &e.result)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }
}

/// Chooses `ceil(n% * |patients|)` patients; every patient at 100, none at 0.
pub fn select_patients(patients: &[&str], n: u8, seed: &SeedPath) -> BTreeSet<String> {
    let total = patients.len();
    let count = (usize::from(n) * total).div_ceil(100);
    if count >= total {
        return patients.iter().map(|p| p.to_string()).collect();
    }
    if count == 0 {
        return BTreeSet::new();
    }
    let mut rng = derive_rng(seed);
    index::sample(&mut rng, total, count)
        .into_iter()
        .map(|i| patients[i].to_string())
        .collect()
}

fn modalities_for(settings: &[Setting]) -> Vec<Modality> {
    let mut out = Vec::new();
    if settings.iter().any(|s| s.uses_ffdm()) {
        out.push(Modality::F);
    }
    if settings.iter().any(|s| s.uses_cesm()) {
        out.push(Modality::C);
    }
    out
}

/// CESM channels for `key`: generated when `synthetic`, otherwise real with
/// generation as the fallback for records without CESM.
fn cesm_probs(key: &RecordKey, scores: &FoldScores, synthetic: bool) -> (Option<[f64; 2]>, bool) {
    let lookup = |m: &ScoreMatrix| -> Option<[f64; 2]> {
        let cc = m.get(key, Channel::new(Modality::C, View::CC))?;
        let mlo = m.get(key, Channel::new(Modality::C, View::MLO))?;
        Some([cc, mlo])
    };
    if !synthetic {
        if let Some(p) = lookup(&scores.real) {
            return (Some(p), false);
        }
    }
    (lookup(&scores.synthetic), true)
}

fn missing_keys(key: &RecordKey, modality: Modality) -> impl Iterator<Item = String> + '_ {
    View::ALL
        .into_iter()
        .map(move |v| ChannelKey::new(key.clone(), Channel::new(modality, v)).to_string())
}

/// Per-record probabilities the weights are fitted on: real CESM where it
/// exists, generated CESM otherwise.
fn natural_scores(keys: &BTreeSet<RecordKey>, scores: &FoldScores) -> Result<ScoreMatrix> {
    let mut out = ScoreMatrix::new();
    for key in keys {
        for v in View::ALL {
            let c = Channel::new(Modality::F, v);
            if let Some(p) = scores.real.get(key, c) {
                out.insert(ChannelKey::new(key.clone(), c), p)?;
            }
        }
        if let (Some([cc, mlo]), _) = cesm_probs(key, scores, false) {
            out.insert(ChannelKey::new(key.clone(), Channel::new(Modality::C, View::CC)), cc)?;
            out.insert(ChannelKey::new(key.clone(), Channel::new(Modality::C, View::MLO)), mlo)?;
        }
    }
    Ok(out)
}

/// Fuses and thresholds one setting on a fold's test split.
///
/// Patients in `synthetic_patients` have both CESM views replaced by generated
/// ones; records lacking real CESM always use generated views.
pub fn run_setting(
    split: &FoldSplit,
    setting: Setting,
    scores: &FoldScores,
    weights: &FusionWeights,
    labels: &BTreeMap<RecordKey, BiopsyLabel>,
    synthetic_patients: &BTreeSet<String>,
) -> Result<(MetricsTriple, ConfusionCounts, Vec<Prediction>)> {
    let all_synthetic = setting.cesm_source() == CesmSource::Synthetic;
    let mut missing = Vec::new();
    let mut predictions = Vec::with_capacity(split.test.len());
    for key in &split.test {
        let f = [
            scores.real.get(key, Channel::new(Modality::F, View::CC)),
            scores.real.get(key, Channel::new(Modality::F, View::MLO)),
        ];
        let use_synthetic = all_synthetic || synthetic_patients.contains(&key.patient_id);
        let (c, synthetic_cesm) = if setting.uses_cesm() {
            cesm_probs(key, scores, use_synthetic)
        } else {
            (None, false)
        };
        let p = match setting {
            Setting::F => match f {
                [Some(cc), Some(mlo)] => Some(weights.fuse_modality_views(Modality::F, cc, mlo)),
                _ => None,
            },
            Setting::C | Setting::Chat | Setting::Cstar(_) => {
                c.map(|[cc, mlo]| weights.fuse_modality_views(Modality::C, cc, mlo))
            }
            Setting::FplusC | Setting::FplusChat | Setting::FplusCstar(_) => match (f, c) {
                ([Some(a), Some(b)], Some([cc, mlo])) => Some(classify_probs(&[a, b, cc, mlo], weights).p),
                _ => None,
            },
        };
        match p {
            Some(p) => predictions.push(Prediction {
                record: key.clone(),
                label: labels[key],
                p,
                class: predict_class(p),
                synthetic_cesm,
            }),
            None => {
                if setting.uses_ffdm() && f.iter().any(Option::is_none) {
                    missing.extend(missing_keys(key, Modality::F));
                }
                if setting.uses_cesm() && c.is_none() {
                    missing.extend(missing_keys(key, Modality::C));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingChannel { keys: missing });
    }
    let ps: Vec<f64> = predictions.iter().map(|r| r.p).collect();
    let preds: Vec<BiopsyLabel> = predictions.iter().map(|r| r.class).collect();
    let truth: Vec<BiopsyLabel> = predictions.iter().map(|r| r.label).collect();
    let (metrics, counts) = MetricsTriple::evaluate(&ps, &preds, &truth)?;
    Ok((metrics, counts, predictions))
}

struct FoldState {
    split: FoldSplit,
    scores: FoldScores,
    weights: FusionWeights,
}

fn prepare_fold(
    split: FoldSplit,
    opts: &HarnessOptions,
    modalities: &[Modality],
    cache: &ImageCache,
    labels: &BTreeMap<RecordKey, BiopsyLabel>,
    root: &SeedPath,
) -> Result<FoldState> {
    let channels: Vec<Channel> = Channel::ALL
        .into_iter()
        .filter(|c| modalities.contains(&c.modality))
        .collect();
    let seed = root.child("fold", split.fold_index as u64);
    let augmentation = opts
        .augment
        .as_ref()
        .filter(|_| opts.augment_copies > 0)
        .map(|a| (a, opts.augment_copies));
    let scores = score_fold(&split, &channels, &opts.backends, cache, labels, augmentation, &seed)?;
    let val_labels: BTreeMap<RecordKey, BiopsyLabel> =
        split.val.iter().map(|k| (k.clone(), labels[k])).collect();
    let natural = natural_scores(&split.val, &scores)?;
    let weights = compute_weights_for(&natural, &val_labels, opts.floor, modalities)?;
    Ok(FoldState {
        split,
        scores,
        weights,
    })
}

fn acr_report(
    setting: Setting,
    result: &SettingResult,
    records: &BTreeMap<RecordKey, &StudyRecord>,
) -> Result<AcrReport> {
    let pooled: Vec<&Prediction> = result
        .folds
        .iter()
        .filter_map(|f| f.runs.first())
        .flat_map(|r| &r.predictions)
        .collect();
    let slice_counts = |items: &[&Prediction]| -> Result<ConfusionCounts> {
        if items.is_empty() {
            return Ok(ConfusionCounts::default());
        }
        let preds: Vec<BiopsyLabel> = items.iter().map(|r| r.class).collect();
        let truth: Vec<BiopsyLabel> = items.iter().map(|r| r.label).collect();
        confusion(&preds, &truth)
    };
    let mut cells = Vec::new();
    for acr in AcrCategory::REPORTED {
        let items: Vec<&Prediction> = pooled
            .iter()
            .copied()
            .filter(|r| records[&r.record].acr == acr)
            .collect();
        let malignant = items.iter().filter(|r| r.label.is_positive()).count();
        let metrics = if items.is_empty() {
            None
        } else {
            let ps: Vec<f64> = items.iter().map(|r| r.p).collect();
            let preds: Vec<BiopsyLabel> = items.iter().map(|r| r.class).collect();
            let truth: Vec<BiopsyLabel> = items.iter().map(|r| r.label).collect();
            Some(MetricsTriple::evaluate(&ps, &preds, &truth)?.0)
        };
        cells.push(AcrCell {
            acr,
            records: items.len(),
            malignant,
            benign: items.len() - malignant,
            metrics,
            counts: slice_counts(&items)?,
        });
    }
    let unreported: Vec<&Prediction> = pooled
        .iter()
        .copied()
        .filter(|r| records[&r.record].acr == AcrCategory::NotReported)
        .collect();
    Ok(AcrReport {
        setting,
        cells,
        not_reported: slice_counts(&unreported)?,
        overall: slice_counts(&pooled)?,
    })
}

/// Runs every configured setting on every fold and assembles the report.
pub fn run_experiment(manifest: &DatasetManifest, opts: &HarnessOptions) -> Result<ExperimentReport> {
    match opts.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))?
            .install(|| run_inner(manifest, opts)),
        None => run_inner(manifest, opts),
    }
}

fn run_inner(manifest: &DatasetManifest, opts: &HarnessOptions) -> Result<ExperimentReport> {
    if opts.settings.is_empty() {
        return Err(Error::InvalidConfig("no settings requested".into()));
    }
    for s in &opts.settings {
        s.validate()?;
    }
    if opts.repetitions == 0 {
        return Err(Error::InvalidConfig("repetitions must be at least 1".into()));
    }
    if opts.floor.is_nan() || opts.floor <= 0.0 {
        return Err(Error::InvalidConfig("fusion floor must be positive".into()));
    }
    let root = SeedPath::root(opts.root_seed);
    let records = manifest.biopsy_records();
    let by_key: BTreeMap<RecordKey, &StudyRecord> = records.iter().map(|r| (r.key(), *r)).collect();
    let labels: BTreeMap<RecordKey, BiopsyLabel> = records.iter().map(|r| (r.key(), r.label)).collect();

    let splits = match &opts.splits {
        Some(s) => s.clone(),
        None => stratified_group_kfold(&records, opts.k, &mut derive_rng(&root.child("split", 0)))?,
    };
    for split in &splits {
        if let Some(k) = split.train.iter().chain(&split.val).chain(&split.test).find(|k| !labels.contains_key(k)) {
            return Err(Error::Manifest(format!("split references unknown record {k}")));
        }
    }

    let modalities = modalities_for(&opts.settings);
    let needs_images = opts
        .backends
        .iter()
        .any(|(c, b)| modalities.contains(&c.modality) && matches!(b, ChannelBackend::Reference { .. }));
    let cache = if needs_images {
        ImageCache::build(manifest, &records, &opts.preprocess, &opts.generators, &root)?
    } else {
        ImageCache::default()
    };

    let folds: Vec<FoldState> = splits
        .into_par_iter()
        .map(|split| prepare_fold(split, opts, &modalities, &cache, &labels, &root))
        .collect::<Result<_>>()?;

    let mut tasks = Vec::new();
    for (si, &setting) in opts.settings.iter().enumerate() {
        for fi in 0..folds.len() {
            for rep in 0..opts.repetitions_for(setting) {
                tasks.push((si, fi, rep));
            }
        }
    }
    let outcomes: Vec<RunOutcome> = tasks
        .par_iter()
        .map(|&(si, fi, rep)| {
            let setting = opts.settings[si];
            let fold = &folds[fi];
            let patients = fold.split.test_patients();
            let selected = match setting.cesm_source() {
                CesmSource::Mixed(n) => {
                    let seed = root
                        .child("fold", fi as u64)
                        .child("robust", u64::from(n))
                        .child("rep", rep as u64);
                    select_patients(&patients, n, &seed)
                }
                CesmSource::Synthetic => patients.iter().map(|p| p.to_string()).collect(),
                CesmSource::Real => BTreeSet::new(),
            };
            let (metrics, counts, predictions) =
                run_setting(&fold.split, setting, &fold.scores, &fold.weights, &labels, &selected)?;
            Ok(RunOutcome {
                repetition: rep,
                synthetic_patients: selected.len(),
                metrics,
                counts,
                predictions,
            })
        })
        .collect::<Result<_>>()?;

    let mut outcomes = outcomes.into_iter();
    let mut settings = Vec::new();
    for &setting in &opts.settings {
        let reps = opts.repetitions_for(setting);
        let fold_runs: Vec<FoldRuns> = folds
            .iter()
            .enumerate()
            .map(|(fi, f)| FoldRuns {
                fold: fi,
                test_patients: f.split.test_patients().len(),
                runs: outcomes.by_ref().take(reps).collect(),
            })
            .collect();
        let metric = |get: fn(&MetricsTriple) -> Option<f64>| {
            let per_fold: Vec<Vec<Option<f64>>> = fold_runs
                .iter()
                .map(|f| f.runs.iter().map(|r| get(&r.metrics)).collect())
                .collect();
            aggregate_nested(&per_fold)
        };
        let aggregate = MetricAggregates {
            auc: metric(|m| m.auc),
            gmean: metric(|m| Some(m.gmean)),
            mcc: metric(|m| m.mcc),
        };
        settings.push(SettingReport {
            setting,
            result: SettingResult {
                repetitions: reps,
                folds: fold_runs,
                aggregate,
            },
        });
    }

    let acr = settings
        .iter()
        .filter(|e| matches!(e.setting, Setting::F | Setting::FplusC | Setting::FplusChat))
        .map(|e| acr_report(e.setting, &e.result, &by_key))
        .collect::<Result<_>>()?;

    let folds = folds
        .into_iter()
        .map(|f| FoldInfo {
            fold: f.split.fold_index,
            train: f.split.train.iter().cloned().collect(),
            val: f.split.val.iter().cloned().collect(),
            test: f.split.test.iter().cloned().collect(),
            floored_weights: f.weights.floored(),
            weights: f.weights,
            training: f.scores.training,
        })
        .collect();

    Ok(ExperimentReport {
        format: REPORT_FORMAT.to_owned(),
        root_seed: opts.root_seed,
        k: opts.k,
        floor: opts.floor,
        records: records.len(),
        folds,
        settings,
        acr,
    })
}

/// Runs the robustness sweep: the F baseline plus both starred settings at
/// every configured percentage, each starred run repeated `cfg.repetitions` times.
pub fn robustness_sweep(
    manifest: &DatasetManifest,
    opts: &HarnessOptions,
    cfg: &RobustnessConfig,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut sweep = opts.clone();
    sweep.settings = cfg.settings();
    sweep.repetitions = cfg.repetitions;
    run_experiment(manifest, &sweep)
}
