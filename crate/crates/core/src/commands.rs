//! Entry points behind the command-line subcommands.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::domain::{Channel, GrayImage, Laterality, Modality, RecordKey, View};
use crate::error::{Error, Result};
use crate::fixture::{write_fixture, FixtureSpec, FixtureSummary};
use crate::generators::{eval_generation, generate, GenQuality, GenerationContext, GeneratorSpec, Psnr};
use crate::harness::{
    aggregate, run_experiment, Aggregate, ChannelBackend, ExperimentReport, FoldSplit,
    HarnessOptions, RobustnessConfig, Setting,
};
use crate::manifest::{load_manifest, load_manifest_with};
use crate::output::write_report;
use crate::preprocess::preprocess;
use crate::raster::{read_raster, write_normalized_pgm};
use crate::scorers::load_score_table;
use crate::seed::SeedPath;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "FUSIONBIOPSY_THREADS";

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub folds: Option<usize>,
    pub threads: Option<usize>,
}

impl Overrides {
    /// Reads the thread cap from the environment.
    pub fn threads_from_env() -> Result<Option<usize>> {
        match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|n| *n > 0)
                .map(Some)
                .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
            Err(_) => Ok(None),
        }
    }

    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.root_seed = s;
        }
        if let Some(k) = self.folds {
            cfg.k = k;
        }
    }
}

fn run_config(cfg: &ExperimentConfig, out: &Path, overrides: &Overrides) -> Result<ExperimentReport> {
    let (manifest, mut opts) = cfg.prepare()?;
    opts.threads = overrides.threads;
    let report = run_experiment(&manifest, &opts)?;
    write_report(&report, out)?;
    Ok(report)
}

/// Runs the configured settings (and sweep, if configured) and writes reports under `out`.
pub fn cmd_run(config: &Path, out: &Path, overrides: &Overrides) -> Result<ExperimentReport> {
    let mut cfg = ExperimentConfig::load(config)?;
    overrides.apply(&mut cfg);
    run_config(&cfg, out, overrides)
}

/// Like [`cmd_run`] but always includes the robustness sweep, with default
/// percentages and repetitions when the config has none.
pub fn cmd_robustness(config: &Path, out: &Path, overrides: &Overrides) -> Result<ExperimentReport> {
    let mut cfg = ExperimentConfig::load(config)?;
    overrides.apply(&mut cfg);
    if cfg.robustness.is_none() {
        cfg.robustness = Some(RobustnessConfig::default());
    }
    run_config(&cfg, out, overrides)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFold {
    val: Vec<String>,
    test: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    folds: Vec<SplitFold>,
}

fn parse_record_key(s: &str) -> Result<RecordKey> {
    let (pid, lat) = s.rsplit_once('/').ok_or_else(|| Error::InvalidConfig(format!(
        "record `{s}` must be written as patient_id/L or patient_id/R"
    )))?;
    Ok(RecordKey::new(pid, lat.parse::<Laterality>()?))
}

/// Reads explicit folds: `{"folds": [{"val": ["p1/L", ...], "test": [...]}]}`.
/// Training records are all remaining `keys`.
pub fn load_split_file(path: &Path, keys: &BTreeSet<RecordKey>) -> Result<Vec<FoldSplit>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SplitFile =
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    file.folds
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            let parse = |v: Vec<String>| v.iter().map(|s| parse_record_key(s)).collect::<Result<BTreeSet<_>>>();
            let val = parse(f.val)?;
            let test = parse(f.test)?;
            if let Some(k) = val.intersection(&test).next() {
                return Err(Error::InvalidConfig(format!("fold {i}: {k} is in both val and test")));
            }
            let train = keys.difference(&val).filter(|k| !test.contains(k)).cloned().collect();
            Ok(FoldSplit {
                fold_index: i,
                train,
                val,
                test,
            })
        })
        .collect()
}

/// Inputs for [`cmd_evaluate`].
#[derive(Clone, Debug, Default)]
pub struct EvaluateArgs {
    pub scores: PathBuf,
    pub manifest: PathBuf,
    pub synthetic_scores: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

/// Replays externally computed channel probabilities through weighting, fusion
/// and evaluation. No images are read.
pub fn cmd_evaluate(args: &EvaluateArgs, out: &Path) -> Result<ExperimentReport> {
    let manifest = load_manifest_with(&args.manifest, false)?;
    let real = load_score_table(&args.scores)?;
    let synthetic = args.synthetic_scores.as_deref().map(load_score_table).transpose()?;
    let mut settings = vec![Setting::F, Setting::C, Setting::FplusC];
    if synthetic.is_some() {
        settings.extend([Setting::Chat, Setting::FplusChat]);
    }
    let backends = Channel::ALL
        .into_iter()
        .map(|c| {
            (
                c,
                ChannelBackend::Table {
                    real: real.clone(),
                    synthetic: synthetic.clone(),
                },
            )
        })
        .collect();
    let mut opts = HarnessOptions::new(backends, settings);
    opts.k = args.folds.unwrap_or(5);
    opts.root_seed = args.seed.unwrap_or(0);
    opts.threads = args.threads;
    if let Some(path) = &args.split {
        let keys = manifest.biopsy_records().iter().map(|r| r.key()).collect();
        let splits = load_split_file(path, &keys)?;
        opts.k = splits.len();
        opts.splits = Some(splits);
    }
    let report = run_experiment(&manifest, &opts)?;
    write_report(&report, out)?;
    Ok(report)
}

/// Quality of one generated image against the real CESM view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub record: RecordKey,
    pub view: View,
    pub quality: GenQuality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewQuality {
    pub view: View,
    pub mse: Aggregate,
    /// Infinite values (exact reproductions) are excluded and counted.
    pub psnr: Aggregate,
    pub ssim: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub generated: usize,
    pub evaluated: usize,
    pub per_view: Vec<ViewQuality>,
    pub rows: Vec<GenerationRow>,
}

/// Generates synthetic CESM for every record (both phases) and scores each
/// against the real CESM view when it exists. Output images are preprocessed
/// rasters named `{patient_id}_{laterality}_{view}.pgm` under `out/images`.
pub fn cmd_generate(config: &Path, out: &Path, overrides: &Overrides) -> Result<GenerationReport> {
    let mut cfg = ExperimentConfig::load(config)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    let by_view: BTreeMap<View, &GeneratorSpec> = cfg.generators.iter().map(|g| (g.view, g)).collect();
    for v in View::ALL {
        if !by_view.contains_key(&v) {
            return Err(Error::InvalidConfig(format!("no generator configured for view {v}")));
        }
    }
    let manifest = load_manifest(&cfg.manifest)?;
    let root = SeedPath::root(cfg.root_seed);
    let jobs: Vec<(&crate::domain::StudyRecord, View)> = manifest
        .records
        .iter()
        .flat_map(|r| View::ALL.into_iter().map(move |v| (r, v)))
        .collect();
    let load = |r: &crate::domain::StudyRecord, c: Channel| -> Result<Option<GrayImage>> {
        r.image(c)
            .map(|rel| preprocess(&read_raster(&manifest.resolve(rel))?.image, r.laterality, &cfg.preprocess))
            .transpose()
    };
    let results: Vec<(RecordKey, View, GrayImage, Option<GenQuality>)> = jobs
        .par_iter()
        .map(|(r, v)| {
            let key = r.key();
            let source = load(r, Channel::new(Modality::F, *v))?.ok_or_else(|| Error::MissingField {
                record: key.to_string(),
                field: format!("images.F_{v}"),
            })?;
            let target = load(r, Channel::new(Modality::C, *v))?;
            let ctx = GenerationContext {
                record: &key,
                root: &manifest.root,
                target: target.as_ref(),
                seed: root.child(&format!("generate:{key}"), v.index()),
            };
            let synth = generate(by_view[v], &source, &ctx)?;
            let quality = target.as_ref().map(|t| eval_generation(&synth, t)).transpose()?;
            Ok((key, *v, synth, quality))
        })
        .collect::<Result<_>>()?;

    let image_dir = out.join("images");
    let mut rows = Vec::new();
    let mut csv = String::from("patient_id,laterality,view,mse,psnr,ssim\n");
    for (key, view, img, quality) in &results {
        let name = format!("{}_{}_{}.pgm", key.patient_id, key.laterality.code(), view);
        write_normalized_pgm(&image_dir.join(name), img)?;
        if let Some(q) = quality {
            let psnr = match q.psnr {
                Psnr::Finite(v) => v.to_string(),
                Psnr::Infinite => "inf".to_owned(),
            };
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                key.patient_id,
                key.laterality.code(),
                view,
                q.mse,
                psnr,
                q.ssim
            ));
            rows.push(GenerationRow {
                record: key.clone(),
                view: *view,
                quality: *q,
            });
        }
    }
    let per_view = View::ALL
        .into_iter()
        .map(|v| {
            let qs: Vec<&GenQuality> = rows.iter().filter(|r| r.view == v).map(|r| &r.quality).collect();
            ViewQuality {
                view: v,
                mse: aggregate(&qs.iter().map(|q| Some(q.mse)).collect::<Vec<_>>()),
                psnr: aggregate(&qs.iter().map(|q| q.psnr.finite()).collect::<Vec<_>>()),
                ssim: aggregate(&qs.iter().map(|q| Some(q.ssim)).collect::<Vec<_>>()),
            }
        })
        .collect();
    let report = GenerationReport {
        generated: results.len(),
        evaluated: rows.len(),
        per_view,
        rows,
    };
    let csv_path = out.join("generation_quality.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = out.join("generation_quality.json");
    let text = serde_json::to_string_pretty(&report).expect("generation report serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(report)
}

/// Writes a synthetic dataset with manifest and runnable config.
pub fn cmd_fixture(out: &Path, spec: Option<&Path>, seed: Option<u64>) -> Result<FixtureSummary> {
    let mut spec: FixtureSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => FixtureSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    write_fixture(out, &spec)
}

/// Machine-readable error body printed by the command-line tool.
pub fn error_json(err: &Error) -> String {
    serde_json::json!({
        "error": err.kind(),
        "message": err.to_string(),
        "exit_code": err.exit_code(),
    })
    .to_string()
}
