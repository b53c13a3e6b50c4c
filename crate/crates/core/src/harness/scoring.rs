//! Per-fold channel scores from either score tables or trained reference scorers.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{BiopsyLabel, Channel, GrayImage, Modality, RecordKey, StudyRecord, View};
use crate::error::{Error, Result};
use crate::generators::{generate, GenerationContext, GeneratorSpec};
use crate::manifest::DatasetManifest;
use crate::preprocess::{augment, preprocess, AugmentConfig, PreprocessConfig};
use crate::raster::read_raster;
use crate::scorers::{train_reference, ChannelKey, ScoreMatrix, Scorer, StopReason, TrainHyper};
use crate::seed::{derive_rng, SeedPath};

use super::cv::FoldSplit;

/// How one channel's probabilities are obtained.
#[derive(Clone, Debug)]
pub enum ChannelBackend {
    /// Replayed probabilities; `synthetic` holds scores of generated CESM images.
    Table {
        real: ScoreMatrix,
        synthetic: Option<ScoreMatrix>,
    },
    /// Pooled-pixel logistic scorer trained per fold on the training split.
    Reference { hyper: TrainHyper },
}

/// Preprocessed real images and generated CESM images, keyed by channel.
#[derive(Debug, Default)]
pub struct ImageCache {
    pub real: BTreeMap<ChannelKey, GrayImage>,
    pub synthetic: BTreeMap<ChannelKey, GrayImage>,
}

impl ImageCache {
    /// Loads and preprocesses every image of `records`, then synthesizes CESM
    /// views when a generator is configured for each view.
    pub fn build(
        manifest: &DatasetManifest,
        records: &[&StudyRecord],
        cfg: &PreprocessConfig,
        generators: &[GeneratorSpec],
        root_seed: &SeedPath,
    ) -> Result<Self> {
        let jobs: Vec<(&StudyRecord, Channel, &std::path::PathBuf)> = records
            .iter()
            .flat_map(|r| {
                Channel::ALL
                    .into_iter()
                    .filter_map(move |c| r.image(c).map(|p| (*r, c, p)))
            })
            .collect();
        let loaded: Vec<(ChannelKey, GrayImage)> = jobs
            .par_iter()
            .map(|(r, c, rel)| {
                let raw = read_raster(&manifest.resolve(rel))?.image;
                Ok((ChannelKey::new(r.key(), *c), preprocess(&raw, r.laterality, cfg)?))
            })
            .collect::<Result<_>>()?;
        let real: BTreeMap<ChannelKey, GrayImage> = loaded.into_iter().collect();

        let by_view: BTreeMap<View, &GeneratorSpec> = generators.iter().map(|g| (g.view, g)).collect();
        let mut synthetic = BTreeMap::new();
        if View::ALL.iter().all(|v| by_view.contains_key(v)) {
            let gen_jobs: Vec<(RecordKey, View)> = records
                .iter()
                .flat_map(|r| View::ALL.into_iter().map(move |v| (r.key(), v)))
                .collect();
            let made: Vec<(ChannelKey, GrayImage)> = gen_jobs
                .par_iter()
                .map(|(key, view)| {
                    let source = &real[&ChannelKey::new(key.clone(), Channel::new(Modality::F, *view))];
                    let ctx = GenerationContext {
                        record: key,
                        root: &manifest.root,
                        target: None,
                        seed: root_seed.child(&format!("generate:{key}"), view.index()),
                    };
                    let img = generate(by_view[view], source, &ctx)?;
                    Ok((ChannelKey::new(key.clone(), Channel::new(Modality::C, *view)), img))
                })
                .collect::<Result<_>>()?;
            synthetic.extend(made);
        }
        Ok(ImageCache { real, synthetic })
    }
}

/// Summary of one reference-scorer training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSummary {
    pub channel: Channel,
    pub train_images: usize,
    pub val_images: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
}

/// Validation and test probabilities of one fold.
#[derive(Debug, Default)]
pub struct FoldScores {
    pub real: ScoreMatrix,
    pub synthetic: ScoreMatrix,
    pub training: Vec<TrainingSummary>,
}

fn labelled<'a>(
    keys: &BTreeSet<RecordKey>,
    channel: Channel,
    images: &'a BTreeMap<ChannelKey, GrayImage>,
    labels: &BTreeMap<RecordKey, BiopsyLabel>,
) -> Vec<(&'a RecordKey, &'a GrayImage, BiopsyLabel)> {
    keys.iter()
        .filter_map(|k| {
            images
                .get_key_value(&ChannelKey::new(k.clone(), channel))
                .map(|(ck, img)| (&ck.record, img, labels[k]))
        })
        .collect()
}

/// Scores the validation and test records of `split` on the given channels.
pub fn score_fold(
    split: &FoldSplit,
    channels: &[Channel],
    backends: &BTreeMap<Channel, ChannelBackend>,
    cache: &ImageCache,
    labels: &BTreeMap<RecordKey, BiopsyLabel>,
    augmentation: Option<(&AugmentConfig, usize)>,
    seed: &SeedPath,
) -> Result<FoldScores> {
    let mut out = FoldScores::default();
    let targets: BTreeSet<RecordKey> = split.val.union(&split.test).cloned().collect();
    for &channel in channels {
        let backend = backends.get(&channel).ok_or_else(|| Error::UntrainedScorer {
            channel: channel.to_string(),
        })?;
        match backend {
            ChannelBackend::Table { real, synthetic } => {
                for key in &targets {
                    if let Some(p) = real.get(key, channel) {
                        out.real.insert(ChannelKey::new(key.clone(), channel), p)?;
                    }
                    if let Some(p) = synthetic.as_ref().and_then(|s| s.get(key, channel)) {
                        out.synthetic.insert(ChannelKey::new(key.clone(), channel), p)?;
                    }
                }
            }
            ChannelBackend::Reference { hyper } => {
                let mut train: Vec<(GrayImage, BiopsyLabel)> = Vec::new();
                for (key, img, label) in labelled(&split.train, channel, &cache.real, labels) {
                    train.push((img.clone(), label));
                    if let Some((cfg, copies)) = augmentation {
                        for copy in 0..copies {
                            let path = seed
                                .child("augment", channel.index() as u64)
                                .child(&key.to_string(), copy as u64);
                            train.push((augment(img, cfg, &mut derive_rng(&path)), label));
                        }
                    }
                }
                let val: Vec<(GrayImage, BiopsyLabel)> = labelled(&split.val, channel, &cache.real, labels)
                    .into_iter()
                    .map(|(_, img, l)| (img.clone(), l))
                    .collect();
                let mut rng = derive_rng(&seed.child("train", channel.index() as u64));
                let outcome = train_reference(&train, &val, hyper, &mut rng)?;
                out.training.push(TrainingSummary {
                    channel,
                    train_images: train.len(),
                    val_images: val.len(),
                    best_epoch: outcome.best_epoch,
                    epochs_run: outcome.epochs_run,
                    stop_reason: outcome.stop_reason,
                });
                for key in &targets {
                    let ck = ChannelKey::new(key.clone(), channel);
                    if let Some(img) = cache.real.get(&ck) {
                        out.real.insert(ck.clone(), outcome.scorer.score(img)?)?;
                    }
                    if let Some(img) = cache.synthetic.get(&ck) {
                        out.synthetic.insert(ck, outcome.scorer.score(img)?)?;
                    }
                }
            }
        }
    }
    Ok(out)
}
