//! MCC-weighted late fusion across views and then across modalities.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{BiopsyLabel, Channel, Modality, RecordKey, View};
use crate::error::{Error, Result};
use crate::metrics::{confusion, mcc};
use crate::scorers::{predict_class, ChannelKey, ScoreMatrix};

pub const DEFAULT_FLOOR: f64 = 1e-6;

/// Weighted average of two probabilities, each weight raised to at least `floor`.
/// The result always lies between the two inputs.
pub fn fuse_pair(p_a: f64, p_b: f64, w_a: f64, w_b: f64, floor: f64) -> f64 {
    let (wa, wb) = (w_a.max(floor), w_b.max(floor));
    let t = wb / (wa + wb);
    let (lo, hi) = if p_a <= p_b { (p_a, p_b) } else { (p_b, p_a) };
    (p_a + (p_b - p_a) * t).clamp(lo, hi)
}

pub fn fuse_views(p_cc: f64, p_mlo: f64, w_cc: f64, w_mlo: f64, floor: f64) -> f64 {
    fuse_pair(p_cc, p_mlo, w_cc, w_mlo, floor)
}

pub fn fuse_modalities(p_f: f64, p_c: f64, w_f: f64, w_c: f64, floor: f64) -> f64 {
    fuse_pair(p_f, p_c, w_f, w_c, floor)
}

/// Validation MCCs used as fusion weights. Raw values are kept unclamped;
/// the floor only applies inside fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub view_mcc: BTreeMap<Channel, f64>,
    pub modality_mcc: BTreeMap<Modality, f64>,
    pub floor: f64,
}

impl FusionWeights {
    pub fn new(view_mcc: [f64; 4], modality_mcc: [f64; 2], floor: f64) -> Self {
        FusionWeights {
            view_mcc: Channel::ALL.into_iter().zip(view_mcc).collect(),
            modality_mcc: Modality::ALL.into_iter().zip(modality_mcc).collect(),
            floor,
        }
    }

    pub fn uniform(floor: f64) -> Self {
        Self::new([1.0; 4], [1.0; 2], floor)
    }

    pub fn view(&self, channel: Channel) -> f64 {
        self.view_mcc[&channel]
    }

    pub fn modality(&self, m: Modality) -> f64 {
        self.modality_mcc[&m]
    }

    pub fn validate(&self) -> Result<()> {
        if self.floor.is_nan() || self.floor <= 0.0 {
            return Err(Error::InvalidConfig("fusion floor must be positive".into()));
        }
        let missing: Vec<String> = Channel::ALL
            .iter()
            .filter(|c| !self.view_mcc.contains_key(c))
            .map(|c| c.to_string())
            .chain(
                Modality::ALL
                    .iter()
                    .filter(|m| !self.modality_mcc.contains_key(m))
                    .map(|m| m.to_string()),
            )
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingChannel { keys: missing })
        }
    }

    /// Names of weights at or below the floor, i.e. where fusion clamped them.
    pub fn floored(&self) -> Vec<String> {
        self.view_mcc
            .iter()
            .filter(|(_, &w)| w <= self.floor)
            .map(|(c, _)| c.to_string())
            .chain(
                self.modality_mcc
                    .iter()
                    .filter(|(_, &w)| w <= self.floor)
                    .map(|(m, _)| m.to_string()),
            )
            .collect()
    }

    /// View-fused probability for one modality.
    pub fn fuse_modality_views(&self, m: Modality, p_cc: f64, p_mlo: f64) -> f64 {
        fuse_views(
            p_cc,
            p_mlo,
            self.view(Channel::new(m, View::CC)),
            self.view(Channel::new(m, View::MLO)),
            self.floor,
        )
    }
}

/// Per-channel probabilities for one breast, indexed by [`Channel::index`].
pub type ChannelProbs = [f64; 4];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedDecision {
    pub p: f64,
    pub class: BiopsyLabel,
    pub p_f: f64,
    pub p_c: f64,
}

/// View fusion per modality, modality fusion, then the one-half threshold.
pub fn classify_probs(probs: &ChannelProbs, weights: &FusionWeights) -> FusedDecision {
    let p_f = weights.fuse_modality_views(Modality::F, probs[0], probs[1]);
    let p_c = weights.fuse_modality_views(Modality::C, probs[2], probs[3]);
    let p = fuse_modalities(
        p_f,
        p_c,
        weights.modality(Modality::F),
        weights.modality(Modality::C),
        weights.floor,
    );
    FusedDecision {
        p,
        class: predict_class(p),
        p_f,
        p_c,
    }
}

/// Collects the four channel probabilities of `record`, naming any that are absent.
pub fn gather_probs(record: &RecordKey, scores: &ScoreMatrix) -> Result<ChannelProbs> {
    let mut probs = [0.0; 4];
    let mut missing = Vec::new();
    for c in Channel::ALL {
        match scores.get(record, c) {
            Some(p) => probs[c.index()] = p,
            None => missing.push(ChannelKey::new(record.clone(), c).to_string()),
        }
    }
    if missing.is_empty() {
        Ok(probs)
    } else {
        Err(Error::MissingChannel { keys: missing })
    }
}

pub fn classify_record(
    record: &RecordKey,
    scores: &ScoreMatrix,
    weights: &FusionWeights,
) -> Result<FusedDecision> {
    Ok(classify_probs(&gather_probs(record, scores)?, weights))
}

/// Channel MCCs from thresholded channel scores, then modality MCCs from the
/// view-fused unimodal predictions.
pub fn compute_weights(
    val_scores: &ScoreMatrix,
    val_labels: &BTreeMap<RecordKey, BiopsyLabel>,
    floor: f64,
) -> Result<FusionWeights> {
    compute_weights_for(val_scores, val_labels, floor, &Modality::ALL)
}

/// As [`compute_weights`], restricted to the given modalities. Entries for
/// other modalities are left out of the returned maps.
pub fn compute_weights_for(
    val_scores: &ScoreMatrix,
    val_labels: &BTreeMap<RecordKey, BiopsyLabel>,
    floor: f64,
    modalities: &[Modality],
) -> Result<FusionWeights> {
    if val_labels.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let channels: Vec<Channel> = Channel::ALL
        .into_iter()
        .filter(|c| modalities.contains(&c.modality))
        .collect();
    let mut columns: BTreeMap<Channel, Vec<f64>> = BTreeMap::new();
    let mut missing = Vec::new();
    for key in val_labels.keys() {
        for &c in &channels {
            match val_scores.get(key, c) {
                Some(p) => columns.entry(c).or_default().push(p),
                None => missing.push(ChannelKey::new(key.clone(), c).to_string()),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingChannel { keys: missing });
    }
    let truth: Vec<BiopsyLabel> = val_labels.values().copied().collect();
    let mcc_of = |probs: &mut dyn Iterator<Item = f64>| -> Result<f64> {
        let preds: Vec<BiopsyLabel> = probs.map(predict_class).collect();
        Ok(mcc(&confusion(&preds, &truth)?))
    };

    let mut view_mcc = BTreeMap::new();
    for (&c, col) in &columns {
        view_mcc.insert(c, mcc_of(&mut col.iter().copied())?);
    }
    let mut modality_mcc = BTreeMap::new();
    for &m in modalities {
        let cc = Channel::new(m, View::CC);
        let mlo = Channel::new(m, View::MLO);
        let (w_cc, w_mlo) = (view_mcc[&cc], view_mcc[&mlo]);
        let mut fused = columns[&cc]
            .iter()
            .zip(&columns[&mlo])
            .map(|(&a, &b)| fuse_views(a, b, w_cc, w_mlo, floor));
        modality_mcc.insert(m, mcc_of(&mut fused)?);
    }
    Ok(FusionWeights {
        view_mcc,
        modality_mcc,
        floor,
    })
}
