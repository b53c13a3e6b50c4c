//! Per-channel malignancy scorers and the score-table interchange format.
//!
//! Two backends feed the fusion stage through a [`ScoreMatrix`]: a CSV table
//! replaying probabilities produced elsewhere, and a pooled-pixel logistic
//! model trained here.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{BiopsyLabel, Channel, GrayImage, Laterality, Modality, RecordKey, View};
use crate::error::{Error, Result};

/// Decision rule: probabilities at or above one half are malignant.
pub fn predict_class(p: f64) -> BiopsyLabel {
    if p >= 0.5 {
        BiopsyLabel::Malignant
    } else {
        BiopsyLabel::Benign
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChannelKey {
    pub record: RecordKey,
    pub channel: Channel,
}

impl ChannelKey {
    pub fn new(record: RecordKey, channel: Channel) -> Self {
        ChannelKey { record, channel }
    }
}

impl fmt::Display for ChannelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.record.patient_id, self.record.laterality, self.channel.modality, self.channel.view
        )
    }
}

/// Malignancy probabilities keyed by breast and channel.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreMatrix {
    entries: BTreeMap<ChannelKey, f64>,
}

impl ScoreMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: ChannelKey, p: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::OutOfRangeProbability {
                key: key.to_string(),
                value: p,
            });
        }
        if self.entries.contains_key(&key) {
            return Err(Error::DuplicateKey {
                key: key.to_string(),
            });
        }
        self.entries.insert(key, p);
        Ok(())
    }

    pub fn get(&self, record: &RecordKey, channel: Channel) -> Option<f64> {
        self.entries
            .get(&ChannelKey::new(record.clone(), channel))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ChannelKey, f64)> {
        self.entries.iter().map(|(k, &v)| (k, v))
    }
}

const SCORE_HEADER: [&str; 5] = ["patient_id", "laterality", "modality", "view", "p_malignant"];

/// Reads a CSV score table with header `patient_id,laterality,modality,view,p_malignant`.
pub fn load_score_table(path: &Path) -> Result<ScoreMatrix> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_score_table(file)
}

pub fn parse_score_table<R: std::io::Read>(reader: R) -> Result<ScoreMatrix> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.iter().collect::<Vec<_>>() != SCORE_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", SCORE_HEADER.join(",")),
        });
    }
    let mut matrix = ScoreMatrix::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or_default();
        let bad = |e: Error| Error::Parse {
            line,
            message: e.to_string(),
        };
        let laterality: Laterality = field(1).parse().map_err(bad)?;
        let modality: Modality = field(2).parse().map_err(bad)?;
        let view: View = field(3).parse().map_err(bad)?;
        let p: f64 = field(4).parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid probability `{}`", field(4)),
        })?;
        if !p.is_finite() {
            return Err(Error::Parse {
                line,
                message: format!("invalid probability `{}`", field(4)),
            });
        }
        let key = ChannelKey::new(
            RecordKey::new(field(0), laterality),
            Channel::new(modality, view),
        );
        matrix.insert(key, p)?;
    }
    Ok(matrix)
}

/// Serializes in the same CSV layout `load_score_table` reads.
pub fn write_score_table(matrix: &ScoreMatrix) -> String {
    let mut out = SCORE_HEADER.join(",");
    out.push('\n');
    for (k, p) in matrix.iter() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            k.record.patient_id, k.record.laterality, k.channel.modality, k.channel.view, p
        ));
    }
    out
}

/// Anything mapping a preprocessed image to a malignancy probability.
pub trait Scorer {
    fn score(&self, img: &GrayImage) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub warmup: usize,
    pub lr_drop_factor: f64,
    pub lr_drop_patience: usize,
    pub feature_side: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            max_epochs: 300,
            patience: 50,
            warmup: 50,
            lr_drop_factor: 0.1,
            lr_drop_patience: 10,
            feature_side: 16,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.max_epochs == 0 || self.patience == 0 || self.lr_drop_patience == 0 {
            return bad("epoch counts must be positive");
        }
        if self.patience > self.max_epochs {
            return bad("patience must not exceed max_epochs");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return bad("lr_drop_factor must lie in (0, 1]");
        }
        if self.feature_side == 0 {
            return bad("feature_side must be positive");
        }
        Ok(())
    }
}

/// Block-mean pooling of a square image down to `side` x `side` features.
pub fn pool_features(img: &GrayImage, side: usize) -> Result<Vec<f64>> {
    let n = img.width();
    if !img.is_square() || side == 0 || !n.is_multiple_of(side) {
        return Err(Error::ShapeMismatch {
            expected: format!("square image with side divisible by {side}"),
            actual: img.shape_string(),
        });
    }
    let block = n / side;
    let inv = 1.0 / (block * block) as f64;
    let mut out = vec![0.0; side * side];
    for y in 0..n {
        let row = img.row(y);
        let fy = y / block;
        for (fx, chunk) in row.chunks_exact(block).enumerate() {
            out[fy * side + fx] += chunk.iter().sum::<f64>();
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    Ok(out)
}

/// Logistic model over pooled pixels; serializes as `{weights, bias, feature_side}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearScorer {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_side: usize,
}

impl LinearScorer {
    pub fn zero(feature_side: usize) -> Self {
        LinearScorer {
            weights: vec![0.0; feature_side * feature_side],
            bias: 0.0,
            feature_side,
        }
    }

    /// The complementary model: scores `1 - p` for every image.
    pub fn negated(&self) -> Self {
        LinearScorer {
            weights: self.weights.iter().map(|w| -w).collect(),
            bias: -self.bias,
            feature_side: self.feature_side,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scorer serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: LinearScorer =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if s.weights.len() != s.feature_side * s.feature_side {
            return Err(Error::InvalidConfig(format!(
                "{} weights for feature_side {}",
                s.weights.len(),
                s.feature_side
            )));
        }
        Ok(s)
    }

    pub fn logit(&self, features: &[f64]) -> f64 {
        self.bias + dot(&self.weights, features)
    }
}

impl Scorer for LinearScorer {
    fn score(&self, img: &GrayImage) -> Result<f64> {
        let features = pool_features(img, self.feature_side)?;
        Ok(logistic::sigmoid(self.logit(&features)))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cross-entropy objective with L2 weight decay. Parameters are laid out as
/// `[w_0, .., w_{d-1}, bias]`; the bias is not decayed.
pub mod logistic {
    use super::dot;

    pub fn sigmoid(z: f64) -> f64 {
        if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        }
    }

    /// `log(1 + e^z)` without overflow.
    fn softplus(z: f64) -> f64 {
        z.max(0.0) + (-z.abs()).exp().ln_1p()
    }

    fn logit(params: &[f64], x: &[f64]) -> f64 {
        let d = params.len() - 1;
        params[d] + dot(&params[..d], x)
    }

    /// Mean binary cross-entropy, no regularization.
    pub fn cross_entropy(params: &[f64], xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        let total: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, &y)| {
                let z = logit(params, x);
                softplus(z) - y * z
            })
            .sum();
        total / xs.len() as f64
    }

    pub fn objective(params: &[f64], xs: &[Vec<f64>], ys: &[f64], weight_decay: f64) -> f64 {
        let d = params.len() - 1;
        let l2: f64 = params[..d].iter().map(|w| w * w).sum();
        cross_entropy(params, xs, ys) + 0.5 * weight_decay * l2
    }

    pub fn gradient(params: &[f64], xs: &[Vec<f64>], ys: &[f64], weight_decay: f64) -> Vec<f64> {
        let d = params.len() - 1;
        let n = xs.len() as f64;
        let mut g = vec![0.0; d + 1];
        for (x, &y) in xs.iter().zip(ys) {
            let r = sigmoid(logit(params, x)) - y;
            for (gj, xj) in g[..d].iter_mut().zip(x) {
                *gj += r * xj;
            }
            g[d] += r;
        }
        for (j, gj) in g.iter_mut().enumerate() {
            *gj /= n;
            if j < d {
                *gj += weight_decay * params[j];
            }
        }
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

/// Result of [`train_reference`], with the trajectory kept for inspection.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub scorer: LinearScorer,
    /// Initial and selected parameters in standardized feature space.
    pub initial_params: Vec<f64>,
    pub best_params: Vec<f64>,
    /// Training objective at the start of each epoch.
    pub train_loss: Vec<f64>,
    /// Monitored loss after each epoch's update.
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
}

fn targets(labels: &[BiopsyLabel]) -> Vec<f64> {
    labels.iter().map(|l| f64::from(l.class_index())).collect()
}

/// Trains the pooled-pixel logistic scorer by full-batch gradient descent.
///
/// Features are standardized with training statistics and the standardization
/// is folded back into the returned weights. The validation cross-entropy is
/// monitored after every epoch: the learning rate is multiplied by
/// `lr_drop_factor` after `lr_drop_patience` epochs without improvement, and
/// training stops once `patience` epochs pass without improvement, but never
/// during the first `warmup` epochs. The best-validation parameters are returned.
pub fn train_reference<R: Rng + ?Sized>(
    train: &[(GrayImage, BiopsyLabel)],
    val: &[(GrayImage, BiopsyLabel)],
    hyper: &TrainHyper,
    rng: &mut R,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let labels: Vec<BiopsyLabel> = train.iter().map(|(_, l)| *l).collect();
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::SingleClassTrainingSet);
    }
    let side = hyper.feature_side;
    let raw_train = train
        .iter()
        .map(|(img, _)| pool_features(img, side))
        .collect::<Result<Vec<_>>>()?;
    let raw_val = val
        .iter()
        .map(|(img, _)| pool_features(img, side))
        .collect::<Result<Vec<_>>>()?;

    let d = side * side;
    let n = raw_train.len() as f64;
    let mut mean = vec![0.0; d];
    for x in &raw_train {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut scale = vec![0.0; d];
    for x in &raw_train {
        for ((s, v), m) in scale.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut scale {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let standardize = |x: &Vec<f64>| -> Vec<f64> {
        x.iter()
            .zip(&mean)
            .zip(&scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };
    let xs: Vec<Vec<f64>> = raw_train.iter().map(standardize).collect();
    let ys = targets(&labels);
    let (vx, vy) = if val.is_empty() {
        (xs.clone(), ys.clone())
    } else {
        (
            raw_val.iter().map(standardize).collect::<Vec<_>>(),
            targets(&val.iter().map(|(_, l)| *l).collect::<Vec<_>>()),
        )
    };

    let mut params: Vec<f64> = (0..d).map(|_| rng.random_range(-0.01..0.01)).collect();
    params.push(0.0);
    let initial_params = params.clone();

    let mut lr = hyper.learning_rate;
    let mut best_params = params.clone();
    let mut best_loss = logistic::cross_entropy(&params, &vx, &vy);
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut plateau = 0;
    let mut train_loss = Vec::new();
    let mut val_loss = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut epochs_run = 0;

    for epoch in 1..=hyper.max_epochs {
        epochs_run = epoch;
        train_loss.push(logistic::objective(&params, &xs, &ys, hyper.weight_decay));
        let g = logistic::gradient(&params, &xs, &ys, hyper.weight_decay);
        for (p, gi) in params.iter_mut().zip(&g) {
            *p -= lr * gi;
        }
        let v = logistic::cross_entropy(&params, &vx, &vy);
        val_loss.push(v);
        if v < best_loss {
            best_loss = v;
            best_params.clone_from(&params);
            best_epoch = epoch;
            since_best = 0;
            plateau = 0;
        } else {
            since_best += 1;
            plateau += 1;
        }
        if plateau >= hyper.lr_drop_patience {
            lr *= hyper.lr_drop_factor;
            plateau = 0;
        }
        if epoch > hyper.warmup && since_best >= hyper.patience {
            stop_reason = StopReason::EarlyStopping;
            break;
        }
    }

    // fold standardization into raw-feature weights
    let weights: Vec<f64> = best_params[..d]
        .iter()
        .zip(&scale)
        .map(|(w, s)| w / s)
        .collect();
    let bias = best_params[d] - weights.iter().zip(&mean).map(|(w, m)| w * m).sum::<f64>();
    Ok(TrainOutcome {
        scorer: LinearScorer {
            weights,
            bias,
            feature_side: side,
        },
        initial_params,
        best_params,
        train_loss,
        val_loss,
        best_epoch,
        epochs_run,
        stop_reason,
    })
}
