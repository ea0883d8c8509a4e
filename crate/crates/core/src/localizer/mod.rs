//! Text prompt → semantic labels → channel mask.
//!
//! A hashing bag-of-tokens featurizer feeds a linear multi-label scorer trained
//! with the ZLPR loss; labels whose score is positive fire, and their channels
//! (expanded to whole one-hot groups) form the edit mask.

pub mod corpus;

use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hasher;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{ChannelMask, ParameterSchema};
use crate::semantic::Lexicon;
use crate::taxonomy::normalize_phrase;

pub use corpus::{CorpusConfig, CorpusExample};

pub const DEFAULT_HASH_DIM: usize = 4096;
pub const LOCALIZER_FORMAT: &str = "charedit.localizer";
pub const LOCALIZER_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalizerError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("example {index}: unknown label `{label}`")]
    UnknownLabel { index: usize, label: String },
    #[error("label `{0}` is not in the schema's label map")]
    UnresolvableLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("training diverged at epoch {epoch}: loss {loss} (previous {previous})")]
    Diverged { epoch: usize, loss: f64, previous: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("artifact: {0}")]
    Artifact(String),
}

/// Ordered, unique label identifiers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new(labels: Vec<String>) -> Result<Self, LocalizerError> {
        let mut seen = BTreeSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(LocalizerError::DuplicateLabel(l.clone()));
            }
        }
        Ok(LabelSet { labels })
    }

    /// All labels of a schema, in map order.
    pub fn from_schema(schema: &ParameterSchema) -> Self {
        LabelSet { labels: schema.labels() }
    }

    pub fn check_against(&self, schema: &ParameterSchema) -> Result<(), LocalizerError> {
        match self.labels.iter().find(|l| !schema.label_channel_map.contains_key(*l)) {
            Some(l) => Err(LocalizerError::UnresolvableLabel(l.clone())),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }
}

/// Sparse feature vector: `(index, value)` pairs with distinct indices.
pub type SparseFeatures = Vec<(usize, f64)>;

/// Hashes unigrams and bigrams of the normalized prompt into `dim` buckets;
/// the result is L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashingFeaturizer {
    pub dim: usize,
}

impl Default for HashingFeaturizer {
    fn default() -> Self {
        HashingFeaturizer { dim: DEFAULT_HASH_DIM }
    }
}

impl HashingFeaturizer {
    fn bucket(&self, token: &str) -> usize {
        let mut h = FnvHasher::default();
        h.write(token.as_bytes());
        (h.finish() % self.dim as u64) as usize
    }

    pub fn features(&self, text: &str) -> SparseFeatures {
        let norm = normalize_phrase(text);
        let tokens: Vec<&str> = norm.split(' ').filter(|t| !t.is_empty()).collect();
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for t in &tokens {
            *counts.entry(self.bucket(t)).or_default() += 1.0;
        }
        for w in tokens.windows(2) {
            *counts.entry(self.bucket(&format!("{} {}", w[0], w[1]))).or_default() += 1.0;
        }
        let len = counts.values().map(|v| v * v).sum::<f64>().sqrt();
        counts.into_iter().map(|(i, v)| (i, v / len)).collect()
    }
}

/// Linear multi-label scorer with a zero decision threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizerModel {
    pub format: String,
    pub version: u32,
    pub labels: LabelSet,
    pub featurizer: HashingFeaturizer,
    /// Row-major `L × H`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LocalizerModel {
    pub fn zeros(labels: LabelSet, featurizer: HashingFeaturizer) -> Self {
        let l = labels.len();
        LocalizerModel {
            format: LOCALIZER_FORMAT.into(),
            version: LOCALIZER_VERSION,
            weights: vec![0.0; l * featurizer.dim],
            bias: vec![0.0; l],
            labels,
            featurizer,
        }
    }

    fn scores_sparse(&self, feats: &SparseFeatures) -> Vec<f64> {
        let h = self.featurizer.dim;
        (0..self.labels.len())
            .map(|l| {
                let row = &self.weights[l * h..(l + 1) * h];
                self.bias[l] + feats.iter().map(|&(i, v)| row[i] * v).sum::<f64>()
            })
            .collect()
    }

    pub fn scores(&self, prompt: &str) -> Vec<f64> {
        self.scores_sparse(&self.featurizer.features(prompt))
    }

    /// Indices of labels with a positive score.
    pub fn predict(&self, prompt: &str) -> Vec<usize> {
        self.scores(prompt).iter().enumerate().filter(|(_, s)| **s > 0.0).map(|(i, _)| i).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, LocalizerError> {
        let m: LocalizerModel = serde_json::from_str(s).map_err(|e| LocalizerError::Artifact(e.to_string()))?;
        if m.format != LOCALIZER_FORMAT || m.version != LOCALIZER_VERSION {
            return Err(LocalizerError::Artifact(format!("unsupported {} v{}", m.format, m.version)));
        }
        if m.weights.len() != m.labels.len() * m.featurizer.dim || m.bias.len() != m.labels.len() {
            return Err(LocalizerError::Artifact("weight shape does not match labels".into()));
        }
        Ok(m)
    }
}

/// Numerically stable `log(1 + Σ exp(v))`.
fn log1p_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(0.0f64, f64::max);
    let sum: f64 = (-max).exp() + values.map(|v| (v - max).exp()).sum::<f64>();
    max + sum.ln()
}

/// ZLPR loss `log(1 + Σ_neg e^{s_i}) + log(1 + Σ_pos e^{−s_j})` and its
/// gradient with respect to the scores.
pub fn zlpr_loss(scores: &[f64], positive: &[bool]) -> (f64, Vec<f64>) {
    assert_eq!(scores.len(), positive.len(), "scores and label indicator differ in length");
    let neg = scores.iter().zip(positive).filter(|(_, p)| !**p).map(|(s, _)| *s);
    let pos = scores.iter().zip(positive).filter(|(_, p)| **p).map(|(s, _)| -*s);
    let neg_term = log1p_sum_exp(neg);
    let pos_term = log1p_sum_exp(pos);
    // d/ds_i of log(1 + Σ e^{v}) is e^{v_i} / (1 + Σ e^{v}) = exp(v_i − term)
    let grad = scores
        .iter()
        .zip(positive)
        .map(|(&s, &p)| if p { -(-s - pos_term).exp() } else { (s - neg_term).exp() })
        .collect();
    (neg_term + pos_term, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 20, lr: 2.0, batch_size: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

struct Encoded {
    features: SparseFeatures,
    positive: Vec<bool>,
}

fn encode_corpus(
    corpus: &[CorpusExample],
    labels: &LabelSet,
    featurizer: &HashingFeaturizer,
) -> Result<Vec<Encoded>, LocalizerError> {
    corpus
        .iter()
        .enumerate()
        .map(|(index, ex)| {
            let mut positive = vec![false; labels.len()];
            for l in &ex.labels {
                let i = labels.index_of(l).ok_or_else(|| LocalizerError::UnknownLabel { index, label: l.clone() })?;
                positive[i] = true;
            }
            Ok(Encoded { features: featurizer.features(&ex.text), positive })
        })
        .collect()
}

fn mean_loss(model: &LocalizerModel, data: &[Encoded]) -> f64 {
    data.iter().map(|e| zlpr_loss(&model.scores_sparse(&e.features), &e.positive).0).sum::<f64>() / data.len() as f64
}

/// Mini-batch gradient descent on the mean ZLPR loss. Deterministic for a
/// given seed. Aborts with [`LocalizerError::Diverged`] if the epoch loss
/// stops being finite or climbs above the untrained model's loss; small
/// epoch-to-epoch rises are ordinary minibatch noise.
pub fn train(
    corpus: &[CorpusExample],
    labels: &LabelSet,
    featurizer: HashingFeaturizer,
    cfg: &TrainConfig,
) -> Result<(LocalizerModel, TrainReport), LocalizerError> {
    if corpus.is_empty() {
        return Err(LocalizerError::EmptyCorpus);
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(LocalizerError::Config(format!("batch {} lr {}", cfg.batch_size, cfg.lr)));
    }
    let data = encode_corpus(corpus, labels, &featurizer)?;
    let mut model = LocalizerModel::zeros(labels.clone(), featurizer);
    let h = featurizer.dim;
    let l = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let initial = mean_loss(&model, &data);
    let mut previous = initial;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    // sparse accumulation of the batch gradient
    let mut grad_w: BTreeMap<usize, f64> = BTreeMap::new();
    let mut grad_b = vec![0.0; l];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad_w.clear();
            grad_b.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &k in batch {
                let ex = &data[k];
                let (_, g) = zlpr_loss(&model.scores_sparse(&ex.features), &ex.positive);
                for (label, gl) in g.iter().enumerate() {
                    grad_b[label] += gl * scale;
                    for &(i, v) in &ex.features {
                        *grad_w.entry(label * h + i).or_default() += gl * v * scale;
                    }
                }
            }
            for (&i, g) in &grad_w {
                model.weights[i] -= cfg.lr * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&grad_b) {
                *b -= cfg.lr * g;
            }
        }
        let loss = mean_loss(&model, &data);
        if !loss.is_finite() || loss > initial {
            return Err(LocalizerError::Diverged { epoch, loss, previous });
        }
        epoch_losses.push(loss);
        previous = loss;
    }
    Ok((model, TrainReport { epoch_losses }))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
    pub examples: usize,
}

/// Micro-averaged precision, recall and F1 over every (example, label) pair.
pub fn evaluate(model: &LocalizerModel, corpus: &[CorpusExample]) -> Metrics {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for ex in corpus {
        let predicted: BTreeSet<&str> = model.predict(&ex.text).into_iter().map(|i| model.labels.name(i)).collect();
        let gold: BTreeSet<&str> = ex.labels.iter().map(String::as_str).collect();
        tp += predicted.intersection(&gold).count();
        fp += predicted.difference(&gold).count();
        fn_ += gold.difference(&predicted).count();
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let precision = ratio(tp, fp);
    let recall = ratio(tp, fn_);
    let micro_f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    Metrics {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        precision,
        recall,
        micro_f1,
        examples: corpus.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizationSource {
    Model,
    Lexicon,
    Unlocalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub mask: ChannelMask,
    pub labels: Vec<String>,
    pub source: LocalizationSource,
}

impl Localization {
    pub fn unlocalized(&self) -> bool {
        self.source == LocalizationSource::Unlocalized
    }
}

/// Maps a prompt to a group-uniform channel mask. Falls back to an exact
/// lexicon phrase lookup when no label fires, and to an all-ones mask flagged
/// as unlocalized when that fails too.
pub fn localize(
    prompt: &str,
    model: Option<&LocalizerModel>,
    schema: &ParameterSchema,
    lexicon: Option<&Lexicon>,
) -> Localization {
    let n = schema.len();
    if normalize_phrase(prompt).is_empty() {
        return Localization {
            mask: ChannelMask::ones(n),
            labels: Vec::new(),
            source: LocalizationSource::Unlocalized,
        };
    }
    if let Some(model) = model {
        let labels: Vec<String> = model
            .predict(prompt)
            .into_iter()
            .map(|i| model.labels.name(i).to_string())
            .filter(|l| schema.label_channel_map.contains_key(l))
            .collect();
        if !labels.is_empty() {
            let mask = schema.label_mask(labels.iter().map(String::as_str));
            return Localization { mask, labels, source: LocalizationSource::Model };
        }
    }
    if let Some(label) = lexicon.and_then(|lex| lex.get(prompt)).and_then(|e| e.label.clone()) {
        if schema.label_channel_map.contains_key(&label) {
            let mask = schema.label_mask([label.as_str()]);
            return Localization { mask, labels: vec![label], source: LocalizationSource::Lexicon };
        }
    }
    Localization { mask: ChannelMask::ones(n), labels: Vec::new(), source: LocalizationSource::Unlocalized }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zlpr_all_positive_zero_scores() {
        let (v, _) = zlpr_loss(&[0.0, 0.0], &[true, true]);
        assert!((v - 3f64.ln()).abs() < 1e-15);
        let (v, _) = zlpr_loss(&[0.0], &[true]);
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zlpr_extremes_do_not_overflow() {
        let (v, g) = zlpr_loss(&[1e4, -1e4, 3.0], &[false, true, true]);
        assert!(v.is_finite());
        assert!((v - (1e4 + 1e4)).abs() < 1e-6);
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn zlpr_limits_vanish() {
        let (v, _) = zlpr_loss(&[30.0; 4], &[true; 4]);
        assert!(v < 1e-9 * 4.0 + 4.0 * (-30f64).exp() && v < 1e-9);
        let (v, _) = zlpr_loss(&[-30.0; 4], &[false; 4]);
        assert!(v < 1e-9);
    }

    #[test]
    fn featurizer_is_normalized_and_stable() {
        let f = HashingFeaturizer::default();
        let a = f.features("Make the NOSE bigger!");
        let b = f.features("make the nose bigger");
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(f.features("").is_empty());
    }

    #[test]
    fn label_set_rejects_duplicates() {
        assert!(LabelSet::new(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn unknown_label_in_corpus() {
        let labels = LabelSet::new(vec!["nose".into()]).unwrap();
        let corpus = vec![CorpusExample { text: "x".into(), labels: vec!["hat".into()] }];
        let err = train(&corpus, &labels, HashingFeaturizer::default(), &TrainConfig::default()).unwrap_err();
        assert_eq!(err, LocalizerError::UnknownLabel { index: 0, label: "hat".into() });
    }

    #[test]
    fn empty_corpus() {
        let labels = LabelSet::new(vec!["nose".into()]).unwrap();
        assert_eq!(
            train(&[], &labels, HashingFeaturizer::default(), &TrainConfig::default()).unwrap_err(),
            LocalizerError::EmptyCorpus
        );
    }
}
