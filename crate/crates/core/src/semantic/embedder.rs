//! Synthetic joint embedding: a lexicon of phrase directions for text and a
//! fixed affine-plus-tanh projector for rendered features.

use std::collections::BTreeMap;
use std::hash::Hasher;

use fnv::FnvHasher;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Embedder, Renderer, SemanticError, MIN_EMBEDDING_NORM};
use crate::latent::{matrix_from_rows, rows_of, LatentModel, PriorModel};
use crate::schema::{ChannelBlock, ChannelKind, ParameterSchema, ParameterVector};
use crate::taxonomy::{normalize_phrase, LabelKind, Taxonomy};

pub const LEXICON_FORMAT: &str = "charedit.lexicon";
pub const LEXICON_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub phrase: String,
    pub direction: Vec<f64>,
    /// Semantic label the phrase refers to, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Phrase → unit direction table. Lookups are on the normalized phrase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub entries: Vec<LexiconEntry>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Lexicon {
    pub fn new(dim: usize, entries: Vec<LexiconEntry>) -> Result<Self, SemanticError> {
        let mut lex = Lexicon {
            format: LEXICON_FORMAT.into(),
            version: LEXICON_VERSION,
            dim,
            entries: Vec::new(),
            index: BTreeMap::new(),
        };
        for e in entries {
            lex.insert(e)?;
        }
        Ok(lex)
    }

    /// Adds or replaces an entry; the direction is normalized to unit length.
    pub fn insert(&mut self, entry: LexiconEntry) -> Result<(), SemanticError> {
        self.insert_with(entry, true)
    }

    fn insert_with(&mut self, mut entry: LexiconEntry, normalize: bool) -> Result<(), SemanticError> {
        if entry.direction.len() != self.dim {
            return Err(SemanticError::Dimension { expected: self.dim, actual: entry.direction.len() });
        }
        let norm = entry.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > MIN_EMBEDDING_NORM) {
            return Err(SemanticError::DegenerateEmbedding { which: "lexicon", norm });
        }
        if normalize {
            entry.direction.iter_mut().for_each(|v| *v /= norm);
        } else if (norm - 1.0).abs() > 1e-9 {
            return Err(SemanticError::Lexicon(format!("`{}` is not a unit direction (norm {norm})", entry.phrase)));
        }
        let key = normalize_phrase(&entry.phrase);
        entry.phrase = key.clone();
        match self.index.get(&key) {
            Some(&i) => self.entries[i] = entry,
            None => {
                self.index.insert(key, self.entries.len());
                self.entries.push(entry);
            }
        }
        Ok(())
    }

    pub fn get(&self, phrase: &str) -> Option<&LexiconEntry> {
        self.index.get(&normalize_phrase(phrase)).map(|&i| &self.entries[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("lexicon serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SemanticError> {
        let raw: Lexicon = serde_json::from_str(s).map_err(|e| SemanticError::Lexicon(e.to_string()))?;
        if raw.format != LEXICON_FORMAT || raw.version != LEXICON_VERSION {
            return Err(SemanticError::Lexicon(format!("unsupported {} v{}", raw.format, raw.version)));
        }
        // stored directions are kept bit for bit
        let mut lex = Lexicon::new(raw.dim, Vec::new())?;
        for e in raw.entries {
            lex.insert_with(e, false)?;
        }
        Ok(lex)
    }
}

/// Deterministic unit direction for a phrase absent from the lexicon.
pub fn hashed_direction(phrase: &str, dim: usize) -> DVector<f64> {
    let mut h = FnvHasher::default();
    h.write(normalize_phrase(phrase).as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
    let v = DVector::<f64>::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
    let n = v.norm();
    v / n
}

/// `e = tanh(P·f + offset)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureProjector {
    pub weights: DMatrix<f64>,
    pub offset: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub embed_dim: usize,
    pub seed: u64,
    pub gain: f64,
    /// Scale of the embedding of the reference face.
    pub reference_scale: f64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig { embed_dim: 64, seed: 0xc11f, gain: 1.0, reference_scale: 0.1 }
    }
}

impl FeatureProjector {
    /// Random projector whose output at `reference` features is a small fixed
    /// vector, so faces are told apart by how they differ from the reference.
    pub fn new(feature_dim: usize, reference: &DVector<f64>, cfg: ProjectorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w = Normal::new(0.0, cfg.gain / (feature_dim as f64).sqrt()).expect("finite");
        let weights = DMatrix::from_fn(cfg.embed_dim, feature_dim, |_, _| w.sample(&mut rng));
        let base = DVector::from_fn(cfg.embed_dim, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * cfg.reference_scale
        });
        let offset = base - &weights * reference;
        FeatureProjector { weights, offset }
    }

    pub fn embed(&self, f: &DVector<f64>) -> DVector<f64> {
        (&self.weights * f + &self.offset).map(f64::tanh)
    }

    pub fn vjp(&self, f: &DVector<f64>, upstream: &DVector<f64>) -> DVector<f64> {
        let e = self.embed(f);
        let d = upstream.component_mul(&e.map(|v| 1.0 - v * v));
        self.weights.tr_mul(&d)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectorArtifact {
    pub weights: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl From<&FeatureProjector> for ProjectorArtifact {
    fn from(p: &FeatureProjector) -> Self {
        ProjectorArtifact { weights: rows_of(&p.weights), offset: p.offset.iter().copied().collect() }
    }
}

impl TryFrom<ProjectorArtifact> for FeatureProjector {
    type Error = SemanticError;
    fn try_from(a: ProjectorArtifact) -> Result<Self, SemanticError> {
        let cols = a.weights.first().map_or(0, Vec::len);
        let weights = matrix_from_rows(&a.weights, cols).map_err(SemanticError::Lexicon)?;
        if weights.nrows() != a.offset.len() {
            return Err(SemanticError::Dimension { expected: weights.nrows(), actual: a.offset.len() });
        }
        Ok(FeatureProjector { weights, offset: DVector::from_vec(a.offset) })
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSemanticEmbedder {
    pub projector: FeatureProjector,
    pub lexicon: Lexicon,
}

impl SyntheticSemanticEmbedder {
    pub fn new(projector: FeatureProjector, lexicon: Lexicon) -> Result<Self, SemanticError> {
        if lexicon.dim != projector.weights.nrows() {
            return Err(SemanticError::Dimension { expected: projector.weights.nrows(), actual: lexicon.dim });
        }
        Ok(SyntheticSemanticEmbedder { projector, lexicon })
    }
}

impl Embedder for SyntheticSemanticEmbedder {
    fn feature_dim(&self) -> usize {
        self.projector.weights.ncols()
    }

    fn embed_dim(&self) -> usize {
        self.projector.weights.nrows()
    }

    fn embed_text(&self, text: &str) -> Result<DVector<f64>, SemanticError> {
        Ok(match self.lexicon.get(text) {
            Some(e) => DVector::from_column_slice(&e.direction),
            None => hashed_direction(text, self.embed_dim()),
        })
    }

    fn embed_feature(&self, f: &DVector<f64>) -> Result<DVector<f64>, SemanticError> {
        if f.len() != self.feature_dim() {
            return Err(SemanticError::Dimension { expected: self.feature_dim(), actual: f.len() });
        }
        Ok(self.projector.embed(f))
    }

    fn embed_feature_vjp(&self, f: &DVector<f64>, upstream: &DVector<f64>) -> Result<DVector<f64>, SemanticError> {
        if f.len() != self.feature_dim() {
            return Err(SemanticError::Dimension { expected: self.feature_dim(), actual: f.len() });
        }
        if upstream.len() != self.embed_dim() {
            return Err(SemanticError::Dimension { expected: self.embed_dim(), actual: upstream.len() });
        }
        Ok(self.projector.vjp(f, upstream))
    }
}

/// Largest bone displacement of a lexicon target, in normalized units.
const TARGET_PEAK: f64 = 0.6;

/// Character edit that an adjective of a label stands for, applied to `base`.
/// Only the label's channels change.
pub fn semantic_target(
    schema: &ParameterSchema,
    taxonomy: &Taxonomy,
    label: &str,
    pair: usize,
    side: usize,
    base: &ParameterVector,
    seed: u64,
) -> ParameterVector {
    let spec = taxonomy.get(label).expect("label in taxonomy");
    let channels: Vec<usize> = schema.label_channel_map[label].iter().copied().collect();
    let mut h = FnvHasher::default();
    h.write(label.as_bytes());
    h.write_usize(pair);
    let mut rng = ChaCha8Rng::seed_from_u64(h.finish() ^ seed);
    let sign = if side == 0 { 1.0 } else { -1.0 };
    let mut x = base.clone();
    match spec.kind {
        LabelKind::Bone => {
            let mut v: Vec<f64> = channels.iter().map(|_| StandardNormal.sample(&mut rng)).collect();
            let adjective = &spec.modifiers[pair][0];
            // width adjectives act mostly on the label's width channel
            if adjective == "wider" {
                for (k, &ch) in channels.iter().enumerate() {
                    if schema.channels[ch].human_name.ends_with("_width") {
                        v[k] = 3.0 * v.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1.0);
                    }
                }
            }
            let peak = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            for (k, &ch) in channels.iter().enumerate() {
                x.0[ch] += sign * TARGET_PEAK * v[k] / peak;
            }
        }
        LabelKind::Makeup => {
            for &ch in &channels {
                let c = &schema.channels[ch];
                if c.kind == ChannelKind::Continuous && c.block == ChannelBlock::Makeup {
                    let level: f64 = rand::Rng::random_range(&mut rng, 0.5..1.0);
                    x.0[ch] = if side == 0 { 0.9 * level } else { 0.1 * level };
                }
            }
            for g in &schema.discrete_groups {
                if !channels.contains(&g.start) {
                    continue;
                }
                // distinct members for the two sides of the pair
                let a = rand::Rng::random_range(&mut rng, 0..g.len);
                let b = (a + 1 + rand::Rng::random_range(&mut rng, 0..g.len - 1)) % g.len;
                let pick = if side == 0 { a } else { b };
                for (m, i) in g.range().enumerate() {
                    x.0[i] = if m == pick { 1.0 } else { 0.0 };
                }
            }
        }
    }
    // only the label's channels are made legal; the rest of `base` may stay relaxed
    for &ch in &channels {
        if let Some([lo, hi]) = schema.channels[ch].bounds {
            x.0[ch] = x.0[ch].clamp(lo, hi);
        }
    }
    x
}

/// Builds the lexicon: every `<adjective> <label phrase>` maps to the
/// embedding of the relaxed prior-mean character edited accordingly and
/// projected into the latent space, so every entry is reachable by the solver
/// from the prior mean.
pub fn synthesize_lexicon(
    schema: &ParameterSchema,
    taxonomy: &Taxonomy,
    latent: &LatentModel,
    prior: &PriorModel,
    renderer: &dyn Renderer,
    projector: &FeatureProjector,
    seed: u64,
) -> Result<Lexicon, SemanticError> {
    let dim = projector.weights.nrows();
    let base = latent.decode(&prior.mu_z).map_err(|e| SemanticError::Lexicon(e.to_string()))?;
    let mut lexicon = Lexicon::new(dim, Vec::new())?;
    for spec in &taxonomy.labels {
        if !schema.label_channel_map.contains_key(&spec.key) {
            continue;
        }
        for (pair, adjectives) in spec.modifiers.iter().enumerate() {
            for (side, adjective) in adjectives.iter().enumerate() {
                let target = semantic_target(schema, taxonomy, &spec.key, pair, side, &base, seed);
                let z = latent.encode(&target).map_err(|e| SemanticError::Lexicon(e.to_string()))?;
                let reachable = latent.decode(&z).map_err(|e| SemanticError::Lexicon(e.to_string()))?;
                let e = projector.embed(&renderer.render(&reachable)?);
                lexicon.insert(LexiconEntry {
                    phrase: spec.prompt_for(adjective),
                    direction: e.iter().copied().collect(),
                    label: Some(spec.key.clone()),
                })?;
            }
        }
    }
    Ok(lexicon)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashed_direction_is_stable_unit() {
        let a = hashed_direction("A secret agent", 64);
        let b = hashed_direction("a   secret agent!", 64);
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert_ne!(a, hashed_direction("a pirate", 64));
    }

    #[test]
    fn lexicon_lookup_and_json() {
        let mut lex = Lexicon::new(3, Vec::new()).unwrap();
        lex.insert(LexiconEntry {
            phrase: "Bigger Nose".into(),
            direction: vec![0.0, 3.0, 4.0],
            label: Some("nose".into()),
        })
        .unwrap();
        let e = lex.get("bigger nose").unwrap();
        assert_eq!(e.direction, vec![0.0, 0.6, 0.8]);
        let back = Lexicon::from_json(&lex.to_json()).unwrap();
        assert_eq!(back.get("bigger  nose").unwrap().label.as_deref(), Some("nose"));
        assert!(lex.insert(LexiconEntry { phrase: "x".into(), direction: vec![0.0; 3], label: None }).is_err());
    }
}
