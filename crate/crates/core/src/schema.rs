//! Character control parameter layout.
//!
//! A [`ParameterSchema`] describes the `N` channels of a character: continuous
//! bone and makeup sliders with bounds, and discrete makeup choices encoded as
//! one-hot groups. It also carries the association between semantic labels
//! ("nose", "eyeshadow", ...) and the channels they control, which is what turns
//! a localized text prompt into a [`ChannelMask`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCHEMA_FORMAT: &str = "charedit.schema";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemaError {
    #[error("dimension mismatch: expected {expected} channels, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("mask is not uniform over discrete group `{group}` (channels {start}..{end})")]
    MaskNotGroupUniform { group: String, start: usize, end: usize },
    #[error("invalid schema: {0}")]
    Invalid(String),
    #[error("schema hash mismatch: expected {expected}, got {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("serialization: {0}")]
    Serde(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Continuous,
    DiscreteMember,
}

/// Which part of the character a channel belongs to. Bone channels are
/// compressed by PCA, makeup channels are carried through the latent space raw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelBlock {
    Bone,
    Makeup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDescriptor {
    pub index: usize,
    pub kind: ChannelKind,
    pub block: ChannelBlock,
    /// `[lo, hi]` for continuous channels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
    pub human_name: String,
    /// Neutral value of a continuous channel.
    #[serde(default)]
    pub default: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteGroup {
    pub id: String,
    pub start: usize,
    pub len: usize,
    /// Member selected by the neutral character.
    #[serde(default)]
    pub default_member: usize,
}

impl DiscreteGroup {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSchema {
    pub format: String,
    pub version: u32,
    pub role_name: String,
    pub channels: Vec<ChannelDescriptor>,
    pub discrete_groups: Vec<DiscreteGroup>,
    pub label_channel_map: BTreeMap<String, BTreeSet<usize>>,
}

impl ParameterSchema {
    /// Builds a schema and checks every structural invariant.
    pub fn new(
        role_name: impl Into<String>,
        channels: Vec<ChannelDescriptor>,
        discrete_groups: Vec<DiscreteGroup>,
        label_channel_map: BTreeMap<String, BTreeSet<usize>>,
    ) -> Result<Self, SchemaError> {
        let schema = ParameterSchema {
            format: SCHEMA_FORMAT.to_string(),
            version: SCHEMA_VERSION,
            role_name: role_name.into(),
            channels,
            discrete_groups,
            label_channel_map,
        };
        schema.check()?;
        Ok(schema)
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn check(&self) -> Result<(), SchemaError> {
        let invalid = |msg: String| Err(SchemaError::Invalid(msg));
        if self.format != SCHEMA_FORMAT {
            return invalid(format!("unknown format `{}`", self.format));
        }
        if self.version != SCHEMA_VERSION {
            return invalid(format!("unsupported version {}", self.version));
        }
        let n = self.channels.len();
        if n == 0 {
            return invalid("schema has no channels".into());
        }
        for (i, c) in self.channels.iter().enumerate() {
            if c.index != i {
                return invalid(format!("channel at position {i} has index {}", c.index));
            }
            match c.kind {
                ChannelKind::Continuous => {
                    let Some([lo, hi]) = c.bounds else {
                        return invalid(format!("continuous channel {i} has no bounds"));
                    };
                    if !(lo < hi) {
                        return invalid(format!("channel {i}: lo {lo} is not below hi {hi}"));
                    }
                    if !(lo..=hi).contains(&c.default) {
                        return invalid(format!("channel {i}: default outside bounds"));
                    }
                    if c.group_id.is_some() {
                        return invalid(format!("continuous channel {i} carries a group id"));
                    }
                }
                ChannelKind::DiscreteMember => {
                    if c.group_id.is_none() {
                        return invalid(format!("discrete channel {i} has no group id"));
                    }
                    if c.block != ChannelBlock::Makeup {
                        return invalid(format!("discrete channel {i} must be a makeup channel"));
                    }
                }
            }
        }

        let mut owner: Vec<Option<usize>> = vec![None; n];
        let mut seen_ids = BTreeSet::new();
        for (g, group) in self.discrete_groups.iter().enumerate() {
            if !seen_ids.insert(group.id.as_str()) {
                return invalid(format!("duplicate group id `{}`", group.id));
            }
            if group.len < 2 {
                return invalid(format!("group `{}` has fewer than 2 members", group.id));
            }
            if group.default_member >= group.len {
                return invalid(format!("group `{}` default member out of range", group.id));
            }
            if group.start + group.len > n {
                return invalid(format!("group `{}` extends past channel {n}", group.id));
            }
            for i in group.range() {
                if owner[i].is_some() {
                    return invalid(format!("channel {i} belongs to two groups"));
                }
                owner[i] = Some(g);
                let c = &self.channels[i];
                if c.kind != ChannelKind::DiscreteMember || c.group_id.as_deref() != Some(&group.id) {
                    return invalid(format!("channel {i} is not a member of group `{}`", group.id));
                }
            }
        }
        for (i, c) in self.channels.iter().enumerate() {
            if c.kind == ChannelKind::DiscreteMember && owner[i].is_none() {
                return invalid(format!("discrete channel {i} is not covered by any group"));
            }
        }

        let mut covered = vec![false; n];
        for (label, set) in &self.label_channel_map {
            if set.is_empty() {
                return invalid(format!("label `{label}` maps to no channels"));
            }
            for &i in set {
                if i >= n {
                    return invalid(format!("label `{label}` references channel {i} >= {n}"));
                }
                covered[i] = true;
            }
        }
        if let Some(i) = covered.iter().position(|c| !c) {
            return invalid(format!("channel {i} is not associated with any label"));
        }
        Ok(())
    }

    pub fn group_of(&self, channel: usize) -> Option<&DiscreteGroup> {
        let id = self.channels.get(channel)?.group_id.as_deref()?;
        self.discrete_groups.iter().find(|g| g.id == id)
    }

    pub fn bone_channels(&self) -> Vec<usize> {
        self.channels.iter().filter(|c| c.block == ChannelBlock::Bone).map(|c| c.index).collect()
    }

    pub fn makeup_channels(&self) -> Vec<usize> {
        self.channels.iter().filter(|c| c.block == ChannelBlock::Makeup).map(|c| c.index).collect()
    }

    /// Channel indices whose human name matches exactly.
    pub fn channel_by_name(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.human_name == name)
    }

    pub fn labels(&self) -> Vec<String> {
        self.label_channel_map.keys().cloned().collect()
    }

    /// The neutral character: continuous channels at their defaults, every group
    /// on its default member.
    pub fn default_vector(&self) -> ParameterVector {
        let mut v = DVector::zeros(self.len());
        for c in &self.channels {
            if c.kind == ChannelKind::Continuous {
                v[c.index] = c.default;
            }
        }
        for g in &self.discrete_groups {
            v[g.start + g.default_member] = 1.0;
        }
        ParameterVector(v)
    }

    /// Mask covering the channels of the given labels, expanded to whole groups.
    pub fn label_mask<'a>(&self, labels: impl IntoIterator<Item = &'a str>) -> ChannelMask {
        let mut bits = vec![false; self.len()];
        for label in labels {
            if let Some(set) = self.label_channel_map.get(label) {
                for &i in set {
                    bits[i] = true;
                }
            }
        }
        ChannelMask { bits }.expand_groups(self)
    }

    /// Hex digest of the canonical JSON encoding; used to tie vectors and
    /// fitted models to the schema they were produced for.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&bytes);
        hex::encode(&digest[..8])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SchemaError> {
        let schema: ParameterSchema = serde_json::from_str(s).map_err(|e| SchemaError::Serde(e.to_string()))?;
        schema.check()?;
        Ok(schema)
    }
}

/// A character control parameter vector. Values may be relaxed (not one-hot,
/// out of bounds) while an optimizer works on them; [`validate`] tells whether
/// a vector is a legal character.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(pub DVector<f64>);

impl ParameterVector {
    pub fn from_vec(values: Vec<f64>) -> Self {
        ParameterVector(DVector::from_vec(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_dvector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn bit_identical(&self, other: &ParameterVector) -> bool {
        self.len() == other.len() && self.values().iter().zip(other.values()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Serialize for ParameterVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.values().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParameterVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Vec::<f64>::deserialize(d).map(ParameterVector::from_vec)
    }
}

/// A parameter vector tagged with the hash of the schema it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterFile {
    pub schema_hash: String,
    pub values: ParameterVector,
}

impl ParameterFile {
    pub fn new(schema: &ParameterSchema, values: ParameterVector) -> Self {
        ParameterFile { schema_hash: schema.hash(), values }
    }

    pub fn into_checked(self, schema: &ParameterSchema) -> Result<ParameterVector, SchemaError> {
        let expected = schema.hash();
        if self.schema_hash != expected {
            return Err(SchemaError::HashMismatch { expected, actual: self.schema_hash });
        }
        if self.values.len() != schema.len() {
            return Err(SchemaError::Dimension { expected: schema.len(), actual: self.values.len() });
        }
        Ok(self.values)
    }
}

/// Binary channel selector: `true` marks a channel the current edit may touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMask {
    pub bits: Vec<bool>,
}

impl ChannelMask {
    pub fn zeros(n: usize) -> Self {
        ChannelMask { bits: vec![false; n] }
    }

    pub fn ones(n: usize) -> Self {
        ChannelMask { bits: vec![true; n] }
    }

    pub fn from_indices(n: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![false; n];
        for i in indices {
            bits[i] = true;
        }
        ChannelMask { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect()
    }

    pub fn union(&self, other: &ChannelMask) -> ChannelMask {
        ChannelMask { bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect() }
    }

    /// Sets every member of a discrete group when any member is set.
    pub fn expand_groups(mut self, schema: &ParameterSchema) -> ChannelMask {
        for g in &schema.discrete_groups {
            if self.bits[g.range()].iter().any(|b| *b) {
                self.bits[g.range()].iter_mut().for_each(|b| *b = true);
            }
        }
        self
    }

    pub fn check(&self, schema: &ParameterSchema) -> Result<(), SchemaError> {
        if self.len() != schema.len() {
            return Err(SchemaError::Dimension { expected: schema.len(), actual: self.len() });
        }
        for g in &schema.discrete_groups {
            let first = self.bits[g.start];
            if self.bits[g.range()].iter().any(|b| *b != first) {
                return Err(SchemaError::MaskNotGroupUniform {
                    group: g.id.clone(),
                    start: g.start,
                    end: g.start + g.len,
                });
            }
        }
        Ok(())
    }
}

impl Serialize for ChannelMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let bits: Vec<u8> = self.bits.iter().map(|b| u8::from(*b)).collect();
        bits.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ChannelMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let bits = Vec::<u8>::deserialize(d)?;
        Ok(ChannelMask { bits: bits.into_iter().map(|b| b != 0).collect() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NonFinite { channel: usize },
    OutOfBounds { channel: usize, value: f64, lo: f64, hi: f64 },
    GroupNotOneHot { group: String, start: usize, end: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonFinite { channel } => write!(f, "channel {channel} is not finite"),
            Violation::OutOfBounds { channel, value, lo, hi } => {
                write!(f, "channel {channel} = {value} outside [{lo}, {hi}]")
            }
            Violation::GroupNotOneHot { group, start, end } => {
                write!(f, "group `{group}` (channels {start}..{end}) is not one-hot")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate(x: &ParameterVector, schema: &ParameterSchema) -> Result<ValidationReport, SchemaError> {
    if x.len() != schema.len() {
        return Err(SchemaError::Dimension { expected: schema.len(), actual: x.len() });
    }
    let mut violations = Vec::new();
    for c in &schema.channels {
        let v = x.0[c.index];
        if !v.is_finite() {
            violations.push(Violation::NonFinite { channel: c.index });
            continue;
        }
        if let (ChannelKind::Continuous, Some([lo, hi])) = (c.kind, c.bounds) {
            if v < lo || v > hi {
                violations.push(Violation::OutOfBounds { channel: c.index, value: v, lo, hi });
            }
        }
    }
    for g in &schema.discrete_groups {
        let vals = &x.values()[g.range()];
        let ones = vals.iter().filter(|v| **v == 1.0).count();
        let zeros = vals.iter().filter(|v| **v == 0.0).count();
        if ones != 1 || zeros != g.len - 1 {
            violations.push(Violation::GroupNotOneHot { group: g.id.clone(), start: g.start, end: g.start + g.len });
        }
    }
    Ok(ValidationReport { violations })
}

/// Channel-wise selection: `x_prev` where the mask is clear, `x_cand` where it
/// is set. Unselected channels are copied bit for bit.
pub fn mix(
    x_prev: &ParameterVector,
    x_cand: &ParameterVector,
    mask: &ChannelMask,
    schema: &ParameterSchema,
) -> Result<ParameterVector, SchemaError> {
    for len in [x_prev.len(), x_cand.len()] {
        if len != schema.len() {
            return Err(SchemaError::Dimension { expected: schema.len(), actual: len });
        }
    }
    mask.check(schema)?;
    Ok(mix_unchecked(x_prev, x_cand, mask))
}

pub(crate) fn mix_unchecked(x_prev: &ParameterVector, x_cand: &ParameterVector, mask: &ChannelMask) -> ParameterVector {
    let values = x_prev
        .values()
        .iter()
        .zip(x_cand.values())
        .zip(&mask.bits)
        .map(|((p, c), r)| if *r { *c } else { *p })
        .collect();
    ParameterVector::from_vec(values)
}

/// Projects a relaxed vector onto the legal set: each group becomes one-hot at
/// its argmax (lowest index on ties), continuous channels are clamped.
pub fn snap_discrete(x: &ParameterVector, schema: &ParameterSchema) -> ParameterVector {
    let mut out = x.0.clone();
    for c in &schema.channels {
        if let (ChannelKind::Continuous, Some([lo, hi])) = (c.kind, c.bounds) {
            let v = out[c.index];
            // NaN collapses to the default
            out[c.index] = if v.is_nan() { c.default } else { v.clamp(lo, hi) };
        }
    }
    for g in &schema.discrete_groups {
        let mut best = g.start;
        for i in g.range() {
            if out[i] > out[best] || (out[best].is_nan() && !out[i].is_nan()) {
                best = i;
            }
        }
        for i in g.range() {
            out[i] = if i == best { 1.0 } else { 0.0 };
        }
    }
    ParameterVector(out)
}
