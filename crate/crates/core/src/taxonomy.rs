//! Semantic label vocabulary and the built-in schema presets.
//!
//! Every label has a display phrase, aliases users type, and pairs of opposite
//! adjectives. The same table drives the schema's label map, the synthetic
//! lexicon, the localizer corpus and the rule-based instruction parser, so the
//! pieces agree on what "nose" or "darker eyeshadow" means.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::schema::{ChannelBlock, ChannelDescriptor, ChannelKind, DiscreteGroup, ParameterSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Bone,
    Makeup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub key: String,
    pub phrase: String,
    pub aliases: Vec<String>,
    /// Opposite adjective pairs, e.g. `["bigger", "smaller"]`.
    pub modifiers: Vec<[String; 2]>,
    pub kind: LabelKind,
    /// Channel names that carry a hand-written meaning (bone labels only).
    #[serde(default)]
    pub named_channels: Vec<String>,
}

impl LabelSpec {
    pub fn adjectives(&self) -> impl Iterator<Item = &str> {
        self.modifiers.iter().flat_map(|p| p.iter().map(String::as_str))
    }

    /// Lexicon phrase for an adjective of this label, e.g. "bigger nose".
    pub fn prompt_for(&self, adjective: &str) -> String {
        format!("{adjective} {}", self.phrase)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub version: u32,
    pub labels: Vec<LabelSpec>,
}

impl Taxonomy {
    pub fn get(&self, key: &str) -> Option<&LabelSpec> {
        self.labels.iter().find(|l| l.key == key)
    }

    pub fn keys(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.key.clone()).collect()
    }

    /// Resolves a free-form attribute mention ("nostrils", "Eye Shadow") to a
    /// canonical label key.
    pub fn resolve(&self, mention: &str) -> Option<&LabelSpec> {
        let m = normalize_phrase(mention);
        self.labels.iter().find(|l| l.key == m || normalize_phrase(&l.phrase) == m || l.aliases.iter().any(|a| *a == m))
    }

    /// Restricts the vocabulary to the labels present in a schema.
    pub fn restricted_to(&self, schema: &ParameterSchema) -> Taxonomy {
        Taxonomy {
            version: self.version,
            labels: self.labels.iter().filter(|l| schema.label_channel_map.contains_key(&l.key)).cloned().collect(),
        }
    }
}

/// Lower-cases and collapses whitespace and punctuation.
pub fn normalize_phrase(s: &str) -> String {
    s.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn spec(
    key: &str,
    phrase: &str,
    aliases: &[&str],
    modifiers: &[[&str; 2]],
    kind: LabelKind,
    named: &[&str],
) -> LabelSpec {
    LabelSpec {
        key: key.into(),
        phrase: phrase.into(),
        aliases: aliases.iter().map(|s| s.to_string()).collect(),
        modifiers: modifiers.iter().map(|[a, b]| [a.to_string(), b.to_string()]).collect(),
        kind,
        named_channels: named.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn builtin_taxonomy() -> Taxonomy {
    use LabelKind::*;
    let labels = vec![
        spec(
            "forehead",
            "forehead",
            &["forehead", "temples"],
            &[["higher", "lower"], ["wider", "narrower"], ["rounder", "flatter"]],
            Bone,
            &["forehead_height", "forehead_width"],
        ),
        spec(
            "eyebrows",
            "eyebrows",
            &["eyebrows", "eyebrow", "brows", "brow"],
            &[["thicker", "thinner"], ["higher", "lower"], ["arched", "straighter"]],
            Bone,
            &["brow_height", "brow_tilt"],
        ),
        spec(
            "eyes",
            "eyes",
            &["eyes", "eye"],
            &[["bigger", "smaller"], ["wider", "narrower"], ["rounder", "sharper"]],
            Bone,
            &["eye_size", "eye_spacing"],
        ),
        spec(
            "nose",
            "nose",
            &["nose", "nostrils", "nose bridge"],
            &[["bigger", "smaller"], ["wider", "narrower"], ["longer", "shorter"], ["higher", "lower"]],
            Bone,
            &["nose_width", "nose_length"],
        ),
        spec(
            "cheeks",
            "cheeks",
            &["cheeks", "cheekbones", "cheek"],
            &[["fuller", "hollower"], ["higher", "lower"], ["wider", "narrower"]],
            Bone,
            &["cheek_width", "cheek_height"],
        ),
        spec(
            "mouth",
            "mouth",
            &["mouth", "lips", "lip"],
            &[["bigger", "smaller"], ["wider", "narrower"], ["fuller", "thinner"]],
            Bone,
            &["mouth_width", "lip_thickness"],
        ),
        spec(
            "jaw",
            "jaw",
            &["jaw", "jawline"],
            &[["wider", "narrower"], ["sharper", "softer"], ["stronger", "weaker"]],
            Bone,
            &["jaw_width", "jaw_angle"],
        ),
        spec(
            "chin",
            "chin",
            &["chin"],
            &[["longer", "shorter"], ["pointier", "rounder"], ["wider", "narrower"]],
            Bone,
            &["chin_length", "chin_width"],
        ),
        spec(
            "ears",
            "ears",
            &["ears", "ear"],
            &[["bigger", "smaller"], ["pointier", "rounder"], ["higher", "lower"]],
            Bone,
            &["ear_size", "ear_height"],
        ),
        spec(
            "eyeshadow",
            "eyeshadow",
            &["eyeshadow", "eye shadow"],
            &[["darker", "lighter"], ["brighter", "softer"]],
            Makeup,
            &[],
        ),
        spec(
            "eyeliner",
            "eyeliner",
            &["eyeliner", "eye liner", "liner"],
            &[["darker", "lighter"], ["thicker", "thinner"]],
            Makeup,
            &[],
        ),
        spec(
            "eyelashes",
            "eyelashes",
            &["eyelashes", "lashes"],
            &[["longer", "shorter"], ["thicker", "thinner"]],
            Makeup,
            &[],
        ),
        spec(
            "eyebrow_color",
            "eyebrow color",
            &["eyebrow color", "eyebrow colour", "brow color"],
            &[["darker", "lighter"]],
            Makeup,
            &[],
        ),
        spec(
            "lipstick",
            "lipstick",
            &["lipstick", "lip color", "lip colour"],
            &[["darker", "lighter"], ["redder", "paler"]],
            Makeup,
            &[],
        ),
        spec("blush", "blush", &["blush", "rouge"], &[["stronger", "softer"], ["pinker", "paler"]], Makeup, &[]),
        spec(
            "skin",
            "skin",
            &["skin", "skin tone", "complexion"],
            &[["darker", "lighter"], ["smoother", "rougher"]],
            Makeup,
            &[],
        ),
        spec(
            "beard",
            "beard",
            &["beard", "stubble", "facial hair"],
            &[["thicker", "thinner"], ["darker", "lighter"]],
            Makeup,
            &[],
        ),
        spec(
            "face_paint",
            "face paint",
            &["face paint", "war paint", "tattoo", "tattoos"],
            &[["bolder", "subtler"], ["darker", "lighter"]],
            Makeup,
            &[],
        ),
        spec(
            "freckles",
            "freckles",
            &["freckles", "moles"],
            &[["denser", "sparser"], ["darker", "lighter"]],
            Makeup,
            &[],
        ),
    ];
    Taxonomy { version: 1, labels }
}

/// Channel budget of one label in a preset.
#[derive(Debug, Clone)]
pub enum LabelLayout {
    Bone { channels: usize },
    Makeup { continuous: usize, group_sizes: Vec<usize> },
}

/// Builds a schema by laying out labels in order: all bone channels first,
/// then continuous makeup, then the discrete groups.
pub fn build_schema(role_name: &str, taxonomy: &Taxonomy, layout: &[(&str, LabelLayout)]) -> ParameterSchema {
    let mut channels = Vec::new();
    let mut groups = Vec::new();
    let mut labels: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();

    let push = |channels: &mut Vec<ChannelDescriptor>, d: ChannelDescriptor| {
        let idx = channels.len();
        channels.push(ChannelDescriptor { index: idx, ..d });
        idx
    };

    for (key, l) in layout {
        let LabelLayout::Bone { channels: count } = l else { continue };
        let spec = taxonomy.get(key).expect("layout label in taxonomy");
        for k in 0..*count {
            let name = spec.named_channels.get(k).cloned().unwrap_or_else(|| format!("{key}_bone_{k:02}"));
            let idx = push(
                &mut channels,
                ChannelDescriptor {
                    index: 0,
                    kind: ChannelKind::Continuous,
                    block: ChannelBlock::Bone,
                    bounds: Some([-1.0, 1.0]),
                    group_id: None,
                    human_name: name,
                    default: 0.0,
                },
            );
            labels.entry(key.to_string()).or_default().insert(idx);
        }
    }
    const CONT_NAMES: [&str; 3] = ["intensity", "hue", "saturation"];
    for (key, l) in layout {
        let LabelLayout::Makeup { continuous, .. } = l else { continue };
        for k in 0..*continuous {
            let name = match CONT_NAMES.get(k) {
                Some(n) => format!("{key}_{n}"),
                None => format!("{key}_tone_{k:02}"),
            };
            let idx = push(
                &mut channels,
                ChannelDescriptor {
                    index: 0,
                    kind: ChannelKind::Continuous,
                    block: ChannelBlock::Makeup,
                    bounds: Some([0.0, 1.0]),
                    group_id: None,
                    human_name: name,
                    default: 0.0,
                },
            );
            labels.entry(key.to_string()).or_default().insert(idx);
        }
    }
    for (key, l) in layout {
        let LabelLayout::Makeup { group_sizes, .. } = l else { continue };
        for (g, &size) in group_sizes.iter().enumerate() {
            let id = format!("{key}_style_{}", (b'a' + g as u8) as char);
            let start = channels.len();
            for m in 0..size {
                let idx = push(
                    &mut channels,
                    ChannelDescriptor {
                        index: 0,
                        kind: ChannelKind::DiscreteMember,
                        block: ChannelBlock::Makeup,
                        bounds: None,
                        group_id: Some(id.clone()),
                        human_name: format!("{id}_opt{m}"),
                        default: 0.0,
                    },
                );
                labels.entry(key.to_string()).or_default().insert(idx);
            }
            groups.push(DiscreteGroup { id, start, len: size, default_member: 0 });
        }
    }
    ParameterSchema::new(role_name, channels, groups, labels).expect("preset layout is valid")
}

/// Desk-scale schema: 6 bone + 2 continuous makeup channels and two one-hot
/// groups of 2 (N = 12).
pub fn desk_schema() -> ParameterSchema {
    use LabelLayout::*;
    build_schema(
        "desk",
        &builtin_taxonomy(),
        &[
            ("nose", Bone { channels: 2 }),
            ("eyes", Bone { channels: 2 }),
            ("mouth", Bone { channels: 1 }),
            ("jaw", Bone { channels: 1 }),
            ("eyeshadow", Makeup { continuous: 1, group_sizes: vec![2] }),
            ("lipstick", Makeup { continuous: 1, group_sizes: vec![2] }),
        ],
    )
}

/// Full-scale schema: 284 bone channels, 41 continuous makeup channels and
/// 125 discrete channels in 25 one-hot groups of 5 (N = 450).
pub fn full_schema() -> ParameterSchema {
    use LabelLayout::*;
    let g = |n: usize| vec![5; n];
    build_schema(
        "full",
        &builtin_taxonomy(),
        &[
            ("forehead", Bone { channels: 20 }),
            ("eyebrows", Bone { channels: 32 }),
            ("eyes", Bone { channels: 48 }),
            ("nose", Bone { channels: 36 }),
            ("cheeks", Bone { channels: 30 }),
            ("mouth", Bone { channels: 40 }),
            ("jaw", Bone { channels: 34 }),
            ("chin", Bone { channels: 24 }),
            ("ears", Bone { channels: 20 }),
            ("eyeshadow", Makeup { continuous: 5, group_sizes: g(3) }),
            ("eyeliner", Makeup { continuous: 4, group_sizes: g(2) }),
            ("eyelashes", Makeup { continuous: 3, group_sizes: g(2) }),
            ("eyebrow_color", Makeup { continuous: 4, group_sizes: g(3) }),
            ("lipstick", Makeup { continuous: 5, group_sizes: g(3) }),
            ("blush", Makeup { continuous: 4, group_sizes: g(2) }),
            ("skin", Makeup { continuous: 6, group_sizes: g(3) }),
            ("beard", Makeup { continuous: 3, group_sizes: g(3) }),
            ("face_paint", Makeup { continuous: 4, group_sizes: g(2) }),
            ("freckles", Makeup { continuous: 3, group_sizes: g(2) }),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_schema_shape() {
        let s = desk_schema();
        assert_eq!(s.len(), 12);
        let continuous = s.channels.iter().filter(|c| c.kind == ChannelKind::Continuous).count();
        assert_eq!(continuous, 8);
        assert_eq!(s.discrete_groups.len(), 2);
        assert!(s.discrete_groups.iter().all(|g| g.len == 2));
    }

    #[test]
    fn full_schema_shape() {
        let s = full_schema();
        assert_eq!(s.len(), 450);
        assert_eq!(s.bone_channels().len(), 284);
        assert_eq!(s.makeup_channels().len(), 166);
        let discrete: usize = s.discrete_groups.iter().map(|g| g.len).sum();
        assert_eq!(discrete, 125);
    }

    #[test]
    fn resolve_aliases() {
        let t = builtin_taxonomy();
        assert_eq!(t.resolve("Nostrils").unwrap().key, "nose");
        assert_eq!(t.resolve("eye  shadow").unwrap().key, "eyeshadow");
        assert_eq!(t.resolve("eyebrow_color").unwrap().key, "eyebrow_color");
        assert!(t.resolve("hat").is_none());
    }

    #[test]
    fn named_channels_exist() {
        let s = full_schema();
        for name in ["nose_width", "eye_size", "jaw_width"] {
            assert!(s.channel_by_name(name).is_some(), "{name}");
        }
        let d = desk_schema();
        assert_eq!(d.channel_by_name("nose_width"), Some(0));
    }
}
