//! Synthetic face renderer.
//!
//! Bone channels displace a fixed set of 2-D facial landmarks (in logit space,
//! so landmarks stay inside the unit square); makeup channels drive per-label
//! appearance colours, with one-hot groups read through a per-group softmax.
//! Landmark offsets and appearance are mixed into a feature vector by a fixed
//! random affine map followed by `tanh`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Renderer, SemanticError};
use crate::schema::{ChannelBlock, ChannelKind, ParameterSchema, ParameterVector};

/// Canonical landmarks: name, x, y (image coordinates, y down) and the bone
/// label whose channels move the point.
pub const LANDMARKS: &[(&str, f64, f64, &str)] = &[
    ("forehead_l", 0.35, 0.15, "forehead"),
    ("forehead_c", 0.50, 0.12, "forehead"),
    ("forehead_r", 0.65, 0.15, "forehead"),
    ("brow_l_out", 0.28, 0.32, "eyebrows"),
    ("brow_l_mid", 0.355, 0.29, "eyebrows"),
    ("brow_l_in", 0.43, 0.31, "eyebrows"),
    ("brow_r_in", 0.57, 0.31, "eyebrows"),
    ("brow_r_mid", 0.645, 0.29, "eyebrows"),
    ("brow_r_out", 0.72, 0.32, "eyebrows"),
    ("eye_l_out", 0.30, 0.40, "eyes"),
    ("eye_l_top", 0.36, 0.38, "eyes"),
    ("eye_l_in", 0.42, 0.40, "eyes"),
    ("eye_l_bot", 0.36, 0.42, "eyes"),
    ("eye_r_in", 0.58, 0.40, "eyes"),
    ("eye_r_top", 0.64, 0.38, "eyes"),
    ("eye_r_out", 0.70, 0.40, "eyes"),
    ("eye_r_bot", 0.64, 0.42, "eyes"),
    ("nose_bridge", 0.50, 0.40, "nose"),
    ("nose_tip", 0.50, 0.58, "nose"),
    ("nose_wing_l", 0.45, 0.60, "nose"),
    ("nose_wing_r", 0.55, 0.60, "nose"),
    ("cheek_l", 0.30, 0.55, "cheeks"),
    ("cheek_r", 0.70, 0.55, "cheeks"),
    ("mouth_l", 0.41, 0.72, "mouth"),
    ("lip_top", 0.50, 0.69, "mouth"),
    ("mouth_r", 0.59, 0.72, "mouth"),
    ("lip_bot", 0.50, 0.76, "mouth"),
    ("jaw_l", 0.24, 0.62, "jaw"),
    ("jaw_angle_l", 0.30, 0.78, "jaw"),
    ("jaw_angle_r", 0.70, 0.78, "jaw"),
    ("jaw_r", 0.76, 0.62, "jaw"),
    ("chin_l", 0.42, 0.87, "chin"),
    ("chin", 0.50, 0.90, "chin"),
    ("chin_r", 0.58, 0.87, "chin"),
    ("ear_l_top", 0.17, 0.38, "ears"),
    ("ear_l_bot", 0.16, 0.50, "ears"),
    ("ear_r_top", 0.83, 0.38, "ears"),
    ("ear_r_bot", 0.84, 0.50, "ears"),
];

/// Hand-written displacement directions (landmark, dx, dy) in logit space.
/// Each is rescaled to the configured column norm.
fn named_rule(channel: &str) -> Option<Vec<(&'static str, f64, f64)>> {
    let rule: Vec<(&'static str, f64, f64)> = match channel {
        "nose_width" => vec![("nose_wing_l", -0.15, 0.0), ("nose_wing_r", 0.15, 0.0)],
        "nose_length" => vec![("nose_tip", 0.0, 0.5), ("nose_wing_l", 0.0, 0.3), ("nose_wing_r", 0.0, 0.3)],
        "eye_size" => vec![
            ("eye_l_top", 0.0, -0.08),
            ("eye_l_bot", 0.0, 0.08),
            ("eye_l_out", -0.2, 0.0),
            ("eye_r_top", 0.0, -0.08),
            ("eye_r_bot", 0.0, 0.08),
            ("eye_r_out", 0.2, 0.0),
        ],
        "eye_spacing" => vec![
            ("eye_l_out", -0.3, 0.0),
            ("eye_l_top", -0.3, 0.0),
            ("eye_l_in", -0.3, 0.0),
            ("eye_l_bot", -0.3, 0.0),
            ("eye_r_out", 0.3, 0.0),
            ("eye_r_top", 0.3, 0.0),
            ("eye_r_in", 0.3, 0.0),
            ("eye_r_bot", 0.3, 0.0),
        ],
        "mouth_width" => vec![("mouth_l", -0.3, 0.0), ("mouth_r", 0.3, 0.0)],
        "lip_thickness" => vec![("lip_top", 0.0, -0.08), ("lip_bot", 0.0, 0.08)],
        "jaw_width" => {
            vec![("jaw_l", -0.4, 0.0), ("jaw_angle_l", -0.4, 0.0), ("jaw_angle_r", 0.4, 0.0), ("jaw_r", 0.4, 0.0)]
        }
        "forehead_height" => vec![("forehead_l", 0.0, -0.4), ("forehead_c", 0.0, -0.4), ("forehead_r", 0.0, -0.4)],
        "chin_length" => vec![("chin", 0.0, 0.5), ("chin_l", 0.0, 0.3), ("chin_r", 0.0, 0.3)],
        "ear_size" => {
            vec![("ear_l_top", 0.0, -0.2), ("ear_l_bot", 0.0, 0.2), ("ear_r_top", 0.0, -0.2), ("ear_r_bot", 0.0, 0.2)]
        }
        _ => return None,
    };
    Some(rule)
}

fn landmark_index(name: &str) -> usize {
    LANDMARKS.iter().position(|l| l.0 == name).expect("known landmark")
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Feature-mixing gains of the synthetic renderer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RendererConfig {
    pub feature_dim: usize,
    pub seed: u64,
    /// Norm of each bone channel's landmark displacement (logit units per
    /// unit of channel value). Small enough that paired landmarks never cross.
    pub displacement_scale: f64,
    pub geometry_gain: f64,
    pub appearance_gain: f64,
    /// Weight of one-hot group probabilities relative to makeup sliders.
    /// Kept small so group logits tolerate a large learning rate.
    #[serde(default = "default_discrete_gain")]
    pub discrete_gain: f64,
    /// Labels wider than this many channels have their per-channel gains
    /// scaled by `sqrt(width_reference / width)`, so a label's joint effect
    /// (and the loss curvature along it) does not grow with its width.
    #[serde(default = "default_width_reference")]
    pub width_reference: f64,
}

fn default_discrete_gain() -> f64 {
    0.1
}

fn default_width_reference() -> f64 {
    4.0
}

impl Default for RendererConfig {
    fn default() -> Self {
        RendererConfig {
            feature_dim: 128,
            seed: 0x5eed,
            displacement_scale: 0.2,
            geometry_gain: 6.0,
            appearance_gain: 1.0,
            discrete_gain: default_discrete_gain(),
            width_reference: default_width_reference(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceFeature {
    pub label: String,
    /// Colour in `[0, 1]^3`.
    pub rgb: [f64; 3],
}

/// Landmarks and appearance colours for display.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preview {
    pub landmarks: Vec<Landmark>,
    pub appearance: Vec<AppearanceFeature>,
}

#[derive(Debug, Clone)]
pub struct SyntheticFaceRenderer {
    config: RendererConfig,
    n: usize,
    bone_channels: Vec<usize>,
    bone_default: DVector<f64>,
    makeup_continuous: Vec<usize>,
    makeup_default: DVector<f64>,
    groups: Vec<Range<usize>>,
    n_discrete: usize,
    canonical_logits: DVector<f64>,
    /// `2K × N_bone`, landmark logit offsets per unit of bone channel.
    landmark_map: DMatrix<f64>,
    appearance_labels: Vec<String>,
    /// `3·L_makeup × (continuous makeup + discrete)`.
    makeup_map: DMatrix<f64>,
    w_geo: DMatrix<f64>,
    w_app: DMatrix<f64>,
    bias: DVector<f64>,
}

struct Forward {
    offsets: DVector<f64>,
    appearance: DVector<f64>,
    softmax: Vec<DVector<f64>>,
    features: DVector<f64>,
}

impl SyntheticFaceRenderer {
    pub fn new(schema: &ParameterSchema, config: RendererConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = LANDMARKS.len();
        let bone_channels = schema.bone_channels();
        let bone_default =
            DVector::from_iterator(bone_channels.len(), bone_channels.iter().map(|&i| schema.channels[i].default));
        let label_of = |channel: usize| -> Option<&str> {
            schema.label_channel_map.iter().find(|(_, set)| set.contains(&channel)).map(|(l, _)| l.as_str())
        };
        let width_gain = |label: &str| -> f64 {
            let width = schema.label_channel_map.get(label).map_or(0, |s| s.len()) as f64;
            if width > config.width_reference {
                (config.width_reference / width).sqrt()
            } else {
                1.0
            }
        };

        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut landmark_map = DMatrix::zeros(2 * k, bone_channels.len());
        for (j, &ch) in bone_channels.iter().enumerate() {
            let name = &schema.channels[ch].human_name;
            if let Some(rule) = named_rule(name) {
                let norm = rule.iter().map(|(_, dx, dy)| dx * dx + dy * dy).sum::<f64>().sqrt();
                for (lm, dx, dy) in rule {
                    let i = landmark_index(lm);
                    landmark_map[(2 * i, j)] = dx * config.displacement_scale / norm;
                    landmark_map[(2 * i + 1, j)] = dy * config.displacement_scale / norm;
                }
                continue;
            }
            // random displacement of the region's landmarks, fixed column norm
            let region = label_of(ch).unwrap_or("");
            let rows: Vec<usize> =
                (0..k).filter(|&i| LANDMARKS[i].3 == region).flat_map(|i| [2 * i, 2 * i + 1]).collect();
            let v: Vec<f64> = rows.iter().map(|_| unit.sample(&mut rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let gain = config.displacement_scale * width_gain(region);
            for (&r, a) in rows.iter().zip(&v) {
                landmark_map[(r, j)] = a * gain / norm;
            }
        }
        let canonical_logits = DVector::from_iterator(2 * k, LANDMARKS.iter().flat_map(|l| [logit(l.1), logit(l.2)]));

        let makeup_continuous: Vec<usize> = schema
            .channels
            .iter()
            .filter(|c| c.block == ChannelBlock::Makeup && c.kind == ChannelKind::Continuous)
            .map(|c| c.index)
            .collect();
        let makeup_default = DVector::from_iterator(
            makeup_continuous.len(),
            makeup_continuous.iter().map(|&i| schema.channels[i].default),
        );
        let groups: Vec<Range<usize>> = schema.discrete_groups.iter().map(|g| g.range()).collect();
        let n_discrete: usize = groups.iter().map(|g| g.len()).sum();
        let makeup_inputs: Vec<usize> =
            makeup_continuous.iter().copied().chain(groups.iter().flat_map(|g| g.clone())).collect();
        let appearance_labels: Vec<String> = schema
            .label_channel_map
            .iter()
            .filter(|(_, set)| set.iter().any(|&i| schema.channels[i].block == ChannelBlock::Makeup))
            .map(|(l, _)| l.clone())
            .collect();
        let mut makeup_map = DMatrix::zeros(3 * appearance_labels.len(), makeup_inputs.len());
        for (col, &ch) in makeup_inputs.iter().enumerate() {
            let label = label_of(ch).unwrap_or("");
            if let Some(a) = appearance_labels.iter().position(|l| l == label) {
                let gain = if col < makeup_continuous.len() { 1.0 } else { config.discrete_gain } * width_gain(label);
                let v: [f64; 3] = [(); 3].map(|_| unit.sample(&mut rng));
                let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                for (c, value) in v.iter().enumerate() {
                    makeup_map[(3 * a + c, col)] = value * gain / norm;
                }
            }
        }

        let f = config.feature_dim;
        // column norms of the mixing matrices are roughly the gains
        let geo_std = config.geometry_gain / (f as f64).sqrt();
        let app_std = config.appearance_gain / (f as f64).sqrt();
        let w_geo = DMatrix::from_fn(f, 2 * k, |_, _| unit.sample(&mut rng) * geo_std);
        let w_app = DMatrix::from_fn(f, 3 * appearance_labels.len(), |_, _| unit.sample(&mut rng) * app_std);
        let bias = DVector::from_fn(f, |_, _| unit.sample(&mut rng) * 0.1);

        SyntheticFaceRenderer {
            config,
            n: schema.len(),
            bone_channels,
            bone_default,
            makeup_continuous,
            makeup_default,
            groups,
            n_discrete,
            canonical_logits,
            landmark_map,
            appearance_labels,
            makeup_map,
            w_geo,
            w_app,
            bias,
        }
    }

    pub fn config(&self) -> &RendererConfig {
        &self.config
    }

    fn forward(&self, x: &ParameterVector) -> Forward {
        let bone = DVector::from_iterator(
            self.bone_channels.len(),
            self.bone_channels.iter().zip(self.bone_default.iter()).map(|(&i, d)| x.0[i] - d),
        );
        let offsets = &self.landmark_map * bone;

        let nc = self.makeup_continuous.len();
        let mut m = DVector::zeros(nc + self.n_discrete);
        for (j, &i) in self.makeup_continuous.iter().enumerate() {
            m[j] = x.0[i] - self.makeup_default[j];
        }
        let mut softmax = Vec::with_capacity(self.groups.len());
        let mut at = nc;
        for g in &self.groups {
            let logits = x.0.rows(g.start, g.len());
            let max = logits.max();
            let exp = logits.map(|v| (v - max).exp());
            let p = &exp / exp.sum();
            m.rows_mut(at, g.len()).copy_from(&p);
            at += g.len();
            softmax.push(p);
        }
        let appearance = &self.makeup_map * m;
        let pre = &self.w_geo * &offsets + &self.w_app * &appearance + &self.bias;
        let features = pre.map(f64::tanh);
        Forward { offsets, appearance, softmax, features }
    }

    /// Landmark coordinates and appearance colours for display.
    pub fn preview(&self, x: &ParameterVector) -> Preview {
        let fwd = self.forward(x);
        let landmarks = LANDMARKS
            .iter()
            .enumerate()
            .map(|(i, l)| Landmark {
                name: l.0.to_string(),
                x: sigmoid(self.canonical_logits[2 * i] + fwd.offsets[2 * i]),
                y: sigmoid(self.canonical_logits[2 * i + 1] + fwd.offsets[2 * i + 1]),
            })
            .collect();
        let appearance = self
            .appearance_labels
            .iter()
            .enumerate()
            .map(|(a, label)| AppearanceFeature {
                label: label.clone(),
                rgb: [0, 1, 2].map(|c| sigmoid(fwd.appearance[3 * a + c])),
            })
            .collect();
        Preview { landmarks, appearance }
    }

    /// The canonical landmark set (neutral face).
    pub fn canonical_landmarks() -> Vec<Landmark> {
        LANDMARKS.iter().map(|l| Landmark { name: l.0.to_string(), x: l.1, y: l.2 }).collect()
    }

    fn check(&self, x: &ParameterVector) -> Result<(), SemanticError> {
        if x.len() != self.n {
            return Err(SemanticError::Dimension { expected: self.n, actual: x.len() });
        }
        Ok(())
    }
}

impl Renderer for SyntheticFaceRenderer {
    fn param_dim(&self) -> usize {
        self.n
    }

    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn render(&self, x: &ParameterVector) -> Result<DVector<f64>, SemanticError> {
        self.check(x)?;
        Ok(self.forward(x).features)
    }

    fn render_vjp(&self, x: &ParameterVector, upstream: &DVector<f64>) -> Result<DVector<f64>, SemanticError> {
        self.check(x)?;
        if upstream.len() != self.config.feature_dim {
            return Err(SemanticError::Dimension { expected: self.config.feature_dim, actual: upstream.len() });
        }
        let fwd = self.forward(x);
        let d_pre = upstream.component_mul(&fwd.features.map(|f| 1.0 - f * f));
        let d_offsets = self.w_geo.tr_mul(&d_pre);
        let d_appearance = self.w_app.tr_mul(&d_pre);
        let d_bone = self.landmark_map.tr_mul(&d_offsets);
        let d_m = self.makeup_map.tr_mul(&d_appearance);

        let mut grad = DVector::zeros(self.n);
        for (j, &i) in self.bone_channels.iter().enumerate() {
            grad[i] = d_bone[j];
        }
        let nc = self.makeup_continuous.len();
        for (j, &i) in self.makeup_continuous.iter().enumerate() {
            grad[i] = d_m[j];
        }
        let mut at = nc;
        for (g, p) in self.groups.iter().zip(&fwd.softmax) {
            let up = d_m.rows(at, g.len());
            // softmax VJP: p ⊙ (up − ⟨p, up⟩)
            let dot = p.dot(&up);
            for (m, i) in g.clone().enumerate() {
                grad[i] = p[m] * (up[m] - dot);
            }
            at += g.len();
        }
        Ok(grad)
    }
}
