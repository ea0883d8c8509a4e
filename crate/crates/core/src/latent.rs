//! Low-dimension parameter space.
//!
//! Bone channels are compressed with PCA; makeup channels are copied through
//! unchanged. A latent code is `z = [basis·(x_bone − mean), x_makeup]`, and the
//! decoder maps it back. A Gaussian prior over `z` (mean `mu_z`, whitening
//! transform `A_z`) keeps solutions close to the character population.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{validate, ChannelKind, ParameterSchema, ParameterVector, SchemaError};

/// Ridge added to the latent covariance before inverting its square root.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

pub const LATENT_FORMAT: &str = "charedit.latent";
pub const LATENT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatentError {
    #[error("need at least {needed} samples to fit {components} components, got {got}")]
    TooFewSamples { needed: usize, got: usize, components: usize },
    #[error("{components} components requested but the schema has {bones} bone channels")]
    TooManyComponents { components: usize, bones: usize },
    #[error("sample {index} is not a valid parameter vector: {reason}")]
    InvalidSample { index: usize, reason: String },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("fitted basis is not orthonormal (max deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// Role of one latent coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentSlot {
    Pca { component: usize },
    Continuous { channel: usize },
    Discrete { channel: usize, group: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentModel {
    pub schema_hash: String,
    pub n_channels: usize,
    pub bone_channels: Vec<usize>,
    pub passthrough_channels: Vec<usize>,
    pub slots: Vec<LatentSlot>,
    pub mean_x: DVector<f64>,
    /// `M_pca × N_bone`, orthonormal rows.
    pub basis: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorModel {
    pub mu_z: DVector<f64>,
    pub a_z: DMatrix<f64>,
}

impl LatentModel {
    pub fn n_components(&self) -> usize {
        self.basis.nrows()
    }

    /// Latent dimension `M = M_pca + |passthrough|`.
    pub fn dim(&self) -> usize {
        self.basis.nrows() + self.passthrough_channels.len()
    }

    fn check_x(&self, len: usize) -> Result<(), LatentError> {
        if len != self.n_channels {
            return Err(LatentError::Dimension { expected: self.n_channels, actual: len });
        }
        Ok(())
    }

    fn check_z(&self, len: usize) -> Result<(), LatentError> {
        if len != self.dim() {
            return Err(LatentError::Dimension { expected: self.dim(), actual: len });
        }
        Ok(())
    }

    pub fn encode(&self, x: &ParameterVector) -> Result<DVector<f64>, LatentError> {
        self.check_x(x.len())?;
        let k = self.n_components();
        let centered = DVector::from_iterator(
            self.bone_channels.len(),
            self.bone_channels.iter().zip(self.mean_x.iter()).map(|(&i, m)| x.0[i] - m),
        );
        let pca = &self.basis * centered;
        let mut z = DVector::zeros(self.dim());
        z.rows_mut(0, k).copy_from(&pca);
        for (j, &i) in self.passthrough_channels.iter().enumerate() {
            z[k + j] = x.0[i];
        }
        Ok(z)
    }

    /// The decoder `D(z)`. The output is relaxed: groups are not snapped and
    /// continuous channels are not clamped.
    pub fn decode(&self, z: &DVector<f64>) -> Result<ParameterVector, LatentError> {
        self.check_z(z.len())?;
        let k = self.n_components();
        let bone = &self.mean_x + self.basis.tr_mul(&z.rows(0, k));
        let mut x = DVector::zeros(self.n_channels);
        for (j, &i) in self.bone_channels.iter().enumerate() {
            x[i] = bone[j];
        }
        for (j, &i) in self.passthrough_channels.iter().enumerate() {
            x[i] = z[k + j];
        }
        Ok(ParameterVector(x))
    }

    /// Pulls a gradient with respect to `x` back to `z`. The decoder is affine,
    /// so the result does not depend on the evaluation point.
    pub fn decode_vjp(&self, upstream: &DVector<f64>) -> Result<DVector<f64>, LatentError> {
        self.check_x(upstream.len())?;
        let k = self.n_components();
        let bone_grad =
            DVector::from_iterator(self.bone_channels.len(), self.bone_channels.iter().map(|&i| upstream[i]));
        let mut g = DVector::zeros(self.dim());
        g.rows_mut(0, k).copy_from(&(&self.basis * bone_grad));
        for (j, &i) in self.passthrough_channels.iter().enumerate() {
            g[k + j] = upstream[i];
        }
        Ok(g)
    }

    /// Largest deviation of `basis·basisᵀ` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = &self.basis * self.basis.transpose();
        let eye = DMatrix::<f64>::identity(gram.nrows(), gram.ncols());
        (gram - eye).amax()
    }
}

impl PriorModel {
    pub fn dim(&self) -> usize {
        self.mu_z.len()
    }
}

/// `‖A_z(z − μ_z)‖²` and its gradient `2·A_zᵀA_z(z − μ_z)`.
pub fn prior_loss(z: &DVector<f64>, prior: &PriorModel) -> (f64, DVector<f64>) {
    let whitened = &prior.a_z * (z - &prior.mu_z);
    let value = whitened.norm_squared();
    let grad = prior.a_z.tr_mul(&whitened) * 2.0;
    (value, grad)
}

/// Fits PCA on the bone sub-vectors and a whitened Gaussian prior on the
/// resulting latent codes.
pub fn fit(
    params: &[ParameterVector],
    schema: &ParameterSchema,
    n_components: usize,
) -> Result<(LatentModel, PriorModel), LatentError> {
    let bones = schema.bone_channels();
    if n_components == 0 || n_components > bones.len() {
        return Err(LatentError::TooManyComponents { components: n_components, bones: bones.len() });
    }
    let needed = n_components + 1;
    if params.len() < needed {
        return Err(LatentError::TooFewSamples { needed, got: params.len(), components: n_components });
    }
    for (index, x) in params.iter().enumerate() {
        let report = validate(x, schema)?;
        if let Some(v) = report.violations.first() {
            return Err(LatentError::InvalidSample { index, reason: v.to_string() });
        }
    }

    let n = params.len();
    let nb = bones.len();
    let data = DMatrix::from_fn(n, nb, |r, c| params[r].0[bones[c]]);
    let mean_x: DVector<f64> = data.row_mean().transpose();
    let centered = DMatrix::from_fn(n, nb, |r, c| data[(r, c)] - mean_x[c]);
    let cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..nb).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut basis = DMatrix::zeros(n_components, nb);
    for (row, &col) in order.iter().take(n_components).enumerate() {
        let mut v = eig.eigenvectors.column(col).into_owned();
        // sign convention: the largest-magnitude entry is positive
        if v[v.iamax()] < 0.0 {
            v.neg_mut();
        }
        basis.row_mut(row).copy_from(&v.transpose());
    }

    let passthrough = schema.makeup_channels();
    let slots = (0..n_components)
        .map(|component| LatentSlot::Pca { component })
        .chain(passthrough.iter().map(|&channel| {
            let c = &schema.channels[channel];
            match c.kind {
                ChannelKind::Continuous => LatentSlot::Continuous { channel },
                ChannelKind::DiscreteMember => {
                    let group = schema
                        .discrete_groups
                        .iter()
                        .position(|g| g.range().contains(&channel))
                        .expect("checked schema");
                    LatentSlot::Discrete { channel, group }
                }
            }
        }))
        .collect();

    let model = LatentModel {
        schema_hash: schema.hash(),
        n_channels: schema.len(),
        bone_channels: bones,
        passthrough_channels: passthrough,
        slots,
        mean_x,
        basis,
    };
    let dev = model.orthonormality_error();
    if dev > 1e-8 {
        return Err(LatentError::NotOrthonormal(dev));
    }

    let m = model.dim();
    let mut latents = DMatrix::zeros(n, m);
    for (r, x) in params.iter().enumerate() {
        latents.row_mut(r).copy_from(&model.encode(x)?.transpose());
    }
    let mu_z: DVector<f64> = latents.row_mean().transpose();
    let zc = DMatrix::from_fn(n, m, |r, c| latents[(r, c)] - mu_z[c]);
    let cov_z = zc.tr_mul(&zc) / (n as f64 - 1.0);
    let a_z = inverse_sqrt(&cov_z, COVARIANCE_RIDGE);
    Ok((model, PriorModel { mu_z, a_z }))
}

/// `(C + εI)^(-1/2)` for a symmetric positive semi-definite `C`.
pub fn inverse_sqrt(cov: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let n = cov.nrows();
    let regularized = cov + DMatrix::<f64>::identity(n, n) * ridge;
    let eig = SymmetricEigen::new(regularized);
    let scale = DVector::from_iterator(n, eig.eigenvalues.iter().map(|l| 1.0 / l.max(ridge).sqrt()));
    let v = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(n, n, |r, c| v[(r, c)] * scale[c]);
    scaled * v.transpose()
}

/// Settings of the synthetic character population used to fit the latent
/// space when no real parameter collection is available.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub samples: usize,
    /// Number of latent factors driving bone channels.
    pub factors: usize,
    /// Target per-channel standard deviation of bone channels.
    pub bone_std: f64,
    /// Isotropic noise added to bone channels.
    pub noise: f64,
    /// Scale of the weakest factor relative to the strongest.
    pub decay: f64,
    pub seed: u64,
}

impl PopulationConfig {
    pub fn desk(seed: u64) -> Self {
        PopulationConfig { samples: 2_000, factors: 4, bone_std: 0.3, noise: 0.01, decay: 0.5, seed }
    }

    pub fn full(seed: u64) -> Self {
        PopulationConfig { samples: 10_000, factors: 60, bone_std: 0.3, noise: 0.01, decay: 0.5, seed }
    }
}

/// Fixed-seed Gaussian factor model pushed through the schema bounds; makeup
/// sliders uniform, one-hot groups uniform over members.
pub fn synthetic_population(schema: &ParameterSchema, cfg: &PopulationConfig) -> Vec<ParameterVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bones = schema.bone_channels();
    let nb = bones.len();
    let k = cfg.factors.min(nb).max(1);

    // geometric decay of factor scales from 1 to `decay`, rescaled to the target std
    let ratio = if k > 1 { cfg.decay.powf(1.0 / (k as f64 - 1.0)) } else { 1.0 };
    let raw: Vec<f64> = (0..k).map(|j| ratio.powi(j as i32)).collect();
    let energy: f64 = raw.iter().map(|s| s * s).sum();
    let norm = (cfg.bone_std * cfg.bone_std * nb as f64 / energy).sqrt();
    let mut loadings = DMatrix::<f64>::from_fn(nb, k, |_, _| StandardNormal.sample(&mut rng));
    for (j, s) in raw.iter().enumerate() {
        let mut col = loadings.column_mut(j);
        let len = col.norm();
        col *= s * norm / len;
    }

    let mut out = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let mut x = schema.default_vector().0;
        let g = DVector::<f64>::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
        let bone = &loadings * g;
        for (j, &i) in bones.iter().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let c = &schema.channels[i];
            let [lo, hi] = c.bounds.expect("bone channels are continuous");
            x[i] = (c.default + bone[j] + cfg.noise * noise).clamp(lo, hi);
        }
        for c in &schema.channels {
            if c.kind == ChannelKind::Continuous && c.block == crate::schema::ChannelBlock::Makeup {
                let [lo, hi] = c.bounds.expect("continuous");
                x[c.index] = rng.random_range(lo..hi);
            }
        }
        for g in &schema.discrete_groups {
            let pick = rng.random_range(0..g.len);
            for (m, i) in g.range().enumerate() {
                x[i] = if m == pick { 1.0 } else { 0.0 };
            }
        }
        out.push(ParameterVector(x));
    }
    out
}

/// JSON artifact for a fitted latent space and prior; matrices are stored as
/// row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentArtifact {
    pub format: String,
    pub version: u32,
    pub schema_hash: String,
    pub n_channels: usize,
    pub bone_channels: Vec<usize>,
    pub passthrough_channels: Vec<usize>,
    pub slots: Vec<LatentSlot>,
    pub mean_x: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
    pub mu_z: Vec<f64>,
    pub a_z: Vec<Vec<f64>>,
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>, String> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("ragged matrix: expected {ncols} columns"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

impl LatentArtifact {
    pub fn new(model: &LatentModel, prior: &PriorModel) -> Self {
        LatentArtifact {
            format: LATENT_FORMAT.into(),
            version: LATENT_VERSION,
            schema_hash: model.schema_hash.clone(),
            n_channels: model.n_channels,
            bone_channels: model.bone_channels.clone(),
            passthrough_channels: model.passthrough_channels.clone(),
            slots: model.slots.clone(),
            mean_x: model.mean_x.iter().copied().collect(),
            basis: rows_of(&model.basis),
            mu_z: prior.mu_z.iter().copied().collect(),
            a_z: rows_of(&prior.a_z),
        }
    }

    pub fn into_models(self, schema: &ParameterSchema) -> Result<(LatentModel, PriorModel), LatentError> {
        let bad = |m: String| LatentError::Artifact(m);
        if self.format != LATENT_FORMAT || self.version != LATENT_VERSION {
            return Err(bad(format!("unsupported artifact {} v{}", self.format, self.version)));
        }
        let expected = schema.hash();
        if self.schema_hash != expected {
            return Err(LatentError::Schema(SchemaError::HashMismatch { expected, actual: self.schema_hash }));
        }
        let nb = self.bone_channels.len();
        let basis = matrix_from_rows(&self.basis, nb).map_err(bad)?;
        let m = self.mu_z.len();
        let a_z = matrix_from_rows(&self.a_z, m).map_err(bad)?;
        if a_z.nrows() != m || basis.nrows() + self.passthrough_channels.len() != m {
            return Err(bad("latent dimensions disagree".into()));
        }
        Ok((
            LatentModel {
                schema_hash: self.schema_hash,
                n_channels: self.n_channels,
                bone_channels: self.bone_channels,
                passthrough_channels: self.passthrough_channels,
                slots: self.slots,
                mean_x: DVector::from_vec(self.mean_x),
                basis,
            },
            PriorModel { mu_z: DVector::from_vec(self.mu_z), a_z },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::snap_discrete;
    use crate::taxonomy::desk_schema;

    fn desk_fit() -> (ParameterSchema, LatentModel, PriorModel) {
        let s = desk_schema();
        let pop = synthetic_population(&s, &PopulationConfig::desk(7));
        let (m, p) = fit(&pop, &s, 4).unwrap();
        (s, m, p)
    }

    #[test]
    fn identical_samples_fit_without_error() {
        let s = desk_schema();
        let mut x = s.default_vector();
        x.0[0] = 0.3;
        x.0[3] = -0.2;
        let pop = vec![x.clone(); 10];
        let (m, p) = fit(&pop, &s, 3).unwrap();
        let z = m.encode(&x).unwrap();
        assert!((&p.mu_z - &z).amax() < 1e-12);
        let (loss, grad) = prior_loss(&z, &p);
        assert!(loss.abs() < 1e-12);
        assert!(grad.amax() < 1e-9);
    }

    #[test]
    fn too_few_samples() {
        let s = desk_schema();
        let pop = vec![s.default_vector(); 3];
        assert!(matches!(fit(&pop, &s, 3), Err(LatentError::TooFewSamples { .. })));
    }

    #[test]
    fn invalid_sample_rejected() {
        let s = desk_schema();
        let mut pop = vec![s.default_vector(); 5];
        pop[2].0[0] = 7.0;
        assert!(matches!(fit(&pop, &s, 2), Err(LatentError::InvalidSample { index: 2, .. })));
    }

    #[test]
    fn encode_mean_is_zero_on_pca_block() {
        let (s, m, _) = desk_fit();
        let mut x = s.default_vector();
        for (j, &i) in m.bone_channels.iter().enumerate() {
            x.0[i] = m.mean_x[j];
        }
        let z = m.encode(&x).unwrap();
        assert!(z.rows(0, m.n_components()).amax() == 0.0);
    }

    #[test]
    fn unit_latent_decodes_to_basis_row() {
        let (_, m, _) = desk_fit();
        let mut z = DVector::zeros(m.dim());
        z[0] = 1.0;
        let x = m.decode(&z).unwrap();
        for (j, &i) in m.bone_channels.iter().enumerate() {
            assert!((x.0[i] - (m.mean_x[j] + m.basis[(0, j)])).abs() < 1e-15);
        }
    }

    #[test]
    fn latent_round_trip() {
        let (_, m, p) = desk_fit();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let z = DVector::from_fn(m.dim(), |_, _| rng.random_range(-1.0..1.0)) + &p.mu_z;
            let back = m.encode(&m.decode(&z).unwrap()).unwrap();
            assert!((back - &z).amax() < 1e-8);
        }
    }

    #[test]
    fn decode_vjp_examples() {
        let (_, m, _) = desk_fit();
        let zero = m.decode_vjp(&DVector::zeros(m.n_channels)).unwrap();
        assert_eq!(zero.amax(), 0.0);
        let ch = m.passthrough_channels[1];
        let mut up = DVector::zeros(m.n_channels);
        up[ch] = 1.0;
        let g = m.decode_vjp(&up).unwrap();
        let mut e = DVector::zeros(m.dim());
        e[m.n_components() + 1] = 1.0;
        assert_eq!(g, e);
    }

    #[test]
    fn prior_identity_whitening() {
        let mu = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let prior = PriorModel { mu_z: mu.clone(), a_z: DMatrix::identity(3, 3) };
        let mut z = mu.clone();
        z[0] += 1.0;
        let (v, g) = prior_loss(&z, &prior);
        assert!((v - 1.0).abs() < 1e-15);
        assert_eq!(g, DVector::from_vec(vec![2.0, 0.0, 0.0]));
        let (v0, g0) = prior_loss(&mu, &prior);
        assert_eq!(v0, 0.0);
        assert_eq!(g0.amax(), 0.0);
    }

    #[test]
    fn whitening_inverts_regularized_covariance() {
        let (s, m, p) = desk_fit();
        let pop = synthetic_population(&s, &PopulationConfig::desk(7));
        let n = pop.len();
        let zs: Vec<DVector<f64>> = pop.iter().map(|x| m.encode(x).unwrap()).collect();
        let mut cov = DMatrix::zeros(m.dim(), m.dim());
        for z in &zs {
            let d = z - &p.mu_z;
            cov += &d * d.transpose();
        }
        cov /= n as f64 - 1.0;
        let reg = &cov + DMatrix::<f64>::identity(m.dim(), m.dim()) * COVARIANCE_RIDGE;
        let should_be_eye = &p.a_z * reg * p.a_z.transpose();
        let dev = (should_be_eye - DMatrix::<f64>::identity(m.dim(), m.dim())).amax();
        assert!(dev < 1e-8, "{dev}");
    }

    #[test]
    fn prior_mean_face_is_valid_after_snap() {
        let (s, m, p) = desk_fit();
        let x = snap_discrete(&m.decode(&p.mu_z).unwrap(), &s);
        assert!(validate(&x, &s).unwrap().is_valid());
    }

    #[test]
    fn artifact_roundtrip() {
        let (s, m, p) = desk_fit();
        let json = serde_json::to_string(&LatentArtifact::new(&m, &p)).unwrap();
        let art: LatentArtifact = serde_json::from_str(&json).unwrap();
        let (m2, p2) = art.into_models(&s).unwrap();
        assert_eq!(m2, m);
        assert_eq!(p2, p);
    }
}
