//! Differentiable rendering and text/image embedding contracts, and the
//! cosine-distance loss between a text prompt and a rendered character.
//!
//! The solver only sees the [`Renderer`] and [`Embedder`] traits. The crate
//! ships deterministic synthetic implementations ([`face::SyntheticFaceRenderer`],
//! [`embedder::SyntheticSemanticEmbedder`]) and a socket adapter
//! ([`adapter`]) for attaching external models.

pub mod adapter;
pub mod embedder;
pub mod face;

use nalgebra::DVector;
use thiserror::Error;

use crate::schema::ParameterVector;

pub use embedder::{FeatureProjector, Lexicon, LexiconEntry, SyntheticSemanticEmbedder};
pub use face::{Preview, SyntheticFaceRenderer};

/// Embeddings shorter than this are treated as zero.
pub const MIN_EMBEDDING_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemanticError {
    #[error("degenerate {which} embedding (norm {norm:e})")]
    DegenerateEmbedding { which: &'static str, norm: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("adapter: {0}")]
    Adapter(String),
    #[error("lexicon: {0}")]
    Lexicon(String),
}

/// Differentiable stand-in for the game renderer: parameters to a feature
/// vector, plus the vector-Jacobian product.
pub trait Renderer: Send + Sync {
    fn param_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn render(&self, x: &ParameterVector) -> Result<DVector<f64>, SemanticError>;
    fn render_vjp(&self, x: &ParameterVector, upstream: &DVector<f64>) -> Result<DVector<f64>, SemanticError>;
}

/// Joint text/image embedding space.
pub trait Embedder: Send + Sync {
    fn feature_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<DVector<f64>, SemanticError>;
    fn embed_feature(&self, f: &DVector<f64>) -> Result<DVector<f64>, SemanticError>;
    fn embed_feature_vjp(&self, f: &DVector<f64>, upstream: &DVector<f64>) -> Result<DVector<f64>, SemanticError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipLoss {
    pub value: f64,
    /// Gradient with respect to the parameter vector.
    pub grad: DVector<f64>,
}

/// `1 − cos(E_T(text), E_I(G(x)))` and its gradient with respect to `x`.
pub fn clip_loss(
    text: &str,
    x: &ParameterVector,
    renderer: &dyn Renderer,
    embedder: &dyn Embedder,
) -> Result<ClipLoss, SemanticError> {
    let target = embedder.embed_text(text)?;
    clip_loss_to(&target, x, renderer, embedder)
}

/// Same as [`clip_loss`] with the text embedding already computed.
pub fn clip_loss_to(
    target: &DVector<f64>,
    x: &ParameterVector,
    renderer: &dyn Renderer,
    embedder: &dyn Embedder,
) -> Result<ClipLoss, SemanticError> {
    let features = renderer.render(x)?;
    let image = embedder.embed_feature(&features)?;
    let (value, d_image) = cosine_distance(target, &image)?;
    let d_features = embedder.embed_feature_vjp(&features, &d_image)?;
    let grad = renderer.render_vjp(x, &d_features)?;
    Ok(ClipLoss { value, grad })
}

/// `1 − cos(t, e)` and its gradient with respect to `e`. The value is clamped
/// to `[0, 2]` against rounding.
pub fn cosine_distance(t: &DVector<f64>, e: &DVector<f64>) -> Result<(f64, DVector<f64>), SemanticError> {
    if t.len() != e.len() {
        return Err(SemanticError::Dimension { expected: t.len(), actual: e.len() });
    }
    let tn = t.norm();
    if !(tn > MIN_EMBEDDING_NORM) {
        return Err(SemanticError::DegenerateEmbedding { which: "text", norm: tn });
    }
    let en = e.norm();
    if !(en > MIN_EMBEDDING_NORM) {
        return Err(SemanticError::DegenerateEmbedding { which: "image", norm: en });
    }
    let t_hat = t / tn;
    let e_hat = e / en;
    let cos = t_hat.dot(&e_hat);
    // d(1 - cos)/de = -(t_hat - cos * e_hat) / |e|
    let grad = (e_hat * cos - t_hat) / en;
    Ok(((1.0 - cos).clamp(0.0, 2.0), grad))
}
