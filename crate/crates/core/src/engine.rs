//! The assembled model stack: schema, latent space, renderer, embedder,
//! lexicon and localizer, built synthetically or loaded from an artifacts
//! directory.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::{
    fit, synthetic_population, LatentArtifact, LatentError, LatentModel, PopulationConfig, PriorModel,
};
use crate::localizer::{
    corpus, train, HashingFeaturizer, LabelSet, LocalizerError, LocalizerModel, Metrics, TrainConfig,
};
use crate::schema::{snap_discrete, ParameterSchema, SchemaError};
use crate::semantic::embedder::{synthesize_lexicon, ProjectorArtifact, ProjectorConfig};
use crate::semantic::face::RendererConfig;
use crate::semantic::{
    Embedder, FeatureProjector, Lexicon, Renderer, SemanticError, SyntheticFaceRenderer, SyntheticSemanticEmbedder,
};
use crate::solver::Models;
use crate::taxonomy::{builtin_taxonomy, desk_schema, full_schema, Taxonomy};

pub const MANIFEST_FORMAT: &str = "charedit.artifacts";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 12 channels, 4 principal components.
    Desk,
    /// 450 channels, 60 principal components.
    Full,
}

impl Scale {
    pub fn schema(self) -> ParameterSchema {
        match self {
            Scale::Desk => desk_schema(),
            Scale::Full => full_schema(),
        }
    }

    pub fn n_components(self) -> usize {
        match self {
            Scale::Desk => 4,
            Scale::Full => 60,
        }
    }

    pub fn population(self, seed: u64) -> PopulationConfig {
        match self {
            Scale::Desk => PopulationConfig::desk(seed),
            Scale::Full => PopulationConfig::full(seed),
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(format!("unknown scale `{other}` (expected desk or full)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Localizer(#[from] LocalizerError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Artifact { path: String, message: String },
}

/// Build recipe, stored in the artifacts manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub scale: Scale,
    pub seed: u64,
    pub renderer: RendererConfig,
    pub projector: ProjectorConfig,
    pub corpus: corpus::CorpusConfig,
    pub train: TrainConfig,
}

impl BuildConfig {
    pub fn new(scale: Scale, seed: u64) -> Self {
        BuildConfig {
            scale,
            seed,
            renderer: RendererConfig::default(),
            projector: ProjectorConfig::default(),
            corpus: corpus::CorpusConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub schema_hash: String,
    pub build: BuildConfig,
    /// Localizer quality on its held-out split at build time.
    pub localizer_holdout: Metrics,
}

/// Immutable model stack shared by all sessions.
pub struct Engine {
    pub schema: ParameterSchema,
    pub taxonomy: Taxonomy,
    pub latent: LatentModel,
    pub prior: PriorModel,
    pub renderer: Arc<dyn Renderer>,
    pub embedder: Arc<dyn Embedder>,
    /// Synthetic face used for previews; present even when an external
    /// renderer drives the solver.
    pub face: Arc<SyntheticFaceRenderer>,
    pub projector: FeatureProjector,
    pub lexicon: Lexicon,
    pub localizer: LocalizerModel,
    pub manifest: Manifest,
}

const HOLDOUT_FRACTION: f64 = 0.2;

impl Engine {
    /// Builds the whole stack from seeds alone.
    pub fn synthetic(scale: Scale, seed: u64) -> Result<Engine, EngineError> {
        Engine::build(BuildConfig::new(scale, seed))
    }

    pub fn build(cfg: BuildConfig) -> Result<Engine, EngineError> {
        let schema = cfg.scale.schema();
        let taxonomy = builtin_taxonomy().restricted_to(&schema);
        let population = synthetic_population(&schema, &cfg.scale.population(cfg.seed));
        let (latent, prior) = fit(&population, &schema, cfg.scale.n_components())?;
        let face = SyntheticFaceRenderer::new(&schema, cfg.renderer);
        let reference = snap_discrete(&latent.decode(&prior.mu_z)?, &schema);
        let projector = FeatureProjector::new(face.feature_dim(), &face.render(&reference)?, cfg.projector);
        let lexicon = synthesize_lexicon(&schema, &taxonomy, &latent, &prior, &face, &projector, cfg.seed)?;

        let labels = LabelSet::from_schema(&schema);
        let examples = corpus::generate(&taxonomy, &cfg.corpus);
        let (train_set, holdout) = corpus::split_holdout(&examples, HOLDOUT_FRACTION, cfg.seed);
        let (localizer, _) = train(&train_set, &labels, HashingFeaturizer::default(), &cfg.train)?;
        let localizer_holdout = crate::localizer::evaluate(&localizer, &holdout);

        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            schema_hash: schema.hash(),
            build: cfg,
            localizer_holdout,
        };
        Engine::assemble(schema, taxonomy, latent, prior, face, projector, lexicon, localizer, manifest)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        schema: ParameterSchema,
        taxonomy: Taxonomy,
        latent: LatentModel,
        prior: PriorModel,
        face: SyntheticFaceRenderer,
        projector: FeatureProjector,
        lexicon: Lexicon,
        localizer: LocalizerModel,
        manifest: Manifest,
    ) -> Result<Engine, EngineError> {
        localizer.labels.check_against(&schema)?;
        let face = Arc::new(face);
        let embedder = SyntheticSemanticEmbedder::new(projector.clone(), lexicon.clone())?;
        Ok(Engine {
            schema,
            taxonomy,
            latent,
            prior,
            renderer: face.clone(),
            embedder: Arc::new(embedder),
            face,
            projector,
            lexicon,
            localizer,
            manifest,
        })
    }

    /// Swaps the solver's renderer and embedder, e.g. for a socket adapter.
    pub fn with_backends(mut self, renderer: Arc<dyn Renderer>, embedder: Arc<dyn Embedder>) -> Engine {
        self.renderer = renderer;
        self.embedder = embedder;
        self
    }

    pub fn models(&self) -> Models<'_> {
        Models {
            schema: &self.schema,
            latent: &self.latent,
            prior: &self.prior,
            renderer: self.renderer.as_ref(),
            embedder: self.embedder.as_ref(),
        }
    }

    /// Writes every artifact as JSON under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), EngineError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| EngineError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io(&p))
        };
        write("manifest.json", pretty(&self.manifest))?;
        write("schema.json", self.schema.to_json())?;
        write("taxonomy.json", pretty(&self.taxonomy))?;
        write("latent.json", pretty(&LatentArtifact::new(&self.latent, &self.prior)))?;
        write("projector.json", pretty(&ProjectorArtifact::from(&self.projector)))?;
        write("lexicon.json", self.lexicon.to_json())?;
        write("localizer.json", self.localizer.to_json())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Engine, EngineError> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|source| EngineError::Io { path: p.display().to_string(), source })
        };
        fn parse<T: serde::de::DeserializeOwned>(name: &str, body: &str) -> Result<T, EngineError> {
            serde_json::from_str(body).map_err(|e| EngineError::Artifact { path: name.into(), message: e.to_string() })
        }
        let manifest: Manifest = parse("manifest.json", &read("manifest.json")?)?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(EngineError::Artifact {
                path: "manifest.json".into(),
                message: format!("unsupported {} v{}", manifest.format, manifest.version),
            });
        }
        let schema = ParameterSchema::from_json(&read("schema.json")?)?;
        if schema.hash() != manifest.schema_hash {
            return Err(
                SchemaError::HashMismatch { expected: manifest.schema_hash.clone(), actual: schema.hash() }.into()
            );
        }
        let taxonomy: Taxonomy = parse("taxonomy.json", &read("taxonomy.json")?)?;
        let artifact: LatentArtifact = parse("latent.json", &read("latent.json")?)?;
        let (latent, prior) = artifact.into_models(&schema)?;
        let projector: ProjectorArtifact = parse("projector.json", &read("projector.json")?)?;
        let projector = FeatureProjector::try_from(projector)?;
        let lexicon = Lexicon::from_json(&read("lexicon.json")?)?;
        let localizer = LocalizerModel::from_json(&read("localizer.json")?)?;
        let face = SyntheticFaceRenderer::new(&schema, manifest.build.renderer);
        Engine::assemble(schema, taxonomy, latent, prior, face, projector, lexicon, localizer, manifest)
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("artifact serializes")
}
