use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use star_core::clustering::ClusteringConfig;
use star_core::dryrun::{ensure_clean, DryRunTransport};
use star_core::encoder::{EncoderBackendKind, DEFAULT_REFERENCE_DIM};
use star_core::fusion::RowSelection;
use star_core::querygen::GenBackendKind;
use star_core::transport::{HttpTransport, Transport};
use star_core::{EncoderConfig, FusionConfig, Gateway, GenConfig, PipelineConfig, QueryGenerator};

const DRY_RUN_ENDPOINT: &str = "http://dry-run.invalid";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Vec<PathBuf>,
    pub queries: Vec<PathBuf>,
    pub index: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Everything a command needs, loaded from a JSON file and then overridden
/// by flags. `seed` is the only source of randomness; it replaces
/// `clustering.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub generator: GenConfig,
    pub clustering: ClusteringConfig,
    pub fusion: FusionConfig,
    pub selection: RowSelection,
    pub paths: Paths,
    pub seed: u64,
    pub threads: Option<usize>,
    pub log_level: String,
    pub dry_run: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            generator: GenConfig::default(),
            clustering: ClusteringConfig::default(),
            fusion: FusionConfig::default(),
            selection: RowSelection::default(),
            paths: Paths::default(),
            seed: 42,
            threads: None,
            log_level: "info".into(),
            dry_run: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("invalid config file {}", path.display()))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            clustering: ClusteringConfig {
                seed: self.seed,
                ..self.clustering.clone()
            },
            fusion: self.fusion.clone(),
            selection: self.selection,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()?;
        self.encoder.validate()?;
        if self.threads == Some(0) {
            bail!("threads must be >= 1");
        }
        Ok(())
    }

    pub fn backends(&self) -> Result<Backends> {
        let mut encoder = self.encoder.clone();
        let mut generator = self.generator.clone();
        if encoder.cache_path.is_none() {
            encoder.cache_path = self.paths.cache.clone();
        }
        let dry_run = if self.dry_run {
            if encoder.backend == EncoderBackendKind::Reference
                && generator.backend == GenBackendKind::Template
            {
                log::warn!("--dry-run has no effect with offline backends");
            }
            encoder
                .endpoint
                .get_or_insert_with(|| DRY_RUN_ENDPOINT.into());
            generator
                .endpoint
                .get_or_insert_with(|| DRY_RUN_ENDPOINT.into());
            let dim = encoder.dim.unwrap_or(DEFAULT_REFERENCE_DIM);
            Some(Arc::new(DryRunTransport::new(dim, encoder.hash_seed)?))
        } else {
            None
        };
        let transport: Arc<dyn Transport> = match &dry_run {
            Some(t) => t.clone(),
            None => Arc::new(HttpTransport),
        };
        Ok(Backends {
            gateway: encoder.build_gateway_with(transport.clone())?,
            generator: QueryGenerator::with_transport(generator, transport)?,
            dry_run,
        })
    }
}

pub struct Backends {
    pub gateway: Gateway,
    pub generator: QueryGenerator,
    pub dry_run: Option<Arc<DryRunTransport>>,
}

impl Backends {
    /// Reports dry-run traffic and fails on any protocol violation.
    pub fn finish(&self) -> Result<()> {
        if let Some(t) = &self.dry_run {
            let requests = t.requests();
            let embed = requests
                .iter()
                .filter(|r| r.url.ends_with("/embed"))
                .count();
            log::info!(
                "dry run: {} requests ({embed} embed, {} generate), {} violations",
                requests.len(),
                requests.len() - embed,
                t.violations().len()
            );
            ensure_clean(t).context("dry run found protocol violations")?;
        }
        Ok(())
    }
}
