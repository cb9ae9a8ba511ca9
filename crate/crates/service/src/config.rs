use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use compositor::agents::{FeedbackPolicy, HttpBackendConfig};
use compositor::catalogue::{Catalogue, CatalogueOptions};
use compositor::compression::CompressionPolicy;
use compositor::provisioning::GrantTable;
use compositor::workflow::{Engine, EngineSettings, WorkflowConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "COMPOSITOR_CONFIG";
pub const LISTEN_ENV: &str = "COMPOSITOR_LISTEN";

/// Which agent backend new projects get.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// Scripted agents. Projects use the script in their start request, or
    /// this scenario file when the request carries none.
    Scripted {
        #[serde(default)]
        scenario: Option<PathBuf>,
    },
    Http(HttpBackendConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Scripted { scenario: None }
    }
}

/// The service config file (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    /// Catalogue directory; in-memory when unset.
    pub catalogue_dir: Option<PathBuf>,
    /// Grant table JSON; the built-in table when unset.
    pub grant_table: Option<PathBuf>,
    /// Seed for project and document ids; random when unset.
    pub seed: Option<u64>,
    pub metrics_seed: u64,
    pub workflow: WorkflowConfig,
    pub compression: CompressionPolicy,
    pub feedback_max_words: usize,
    pub backend: BackendConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            catalogue_dir: None,
            grant_table: None,
            seed: None,
            metrics_seed: 0,
            workflow: WorkflowConfig::default(),
            compression: CompressionPolicy::default(),
            feedback_max_words: FeedbackPolicy::default().max_words,
            backend: BackendConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let config: ServiceConfig = toml::from_str(text)?;
        config.workflow.validate().map_err(anyhow::Error::msg)?;
        config.compression.validate().map_err(anyhow::Error::msg)?;
        anyhow::ensure!(config.feedback_max_words > 0, "feedback_max_words must be positive");
        Ok(config)
    }

    /// Reads `path`, falling back to `$COMPOSITOR_CONFIG`, then to defaults.
    /// `$COMPOSITOR_LISTEN` overrides the listen address.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let mut config = match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Ok(listen) = std::env::var(LISTEN_ENV) {
            config.listen = listen;
        }
        Ok(config)
    }

    pub fn build_engine(&self) -> anyhow::Result<Arc<Engine>> {
        let options = CatalogueOptions {
            seed: self.seed,
            ..CatalogueOptions::default()
        };
        let catalogue = match &self.catalogue_dir {
            Some(dir) => Catalogue::open(dir, options).with_context(|| format!("opening {}", dir.display()))?,
            None => Catalogue::in_memory(options),
        };
        let grants = match &self.grant_table {
            Some(p) => GrantTable::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => GrantTable::default(),
        };
        let settings = EngineSettings {
            seed: self.seed,
            grants,
            compression: self.compression,
            feedback: FeedbackPolicy {
                max_words: self.feedback_max_words,
            },
            ..EngineSettings::default()
        };
        Ok(Arc::new(Engine::new(Arc::new(catalogue), settings)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let c = ServiceConfig::from_toml(
            r#"
            listen = "0.0.0.0:9000"
            [workflow]
            tau = 90
            [backend]
            kind = "http"
            base_url = "http://localhost:1234/v1"
            model = "m"
            price_per_input_token = 3e-6
            price_per_output_token = 15e-6
            "#,
        )
        .unwrap();
        assert_eq!(c.listen, "0.0.0.0:9000");
        assert_eq!(c.workflow.tau, 90);
        assert_eq!(c.workflow.max_iterations, 10);
        match c.backend {
            BackendConfig::Http(h) => assert_eq!(h.cached_input_multiplier, 0.1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn example_file_parses() {
        let text = include_str!("../compositor.example.toml");
        let c = ServiceConfig::from_toml(text).unwrap();
        assert_eq!(c.catalogue_dir.as_deref(), Some(Path::new("./catalogue")));
        assert!(matches!(c.backend, BackendConfig::Http(_)));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(ServiceConfig::from_toml("[workflow]\ntau = 101").is_err());
        assert!(ServiceConfig::from_toml("nonsense = 1").is_err());
    }
}
