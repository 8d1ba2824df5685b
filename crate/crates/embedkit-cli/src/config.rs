//! Pipeline configuration file (JSON). Flags override config values; the
//! `EMBEDKIT_OUT_DIR` environment variable supplies the output directory
//! when neither the flag nor the config names one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use embedkit::cluster::Linkage;
use embedkit::ensemble::{default_layout, EnsembleLayout, Slot};
use embedkit::refine::RefinerConfig;

use crate::errors::{CliError, CliResult};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Path to the dataset manifest, relative to this config file.
    pub manifest: String,
    #[serde(default)]
    pub layout: LayoutSpec,
    /// Global seed; required here or via --seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<String>,
    /// Model whose four seasons get the tied-map refinement. Explicit null
    /// disables refinement.
    #[serde(default = "default_refine_model")]
    pub refine_model: Option<String>,
    #[serde(default)]
    pub refiner: RefinerConfig,
    /// Linkage for pseudolabel clustering.
    #[serde(default)]
    pub linkage: Linkage,
    /// Candidate dimensions per slot key; present means a rate search runs
    /// and its plan overrides the layout's slot widths.
    #[serde(default)]
    pub candidates: Option<BTreeMap<String, Vec<usize>>>,
    #[serde(default = "default_k_clusters")]
    pub k_clusters: usize,
    #[serde(default = "default_mse_weight")]
    pub mse_weight: f64,
    /// L2-normalize rows before each SVD fit.
    #[serde(default)]
    pub normalize_before_svd: bool,
    /// L2-normalize each slot's rows after compression.
    #[serde(default)]
    pub normalize_slots: bool,
    /// Optional task descriptor file evaluated against the composed output;
    /// a features value of "$ensemble" refers to the run's ensemble file.
    #[serde(default)]
    pub tasks: Option<String>,
}

fn default_refine_model() -> Option<String> {
    Some("georsclip".to_string())
}

fn default_k_clusters() -> usize {
    8
}

fn default_mse_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LayoutSpec {
    /// Only "table1" is recognized.
    Named(String),
    Inline { slots: Vec<Slot> },
}

impl Default for LayoutSpec {
    fn default() -> Self {
        LayoutSpec::Named("table1".into())
    }
}

impl LayoutSpec {
    pub fn resolve(&self) -> CliResult<EnsembleLayout> {
        match self {
            LayoutSpec::Named(name) if name == "table1" => Ok(default_layout()),
            LayoutSpec::Named(other) => Err(CliError::new(
                "invalid_config",
                format!("unknown layout name {other:?} (expected \"table1\")"),
            )),
            LayoutSpec::Inline { slots } => {
                EnsembleLayout::new(slots.clone()).map_err(CliError::from)
            }
        }
    }
}

pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub base_dir: PathBuf,
    pub config_path: PathBuf,
}

impl LoadedConfig {
    pub fn manifest_path(&self) -> PathBuf {
        resolve(&self.base_dir, &self.config.manifest)
    }

    pub fn tasks_path(&self) -> Option<PathBuf> {
        self.config.tasks.as_ref().map(|t| resolve(&self.base_dir, t))
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Loads and validates the config: referenced paths must exist now, not at
/// the stage that first touches them.
pub fn load_pipeline_config(path: &Path) -> CliResult<LoadedConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new("io", format!("reading {}: {e}", path.display())))?;
    let config: PipelineConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::new("invalid_config", format!("{}: {e}", path.display())))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let loaded = LoadedConfig {
        config,
        base_dir,
        config_path: path.to_path_buf(),
    };

    let manifest = loaded.manifest_path();
    if !manifest.exists() {
        return Err(CliError::new(
            "invalid_config",
            format!("manifest {} does not exist", manifest.display()),
        ));
    }
    if let Some(tasks) = loaded.tasks_path() {
        if !tasks.exists() {
            return Err(CliError::new(
                "invalid_config",
                format!("tasks file {} does not exist", tasks.display()),
            ));
        }
    }
    loaded.config.layout.resolve()?;
    if let Err(e) = loaded.config.refiner.validate() {
        return Err(CliError::from(e));
    }
    Ok(loaded)
}
