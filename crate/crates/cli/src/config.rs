//! Optional TOML run configuration. Command-line flags override it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vissyn_core::backends::DetectorNoise;
use vissyn_core::pipeline::PipelineConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub pipeline: PipelineConfig,
    pub backend: BackendSection,
    pub generate: GenerateSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Oracle,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub program: Option<String>,
    pub args: Vec<String>,
    pub timeout_secs: f64,
    pub pool_size: usize,
    pub forward_hints: bool,
    /// Oracle detector noise; absent means exact detections.
    pub noise: Option<DetectorNoise>,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Oracle,
            program: None,
            args: Vec::new(),
            timeout_secs: vissyn_core::backends::external::DEFAULT_TIMEOUT_SECS,
            pool_size: 1,
            forward_hints: false,
            noise: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub width: u32,
    pub height: u32,
    pub center_sigma: f64,
    pub size_sigma: f64,
    pub drop_prob: f64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            width: vissyn_core::synth::DEFAULT_IMAGE_SIZE,
            height: vissyn_core::synth::DEFAULT_IMAGE_SIZE,
            center_sigma: 0.05,
            size_sigma: 0.05,
            drop_prob: 0.3,
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}
