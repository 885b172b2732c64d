//! Top-level run configuration shared by the command-line tools.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::growth::SolverConfig;
use crate::surrogate::NetConfig;
use crate::tmcmc::{PriorSpec, SamplerConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub anatomy: Option<PathBuf>,
    pub observation: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub solver: SolverConfig,
    pub net: NetConfig,
    pub prior: PriorSpec,
    pub sampler: SamplerConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Parses and validates; every failure is a [`Error::Config`].
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.net.validate().map_err(|e| Error::Config(format!("net: {e}")))?;
        self.prior.validate()?;
        self.sampler.validate()
    }
}
