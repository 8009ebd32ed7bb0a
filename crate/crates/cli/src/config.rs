//! Run configuration: one TOML file with a top-level `seed`, a `[paths]`
//! table, and optional `[panel]`, `[simulate]`, `[msem]`, and
//! `[diagnostics]` tables. Anything left out takes its documented default.

use std::path::{Path, PathBuf};

use lmp_core::diagnostics::DiagnosticsConfig;
use lmp_core::msem::MsemConfig;
use lmp_core::panel_io::PanelSchema;
use lmp_core::simulator::DgpSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Name of the effective-configuration echo written next to the outputs.
pub const CONFIG_ECHO: &str = "config.effective.toml";

/// Tables whose structs carry their own seed. Those seeds are always derived
/// from the top-level one, so setting them in the file is an error.
const SEEDED_TABLES: [&str; 2] = ["simulate", "msem"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub panel: PanelSchema,
    #[serde(default)]
    pub simulate: DgpSpec,
    #[serde(default)]
    pub msem: MsemConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    /// Input panel CSV; defaults to `<out_dir>/panel.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panel: Option<PathBuf>,
    /// Fitted parameters JSON; defaults to `<out_dir>/params.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
}

impl Paths {
    pub fn panel_path(&self) -> PathBuf {
        self.panel.clone().unwrap_or_else(|| self.out_dir.join("panel.csv"))
    }

    pub fn params_path(&self) -> PathBuf {
        self.params.clone().unwrap_or_else(|| self.out_dir.join("params.json"))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for name in SEEDED_TABLES {
            if table.get(name).and_then(|t| t.get("seed")).is_some() {
                return Err(CliError::Config(format!(
                    "`{name}.seed` is not allowed; set the top-level `seed` instead"
                )));
            }
        }
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let tagged = |section: &str, e: &dyn std::fmt::Display| CliError::Config(format!("[{section}] {e}"));
        self.simulate.validate().map_err(|e| tagged("simulate", &e))?;
        self.msem.validate().map_err(|e| tagged("msem", &e))?;
        self.diagnostics.validate().map_err(|e| tagged("diagnostics", &e))?;
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Config(format!("seed must be at most {} (TOML integer range)", i64::MAX)));
        }
        if self.paths.out_dir.as_os_str().is_empty() {
            return Err(CliError::Config("[paths] out_dir must not be empty".into()));
        }
        Ok(())
    }

    /// TOML text that parses back to this configuration.
    pub fn echo(&self) -> Result<String, CliError> {
        let mut value = toml::Table::try_from(self).map_err(|e| CliError::Config(e.to_string()))?;
        for name in SEEDED_TABLES {
            if let Some(toml::Value::Table(t)) = value.get_mut(name) {
                t.remove("seed");
            }
        }
        toml::to_string(&value).map_err(|e| CliError::Config(e.to_string()))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    RunConfig::parse(&text).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
