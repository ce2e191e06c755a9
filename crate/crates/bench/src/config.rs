use std::path::Path;

use fadnest::modeling::{Activation, MlpConfig};
use fadnest::Mode;
use serde::{Deserialize, Serialize};

use crate::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown format `{s}` (csv or json)")),
        }
    }
}

/// One grid cell. Without `mode` it runs under every mode in
/// [`BenchConfig::modes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub path: Option<String>,
    #[serde(default)]
    pub format: Format,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_repeat")]
    pub repeat: usize,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    pub grid: Vec<GridEntry>,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_repeat() -> usize {
    1
}

fn default_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

impl BenchConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: BenchConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1));
            ConfigError {
                line,
                msg: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            msg: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| ConfigError { line: None, msg };
        if self.grid.is_empty() {
            return Err(fail("grid needs at least one entry".into()));
        }
        if self.repeat == 0 {
            return Err(fail("repeat must be at least 1".into()));
        }
        if self.modes.is_empty() {
            return Err(fail("modes must not be empty".into()));
        }
        for c in self.cells() {
            c.validate().map_err(|e| fail(e.to_string()))?;
        }
        Ok(())
    }

    /// Every (entry, mode) pair as a model config, entry-major.
    pub fn cells(&self) -> Vec<MlpConfig> {
        let mut out = Vec::new();
        for e in &self.grid {
            let modes = match e.mode {
                Some(m) => vec![m],
                None => self.modes.clone(),
            };
            for mode in modes {
                let mut c = MlpConfig::new(e.widths.clone(), e.activation, e.batch, e.seed, mode);
                if let Some(lr) = e.lr {
                    c.lr = lr;
                }
                out.push(c);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expands_modes() {
        let cfg = BenchConfig::parse(
            "repeat = 2\n[[grid]]\nwidths = [2, 4, 1]\nactivation = \"swish\"\nbatch = 3\n",
        )
        .unwrap();
        let cells = cfg.cells();
        assert_eq!(cells.len(), 3);
        assert_eq!(cells[2].mode, Mode::Fad);
    }

    #[test]
    fn reports_the_failing_line() {
        let err = BenchConfig::parse(
            "repeat = 1\n[[grid]]\nwidths = [2, 1]\nactivation = \"elu\"\nbatch = 1\n",
        )
        .unwrap_err();
        assert_eq!(err.line, Some(4));
    }

    #[test]
    fn rejects_empty_grid() {
        assert!(BenchConfig::parse("grid = []\n").is_err());
        assert!(BenchConfig::parse(
            "repeat = 0\n[[grid]]\nwidths = [1, 1]\nactivation = \"relu\"\nbatch = 1\n"
        )
        .is_err());
    }
}
