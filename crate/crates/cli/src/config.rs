// SPDX-License-Identifier: MIT OR Apache-2.0

//! TOML run configuration. Command-line flags override file values.

use std::path::{Path, PathBuf};

use qkcircuit::analytics::components::Granularity;
use qkcircuit::analytics::ioi::WordLists;
use qkcircuit::autointerp::client::EndpointConfig;
use qkcircuit::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub bundle: Option<PathBuf>,
    pub tau_scale: Option<f64>,
    pub rho: Option<f64>,
    pub granularity: Option<Granularity>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub q: Option<f64>,
    pub top_k: Option<usize>,
    pub words: Option<WordLists>,
    pub interpreter: Option<EndpointConfig>,
    pub judge: Option<EndpointConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.tau_scale {
            if !(t > 1.0 && t.is_finite()) {
                return Err(Error::Config(format!("tau_scale must exceed 1, got {t}")));
            }
        }
        if let Some(r) = self.rho {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("rho must lie in [0, 1], got {r}")));
            }
        }
        if let Some(q) = self.q {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::Config(format!("q must lie in (0, 1], got {q}")));
            }
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        for ep in [&self.interpreter, &self.judge].into_iter().flatten() {
            if ep.model.is_empty() {
                return Err(Error::Config("endpoint model name is empty".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_file() {
        let c: RunConfig = toml::from_str(
            r#"
            bundle = "toy"
            tau_scale = 3.0
            granularity = "edge_sv"
            seed = 7
            [judge]
            url = "http://localhost:8000/v1/chat/completions"
            model = "judge"
            auth_env = "JUDGE_TOKEN"
            "#,
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.granularity, Some(Granularity::EdgeSv));
        assert_eq!(c.judge.unwrap().temperature, 0.0);
    }

    #[test]
    fn rejects_bad_values() {
        let c: RunConfig = toml::from_str("tau_scale = 0.5").unwrap();
        assert!(c.validate().is_err());
        assert!(toml::from_str::<RunConfig>("unknown = 1").is_err());
    }
}
