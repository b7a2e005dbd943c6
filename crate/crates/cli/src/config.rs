//! TOML run configuration. Command-line flags override every field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tad_core::motion::Thresholds;
use tad_core::segment::SegmentationParams;
use tad_gateway::EndpointConfig;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataroot: Option<PathBuf>,
    pub bundles: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub qa: Option<PathBuf>,
    pub runs: Option<PathBuf>,
    /// Root that frame image paths are relative to.
    pub images: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub store: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub ablation: Option<String>,
    pub parallelism: Option<usize>,
    pub tasks: Option<Vec<String>>,
    pub max_unparseable: Option<f64>,
    pub paths: Paths,
    pub segments: SegmentationParams,
    pub motion: Thresholds,
    pub endpoint: Option<EndpointConfig>,
    /// Text-only model for the final Scene-CoT call; defaults to `endpoint`.
    pub text_endpoint: Option<EndpointConfig>,
}

impl RunConfig {
    /// Parses `path`; relative paths inside resolve against the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::keyed("config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for slot in [&mut p.dataroot, &mut p.bundles, &mut p.labels, &mut p.qa, &mut p.runs, &mut p.images, &mut p.templates, &mut p.store] {
            if let Some(rel) = slot.as_ref().filter(|p| p.is_relative()) {
                *slot = Some(base.join(rel));
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "config".into());
            CliError::keyed(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.segments.validate().map_err(|e| CliError::keyed("segments", e))?;
        self.motion.validate().map_err(|e| CliError::keyed("motion", e))?;
        if let Some(m) = &self.method {
            m.parse::<tad_pipeline::Method>().map_err(|e| CliError::keyed("method", e))?;
        }
        if let Some(a) = &self.ablation {
            a.parse::<tad_pipeline::Ablation>().map_err(|e| CliError::keyed("ablation", e))?;
        }
        if self.parallelism == Some(0) {
            return Err(CliError::keyed("parallelism", "must be >= 1"));
        }
        for (key, ep) in [("endpoint", &self.endpoint), ("text_endpoint", &self.text_endpoint)] {
            if let Some(ep) = ep {
                ep.validate().map_err(|e| CliError::keyed(key, e))?;
            }
        }
        Ok(())
    }
}

/// Flag value, else config value, else a missing-key error.
pub fn pick_path(flag: Option<PathBuf>, cfg: &Option<PathBuf>, key: &str) -> CliResult<PathBuf> {
    flag.or_else(|| cfg.clone())
        .ok_or_else(|| CliError::keyed(key, format!("no value: pass --{} or set paths.{key}", key.replace('_', "-"))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_parse_and_default() {
        let cfg = RunConfig::parse(
            "seed = 7\nmethod = \"tcogmap\"\n[segments]\nnum_segments = 6\n[motion]\npsi_turn = 12.0\n[endpoint]\nbase_url = \"http://localhost:1\"\nmodel = \"m\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.segments.num_segments, 6);
        assert_eq!(cfg.segments.window, 5.0);
        assert_eq!(cfg.motion.psi_turn, 12.0);
        assert_eq!(cfg.motion.v_stat, 0.2);
        assert_eq!(cfg.endpoint.unwrap().retries, 3);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(RunConfig::parse("method = \"gpt\"").unwrap_err().key.as_deref(), Some("method"));
        assert_eq!(RunConfig::parse("[segments]\nnum_segments = 0").unwrap_err().key.as_deref(), Some("segments"));
        assert_eq!(RunConfig::parse("bogus = 1").unwrap_err().key.as_deref(), Some("bogus"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[paths]\nbundles = \"b\"\nqa = \"/abs/qa.jsonl\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.bundles, Some(dir.path().join("b")));
        assert_eq!(cfg.paths.qa, Some(PathBuf::from("/abs/qa.jsonl")));
    }
}
