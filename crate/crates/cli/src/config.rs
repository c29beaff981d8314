//! Run configuration: a versioned TOML file plus command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tabsynth::backbone::BackboneConfig;
use tabsynth::lm::BackendKind;
use tabsynth::sampler::PromptStrategy;
use tabsynth::scenarios::PipelineConfig;
use tabsynth::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: CONFIG_VERSION,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        if cfg.format_version != CONFIG_VERSION {
            return Err(Error::VersionMismatch {
                found: format!("config format {}", cfg.format_version),
                expected: format!("config format {CONFIG_VERSION}"),
            });
        }
        Ok(cfg)
    }
}

/// Where generation comes from, as chosen by `--backend`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    Builtin(BackendKind),
    Plugin(String),
}

pub fn parse_backend(s: &str) -> Result<BackendChoice> {
    match s {
        "ngram" => Ok(BackendChoice::Builtin(BackendKind::Ngram)),
        "neural" => Ok(BackendChoice::Builtin(BackendKind::Neural)),
        _ => match s.strip_prefix("plugin:") {
            Some(cmd) if !cmd.trim().is_empty() => Ok(BackendChoice::Plugin(cmd.to_string())),
            _ => Err(Error::InvalidArgument(format!(
                "unknown backend `{s}` (ngram, neural, plugin:<cmd>)"
            ))),
        },
    }
}

pub fn parse_backbone(s: &str, current: &BackboneConfig) -> Result<BackboneConfig> {
    match s {
        "cart" => Ok(match current {
            c @ BackboneConfig::Cart { .. } => c.clone(),
            _ => BackboneConfig::default(),
        }),
        "knn" => Ok(match current {
            c @ BackboneConfig::Knn { .. } => c.clone(),
            _ => BackboneConfig::Knn { k: 5 },
        }),
        _ => match s.strip_prefix("plugin:") {
            Some(cmd) if !cmd.trim().is_empty() => Ok(BackboneConfig::Plugin {
                command: cmd.to_string(),
            }),
            _ => Err(Error::InvalidArgument(format!(
                "unknown backbone `{s}` (cart, knn, plugin:<cmd>)"
            ))),
        },
    }
}

/// Flags shared by every command; each one, when given, overrides the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub backend: Option<String>,
    pub backbone: Option<String>,
    pub temperature: Option<f64>,
    pub clamp: bool,
    pub strategy: Option<String>,
}

/// The resolved configuration of one command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub config: RunConfig,
    pub seed: u64,
    pub backend: BackendChoice,
}

pub fn resolve(path: Option<&Path>, o: &Overrides) -> Result<Resolved> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let p = &mut config.pipeline;
    let backend = match &o.backend {
        Some(b) => parse_backend(b)?,
        None => BackendChoice::Builtin(p.backend.kind),
    };
    if let BackendChoice::Builtin(kind) = backend {
        p.backend.kind = kind;
    }
    if let Some(b) = &o.backbone {
        p.backbone = parse_backbone(b, &p.backbone)?;
    }
    if let Some(t) = o.temperature {
        p.sampling.temperature = t;
    }
    if o.clamp {
        p.sampling.categorical_clamp = true;
    }
    if let Some(s) = &o.strategy {
        p.strategy = s.parse()?;
    }
    let seed = o.seed.unwrap_or(0);
    if let Some(s) = o.seed {
        let n = p.seeds.len().max(1) as u64;
        p.seeds = (0..n).map(|i| s.wrapping_add(i)).collect();
        p.pretrain_seed = s;
        p.sampling.seed = s;
    }
    p.validate()?;
    if p.strategy == PromptStrategy::MultiPair {
        return Err(Error::Config("multi-pair prompts are used by impute only".into()));
    }
    Ok(Resolved { config, seed, backend })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "format_version = 1\n[pipeline]\nsedes = [1]\n").unwrap();
        assert_eq!(RunConfig::load(&p).unwrap_err().category(), "config");
        std::fs::write(&p, "format_version = 1\nextra = 2\n").unwrap();
        assert_eq!(RunConfig::load(&p).unwrap_err().category(), "config");
    }

    #[test]
    fn version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "format_version = 9\n").unwrap();
        assert_eq!(RunConfig::load(&p).unwrap_err().category(), "version-mismatch");
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "format_version = 1\n[pipeline]\nseeds = [0, 1, 2]\n[pipeline.sampling]\ntemperature = 0.5\n").unwrap();
        let o = Overrides {
            seed: Some(10),
            backend: Some("neural".into()),
            backbone: Some("knn".into()),
            temperature: Some(0.7),
            clamp: true,
            strategy: Some("one-pair".into()),
        };
        let r = resolve(Some(&p), &o).unwrap();
        let pl = &r.config.pipeline;
        assert_eq!(pl.seeds, [10, 11, 12]);
        assert_eq!(pl.backend.kind, BackendKind::Neural);
        assert_eq!(pl.backbone, BackboneConfig::Knn { k: 5 });
        assert_eq!(pl.sampling.temperature, 0.7);
        assert!(pl.sampling.categorical_clamp);
        assert_eq!(pl.strategy, PromptStrategy::OnePair);
    }

    #[test]
    fn plugin_specs_parse() {
        assert_eq!(parse_backend("plugin:./gen --x").unwrap(), BackendChoice::Plugin("./gen --x".into()));
        assert!(parse_backend("plugin:").is_err());
        assert!(parse_backend("gpt").is_err());
        assert!(matches!(
            parse_backbone("plugin:py m.py", &BackboneConfig::default()).unwrap(),
            BackboneConfig::Plugin { .. }
        ));
    }
}
