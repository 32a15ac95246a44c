//! Run configuration and the built-in dataset presets.
//!
//! A run config is a JSON document:
//!
//! ```json
//! {
//!   "retrieval": { "preset": "evqa", "alpha": 0.3 },
//!   "tau": 0.5,
//!   "strictGroundedNodes": false,
//!   "provider": { "kind": "fixture", "dim": 64 },
//!   "prepositionMap": { "in": "located_in" },
//!   "objectEmbeddingSource": "crop"
//! }
//! ```
//!
//! Every field is optional. `retrieval` starts from the named preset (or the
//! default one) and applies the remaining keys on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::PrepositionMap;
use crate::retrieval::{LevelTopK, RetrievalConfig, SeedTopK};

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 200;
pub const DEFAULT_ANSWER_TOP_K: usize = 5;

pub const PRESET_NAMES: [&str; 5] = ["evqa", "infoseek", "scienceqa", "task-bc", "task-mc"];

const fn top_k(chunk: usize, sentence: usize, image: usize, object: usize) -> LevelTopK {
    LevelTopK {
        chunk,
        sentence,
        image,
        object,
    }
}

/// Retrieval hyperparameters per dataset.
pub fn preset(name: &str) -> Result<RetrievalConfig> {
    // (alpha, omegaC, omegaI, lambdaT, lambdaV, text top-k, visual top-k)
    let (alpha, omega_chunk, omega_image, lambda_text, lambda_visual, text, visual) =
        match name.to_ascii_lowercase().replace('_', "-").as_str() {
            "evqa" | "e-vqa" => (
                0.20,
                0.8,
                1.6,
                0.1,
                1.0,
                top_k(60, 3, 2, 3),
                top_k(200, 70, 2, 5),
            ),
            "infoseek" => (
                0.15,
                1.2,
                0.5,
                0.1,
                1.0,
                top_k(200, 3, 2, 3),
                top_k(200, 60, 1, 5),
            ),
            "scienceqa" => (
                0.85,
                0.05,
                1.0,
                1.0,
                1.0,
                top_k(4, 10, 10, 10),
                top_k(10, 10, 20, 10),
            ),
            "task-bc" => (
                0.85,
                0.2,
                1.0,
                1.0,
                0.5,
                top_k(7, 5, 5, 5),
                top_k(3, 1, 1, 1),
            ),
            "task-mc" => (
                0.70,
                1.0,
                1.0,
                1.0,
                1.0,
                top_k(12, 2, 3, 2),
                top_k(12, 3, 5, 3),
            ),
            _ => {
                return Err(Error::UnknownPreset {
                    name: name.to_string(),
                    available: PRESET_NAMES.join(", "),
                })
            }
        };
    Ok(RetrievalConfig {
        alpha,
        epsilon: DEFAULT_EPSILON,
        omega_chunk,
        omega_image,
        lambda_text,
        lambda_visual,
        seed_top_k: SeedTopK { text, visual },
        answer_top_k: DEFAULT_ANSWER_TOP_K,
        max_iters: DEFAULT_MAX_ITERS,
        global_seed_top_k: None,
    })
}

/// Partial retrieval settings layered over a base config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RetrievalOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, rename = "omegaC", skip_serializing_if = "Option::is_none")]
    pub omega_chunk: Option<f64>,
    #[serde(default, rename = "omegaI", skip_serializing_if = "Option::is_none")]
    pub omega_image: Option<f64>,
    #[serde(default, rename = "lambdaT", skip_serializing_if = "Option::is_none")]
    pub lambda_text: Option<f64>,
    #[serde(default, rename = "lambdaV", skip_serializing_if = "Option::is_none")]
    pub lambda_visual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_top_k: Option<SeedTopK>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_top_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_seed_top_k: Option<usize>,
}

impl RetrievalOverrides {
    /// Applies the overrides; a `preset` key replaces the base first.
    pub fn apply(&self, base: &RetrievalConfig) -> Result<RetrievalConfig> {
        let mut c = match &self.preset {
            Some(name) => preset(name)?,
            None => *base,
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field { c.$field = v; }
            )*};
        }
        set!(
            alpha,
            epsilon,
            omega_chunk,
            omega_image,
            lambda_text,
            lambda_visual,
            seed_top_k,
            answer_top_k,
            max_iters
        );
        if self.global_seed_top_k.is_some() {
            c.global_seed_top_k = self.global_seed_top_k;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Fixture,
    Files,
    Remote,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixture" => Ok(ProviderKind::Fixture),
            "files" => Ok(ProviderKind::Files),
            "remote" => Ok(ProviderKind::Remote),
            other => Err(Error::InvalidConfig(format!(
                "unknown provider `{other}` (expected fixture, files or remote)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ProviderConfig {
    #[serde(default)]
    pub kind: ProviderKind,
    /// Vector dimension for the fixture and remote providers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Directory of MGEM files holding query vectors (files provider).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_vectors: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectEmbeddingSource {
    Crop,
    Mask,
    #[default]
    Unspecified,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RunPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub retrieval: RetrievalOverrides,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub strict_grounded_nodes: bool,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub preposition_map: PrepositionMap,
    #[serde(default)]
    pub object_embedding_source: ObjectEmbeddingSource,
    #[serde(default)]
    pub paths: RunPaths,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            retrieval: RetrievalOverrides::default(),
            tau: DEFAULT_TAU,
            strict_grounded_nodes: false,
            provider: ProviderConfig::default(),
            preposition_map: PrepositionMap::default(),
            object_embedding_source: ObjectEmbeddingSource::default(),
            paths: RunPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::schema(origin, e.line(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// A path to a config file, or the name of a preset.
    pub fn resolve(arg: &str) -> Result<Self> {
        let path = Path::new(arg);
        if path.is_file() {
            return Self::load(path);
        }
        preset(arg)?;
        Ok(RunConfig {
            retrieval: RetrievalOverrides {
                preset: Some(arg.to_string()),
                ..Default::default()
            },
            ..Default::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        if self.provider.dim == Some(0) {
            return Err(Error::InvalidConfig("provider.dim must be positive".into()));
        }
        self.retrieval_config().map(|_| ())
    }

    pub fn retrieval_config(&self) -> Result<RetrievalConfig> {
        self.retrieval.apply(&RetrievalConfig::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evqa_column() {
        let c = preset("evqa").unwrap();
        assert_eq!(c.alpha, 0.20);
        assert_eq!(c.omega_chunk, 0.8);
        assert_eq!(c.omega_image, 1.6);
        assert_eq!(c.lambda_text, 0.1);
        assert_eq!(c.lambda_visual, 1.0);
        assert_eq!(c.seed_top_k.text, top_k(60, 3, 2, 3));
        assert_eq!(c.seed_top_k.visual, top_k(200, 70, 2, 5));
    }

    #[test]
    fn scienceqa_is_default() {
        let c = preset("scienceqa").unwrap();
        assert_eq!(c.alpha, 0.85);
        assert_eq!(c.omega_chunk, 0.05);
        assert_eq!(c, RetrievalConfig::default());
        assert_eq!(c.epsilon, 1e-6);
        for name in PRESET_NAMES {
            preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn unknown_preset_lists_names() {
        let err = preset("vqa2").unwrap_err().to_string();
        for name in PRESET_NAMES {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn overrides_layer_on_preset() {
        let cfg = RunConfig::from_json(
            r#"{"retrieval": {"preset": "infoseek", "alpha": 0.3}, "tau": 0.6}"#,
            "inline",
        )
        .unwrap();
        let r = cfg.retrieval_config().unwrap();
        assert_eq!(r.alpha, 0.3);
        assert_eq!(r.omega_chunk, 1.2);
        assert_eq!(cfg.tau, 0.6);
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(
            RunConfig::from_json(r#"{"bogus": 1}"#, "x.json"),
            Err(Error::Schema { .. })
        ));
        assert!(RunConfig::from_json(r#"{"tau": 1.5}"#, "x.json").is_err());
        assert!(RunConfig::from_json(r#"{"retrieval": {"alpha": 1.0}}"#, "x.json").is_err());
        assert!(RunConfig::resolve("no-such-preset").is_err());
        assert_eq!(
            RunConfig::resolve("task-mc")
                .unwrap()
                .retrieval_config()
                .unwrap()
                .alpha,
            0.70
        );
    }
}
