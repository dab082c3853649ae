//! Run configuration, read from TOML.
//!
//! The documented defaults live in `configs/default.toml` and are compiled
//! in; [`RunConfig::default`] parses that file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Branch, TrainConfig, UetdConfig};
use crate::scoring::FillPolicy;
use crate::synth::{BenchmarkSpec, GaitParams};
use crate::tokenizer::{SchemeKind, TokenizationScheme};

pub const DEFAULT_CONFIG_TOML: &str = include_str!("../configs/default.toml");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_dim: usize,
    pub model_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub seed: u64,
    pub train_videos: usize,
    pub test_videos: usize,
    pub persons_per_video: usize,
    pub n_frames: usize,
    pub gait: GaitParams,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default)]
    pub train_poses: String,
    #[serde(default)]
    pub train_labels: String,
    #[serde(default)]
    pub test_poses: String,
    #[serde(default)]
    pub test_labels: String,
    #[serde(default)]
    pub out_dir: String,
}

fn parse_scheme<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<SchemeKind, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

fn write_scheme<S: serde::Serializer>(k: &SchemeKind, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(k.name())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(deserialize_with = "parse_scheme", serialize_with = "write_scheme")]
    pub scheme: SchemeKind,
    pub use_relative: bool,
    pub beta: usize,
    pub keypoints: usize,
    pub seed: u64,
    pub stride: usize,
    pub train_stride: usize,
    pub fill: FillPolicy,
    pub per_video_normalization: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    pub ctd: TrainSection,
    pub ftd: TrainSection,
    pub synth: SynthSection,
    #[serde(default)]
    pub paths: PathsSection,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_toml_str(DEFAULT_CONFIG_TOML).expect("shipped default config is valid")
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&crate::io::read_to_string(path)?)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn tokenization(&self) -> TokenizationScheme {
        TokenizationScheme::new(self.scheme, self.use_relative)
    }

    /// Switches scheme and relative flag. An explicit `[model]` table is
    /// dropped so the new scheme gets its own preset.
    pub fn with_scheme(&self, scheme: SchemeKind, use_relative: bool) -> Self {
        let mut c = self.clone();
        if c.scheme != scheme || c.use_relative != use_relative {
            c.model = None;
        }
        c.scheme = scheme;
        c.use_relative = use_relative;
        c
    }

    pub fn model_config(&self) -> UetdConfig {
        let mut m = UetdConfig::for_scheme(self.tokenization(), self.beta, self.keypoints);
        if let Some(s) = self.model {
            m.n_heads = s.n_heads;
            m.n_layers = s.n_layers;
            m.ff_dim = s.ff_dim;
            m.model_dim = s.model_dim;
        }
        m.dropout = self.ctd.dropout;
        m
    }

    pub fn train_config(&self, branch: Branch) -> TrainConfig {
        let (s, seed) = match branch {
            Branch::Ctd => (self.ctd, self.seed),
            Branch::Ftd => (self.ftd, self.seed.wrapping_add(1)),
        };
        TrainConfig {
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            epochs: s.epochs,
            weight_decay: s.weight_decay,
            dropout: s.dropout,
            seed,
        }
    }

    pub fn benchmark_spec(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            seed: self.synth.seed,
            train_videos: self.synth.train_videos,
            test_videos: self.synth.test_videos,
            persons_per_video: self.synth.persons_per_video,
            n_frames: self.synth.n_frames,
            keypoints: self.keypoints,
            gait: self.synth.gait,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.beta < 2 || !self.beta.is_multiple_of(2) {
            return fail(format!("beta must be even and at least 2, got {}", self.beta));
        }
        if self.keypoints == 0 {
            return fail("keypoints must be positive".into());
        }
        if self.stride == 0 || self.train_stride == 0 {
            return fail("stride and train_stride must be positive".into());
        }
        let m = self.model_config();
        m.validate()
            .map_err(|e| Error::Config(format!("model for {}: {e}", self.scheme.name())))?;
        for b in [Branch::Ctd, Branch::Ftd] {
            self.train_config(b)
                .validate()
                .map_err(|e| Error::Config(format!("[{b}] {e}")))?;
        }
        let s = &self.synth;
        if s.train_videos == 0 || s.test_videos == 0 || s.persons_per_video == 0 {
            return fail("[synth] needs at least one video and person".into());
        }
        if s.n_frames < 40 || s.n_frames < 3 * self.beta {
            return fail(format!("[synth] n_frames {} too short for beta {}", s.n_frames, self.beta));
        }
        Ok(())
    }

    /// Resolves a configured path; `None` when unset.
    pub fn path(&self, raw: &str) -> Option<PathBuf> {
        if raw.is_empty() {
            None
        } else if Path::new(raw).is_absolute() {
            Some(PathBuf::from(raw))
        } else {
            Some(self.base_dir.join(raw))
        }
    }

    pub fn required_path(&self, raw: &str, key: &str) -> Result<PathBuf> {
        self.path(raw)
            .ok_or_else(|| Error::Config(format!("paths.{key} is not set")))
    }

    /// SHA-256 (hex, 16 chars) of every setting except paths.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsSection::default();
        c.model = Some(ModelSection {
            n_heads: self.model_config().n_heads,
            n_layers: self.model_config().n_layers,
            ff_dim: self.model_config().ff_dim,
            model_dim: self.model_config().model_dim,
        });
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
