//! Run configuration: one TOML file, every key optional, unknown keys
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::association::{AssociationConfig, Associator, CandidateScope};
use crate::error::{Error, Result};
use crate::evaluate::EvalOptions;
use crate::geometry::DEFAULT_RESOLUTION;
use crate::simulate::{NoiseConfig, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    #[default]
    Probabilistic,
    Iou,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssociationSection {
    pub backend: Backend,
    pub geo_weight: f64,
    pub fea_weight: f64,
    pub similarity_threshold: f64,
    pub observed_fraction_floor: f64,
    pub candidate_scope: CandidateScope,
    /// Used by the IoU baseline only.
    pub iou_threshold: f64,
}

impl Default for AssociationSection {
    fn default() -> Self {
        Self::from_probabilistic(Backend::Probabilistic, AssociationConfig::default(), 0.5)
    }
}

impl AssociationSection {
    pub fn from_probabilistic(backend: Backend, cfg: AssociationConfig, iou_threshold: f64) -> Self {
        Self {
            backend,
            geo_weight: cfg.geo_weight,
            fea_weight: cfg.fea_weight,
            similarity_threshold: cfg.similarity_threshold,
            observed_fraction_floor: cfg.observed_fraction_floor,
            candidate_scope: cfg.candidate_scope,
            iou_threshold,
        }
    }

    pub fn probabilistic(&self) -> AssociationConfig {
        AssociationConfig {
            geo_weight: self.geo_weight,
            fea_weight: self.fea_weight,
            similarity_threshold: self.similarity_threshold,
            observed_fraction_floor: self.observed_fraction_floor,
            candidate_scope: self.candidate_scope,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verbosity {
    Quiet,
    #[default]
    Normal,
    Verbose,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub sequence: Option<PathBuf>,
    pub snapshot: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub resolution: f64,
    pub verbosity: Verbosity,
    pub association: AssociationSection,
    pub noise: NoiseConfig,
    pub scene: SceneConfig,
    pub eval: EvalOptions,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            resolution: DEFAULT_RESOLUTION,
            verbosity: Verbosity::Normal,
            association: AssociationSection::default(),
            noise: NoiseConfig::default(),
            scene: SceneConfig::default(),
            eval: EvalOptions::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(Error::Config(format!("resolution {} must be positive", self.resolution)));
        }
        self.association.probabilistic().validate()?;
        let t = self.association.iou_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config(format!("iou_threshold {t} outside (0, 1]")));
        }
        self.noise.validate()
    }

    pub fn associator(&self) -> Associator {
        match self.association.backend {
            Backend::Probabilistic => Associator::Probabilistic(self.association.probabilistic()),
            Backend::Iou => Associator::IouBaseline {
                iou_threshold: self.association.iou_threshold,
            },
        }
    }
}
