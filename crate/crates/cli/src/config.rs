//! Pipeline configuration file and its digest.

use std::path::{Path, PathBuf};

use legible_core::corpus::SynthSpec;
use legible_core::legibility::CamTarget;
use legible_core::nnet::ModelConfig;
use legible_core::projection::CropPreset;
use legible_survey::ServerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Bad or inconsistent configuration (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Output locations. Unset directories default to subdirectories of `out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out: PathBuf,
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub evaluation: Option<PathBuf>,
    pub analysis: Option<PathBuf>,
    pub survey: Option<PathBuf>,
    /// Built front-end bundle served at `/`.
    pub ui: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            corpus: None,
            dataset: None,
            model: None,
            evaluation: None,
            analysis: None,
            survey: None,
            ui: None,
        }
    }
}

impl Paths {
    fn or_out(&self, dir: &Option<PathBuf>, name: &str) -> PathBuf {
        dir.clone().unwrap_or_else(|| self.out.join(name))
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.or_out(&self.corpus, "corpus")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.or_out(&self.dataset, "dataset")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.or_out(&self.model, "model")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.model_dir().join("model.ckpt")
    }

    pub fn evaluation_dir(&self) -> PathBuf {
        self.or_out(&self.evaluation, "evaluation")
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.or_out(&self.analysis, "analysis")
    }

    pub fn survey_dir(&self) -> PathBuf {
        self.or_out(&self.survey, "survey")
    }

    pub fn response_store(&self) -> PathBuf {
        self.survey_dir().join("responses.jsonl")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub preset: CropPreset,
    pub crop_size: u32,
    /// Per-segment image cap; unset keeps everything.
    pub cap: Option<usize>,
    pub test_fraction: f64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            preset: CropPreset::B24,
            crop_size: 64,
            cap: None,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub augment: bool,
    /// Evaluate on the test split after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-4,
            augment: true,
            eval_each_epoch: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub top_pairs: usize,
    pub cam_samples: usize,
    pub cam_alpha: f64,
    pub cam_target: CamTargetName,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            top_pairs: 90,
            cam_samples: 12,
            cam_alpha: 0.5,
            cam_target: CamTargetName::Predicted,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamTargetName {
    Predicted,
    TrueLabel,
}

impl From<CamTargetName> for CamTarget {
    fn from(t: CamTargetName) -> Self {
        match t {
            CamTargetName::Predicted => CamTarget::Predicted,
            CamTargetName::TrueLabel => CamTarget::TrueLabel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurveyConfig {
    pub pool_size: usize,
    pub addr: String,
    pub server: ServerConfig,
}

impl Default for SurveyConfig {
    fn default() -> Self {
        Self {
            pool_size: 90,
            addr: "127.0.0.1:8080".into(),
            server: ServerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthSpec,
    pub prepare: PrepareConfig,
    /// `num_classes` is replaced by the number of segments with images.
    pub model: ModelConfig,
    pub train: TrainParams,
    pub analyze: AnalyzeConfig,
    pub survey: SurveyConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Hex sha256 of the effective configuration.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.synth.validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.prepare.crop_size == 0 {
            return Err(ConfigError("prepare.crop_size must be positive".into()));
        }
        if !(self.prepare.test_fraction > 0.0 && self.prepare.test_fraction < 1.0) {
            return Err(ConfigError("prepare.test_fraction must lie in (0, 1)".into()));
        }
        if self.prepare.cap == Some(0) {
            return Err(ConfigError("prepare.cap must be at least 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(ConfigError("train.batch_size must be positive".into()));
        }
        if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return Err(ConfigError("train.lr must be finite and non-negative".into()));
        }
        if self.survey.server.click_radius < 1.0 {
            return Err(ConfigError("survey.server.click_radius must be at least 1".into()));
        }
        Ok(())
    }
}
