use std::path::{Path, PathBuf};

use drape_forge::oracle::{DataConfig, SimParams};
use drape_forge::{Error, Result};
use drape_forge::pipeline::{EvalConfig, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Body model JSON. When absent, `gen-data` builds the procedural body
    /// and stores it in the dataset directory.
    #[serde(default)]
    pub body_model: Option<PathBuf>,
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

/// Procedural body used when no body model file is configured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyConfig {
    pub joints: usize,
    pub resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub body: BodyConfig,
    pub data: DataConfig,
    pub sim: SimParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            paths: Paths {
                body_model: None,
                dataset: "data".into(),
                checkpoints: "checkpoints".into(),
                reports: "reports".into(),
            },
            body: BodyConfig {
                joints: 16,
                resolution: 8,
            },
            data: DataConfig::default(),
            sim: SimParams::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths are resolved against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.paths.dataset);
        resolve(&mut config.paths.checkpoints);
        resolve(&mut config.paths.reports);
        if let Some(p) = config.paths.body_model.as_mut() {
            resolve(p);
        }
        Ok(config)
    }

    /// Applies the global seed to every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.sim.validate()?;
        self.data.validate()?;
        if !(2..=drape_forge::body::MAX_JOINTS).contains(&self.body.joints) {
            return Err(Error::Validation(format!("body joint count {} unsupported", self.body.joints)));
        }
        Ok(())
    }

    /// Checkpoint directory of the configured model variant.
    pub fn variant_dir(&self) -> PathBuf {
        self.paths.checkpoints.join(variant_name(&self.model))
    }
}

pub fn variant_name(model: &ModelConfig) -> &'static str {
    match (model.no_decomposition, model.no_parser) {
        (false, false) => "full",
        (true, false) => "no_decomposition",
        (false, true) => "no_parser",
        (true, true) => "no_decomposition_no_parser",
    }
}
