use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use socs::category::LabelSpace;
use socs::error::{Error, Result};
use socs::model::ModelConfig;
use socs::pipeline::InferenceConfig;
use socs::sampling::SamplingKind;
use socs::synth::DatasetConfig;
use socs::train::TrainConfig;

/// Switches for the network ablations; they override the matching model
/// and loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub multi_scale: bool,
    pub global_point: bool,
    pub consistency_loss: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { multi_scale: true, global_point: true, consistency_loss: true }
    }
}

/// Axes of the `ablate` grid; every combination is one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub sampling: Vec<SamplingKind>,
    pub global_point: Vec<bool>,
    pub consistency_loss: Vec<bool>,
    pub bins: Vec<usize>,
    pub keypoints: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            sampling: vec![SamplingKind::OnSurface, SamplingKind::SurfaceDependent, SamplingKind::SurfaceIndependent],
            global_point: vec![true, false],
            consistency_loss: vec![true, false],
            bins: vec![32, 64, 128, 256],
            keypoints: vec![8, 16, 32, 64],
        }
    }
}

impl Grid {
    pub fn cell_count(&self) -> usize {
        self.sampling.len() * self.global_point.len() * self.consistency_loss.len() * self.bins.len() * self.keypoints.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub label_space: LabelSpace,
    /// When set, `synth-gen` tunes the parameter spread so the generated
    /// instances reach this variation degree (within 10%).
    pub target_variation: Option<f64>,
    /// Test views scored for the validation column of `metrics.csv`.
    pub validation_views: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub ablation: Ablation,
    pub grid: Grid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "lamp".into(),
            seed: 0,
            output_dir: PathBuf::from("runs/lamp"),
            label_space: LabelSpace::Socs,
            target_variation: None,
            validation_views: 8,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            ablation: Ablation::default(),
            grid: Grid::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Model settings after the ablation switches and the master seed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            multi_scale: self.ablation.multi_scale,
            global_point: self.ablation.global_point,
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig { seed: self.seed, ..self.train.clone() };
        if !self.ablation.consistency_loss {
            t.loss_weights.consistency = 0.0;
        }
        t
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig { seed: self.seed, ..self.inference.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut model = self.model_config();
        if let Some(first) = model.block_points.first_mut() {
            *first = self.dataset.input_points;
        }
        model.validate()?;
        self.train_config().validate()?;
        self.inference.validate()?;
        if self.dataset.keypoints < 4 || self.dataset.keypoints > socs::synth::MAX_KEYPOINTS {
            return Err(Error::Config(format!("keypoints {} not in [4, {}]", self.dataset.keypoints, socs::synth::MAX_KEYPOINTS)));
        }
        if self.model.block_points.first().is_some_and(|&n| n != self.dataset.input_points) {
            return Err(Error::Config(format!(
                "model.block_points[0] = {} but dataset.input_points = {}",
                self.model.block_points[0], self.dataset.input_points
            )));
        }
        if self.grid.cell_count() == 0 {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        Ok(())
    }

    /// Creates the output directory, failing with a config error if it
    /// cannot be written.
    pub fn prepare_output(&self) -> Result<PathBuf> {
        let dir = self.output_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("output dir {}: {e}", dir.display())))?;
        let probe = dir.join(".write-test");
        std::fs::write(&probe, b"").map_err(|e| Error::Config(format!("output dir {} not writable: {e}", dir.display())))?;
        let _ = std::fs::remove_file(probe);
        Ok(dir)
    }
}
