use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use osnn::butterfly::{FitBudget, Transform};
use osnn::cost::{Architecture, RoutingModel};
use osnn::devices::{DetectionMode, Mapping, NoiseSpec, VariationModel};
use osnn::training::{DpeBudget, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Train,
    Eval,
    ChipEval,
    Prune,
    Fidelity,
    Cost,
    DpeFit,
    Calibrate,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::Eval => "eval",
            Task::ChipEval => "chip-eval",
            Task::Prune => "prune",
            Task::Fidelity => "fidelity",
            Task::Cost => "cost",
            Task::DpeFit => "dpe-fit",
            Task::Calibrate => "calibrate",
        }
    }
}

/// Everything a run needs. Unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Master seed: model initialisation, training order, test subsets and
    /// noise streams all derive from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "one")]
    pub threads: usize,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub chip: ChipConfig,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub fidelity: FidelityConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding the four standard MNIST IDX files.
    pub dir: PathBuf,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Use only the first `n` training images.
    pub train_limit: Option<usize>,
    /// Evaluate on `n` test images drawn without replacement (seeded by the
    /// master seed) instead of the full test set.
    pub test_subset: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data/mnist"),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_limit: None,
            test_subset: None,
        }
    }
}

impl DataConfig {
    fn path(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.dir.join(name))
    }

    pub fn train_paths(&self) -> (PathBuf, PathBuf) {
        (
            self.path(&self.train_images, "train-images-idx3-ubyte"),
            self.path(&self.train_labels, "train-labels-idx1-ubyte"),
        )
    }

    pub fn test_paths(&self) -> (PathBuf, PathBuf) {
        (
            self.path(&self.test_images, "t10k-images-idx3-ubyte"),
            self.path(&self.test_labels, "t10k-labels-idx1-ubyte"),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    AdaptiveAvgPool {
        out_h: usize,
        out_w: usize,
    },
    Flatten,
    Linear {
        out_features: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub k: usize,
    pub transform: Transform,
    pub input: [usize; 3],
    /// `None` builds the reference CNN.
    pub layers: Option<Vec<LayerSpec>>,
    /// Start from this checkpoint instead of a fresh initialisation.
    pub checkpoint: Option<PathBuf>,
    /// Train against this fitted chip model instead of ideal B and P.
    pub dpe: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 4,
            transform: Transform::Hadamard,
            input: [1, 28, 28],
            layers: None,
            checkpoint: None,
            dpe: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub noise: NoiseSpec,
    /// Accuracy is averaged over this many noise streams.
    pub noise_seeds: usize,
    pub mapping: Mapping,
    pub mode: DetectionMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            noise: NoiseSpec::none(),
            noise_seeds: 1,
            mapping: Mapping::Nominal,
            mode: DetectionMode::Coherent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChipConfig {
    pub variation: VariationModel,
    /// Dynamic noise active while the chip runs and is measured.
    pub noise: NoiseSpec,
    /// Load this chip instead of fabricating one.
    pub instance: Option<PathBuf>,
    pub measurements: usize,
    pub calibration_points: usize,
    pub dpe: DpeBudget,
}

impl Default for ChipConfig {
    fn default() -> Self {
        Self {
            variation: VariationModel::default(),
            noise: NoiseSpec::none(),
            instance: None,
            measurements: 2000,
            calibration_points: 33,
            dpe: DpeBudget::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub architectures: Vec<Architecture>,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Name of a shipped preset.
    pub library: String,
    /// A library file, used instead of the preset when set.
    pub library_file: Option<PathBuf>,
    pub reconfig_rate: f64,
    pub wdm: bool,
    pub routing: RoutingModel,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            architectures: vec![Architecture::Osnn, Architecture::MziSvd],
            m: 32,
            n: 32,
            k: 8,
            library: "paper-defaults".into(),
            library_file: None,
            reconfig_rate: 0.0,
            wdm: false,
            routing: RoutingModel::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FidelityConfig {
    pub k: usize,
    pub targets: usize,
    pub budget: FitBudget,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self {
            k: 4,
            targets: 100,
            budget: FitBudget::default(),
        }
    }
}

/// A configuration error with the dotted path of the offending field.
#[derive(Debug, thiserror::Error)]
#[error("config field `{path}`: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::new(".", e.message().to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::new(path, e.into_inner().message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new(".", format!("{}: {}", path.display(), e)))?;
        Self::from_toml(&text)
    }

    /// Checks that need more than the schema.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.threads == 0 {
            return Err(ConfigError::new("threads", "must be >= 1"));
        }
        if self.train.seed != 0 {
            return Err(ConfigError::new("train.seed", "set the top-level `seed` instead"));
        }
        if self.train.threads != 1 {
            return Err(ConfigError::new("train.threads", "set the top-level `threads` instead"));
        }
        if self.eval.noise_seeds == 0 {
            return Err(ConfigError::new("eval.noise_seeds", "must be >= 1"));
        }
        if self.data.test_subset == Some(0) {
            return Err(ConfigError::new("data.test_subset", "must be >= 1"));
        }
        let checks = [
            ("train", self.train.validate()),
            ("eval.noise", self.eval.noise.validate()),
            ("chip.noise", self.chip.noise.validate()),
            ("chip.variation", self.chip.variation.validate()),
        ];
        for (path, r) in checks {
            if let Err(e) = r {
                return Err(ConfigError::new(path, e.to_string()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialisation, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// The training settings with the run-wide seed and thread count.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            threads: self.threads,
            ..self.train.clone()
        }
    }
}
