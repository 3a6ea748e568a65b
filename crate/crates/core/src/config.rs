//! Run configuration: architecture, ablation toggles and training settings.
//!
//! Files are TOML restricted to scalar and array values under dotted keys,
//! e.g. `ivla.use_gconv = false` or `csa.stages = [2, 3, 4]`. Unknown keys
//! are rejected so a typo never silently falls back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::CsaConfig;
use crate::error::{Error, Result};
use crate::ivla::IvlaConfig;

pub const NUM_STAGES: usize = 4;

/// IVLA settings shared by every stage; channels come from the stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IvlaSettings {
    pub gconv_kernel: usize,
    pub use_gconv: bool,
    pub use_l_act: bool,
    pub use_v_gate: bool,
    pub use_l_gate: bool,
}

impl Default for IvlaSettings {
    fn default() -> Self {
        let c = IvlaConfig::new(1);
        Self {
            gconv_kernel: c.gconv_kernel,
            use_gconv: c.use_gconv,
            use_l_act: c.use_l_act,
            use_v_gate: c.use_v_gate,
            use_l_gate: c.use_l_gate,
        }
    }
}

impl IvlaSettings {
    pub fn for_channels(&self, channels: usize) -> IvlaConfig {
        IvlaConfig {
            channels,
            gconv_kernel: self.gconv_kernel,
            use_gconv: self.use_gconv,
            use_l_act: self.use_l_act,
            use_v_gate: self.use_v_gate,
            use_l_gate: self.use_l_gate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    LearnedTable,
    OneHotProjected,
    ExternalFile,
}

impl EmbeddingKind {
    pub const ALL: [EmbeddingKind; 3] = [Self::OneHotProjected, Self::LearnedTable, Self::ExternalFile];

    pub fn name(self) -> &'static str {
        match self {
            Self::LearnedTable => "learned_table",
            Self::OneHotProjected => "one_hot_projected",
            Self::ExternalFile => "external_file",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    /// (C_l, T) tensor container, required for `external_file`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { kind: EmbeddingKind::LearnedTable, file: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    /// 1-based.
    pub index: usize,
    pub num_blocks: usize,
    pub channels: usize,
    pub ivla: IvlaConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// (H, W) of the input image.
    pub image_size: [usize; 2],
    pub input_channels: usize,
    pub num_labels: usize,
    /// Width C_l of the label embedding table.
    pub linguistic_channels: usize,
    pub channels: [usize; NUM_STAGES],
    pub depths: [usize; NUM_STAGES],
    pub seed: u64,
    pub embedding: EmbeddingConfig,
    pub ivla: IvlaSettings,
    pub csa: CsaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small four-stage model that trains in seconds on a CPU.
    pub fn desk() -> Self {
        Self {
            image_size: [32, 32],
            input_channels: 3,
            num_labels: 5,
            linguistic_channels: 16,
            channels: [8, 16, 32, 64],
            depths: [1, 1, 2, 1],
            seed: 0,
            embedding: EmbeddingConfig::default(),
            ivla: IvlaSettings::default(),
            csa: CsaConfig::default(),
        }
    }

    /// Full-size layout: 448x448 input, channels 96..768, depths 3/3/27/3,
    /// 768-wide label embeddings.
    pub fn full(num_labels: usize) -> Self {
        Self {
            image_size: [448, 448],
            num_labels,
            linguistic_channels: 768,
            channels: [96, 192, 384, 768],
            depths: [3, 3, 27, 3],
            ..Self::desk()
        }
    }

    pub fn stages(&self) -> Vec<StageConfig> {
        (0..NUM_STAGES)
            .map(|i| StageConfig {
                index: i + 1,
                num_blocks: self.depths[i],
                channels: self.channels[i],
                ivla: self.ivla.for_channels(self.channels[i]),
            })
            .collect()
    }

    /// Spatial size (H_i, W_i) of stage `index` (1-based).
    pub fn stage_size(&self, index: usize) -> (usize, usize) {
        let f = 1 << index;
        (self.image_size[0] / f, self.image_size[1] / f)
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        let div = 1 << NUM_STAGES;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!("image size {h}x{w} must be a positive multiple of {div}")));
        }
        if self.num_labels == 0 {
            return Err(Error::Config("num_labels must be at least 1".into()));
        }
        if self.input_channels == 0 || self.linguistic_channels == 0 {
            return Err(Error::Config("input and linguistic channels must be positive".into()));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Config(format!("stage channels {:?} must strictly increase", self.channels)));
        }
        if self.depths.contains(&0) {
            return Err(Error::Config(format!("stage depths {:?} must be positive", self.depths)));
        }
        if self.embedding.kind == EmbeddingKind::ExternalFile && self.embedding.file.is_none() {
            return Err(Error::Config("embedding.kind = external_file needs embedding.file".into()));
        }
        self.ivla.for_channels(self.channels[0]).validate()?;
        self.csa.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `lr0 * (1 - step / total_steps)^power`.
    Poly,
    /// Multiply by `plateau_factor` after `plateau_patience` epochs without improvement.
    Plateau,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub schedule: Schedule,
    pub power: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Stop once training-set mAP reaches this value (checked every epoch).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_map: Option<f64>,
}

impl Default for TrainConfig {
    /// Optimizer settings of the full-size recipe (AdamW, lr 1e-5, poly 0.9).
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 8,
            lr: 1e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            schedule: Schedule::Poly,
            power: 0.9,
            plateau_factor: 0.1,
            plateau_patience: 10,
            target_map: None,
        }
    }
}

impl TrainConfig {
    /// Same recipe with a learning rate suited to training desk models from
    /// scratch; 1e-5 assumes a pretrained backbone.
    pub fn desk() -> Self {
        Self { lr: 2e-3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("train.beta1/beta2 must lie in [0, 1) and adam_eps be positive".into()));
        }
        if self.weight_decay < 0.0 || self.power < 0.0 || !(0.0..1.0).contains(&self.plateau_factor) {
            return Err(Error::Config("invalid weight_decay, power or plateau_factor".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self { model: ModelConfig::desk(), train: TrainConfig::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let cfg: RunConfig = table
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        // Flattened top-level keys bypass deny_unknown_fields; catch them here.
        let known = toml::Table::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(key) = table.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}
