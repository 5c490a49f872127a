//! Versioned TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::{num_rounds, SelectionMode};
use crate::data::{AugmentConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{MreMode, DEFAULT_RADII};
use crate::model::{BackboneKind, ModelConfig};
use crate::objectives::{LossWeights, DEFAULT_SIGMA};
use crate::optim::StepSchedule;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSettings {
    pub lambda_s: f64,
    pub lambda_o: f64,
    pub lambda_d: f64,
    /// Gaussian width of score targets in grid cells.
    pub sigma: f64,
}

impl LossSettings {
    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_s: self.lambda_s, lambda_o: self.lambda_o, lambda_d: self.lambda_d }
    }
}

impl Default for LossSettings {
    fn default() -> Self {
        let w = LossWeights::default();
        Self { lambda_s: w.lambda_s, lambda_o: w.lambda_o, lambda_d: w.lambda_d, sigma: DEFAULT_SIGMA }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerMethod {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    pub method: OptimizerMethod,
    pub lr: f64,
    /// Epochs (within a round) at which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epochs_per_round: usize,
    pub batch_size: usize,
}

impl OptimizerSettings {
    pub fn schedule(&self) -> StepSchedule {
        StepSchedule { lr: self.lr, decay_epochs: self.decay_epochs.clone(), decay_factor: self.decay_factor }
    }
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            method: OptimizerMethod::Adam,
            lr: 2e-4,
            decay_epochs: vec![480, 640],
            decay_factor: 0.1,
            epochs_per_round: 720,
            batch_size: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSettings {
    /// Ratio increment per self-training round.
    pub delta: f64,
    /// Number of self-training rounds after round 0; defaults to `ceil(1/delta)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[serde(default)]
    pub selection: SelectionMode,
}

impl CurriculumSettings {
    pub fn total_rounds(&self) -> usize {
        self.rounds.unwrap_or_else(|| num_rounds(self.delta))
    }
}

impl Default for CurriculumSettings {
    fn default() -> Self {
        Self { delta: 0.2, rounds: None, selection: SelectionMode::Dynamic }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationSettings {
    /// Domain adversarial branch on or off.
    pub dal: bool,
    /// Whether the domain branch also runs in round 0.
    pub dal_round0: bool,
    /// Self-training with pseudo-labels on or off.
    pub self_training: bool,
    /// Put target images into the training pool at all. Off gives a source-only model.
    pub use_target: bool,
    /// Re-initialize parameters at the start of every self-training round.
    pub reinit_each_round: bool,
}

impl Default for AdaptationSettings {
    fn default() -> Self {
        Self { dal: true, dal_round0: true, self_training: true, use_target: true, reinit_each_round: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    /// Labeled target images used only for evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Settings for `synth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub radii_mm: Vec<f64>,
    pub mre_mode: MreMode,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { radii_mm: DEFAULT_RADII.to_vec(), mre_mode: MreMode::Pooled }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub deterministic: bool,
    pub model: ModelConfig,
    pub loss: LossSettings,
    pub optimizer: OptimizerSettings,
    pub curriculum: CurriculumSettings,
    pub adaptation: AdaptationSettings,
    pub augment: AugmentConfig,
    #[serde(default)]
    pub data: DataSettings,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl ExperimentConfig {
    /// Cephalometric-scale defaults.
    pub fn full() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            deterministic: true,
            model: ModelConfig::cephalometric(),
            loss: LossSettings::default(),
            optimizer: OptimizerSettings::default(),
            curriculum: CurriculumSettings::default(),
            adaptation: AdaptationSettings::default(),
            augment: AugmentConfig::default(),
            data: DataSettings::default(),
            eval: EvalSettings::default(),
        }
    }

    /// CPU-sized profile on the synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig {
                num_landmarks: 6,
                embed_dim: 32,
                num_decoder_layers: 2,
                num_heads: 4,
                stride: 4,
                backbone: BackboneKind::Tiny,
                input_size: [64, 64],
            },
            // The tiny backbone sees about four cells, so the offset window stays within one cell.
            loss: LossSettings { sigma: 0.5, ..LossSettings::default() },
            optimizer: OptimizerSettings {
                lr: 2e-3,
                decay_epochs: vec![20, 26],
                epochs_per_round: 30,
                ..OptimizerSettings::default()
            },
            data: DataSettings {
                source: Some("data/manifests/source.json".into()),
                target: Some("data/manifests/target.json".into()),
                test: Some("data/manifests/test.json".into()),
                synth: Some(SynthConfig::default()),
            },
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version)));
        }
        self.model.validate()?;
        self.loss.weights().validate()?;
        self.augment.validate()?;
        if let Some(s) = &self.data.synth {
            s.validate()?;
        }
        let o = &self.optimizer;
        if o.epochs_per_round == 0 {
            return Err(Error::Config("optimizer.epochs_per_round must be at least 1".into()));
        }
        if let Some(&e) = o.decay_epochs.iter().find(|&&e| e >= o.epochs_per_round) {
            return Err(Error::Config(format!(
                "optimizer.decay_epochs entry {e} is not below epochs_per_round {}",
                o.epochs_per_round
            )));
        }
        if o.batch_size == 0 || !(o.lr > 0.0) || !(o.decay_factor > 0.0) {
            return Err(Error::Config("optimizer.batch_size, lr and decay_factor must be positive".into()));
        }
        if !(self.loss.sigma > 0.0) {
            return Err(Error::Config("loss.sigma must be positive".into()));
        }
        let c = &self.curriculum;
        if !(c.delta > 0.0 && c.delta <= 1.0) {
            return Err(Error::Config(format!("curriculum.delta must be in (0, 1], got {}", c.delta)));
        }
        if self.eval.radii_mm.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config("eval.radii_mm must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve_relative(base);
        Ok(cfg)
    }
}

impl DataSettings {
    /// Makes relative manifest paths relative to `base`.
    pub fn resolve_relative(&mut self, base: &Path) {
        for p in [&mut self.source, &mut self.target, &mut self.test].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
