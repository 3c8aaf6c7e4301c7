//! Run configuration files (TOML). See `configs/` and the README for the grammar.

use std::path::{Path, PathBuf};

use evosynth_core::data::{generate_synthetic, load_directory, DatasetSplit, SplitFractions};
use evosynth_core::evolution::{EvolutionConfig, DEFAULT_PROBES};
use evosynth_core::heredity::Normalization;
use evosynth_core::metrics::{MetricsConfig, Thresholding, DEFAULT_BETA_SQUARED};
use evosynth_core::nn::{Activation, Architecture, InitRule, LayerKind, Loss, Shape, TrainConfig};
use evosynth_core::synthesis::{EnvConstraint, SynthesisOptions, DEFAULT_RETRIES};
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub network: NetworkSection,
    pub evolution: EvolutionSection,
    pub training: TrainingSection,
    pub data: DataSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// `[channels, height, width]` of the network input.
    pub input: [usize; 3],
    pub layers: Vec<LayerEntry>,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(untagged)]
pub enum KernelSize {
    Square(usize),
    Rect([usize; 2]),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerEntry {
    Dense {
        outputs: usize,
        #[serde(default)]
        activation: Activation,
    },
    Conv2d {
        out_channels: usize,
        kernel: KernelSize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        activation: Activation,
    },
    Upsample {
        factor: usize,
        #[serde(default)]
        activation: Activation,
    },
    Concat {
        from: usize,
        #[serde(default)]
        activation: Activation,
    },
    Nonlinearity {
        activation: Activation,
    },
}

fn one() -> usize {
    1
}

impl LayerEntry {
    fn to_kind(&self) -> (LayerKind, Activation) {
        match *self {
            LayerEntry::Dense { outputs, activation } => (LayerKind::Dense { outputs }, activation),
            LayerEntry::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                activation,
            } => {
                let (kernel_h, kernel_w) = match kernel {
                    KernelSize::Square(k) => (k, k),
                    KernelSize::Rect([h, w]) => (h, w),
                };
                (
                    LayerKind::Conv2d {
                        out_channels,
                        kernel_h,
                        kernel_w,
                        stride,
                        padding,
                    },
                    activation,
                )
            }
            LayerEntry::Upsample { factor, activation } => (LayerKind::Upsample { factor }, activation),
            LayerEntry::Concat { from, activation } => (LayerKind::Concat { from }, activation),
            LayerEntry::Nonlinearity { activation } => (LayerKind::Nonlinearity, activation),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionSection {
    pub generations: u32,
    pub retention: f64,
    pub base_seed: u64,
    #[serde(default)]
    pub inherit_weights: bool,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default = "default_probes")]
    pub probe_count: usize,
}

fn default_retries() -> usize {
    DEFAULT_RETRIES
}

fn default_probes() -> usize {
    DEFAULT_PROBES
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: Loss,
    #[serde(default)]
    pub init: InitRule,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSection {
    Synthetic {
        seed: u64,
        count: usize,
        height: usize,
        width: usize,
    },
    Directory {
        images: PathBuf,
        masks: PathBuf,
        #[serde(default = "default_fractions")]
        fractions: [f64; 3],
        /// Optional `[height, width]` every pair is resampled to.
        resize: Option<[usize; 2]>,
    },
}

fn default_fractions() -> [f64; 3] {
    let f = SplitFractions::default();
    [f.train, f.validation, f.test]
}

impl DataSection {
    pub fn load(&self) -> Result<DatasetSplit<f32>, CliError> {
        let split = match self {
            DataSection::Synthetic {
                seed,
                count,
                height,
                width,
            } => generate_synthetic(*seed, *count, *height, *width)?,
            DataSection::Directory {
                images,
                masks,
                fractions,
                resize,
            } => load_directory(
                images,
                masks,
                &SplitFractions {
                    train: fractions[0],
                    validation: fractions[1],
                    test: fractions[2],
                },
                resize.map(|[h, w]| (h, w)),
            )?,
        };
        Ok(split)
    }
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(untagged)]
pub enum ThresholdEntry {
    Named(ThresholdName),
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdName {
    MaxSweep,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default = "default_beta_squared")]
    pub beta_squared: f64,
    #[serde(default = "default_threshold")]
    pub threshold: ThresholdEntry,
}

fn default_beta_squared() -> f64 {
    DEFAULT_BETA_SQUARED
}

fn default_threshold() -> ThresholdEntry {
    ThresholdEntry::Named(ThresholdName::MaxSweep)
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            beta_squared: DEFAULT_BETA_SQUARED,
            threshold: default_threshold(),
        }
    }
}

impl MetricsSection {
    pub fn to_config(&self) -> Result<MetricsConfig, CliError> {
        let cfg = MetricsConfig {
            beta_squared: self.beta_squared,
            thresholding: match self.threshold {
                ThresholdEntry::Named(ThresholdName::MaxSweep) => Thresholding::MaxSweep,
                ThresholdEntry::Fixed(threshold) => Thresholding::Fixed { threshold },
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Input(format!("invalid configuration: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn architecture(&self) -> Result<Architecture, CliError> {
        let [c, h, w] = self.network.input;
        let stack: Vec<_> = self.network.layers.iter().map(LayerEntry::to_kind).collect();
        Ok(Architecture::build(Shape::new(c, h, w), &stack)?)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.training;
        let cfg = TrainConfig {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            loss: t.loss,
            seed: self.evolution.base_seed,
            init: t.init,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn evolution_config(&self) -> Result<EvolutionConfig, CliError> {
        let e = &self.evolution;
        if e.generations < 1 {
            return Err(CliError::Input("[evolution] generations must be at least 1".into()));
        }
        let mut cfg = EvolutionConfig::new(
            self.architecture()?,
            EnvConstraint::constant(e.retention)?,
            self.train_config()?,
        );
        cfg.generations = e.generations;
        cfg.base_seed = e.base_seed;
        cfg.inherit_weights = e.inherit_weights;
        cfg.synthesis = SynthesisOptions {
            normalization: e.normalization,
            max_retries: e.max_retries,
        };
        cfg.metrics = self.metrics.to_config()?;
        cfg.output_dir = Some(self.output.directory.clone());
        cfg.probe_count = e.probe_count;
        Ok(cfg)
    }
}
