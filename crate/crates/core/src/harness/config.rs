//! Experiment configuration: a single JSON document with fail-fast parsing
//! (unknown keys are rejected so a typo cannot silently fall back to a
//! default).

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::flsim::{BatchDistribution, DefenseSpec};
use crate::harness::synth::SyntheticSpec;
use crate::model::{BottomStackSpec, InitScheme, LayerKind};

/// Where the attacker's estimates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorSource {
    /// Held-out labeled data, spread evenly over the classes.
    #[default]
    Auxiliary,
    /// Standard-normal dummy inputs.
    Dummy,
}

/// One extractor layer in front of the bottom stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorLayerConfig {
    Fc { out: usize },
    Conv { out_channels: usize, kernel: [usize; 2] },
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Shape of one input sample: `[dim]` or `[channels, height, width]`.
    pub input: Vec<usize>,
    /// Feature extractor in front of the bottom stack (Kaiming-initialized).
    #[serde(default)]
    pub extractor: Vec<ExtractorLayerConfig>,
    /// When set, the bottom stack starts with a Conv-ReLU stack of this many
    /// kernels, each covering the whole spatial input (1x1 outputs).
    #[serde(default)]
    pub conv_channels: Option<usize>,
    /// Hidden FC-ReLU widths; the final classifier is appended automatically.
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Idx { images: PathBuf, labels: PathBuf },
}

fn default_batch_size() -> usize {
    64
}

fn default_repetitions() -> usize {
    20
}

fn default_aux_sample_count() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed: together with this config it determines every number in
    /// every report.
    pub seed: u64,
    pub class_count: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Bottom-stack index (1-based) whose gradient is shared; defaults to
    /// the penultimate stack.
    #[serde(default)]
    pub shared_stack: Option<usize>,
    #[serde(default)]
    pub distribution: BatchDistribution,
    #[serde(default)]
    pub estimator: EstimatorSource,
    #[serde(default = "default_aux_sample_count")]
    pub aux_sample_count: usize,
    #[serde(default)]
    pub init: InitScheme,
    #[serde(default)]
    pub defense: DefenseSpec,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    /// Optional separate estimation dataset. When absent, a held-out set is
    /// derived from `dataset` (synthetic sources draw fresh samples from a
    /// derived seed; IDX sources reuse the same files).
    #[serde(default)]
    pub aux_dataset: Option<DatasetConfig>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be >= 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if self.aux_sample_count == 0 {
            return Err(Error::Config("aux_sample_count must be >= 1".into()));
        }
        if let DatasetConfig::Synthetic(spec) = &self.dataset {
            if spec.class_count != self.class_count {
                return Err(Error::Config(format!(
                    "dataset declares {} classes, experiment wants {}",
                    spec.class_count, self.class_count
                )));
            }
            let spec_len: usize = spec.shape.iter().product();
            let input_len: usize = self.model.input.iter().product();
            if spec_len != input_len {
                return Err(Error::Config(format!(
                    "dataset sample shape {:?} does not match model input {:?}",
                    spec.shape, self.model.input
                )));
            }
        }
        let (_, bottom, bottom_input) = self.model_specs()?;
        bottom.validate(&bottom_input)?;
        let stacks = bottom.stack_count();
        let shared = self.resolved_shared_stack()?;
        if shared == 0 || shared >= stacks {
            return Err(Error::Config(format!(
                "shared_stack {shared} must be in 1..={}",
                stacks - 1
            )));
        }
        Ok(())
    }

    /// The stack whose gradient the client uploads.
    pub fn resolved_shared_stack(&self) -> Result<usize> {
        let (_, bottom, _) = self.model_specs()?;
        Ok(self
            .shared_stack
            .unwrap_or_else(|| bottom.stack_count().saturating_sub(1)))
    }

    /// Translates the model config into extractor layer kinds, the bottom
    /// stack spec, and the bottom stack's input shape.
    pub fn model_specs(&self) -> Result<(Vec<LayerKind>, BottomStackSpec, Vec<usize>)> {
        let mut shape = self.model.input.clone();
        let mut extractor = Vec::with_capacity(self.model.extractor.len());
        for layer in &self.model.extractor {
            let kind = match *layer {
                ExtractorLayerConfig::Fc { out } => LayerKind::Fc {
                    out_features: out,
                    in_features: shape.iter().product(),
                },
                ExtractorLayerConfig::Conv {
                    out_channels,
                    kernel,
                } => {
                    if shape.len() != 3 {
                        return Err(Error::Config(format!(
                            "conv extractor layer needs a [C, H, W] input, got {shape:?}"
                        )));
                    }
                    LayerKind::Conv {
                        out_channels,
                        in_channels: shape[0],
                        kernel_h: kernel[0],
                        kernel_w: kernel[1],
                    }
                }
                ExtractorLayerConfig::Relu => LayerKind::Relu,
            };
            shape = kind.output_shape(&shape)?;
            extractor.push(kind);
        }

        let bottom = match self.model.conv_channels {
            Some(channels) => {
                if shape.len() != 3 {
                    return Err(Error::Config(format!(
                        "conv first stack needs a [C, H, W] bottom input, got {shape:?}"
                    )));
                }
                BottomStackSpec::conv_first(
                    shape[0],
                    shape[1],
                    shape[2],
                    channels,
                    &self.model.hidden,
                    self.class_count,
                )?
            }
            None => BottomStackSpec::mlp(
                shape.iter().product(),
                &self.model.hidden,
                self.class_count,
            )?,
        };
        Ok((extractor, bottom, shape))
    }
}
