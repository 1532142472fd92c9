//! Run configuration: defaults < TOML file < command-line flags, echoed
//! into checkpoints and training logs for reproducibility.

use std::path::Path;

use keyreid_core::backbone::BackboneConfig;
use keyreid_core::local_branch::TcssConfig;
use keyreid_core::model::{Ablation, ModelConfig};
use keyreid_core::objectives::LossWeights;
use keyreid_core::pose::{PartGrouping, PoseConfig};
use keyreid_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(PipelineError::Usage(format!(
                "precision must be f32 or f64, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training runs in f64 by default; f32 trades verification headroom
    /// for speed.
    pub precision: Precision,
    pub backbone: BackboneConfig,
    pub tcss: TcssConfig,
    pub pose: PoseConfig,
    pub grouping: PartGrouping,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub ablation: Ablation,
    /// Mid channels of the temporal-attention scorer.
    pub attn_channels: usize,
    /// Identity count; 0 means "derive from the dataset at train time".
    pub classes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            precision: Precision::F64,
            backbone: BackboneConfig::desk(2),
            tcss: TcssConfig::default(),
            pose: PoseConfig::for_height(64),
            grouping: PartGrouping::coco17_six_parts(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            ablation: Ablation::default(),
            attn_channels: 4,
            classes: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Fill dataset-derived fields (classes, camera count) and validate.
    pub fn resolved_for(&self, classes: usize, cameras: usize) -> Result<RunConfig> {
        let mut out = self.clone();
        if out.classes == 0 {
            out.classes = classes;
        }
        out.backbone.num_cameras = out.backbone.num_cameras.max(cameras);
        out.model_config()?.validate()?;
        out.train.validate()?;
        out.loss.validate()?;
        out.ablation.validate()?;
        Ok(out)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        if self.classes == 0 {
            return Err(PipelineError::Config(
                "classes not set; resolve the config against a dataset first".into(),
            ));
        }
        Ok(ModelConfig {
            backbone: self.backbone.clone(),
            tcss: self.tcss,
            grouping: self.grouping.clone(),
            pose: self.pose,
            classes: self.classes,
            attn_channels: self.attn_channels,
        })
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.backbone.image_h, self.backbone.image_w)
    }
}
