use std::path::{Path, PathBuf};

use coherentflow::diffusion::DiffusionConfig;
use coherentflow::mining::MiningConfig;
use coherentflow::recognition::ClassifierConfig;
use coherentflow::segmentation::SegmentationConfig;
use coherentflow::semantic::SimilarityConfig;
use coherentflow::synth::SceneSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; `COHERENTFLOW_THREADS` wins when set.
    pub threads: Option<usize>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub scene: Option<SceneSpec>,
    pub clips: Option<ClipSetConfig>,
    pub diffusion: DiffusionConfig,
    pub segmentation: SegmentationConfig,
    pub similarity: SimilarityConfig,
    pub mining: MiningConfig,
    pub classifier: ClassifierConfig,
    pub detect: DetectConfig,
    pub recognize: RecognizeConfig,
    pub render: RenderConfig,
}

/// Labelled activity clips for `recognize`, written by `synth`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipSetConfig {
    pub train: usize,
    pub test: usize,
    pub num_frames: usize,
    pub noise_sigma: f64,
}

impl Default for ClipSetConfig {
    fn default() -> Self {
        ClipSetConfig {
            train: 100,
            test: 100,
            num_frames: 6,
            noise_sigma: 0.3,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// Start frames of the TEFs; overrides `tef_stride`.
    pub tef_starts: Option<Vec<usize>>,
    /// Frames between consecutive TEF starts; defaults to `T_max`.
    pub tef_stride: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizeConfig {
    /// Semantic region map (16-bit PGM) the features are pooled over.
    pub regions: Option<PathBuf>,
    /// Existing model to apply instead of training a new one.
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Output pixels per grid pixel.
    pub scale: usize,
    /// Grid pixels between quiver arrows.
    pub quiver_step: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            scale: 4,
            quiver_step: 4,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("bad config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.input,
            &mut cfg.output,
            &mut cfg.recognize.regions,
            &mut cfg.recognize.model,
        ]
        .into_iter()
        .flatten()
        {
            if p.as_os_str().is_empty() {
                return Err(CliError::Validation(
                    "config paths must not be empty".into(),
                ));
            }
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.diffusion.validate()?;
        self.segmentation.validate()?;
        self.similarity.validate()?;
        self.mining.validate()?;
        self.classifier.validate()?;
        if let Some(s) = &self.scene {
            s.validate()?;
        }
        if self.threads == Some(0) {
            return Err(CliError::Validation("threads must be at least 1".into()));
        }
        if self.detect.tef_stride == Some(0) {
            return Err(CliError::Validation("tef_stride must be at least 1".into()));
        }
        if self.render.scale == 0 || self.render.quiver_step == 0 {
            return Err(CliError::Validation(
                "render scale and quiver_step must be positive".into(),
            ));
        }
        if let Some(c) = &self.clips {
            if c.num_frames < self.diffusion.t_max || c.train == 0 || c.test == 0 {
                return Err(CliError::Validation(
                    "clips need train/test counts and at least T_max frames".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-stage seed: the global seed offset by a stable hash of the stage
/// name (FNV-1a), so stages reproduce independently.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed.wrapping_add(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_differ_and_are_stable() {
        assert_ne!(stage_seed(1, "detect"), stage_seed(1, "regions"));
        assert_eq!(stage_seed(1, "detect"), stage_seed(1, "detect"));
        assert_eq!(stage_seed(0, ""), 0xcbf2_9ce4_8422_2325);
    }

    #[test]
    fn empty_object_is_default() {
        let cfg: PipelineConfig = serde_json::from_str("{}").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.render.scale, 4);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
