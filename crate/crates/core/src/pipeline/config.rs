use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::editor::{EditTarget, LayerRange};
use crate::error::{Result, VceError};
use crate::perturbation::{DiffusionSampler, NoiseSchedule};
use crate::shift::ScheduleParams;
use crate::toy_lvlm::FixtureConfig;

/// File name of the effective configuration echoed into the output directory.
pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

const TRAIN_SCENE_SALT: u64 = 0x7A11_5CE0_0000_0001;
const EVAL_SCENE_SALT: u64 = 0x7A11_5CE0_0000_0002;
const CONTROL_SALT: u64 = 0x7A11_C017_0000_0003;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampler: DiffusionSampler,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
            sampler: DiffusionSampler::ClosedForm,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Stage output locations; relative paths resolve against `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePaths {
    pub model: PathBuf,
    pub scenes: PathBuf,
    pub eval_scenes: PathBuf,
    pub pairs: PathBuf,
    pub traces: PathBuf,
    pub shifts: PathBuf,
    pub spaces: PathBuf,
    pub edited: PathBuf,
    pub report: PathBuf,
}

impl Default for StagePaths {
    fn default() -> Self {
        Self {
            model: "model".into(),
            scenes: "scenes".into(),
            eval_scenes: "eval_scenes".into(),
            pairs: "pairs".into(),
            traces: "traces".into(),
            shifts: "shifts".into(),
            spaces: "spaces".into(),
            edited: "edited".into(),
            report: "report".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; `None` lets rayon decide.
    pub threads: Option<usize>,
    /// Contrastive pair count M.
    pub pairs: usize,
    pub eval_captions: usize,
    /// Probability that a generated scene shows the trigger object.
    pub trigger_rate: f64,
    pub max_new: usize,
    /// Defaults to the fixture prompt.
    pub prompt: Option<Vec<u32>>,
    pub fixture: FixtureConfig,
    /// Use this checkpoint instead of building the fixture model.
    pub checkpoint: Option<PathBuf>,
    pub diffusion: DiffusionConfig,
    pub schedule: ScheduleParams,
    /// 1-based inclusive range `a..b`; defaults to the deepest half.
    pub layers: Option<String>,
    pub rank: usize,
    pub targets: Vec<EditTarget>,
    pub control_tokens: usize,
    pub paths: StagePaths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "vce-out".into(),
            threads: None,
            pairs: 64,
            eval_captions: 32,
            trigger_rate: 0.5,
            max_new: 16,
            prompt: None,
            fixture: FixtureConfig::default(),
            checkpoint: None,
            diffusion: DiffusionConfig::default(),
            schedule: ScheduleParams::default(),
            layers: None,
            rank: 4,
            targets: vec![EditTarget::Mlp],
            control_tokens: 10,
            paths: StagePaths::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| VceError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| VceError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.fixture.validate()?;
        self.diffusion.schedule()?;
        self.schedule.validate()?;
        if self.pairs == 0 || self.eval_captions == 0 {
            return Err(VceError::Config(
                "pair and caption counts must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.trigger_rate) {
            return Err(VceError::Config("trigger_rate must lie in [0, 1]".into()));
        }
        if self.max_new == 0 {
            return Err(VceError::Config("max_new must be positive".into()));
        }
        if self.rank == 0 {
            return Err(VceError::Config("rank must be at least 1".into()));
        }
        if self.targets.is_empty() {
            return Err(VceError::Config("at least one edit target is required".into()));
        }
        if let Some(l) = &self.layers {
            LayerRange::parse_one_based(l)?;
        }
        let v = self.fixture.model.vocab_size as u32;
        if let Some(p) = &self.prompt {
            if p.is_empty() || p.iter().any(|&t| t >= v) {
                return Err(VceError::Config(format!(
                    "prompt must be non-empty with tokens below {v}"
                )));
            }
        }
        if self.control_tokens == 0 || self.control_tokens + 1 > v as usize {
            return Err(VceError::Config(format!(
                "control token count must lie in 1..{v}"
            )));
        }
        Ok(())
    }

    pub fn prompt(&self) -> Vec<u32> {
        self.prompt.clone().unwrap_or_else(|| self.fixture.prompt())
    }

    /// 0-based layer range for a model of depth `n_layers`.
    pub fn layer_range(&self, n_layers: usize) -> Result<LayerRange> {
        let range = match &self.layers {
            Some(s) => LayerRange::parse_one_based(s)?,
            None => LayerRange::deepest_half(n_layers),
        };
        range.check_depth(n_layers)?;
        Ok(range)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    pub fn model_dir(&self) -> PathBuf {
        match &self.checkpoint {
            Some(c) => c.clone(),
            None => self.resolve(&self.paths.model),
        }
    }

    pub fn train_scene_seed(&self) -> u64 {
        self.seed ^ TRAIN_SCENE_SALT
    }

    pub fn eval_scene_seed(&self) -> u64 {
        self.seed ^ EVAL_SCENE_SALT
    }

    pub fn control_seed(&self) -> u64 {
        self.seed ^ CONTROL_SALT
    }
}
