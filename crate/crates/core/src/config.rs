//! Run configuration: one nested TOML file covering the model, the grid,
//! the dataset, training, and guidance. Unknown keys are rejected, and the
//! effective configuration is echoed into every run's output directory so
//! any artifact can be reproduced from the directory alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::model::{ModelConfig, StreamConfig, Variant, WindowMode};
use crate::synthdata::DatasetSpec;
use crate::tarp::GridMeta;
use crate::trainer::{TaskProbs, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: String,
    pub model: ModelSection,
    pub grid: GridSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub guidance: GuidanceSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub audio: StreamSection,
    pub video: StreamSection,
    pub text_dim: usize,
    pub n_classes: usize,
    pub signal_channels: usize,
    pub cross_heads: usize,
    pub variant: String,
    pub window_mode: String,
    pub rope_base: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSection {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub n_lct: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub t_a: usize,
    pub t_v: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub event_rate: f64,
    pub noise_std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr_cca: f64,
    pub lr_base: f64,
    pub ema_decay: f64,
    pub text_null_prob: f64,
    pub seed: u64,
    pub ckpt_every: usize,
    pub task_probs: TaskProbsSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskProbsSection {
    pub t2v: f64,
    pub t2a: f64,
    pub a2v: f64,
    pub v2a: f64,
    pub joint: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub mode: String,
    pub s_text: f64,
    pub s_m: f64,
    pub steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: "runs/default".to_string(),
            model: ModelSection::default(),
            grid: GridSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            guidance: GuidanceSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let toy = ModelConfig::toy_default();
        ModelSection {
            audio: StreamSection::from(&toy.audio),
            video: StreamSection::from(&toy.video),
            text_dim: toy.text_dim,
            n_classes: toy.n_classes,
            signal_channels: toy.signal_channels,
            cross_heads: toy.cross_heads,
            variant: "ccl".to_string(),
            window_mode: "tarp".to_string(),
            rope_base: toy.rope_base,
        }
    }
}

impl Default for StreamSection {
    fn default() -> Self {
        StreamSection { depth: 4, dim: 64, heads: 4, ffn_mult: 4, n_lct: 8 }
    }
}

impl From<&StreamConfig> for StreamSection {
    fn from(s: &StreamConfig) -> Self {
        StreamSection { depth: s.depth, dim: s.dim, heads: s.heads, ffn_mult: s.ffn_mult, n_lct: s.n_lct }
    }
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { t_a: 32, t_v: 8, h: 4, w: 4 }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { event_rate: 0.4, noise_std: 0.1 }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let toy = TrainConfig::toy_default(0);
        TrainSection {
            steps: toy.steps,
            batch: toy.batch,
            lr_cca: toy.lr_cca,
            lr_base: toy.lr_base,
            ema_decay: toy.ema_decay,
            text_null_prob: toy.text_null_prob,
            seed: 0,
            ckpt_every: 500,
            task_probs: TaskProbsSection::default(),
        }
    }
}

impl Default for TaskProbsSection {
    fn default() -> Self {
        let p = TaskProbs::default();
        TaskProbsSection { t2v: p.t2v, t2a: p.t2a, a2v: p.a2v, v2a: p.v2a, joint: p.joint }
    }
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        GuidanceSection { mode: "ucg2".to_string(), s_text: g.s_text, s_m: g.s_m, steps: g.steps }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(None)?.validate()?;
        self.dataset_spec(0)?.validate()?;
        self.train_config(None, None)?.validate()?;
        self.guidance_config()?.validate()?;
        Ok(())
    }

    pub fn grid_meta(&self) -> GridMeta {
        GridMeta { t_a: self.grid.t_a, t_v: self.grid.t_v, h: self.grid.h, w: self.grid.w }
    }

    /// Model configuration, optionally overriding the variant. The gated
    /// variant uses full-span windows and carries no context banks.
    pub fn model_config(&self, variant_override: Option<Variant>) -> Result<ModelConfig> {
        let variant = match variant_override {
            Some(v) => v,
            None => Variant::parse(&self.model.variant)?,
        };
        let window_mode = match self.model.window_mode.as_str() {
            "tarp" => WindowMode::Tarp,
            "full" => WindowMode::Full,
            other => return Err(Error::Config(format!("unknown window_mode {other:?}"))),
        };
        let cfg = ModelConfig {
            audio: StreamConfig {
                depth: self.model.audio.depth,
                dim: self.model.audio.dim,
                heads: self.model.audio.heads,
                ffn_mult: self.model.audio.ffn_mult,
                n_lct: self.model.audio.n_lct,
            },
            video: StreamConfig {
                depth: self.model.video.depth,
                dim: self.model.video.dim,
                heads: self.model.video.heads,
                ffn_mult: self.model.video.ffn_mult,
                n_lct: self.model.video.n_lct,
            },
            grid: self.grid_meta(),
            text_dim: self.model.text_dim,
            n_classes: self.model.n_classes,
            signal_channels: self.model.signal_channels,
            cross_heads: self.model.cross_heads,
            variant,
            window_mode,
            rope_base: self.model.rope_base,
        };
        Ok(if variant == Variant::Gated { cfg.with_variant(Variant::Gated) } else { cfg })
    }

    pub fn dataset_spec(&self, seed: u64) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            grid: self.grid_meta(),
            n_classes: self.model.n_classes,
            event_rate: self.data.event_rate,
            noise_std: self.data.noise_std,
            signal_channels: self.model.signal_channels,
            seed,
        })
    }

    pub fn train_config(
        &self,
        seed_override: Option<u64>,
        steps_override: Option<usize>,
    ) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            task_probs: TaskProbs {
                t2v: t.task_probs.t2v,
                t2a: t.task_probs.t2a,
                a2v: t.task_probs.a2v,
                v2a: t.task_probs.v2a,
                joint: t.task_probs.joint,
            },
            lr_cca: t.lr_cca,
            lr_base: t.lr_base,
            steps: steps_override.unwrap_or(t.steps),
            batch: t.batch,
            ema_decay: t.ema_decay,
            text_null_prob: t.text_null_prob,
            seed: seed_override.unwrap_or(t.seed),
        })
    }

    pub fn guidance_config(&self) -> Result<GuidanceConfig> {
        Ok(GuidanceConfig {
            mode: GuidanceMode::parse(&self.guidance.mode)?,
            s_text: self.guidance.s_text,
            s_m: self.guidance.s_m,
            steps: self.guidance.steps,
            s_text_audio: None,
            s_m_audio: None,
        })
    }
}
