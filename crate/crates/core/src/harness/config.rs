//! Run configuration: JSON file plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::auxgen::FtcConfig;
use crate::corpus::{SplitConfig, DEFAULT_TEMPLATE};
use crate::error::{Error, Result};
use crate::llm::LlmMode;
use crate::model::{EvalMode, ModelConfig};
use crate::objective::LossConfig;
use crate::optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointSplit {
    Base,
    Novel,
    All,
}

impl std::str::FromStr for KeypointSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "novel" => Ok(Self::Novel),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (base, novel, all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest path; `None` renders the synthetic benchmark in memory.
    pub manifest: Option<PathBuf>,
    /// Image root; defaults to the manifest's directory.
    pub image_root: Option<PathBuf>,
    pub synthetic_per_species: usize,
    pub synthetic_seed: u64,
    pub split: SplitConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            image_root: None,
            synthetic_per_species: 30,
            synthetic_seed: 7,
            split: SplitConfig {
                test_species: ["fox", "wolf"].iter().map(|s| s.to_string()).collect(),
                keypoint_split: "toy".into(),
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub k: usize,
    pub n_max: usize,
    pub seed: u64,
    /// Visual prompts for the main keypoints.
    pub use_kp: bool,
    /// Visual prompts for auxiliary keypoints.
    pub use_aux_kp: bool,
    /// Text prompts for the main keypoints.
    pub use_text: bool,
    /// Text prompts for auxiliary keypoints.
    pub use_aux_text: bool,
    /// Steps scored with original (unadapted) features before switching.
    pub bootstrap_steps: u64,
    /// Episode pairs averaged into each update.
    pub pairs_per_step: usize,
    /// Upper bound on auxiliary keypoints per episode.
    pub aux_per_episode: usize,
    /// Reuse the first sampled episode pair for every step.
    pub fixed_episode: bool,
    /// Drop the contrastive terms from the graph entirely.
    pub heatmap_only: bool,
    /// Abort when the loss exceeds this value.
    pub divergence_threshold: f64,
    pub template: String,
    /// Keypoint-name pairs whose interior points become auxiliary keypoints.
    pub interpolation_paths: Vec<[String; 2]>,
    /// Relative position of the auxiliary point along each path.
    pub interpolation_z: f64,
    /// Object phrase used in interpolation questions.
    pub path_category: String,
    pub log_path: Option<PathBuf>,
    pub audit_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let (paths, z) = crate::synth::interpolation_paths();
        Self {
            steps: 2000,
            k: 1,
            n_max: 8,
            seed: 0,
            use_kp: true,
            use_aux_kp: true,
            use_text: true,
            use_aux_text: true,
            bootstrap_steps: 500,
            pairs_per_step: 1,
            aux_per_episode: 7,
            fixed_episode: false,
            heatmap_only: false,
            divergence_threshold: 1e6,
            template: DEFAULT_TEMPLATE.to_string(),
            interpolation_paths: paths.into_iter().map(|(a, b)| [a, b]).collect(),
            interpolation_z: z,
            path_category: "an animal".into(),
            log_path: None,
            audit_path: None,
            checkpoint_dir: None,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub k: usize,
    pub n_max: usize,
    pub mode: EvalMode,
    pub split: KeypointSplit,
    pub rho: f64,
    pub seed: u64,
    pub template: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            k: 1,
            n_max: 8,
            mode: EvalMode::ZeroShot,
            split: KeypointSplit::Novel,
            rho: 0.1,
            seed: 1234,
            template: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    pub mode: LlmMode,
    pub cache_path: Option<PathBuf>,
    /// Reply table for mock mode; `None` uses the bundled benchmark table.
    pub mock_table: Option<PathBuf>,
    pub max_retries: u32,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            mode: LlmMode::Mock,
            cache_path: None,
            mock_table: None,
            max_retries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: AdamConfig,
    pub ftc: FtcConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub llm: LlmConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        Self::from_value(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn from_value(v: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.ftc.validate()?;
        if !(self.eval.rho > 0.0) {
            return Err(Error::Config(format!(
                "eval.rho must be positive, got {}",
                self.eval.rho
            )));
        }
        let t = &self.train;
        if !(t.use_kp || t.use_aux_kp || t.use_text || t.use_aux_text) {
            return Err(Error::Config("train enables no prompt type".into()));
        }
        if t.pairs_per_step == 0 {
            return Err(Error::Config(
                "train.pairs_per_step must be at least 1".into(),
            ));
        }
        if t.n_max == 0 || self.eval.n_max == 0 {
            return Err(Error::Config("n_max must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies `a.b.c=value` overrides. Values parse as JSON, falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(&self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut v, key, raw)?;
        }
        Self::from_value(v)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key {key:?}"));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(unknown)?;
        if !obj.contains_key(*part) {
            return Err(unknown());
        }
        let slot = obj.get_mut(*part).expect("checked");
        if i + 1 == parts.len() {
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            *slot = parsed;
            return Ok(());
        }
        // optional sections serialize as null; allow descending into them
        if slot.is_null() {
            *slot = Value::Object(Default::default());
        }
        cur = slot;
    }
    Err(unknown())
}
