//! The detector assembled end to end: encoders, adapters, prototypes,
//! correlation, decoding and upsampling, recorded on a tape.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::RwLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Episode};
use crate::detector::{heatmap_to_coords, Decoder, Heatmap, Upsampler};
use crate::encoder::{
    ImageEncoder, PrecomputedEncoder, TextAdapter, TextEncoder, TextFeature, ToyImageEncoder,
    ToyTextEncoder, VisualAdapter,
};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::prototype::vkr_weights;
use crate::raster::ImageBank;
use crate::tape::{Tape, Var};
use crate::tensor::{Grid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Toy,
    Precomputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsamplerKind {
    Learned,
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    /// Feature bundle for the precomputed encoder.
    pub precomputed_path: Option<PathBuf>,
    pub input_size: usize,
    pub patch: usize,
    pub d_raw: usize,
    pub d: usize,
    pub visual_bottleneck: usize,
    pub text_hidden: usize,
    pub decoder_hidden: usize,
    pub text_max_len: usize,
    pub vkr_sigma: f64,
    pub sigma_gt: f64,
    pub upsampler: UpsamplerKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Toy,
            precomputed_path: None,
            input_size: 48,
            patch: 3,
            d_raw: 32,
            d: 32,
            visual_bottleneck: 16,
            text_hidden: 64,
            decoder_hidden: 16,
            text_max_len: 24,
            vkr_sigma: crate::prototype::DEFAULT_VKR_SIGMA,
            sigma_gt: crate::detector::DEFAULT_SIGMA_GT,
            upsampler: UpsamplerKind::Learned,
            seed: 0,
        }
    }
}

/// One prompt slot of a task: a keypoint (or auxiliary point) with its
/// support locations, its texts and, for training, the query target.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    /// Point per support image; `None` where hidden.
    pub support_points: Vec<Option<[f64; 2]>>,
    pub texts: Vec<String>,
    pub target: Option<[f64; 2]>,
}

impl Entry {
    fn has_visual(&self) -> bool {
        self.support_points.iter().any(Option::is_some)
    }
}

/// Images are referenced by handle into an [`ImageBank`].
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub supports: Vec<String>,
    pub query: String,
    pub entries: Vec<Entry>,
    pub use_visual: bool,
    pub use_text: bool,
}

impl Task {
    /// Main keypoints of an episode, one entry per id.
    pub fn from_episode(ep: &Episode, use_visual: bool, use_text: bool) -> Self {
        let entries = ep
            .keypoint_ids
            .iter()
            .zip(&ep.texts)
            .map(|(&id, text)| Entry {
                support_points: ep
                    .supports
                    .iter()
                    .map(|s| s.keypoints[id].visible.then(|| s.keypoints[id].point()))
                    .collect(),
                texts: vec![text.clone()],
                target: ep.query.keypoints[id]
                    .visible
                    .then(|| ep.query.keypoints[id].point()),
            })
            .collect();
        Self {
            supports: ep.supports.iter().map(|s| s.image_ref.clone()).collect(),
            query: ep.query.image_ref.clone(),
            entries,
            use_visual,
            use_text,
        }
    }
}

/// Heatmaps of one branch, stacked `[n * side^2, 1]`, with the entry index of each block.
#[derive(Debug, Clone)]
pub struct Branch {
    pub heatmaps: Var,
    pub entries: Vec<usize>,
    /// Prototypes `[n, d]` in the order of `entries`.
    pub prototypes: Var,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub visual: Option<Branch>,
    pub textual: Option<Branch>,
    pub side: usize,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    image_enc: Box<dyn ImageEncoder>,
    text_enc: Box<dyn TextEncoder>,
    visual_adapter: VisualAdapter,
    text_adapter: TextAdapter,
    decoder: Decoder,
    upsampler: Upsampler,
    frozen_cache: RwLock<HashMap<String, Tensor>>,
    text_cache: RwLock<HashMap<String, TextFeature>>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let (image_enc, text_enc): (Box<dyn ImageEncoder>, Box<dyn TextEncoder>) = match cfg.encoder
        {
            EncoderKind::Toy => (
                Box::new(ToyImageEncoder::new(
                    &mut store,
                    cfg.seed,
                    cfg.input_size,
                    cfg.patch,
                    cfg.d_raw,
                    cfg.d,
                )?),
                Box::new(ToyTextEncoder::new(
                    &mut store,
                    cfg.seed,
                    cfg.d,
                    cfg.text_max_len,
                )),
            ),
            EncoderKind::Precomputed => {
                let path = cfg.precomputed_path.as_ref().ok_or_else(|| {
                    Error::Config("model.precomputed_path is required for this encoder".into())
                })?;
                let enc = PrecomputedEncoder::load(&mut store, path)?;
                (Box::new(enc.clone()), Box::new(enc))
            }
        };
        if text_enc.width() != cfg.d {
            return Err(Error::Config(format!(
                "text width {} differs from model.d {}",
                text_enc.width(),
                cfg.d
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let visual_adapter = VisualAdapter::new(&mut store, &mut rng, cfg.d, cfg.visual_bottleneck);
        let text_adapter = TextAdapter::new(&mut store, &mut rng, cfg.d, cfg.text_hidden);
        let decoder = Decoder::new(&mut store, &mut rng, cfg.d, cfg.decoder_hidden);
        let upsampler = match cfg.upsampler {
            UpsamplerKind::Learned => Upsampler::learned(&mut store),
            UpsamplerKind::Bilinear => Upsampler::Bilinear,
        };
        Ok(Self {
            cfg,
            store,
            image_enc,
            text_enc,
            visual_adapter,
            text_adapter,
            decoder,
            upsampler,
            frozen_cache: RwLock::new(HashMap::new()),
            text_cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn grid_size(&self) -> usize {
        self.image_enc.grid_size()
    }

    pub fn stride(&self) -> f64 {
        self.image_enc.stride()
    }

    /// Side of the upsampled heatmaps.
    pub fn heatmap_side(&self) -> usize {
        2 * self.grid_size()
    }

    /// Pixels per heatmap cell.
    pub fn heatmap_cell(&self) -> f64 {
        self.stride() / 2.0
    }

    fn frozen(&self, key: &str, bank: &ImageBank) -> Result<Tensor> {
        if let Some(t) = self.frozen_cache.read().expect("cache lock").get(key) {
            return Ok(t.clone());
        }
        let t = self
            .image_enc
            .frozen_tokens(&self.store, key, bank.image(key)?)?;
        self.frozen_cache
            .write()
            .expect("cache lock")
            .insert(key.to_string(), t.clone());
        Ok(t)
    }

    pub fn text_feature(&self, text: &str) -> Result<TextFeature> {
        if let Some(t) = self.text_cache.read().expect("cache lock").get(text) {
            return Ok(t.clone());
        }
        let t = self.text_enc.encode_text(&self.store, text)?;
        self.text_cache
            .write()
            .expect("cache lock")
            .insert(text.to_string(), t.clone());
        Ok(t)
    }

    /// Projected and adapted features of several images stacked by rows.
    pub fn image_features(
        &self,
        tape: &mut Tape,
        keys: &[String],
        bank: &ImageBank,
    ) -> Result<(Var, Var)> {
        let mut rows = Vec::new();
        let mut d_raw = 0;
        for k in keys {
            let t = self.frozen(k, bank)?;
            d_raw = t.cols();
            rows.extend_from_slice(t.data());
        }
        let frozen = tape.constant(Tensor::new(vec![rows.len() / d_raw.max(1), d_raw], rows)?);
        let x = self.image_enc.stages(tape, &self.store, frozen)?;
        let w = self.image_enc.projection(&self.store);
        let wv = tape.constant(w.w_v);
        let wo = tape.constant(w.w_o);
        let h = tape.matmul(x, wv)?;
        let proj = tape.matmul(h, wo)?;
        let adapted =
            self.visual_adapter
                .forward(tape, &self.store, proj, Grid::square(self.grid_size()))?;
        Ok((proj, adapted))
    }

    /// Adapted and pooled text feature, recorded on the tape.
    pub fn text_prototype_row(&self, tape: &mut Tape, text: &str) -> Result<Var> {
        let f = self.text_feature(text)?;
        let x = tape.constant(f.tokens);
        let y = self.text_adapter.forward(tape, &self.store, x)?;
        tape.select_row(y, f.eot_index)
    }

    /// Pooled text feature without (`adapted = false`) or with the adapter.
    pub fn pooled_text(&self, text: &str, adapted: bool) -> Result<Vec<f64>> {
        let f = self.text_feature(text)?;
        if !adapted {
            return Ok(f.tokens.row(f.eot_index).to_vec());
        }
        let mut tape = Tape::new();
        let v = self.text_prototype_row(&mut tape, text)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Gaussian pooling matrix `[n, K * cells]` averaging each entry over its visible supports.
    fn pooling_matrix(&self, points: &[&[Option<[f64; 2]>]], k: usize) -> Result<Tensor> {
        let l = self.grid_size();
        let cells = l * l;
        let mut data = vec![0.0; points.len() * k * cells];
        for (n, pts) in points.iter().enumerate() {
            let visible = pts.iter().filter(|p| p.is_some()).count();
            if visible == 0 {
                return Err(Error::Argument(
                    "visual prototype without a visible support point".into(),
                ));
            }
            for (s, p) in pts.iter().enumerate() {
                if let Some(p) = p {
                    let w = vkr_weights(l, self.stride(), *p, self.cfg.vkr_sigma)?;
                    let row = &mut data[n * k * cells + s * cells..n * k * cells + (s + 1) * cells];
                    for (r, wv) in row.iter_mut().zip(w) {
                        *r = wv / visible as f64;
                    }
                }
            }
        }
        Tensor::new(vec![points.len(), k * cells], data)
    }

    /// Visual prototypes `[n, d]` pooled from stacked support features.
    pub fn visual_prototypes(
        &self,
        tape: &mut Tape,
        support_features: Var,
        points: &[&[Option<[f64; 2]>]],
        k: usize,
    ) -> Result<Var> {
        let w = tape.constant(self.pooling_matrix(points, k)?);
        tape.matmul(w, support_features)
    }

    fn heatmaps(&self, tape: &mut Tape, query: Var, protos: Var) -> Result<Var> {
        let g = Grid::square(self.grid_size());
        let a = tape.correlate(query, protos)?;
        let h = self.decoder.forward(tape, &self.store, a, g)?;
        self.upsampler.forward(tape, &self.store, h, g)
    }

    pub fn forward(&self, tape: &mut Tape, task: &Task, bank: &ImageBank) -> Result<Forward> {
        if !task.use_visual && !task.use_text {
            return Err(Error::Argument("task uses neither prompt modality".into()));
        }
        let (_, xq) = self.image_features(tape, std::slice::from_ref(&task.query), bank)?;
        let mut out = Forward {
            visual: None,
            textual: None,
            side: self.heatmap_side(),
        };
        if task.use_visual && !task.supports.is_empty() {
            let idx: Vec<usize> = (0..task.entries.len())
                .filter(|&i| task.entries[i].has_visual())
                .collect();
            if !idx.is_empty() {
                let (_, xs) = self.image_features(tape, &task.supports, bank)?;
                let pts: Vec<&[Option<[f64; 2]>]> = idx
                    .iter()
                    .map(|&i| task.entries[i].support_points.as_slice())
                    .collect();
                let protos = self.visual_prototypes(tape, xs, &pts, task.supports.len())?;
                let heatmaps = self.heatmaps(tape, xq, protos)?;
                out.visual = Some(Branch {
                    heatmaps,
                    entries: idx,
                    prototypes: protos,
                });
            }
        }
        if task.use_text {
            let idx: Vec<usize> = (0..task.entries.len())
                .filter(|&i| !task.entries[i].texts.is_empty())
                .collect();
            if !idx.is_empty() {
                let mut rows = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let per_text = task.entries[i]
                        .texts
                        .iter()
                        .map(|t| self.text_prototype_row(tape, t))
                        .collect::<Result<Vec<_>>>()?;
                    rows.push(tape.average(&per_text)?);
                }
                let protos = tape.stack_rows(&rows)?;
                let heatmaps = self.heatmaps(tape, xq, protos)?;
                out.textual = Some(Branch {
                    heatmaps,
                    entries: idx,
                    prototypes: protos,
                });
            }
        }
        if out.visual.is_none() && out.textual.is_none() {
            return Err(Error::Argument("task has no usable prompt".into()));
        }
        Ok(out)
    }

    /// Per-entry heatmaps (fused when both branches cover an entry).
    pub fn predict_heatmaps(&self, task: &Task, bank: &ImageBank) -> Result<Vec<Heatmap>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, task, bank)?;
        let side = f.side;
        let s2 = side * side;
        let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; task.entries.len()];
        for b in [&f.visual, &f.textual].into_iter().flatten() {
            let v = tape.value(b.heatmaps).data();
            for (j, &e) in b.entries.iter().enumerate() {
                let block = &v[j * s2..(j + 1) * s2];
                match &mut sums[e] {
                    Some((acc, n)) => {
                        acc.iter_mut().zip(block).for_each(|(a, x)| *a += x);
                        *n += 1;
                    }
                    slot @ None => *slot = Some((block.to_vec(), 1)),
                }
            }
        }
        sums.into_iter()
            .enumerate()
            .map(|(i, s)| {
                let (acc, n) =
                    s.ok_or_else(|| Error::Argument(format!("entry {i} has no prompt")))?;
                Heatmap::new(acc.into_iter().map(|x| x / n as f64).collect(), side, 2)
            })
            .collect()
    }

    pub fn predict(&self, task: &Task, bank: &ImageBank) -> Result<Vec<[f64; 2]>> {
        Ok(self
            .predict_heatmaps(task, bank)?
            .iter()
            .map(|h| heatmap_to_coords(h, self.stride()))
            .collect())
    }
}

/// Prompt modalities used at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    ZeroShot,
    KShot,
    KShotWithText,
}

impl EvalMode {
    pub fn uses_visual(self) -> bool {
        !matches!(self, EvalMode::ZeroShot)
    }

    pub fn uses_text(self) -> bool {
        !matches!(self, EvalMode::KShot)
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_shot" => Ok(Self::ZeroShot),
            "k_shot" => Ok(Self::KShot),
            "k_shot_with_text" => Ok(Self::KShotWithText),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (zero_shot, k_shot, k_shot_with_text)"
            ))),
        }
    }
}

/// Anything that localizes an episode's keypoints in its query image.
pub trait KeypointPredictor: Sync {
    /// One pixel location per `ep.keypoint_ids` entry.
    fn predict_episode(
        &self,
        ep: &Episode,
        ds: &Dataset,
        bank: &ImageBank,
        mode: EvalMode,
    ) -> Result<Vec<[f64; 2]>>;
}

impl KeypointPredictor for Model {
    fn predict_episode(
        &self,
        ep: &Episode,
        _ds: &Dataset,
        bank: &ImageBank,
        mode: EvalMode,
    ) -> Result<Vec<[f64; 2]>> {
        let task = Task::from_episode(ep, mode.uses_visual(), mode.uses_text());
        self.predict(&task, bank)
    }
}
