//! Episodic training with auxiliary keypoints and contrastive prompt alignment.

use std::fs::File;
use std::io::{BufWriter, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use crate::auxgen::{
    make_auxiliary_pair, AuditLog, AuxFeatures, AuxRequest, AuxiliaryPair, FeatureSource,
    InterpolationPath, PoolCache,
};
use crate::corpus::{keypoint_text, Dataset, Episode, EpisodePair, EpisodeSampler};
use crate::detector::{gt_heatmap, GaussianSpec};
use crate::error::{Error, Result};
use crate::llm::Gateway;
use crate::model::{Branch, Entry, Forward, Model, Task};
use crate::objective::{contrastive_var, contrastive_vt_var, VtPairing};
use crate::optim::Adam;
use crate::prototype::vkr_weights;
use crate::raster::ImageBank;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub l_kp: f64,
    pub l_tt: Option<f64>,
    pub l_vt: Option<f64>,
    pub l_vv: Option<f64>,
    pub feature_source: FeatureSource,
    pub species: (String, String),
    pub aux_pairs: usize,
    pub aux_texts: usize,
}

pub struct TrainOutcome {
    pub model: Model,
    pub steps: u64,
    pub history: Vec<StepRecord>,
}

/// Eager support features of one episode, used to score candidate texts.
struct EpisodeFeatures<'m> {
    model: &'m Model,
    original: Tensor,
    adapted: Tensor,
    species: String,
    template: String,
}

impl<'m> EpisodeFeatures<'m> {
    fn new(model: &'m Model, ep: &Episode, bank: &ImageBank, template: &str) -> Result<Self> {
        let keys: Vec<String> = ep.supports.iter().map(|s| s.image_ref.clone()).collect();
        let mut tape = Tape::new();
        let (proj, adapted) = model.image_features(&mut tape, &keys, bank)?;
        Ok(Self {
            model,
            original: tape.value(proj).clone(),
            adapted: tape.value(adapted).clone(),
            species: ep.species.clone(),
            template: template.to_string(),
        })
    }
}

impl AuxFeatures for EpisodeFeatures<'_> {
    fn visual(&self, source: FeatureSource, support_points: &[[f64; 2]]) -> Result<Vec<f64>> {
        let feats = match source {
            FeatureSource::Original => &self.original,
            FeatureSource::Adapted => &self.adapted,
        };
        let l = self.model.grid_size();
        let cells = l * l;
        let d = feats.cols();
        let mut out = vec![0.0; d];
        for (s, &p) in support_points.iter().enumerate() {
            let w = vkr_weights(l, self.model.stride(), p, self.model.cfg.vkr_sigma)?;
            for (c, wc) in w.iter().enumerate() {
                let row = feats.row(s * cells + c);
                for (o, x) in out.iter_mut().zip(row) {
                    *o += wc * x / support_points.len() as f64;
                }
            }
        }
        Ok(out)
    }

    fn text(&self, source: FeatureSource, text: &str) -> Result<Vec<f64>> {
        let wrapped = keypoint_text(&self.template, text, &self.species);
        self.model
            .pooled_text(&wrapped, source == FeatureSource::Adapted)
    }
}

/// Builds the training task of one episode under the configured prompt regime.
pub fn training_task(ep: &Episode, aux: &[AuxiliaryPair], cfg: &RunConfig) -> Task {
    let t = &cfg.train;
    let mut entries = Vec::with_capacity(ep.n() + aux.len());
    for (&id, text) in ep.keypoint_ids.iter().zip(&ep.texts) {
        entries.push(Entry {
            support_points: if t.use_kp {
                ep.supports
                    .iter()
                    .map(|s| s.keypoints[id].visible.then(|| s.keypoints[id].point()))
                    .collect()
            } else {
                Vec::new()
            },
            texts: if t.use_text {
                vec![text.clone()]
            } else {
                Vec::new()
            },
            target: Some(ep.query.keypoints[id].point()),
        });
    }
    for a in aux {
        let support_points = if t.use_aux_kp {
            a.support_points.iter().copied().map(Some).collect()
        } else {
            Vec::new()
        };
        let texts = match (&a.text, t.use_aux_text) {
            (Some(txt), true) => vec![keypoint_text(&t.template, txt, &ep.species)],
            _ => Vec::new(),
        };
        if support_points.is_empty() && texts.is_empty() {
            continue;
        }
        entries.push(Entry {
            support_points,
            texts,
            target: Some(a.query_point),
        });
    }
    Task {
        supports: ep.supports.iter().map(|s| s.image_ref.clone()).collect(),
        query: ep.query.image_ref.clone(),
        entries,
        use_visual: t.use_kp || t.use_aux_kp,
        use_text: t.use_text || t.use_aux_text,
    }
}

fn branch_loss(tape: &mut Tape, b: &Branch, task: &Task, model: &Model, sigma: f64) -> Result<Var> {
    let side = model.heatmap_side();
    let cell = model.heatmap_cell();
    let spec = GaussianSpec { sigma_gt: sigma };
    let mut gt = Vec::with_capacity(b.entries.len() * side * side);
    for &e in &b.entries {
        let p = task.entries[e]
            .target
            .ok_or_else(|| Error::Argument(format!("training entry {e} has no target")))?;
        gt.extend(gt_heatmap(p, spec, side, cell, 2)?.values);
    }
    let gt = tape.constant(Tensor::new(vec![gt.len(), 1], gt)?);
    let diff = tape.sub(b.heatmaps, gt)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Mean over present branches of the per-branch heatmap error.
fn heatmap_term(tape: &mut Tape, f: &Forward, task: &Task, model: &Model) -> Result<Var> {
    let mut terms = Vec::new();
    for b in [&f.visual, &f.textual].into_iter().flatten() {
        terms.push(branch_loss(tape, b, task, model, model.cfg.sigma_gt)?);
    }
    tape.average(&terms)
}

/// Prototype rows of the first `n` (main) entries of a branch.
fn main_rows(tape: &mut Tape, b: &Branch, n: usize) -> Result<Option<Var>> {
    if b.entries.len() < n || b.entries[..n].iter().enumerate().any(|(i, &e)| i != e) {
        return Ok(None);
    }
    if b.entries.len() == n {
        return Ok(Some(b.prototypes));
    }
    let rows = (0..n)
        .map(|i| tape.select_row(b.prototypes, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(tape.stack_rows(&rows)?))
}

struct PairLoss {
    total: Var,
    l_kp: Var,
    l_tt: Option<f64>,
    l_vt: Option<f64>,
    l_vv: Option<f64>,
}

/// Weighted heatmap and contrastive losses of one episode pair.
fn pair_loss(
    tape: &mut Tape,
    m: &Model,
    bank: &ImageBank,
    cfg: &RunConfig,
    pair: &EpisodePair,
    task1: &Task,
    task2: &Task,
) -> Result<PairLoss> {
    let f1 = m.forward(tape, task1, bank)?;
    let f2 = m.forward(tape, task2, bank)?;
    let h1 = heatmap_term(tape, &f1, task1, m)?;
    let h2 = heatmap_term(tape, &f2, task2, m)?;
    let l_kp = tape.average(&[h1, h2])?;
    let n = pair.first.n();
    let lc = &cfg.loss;
    let mut total = tape.scale(l_kp, lc.lambda1);
    let (mut l_tt, mut l_vt, mut l_vv) = (None, None, None);
    if !cfg.train.heatmap_only {
        let rows = |tape: &mut Tape, b: &Option<Branch>| -> Result<Option<Var>> {
            match b {
                Some(b) => main_rows(tape, b, n),
                None => Ok(None),
            }
        };
        let t1 = rows(tape, &f1.textual)?;
        let t2 = rows(tape, &f2.textual)?;
        let v1 = rows(tape, &f1.visual)?;
        let v2 = rows(tape, &f2.visual)?;
        if let (Some(a), Some(b)) = (t1, t2) {
            let l = contrastive_var(tape, a, b, lc.tau)?;
            l_tt = Some(tape.value(l).item());
            let w = tape.scale(l, lc.lambda2);
            total = tape.add(total, w)?;
        }
        if let (Some(v1), Some(v2), Some(t1), Some(t2)) = (v1, v2, t1, t2) {
            let (a, b) = match lc.vt_pairing {
                VtPairing::WithinEpisode => (
                    contrastive_vt_var(tape, v1, t1, lc.tau)?,
                    contrastive_vt_var(tape, v2, t2, lc.tau)?,
                ),
                VtPairing::CrossSpecies => (
                    contrastive_vt_var(tape, v1, t2, lc.tau)?,
                    contrastive_vt_var(tape, v2, t1, lc.tau)?,
                ),
            };
            let l = tape.average(&[a, b])?;
            l_vt = Some(tape.value(l).item());
            let w = tape.scale(l, lc.lambda3);
            total = tape.add(total, w)?;
        }
        if lc.use_lvv {
            if let (Some(v1), Some(v2)) = (v1, v2) {
                let l = contrastive_var(tape, v1, v2, lc.tau)?;
                l_vv = Some(tape.value(l).item());
                let w = tape.scale(l, lc.lambda2);
                total = tape.add(total, w)?;
            }
        }
    }
    Ok(PairLoss {
        total,
        l_kp,
        l_tt,
        l_vt,
        l_vv,
    })
}

pub struct Trainer<'a> {
    pub cfg: RunConfig,
    pub model: Model,
    ds: &'a Dataset,
    bank: &'a ImageBank,
    pools: PoolCache<'a>,
    paths: Vec<InterpolationPath>,
    adam: Adam,
    sampler: EpisodeSampler,
    episode_rng: ChaCha8Rng,
    ftc_rng: ChaCha8Rng,
    fixed: Option<EpisodePair>,
    log: Option<BufWriter<File>>,
    audit: Option<AuditLog>,
    pub step: u64,
    pub history: Vec<StepRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: RunConfig,
        model: Model,
        ds: &'a Dataset,
        bank: &'a ImageBank,
        gateway: &'a Gateway,
    ) -> Result<Self> {
        cfg.validate()?;
        let t = &cfg.train;
        let paths = if t.use_aux_kp || t.use_aux_text {
            t.interpolation_paths
                .iter()
                .map(|[a, b]| {
                    InterpolationPath::new(&ds.schema, a, b, t.interpolation_z, &t.path_category)
                        .map_err(|e| Error::Config(format!("train.interpolation_paths: {e}")))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let base = ds.schema.base_ids.iter().copied();
        let mut sampler = EpisodeSampler::new(t.k, t.n_max).with_filter(base);
        sampler.template = t.template.clone();
        let log = match &t.log_path {
            Some(p) => Some(BufWriter::new(
                File::create(p).map_err(|e| Error::io(p, e))?,
            )),
            None => None,
        };
        let audit = t.audit_path.as_deref().map(AuditLog::create).transpose()?;
        Ok(Self {
            adam: Adam::new(cfg.optim.clone()),
            episode_rng: ChaCha8Rng::seed_from_u64(t.seed),
            ftc_rng: ChaCha8Rng::seed_from_u64(t.seed ^ 0xf7c),
            pools: PoolCache::new(gateway, cfg.ftc.r),
            paths,
            sampler,
            fixed: None,
            log,
            audit,
            step: 0,
            history: Vec::new(),
            cfg,
            model,
            ds,
            bank,
        })
    }

    /// The reused episode pair when `train.fixed_episode` is set.
    pub fn fixed_pair(&self) -> Option<&EpisodePair> {
        self.fixed.as_ref()
    }

    fn next_pair(&mut self) -> Result<EpisodePair> {
        if let Some(p) = &self.fixed {
            return Ok(p.clone());
        }
        let pair = self.sampler.sample_pair(self.ds, &mut self.episode_rng)?;
        if self.cfg.train.fixed_episode {
            self.fixed = Some(pair.clone());
        }
        Ok(pair)
    }

    fn auxiliary(&mut self, ep: &Episode) -> Result<Vec<AuxiliaryPair>> {
        if self.paths.is_empty() || self.cfg.train.aux_per_episode == 0 {
            return Ok(Vec::new());
        }
        let feats = EpisodeFeatures::new(&self.model, ep, self.bank, &self.cfg.train.template)?;
        let supports: Vec<&_> = ep.supports.iter().collect();
        let mask = |i: &crate::corpus::Instance| i.mask.as_deref().and_then(|m| self.bank.mask(m));
        let req = AuxRequest {
            supports: &supports,
            support_masks: ep.supports.iter().map(mask).collect(),
            query: &ep.query,
            query_mask: mask(&ep.query),
            step: self.step,
            bootstrap_steps: self.cfg.train.bootstrap_steps,
        };
        let mut out = Vec::new();
        for path in &self.paths {
            if out.len() >= self.cfg.train.aux_per_episode {
                break;
            }
            let pool = if self.cfg.train.use_aux_text {
                self.pools.get(path)?
            } else {
                Default::default()
            };
            if let Some(pair) =
                make_auxiliary_pair(&req, path, &pool, &self.cfg.ftc, &feats, &mut self.ftc_rng)?
            {
                if let Some(a) = &self.audit {
                    a.record(self.step, &pair.provenance)?;
                }
                out.push(pair);
            }
        }
        Ok(out)
    }

    /// One optimizer update over `train.pairs_per_step` episode pairs.
    pub fn step_once(&mut self) -> Result<StepRecord> {
        let mut batch = Vec::with_capacity(self.cfg.train.pairs_per_step);
        for _ in 0..self.cfg.train.pairs_per_step {
            let pair = self.next_pair()?;
            let aux1 = self.auxiliary(&pair.first)?;
            let aux2 = self.auxiliary(&pair.second)?;
            batch.push((pair, aux1, aux2));
        }
        let mut tape = Tape::new();
        let mut totals = Vec::with_capacity(batch.len());
        let mut parts = Vec::with_capacity(batch.len());
        for (pair, aux1, aux2) in &batch {
            let task1 = training_task(&pair.first, aux1, &self.cfg);
            let task2 = training_task(&pair.second, aux2, &self.cfg);
            let pl = pair_loss(
                &mut tape,
                &self.model,
                self.bank,
                &self.cfg,
                pair,
                &task1,
                &task2,
            )?;
            totals.push(pl.total);
            parts.push(pl);
        }
        let total = tape.average(&totals)?;
        let loss = tape.value(total).item();
        let mean_of =
            |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let l_kp =
            mean_of(parts.iter().map(|p| tape.value(p.l_kp).item()).collect()).unwrap_or(0.0);
        let l_tt = mean_of(parts.iter().filter_map(|p| p.l_tt).collect());
        let l_vt = mean_of(parts.iter().filter_map(|p| p.l_vt).collect());
        let l_vv = mean_of(parts.iter().filter_map(|p| p.l_vv).collect());
        let (first, _, _) = &batch[0];
        if !loss.is_finite() || loss > self.cfg.train.divergence_threshold {
            return Err(Error::Divergence {
                step: self.step as usize,
                message: format!(
                    "loss {loss} (heatmap {l_kp}, text-text {l_tt:?}, visual-text {l_vt:?}) on {}/{}",
                    first.first.species, first.second.species
                ),
            });
        }
        let grads = tape.backward(total)?;
        self.adam.step(&mut self.model.store, grads.params());
        let count_text = |a: &[AuxiliaryPair]| a.iter().filter(|p| p.text.is_some()).count();
        let rec = StepRecord {
            step: self.step,
            loss,
            l_kp,
            l_tt,
            l_vt,
            l_vv,
            feature_source: FeatureSource::at_step(self.step, self.cfg.train.bootstrap_steps),
            species: (first.first.species.clone(), first.second.species.clone()),
            aux_pairs: batch.iter().map(|(_, a, b)| a.len() + b.len()).sum(),
            aux_texts: batch
                .iter()
                .map(|(_, a, b)| count_text(a) + count_text(b))
                .sum(),
        };
        if let Some(w) = &mut self.log {
            let line = serde_json::to_string(&rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        self.step += 1;
        let every = self.cfg.train.checkpoint_every;
        if every > 0 && self.step.is_multiple_of(every) {
            if let Some(dir) = &self.cfg.train.checkpoint_dir {
                let path = dir.join(format!("step_{:06}.json", self.step));
                Checkpoint::capture(&self.model, &self.cfg, self.step).save(&path)?;
            }
        }
        Ok(rec)
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.step < self.cfg.train.steps {
            let rec = self.step_once()?;
            if rec.step % 100 == 0 {
                log::info!(
                    "step {} loss {:.6} heatmap {:.6} aux {}/{}",
                    rec.step,
                    rec.loss,
                    rec.l_kp,
                    rec.aux_texts,
                    rec.aux_pairs
                );
            }
            self.history.push(rec);
        }
        self.finish()
    }

    pub fn finish(mut self) -> Result<TrainOutcome> {
        if let Some(w) = &mut self.log {
            w.flush().map_err(|e| Error::io("training log", e))?;
        }
        if let Some(a) = &self.audit {
            a.flush()?;
        }
        Ok(TrainOutcome {
            model: self.model,
            steps: self.step,
            history: self.history,
        })
    }
}

/// Trains a freshly initialized model for `cfg.train.steps` steps.
pub fn train(
    cfg: &RunConfig,
    ds: &Dataset,
    bank: &ImageBank,
    gateway: &Gateway,
) -> Result<TrainOutcome> {
    let model = Model::new(cfg.model.clone())?;
    Trainer::new(cfg.clone(), model, ds, bank, gateway)?.run()
}
