//! Free-form prompts turned into per-keypoint detections.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::pck_correct;
use crate::corpus::{keypoint_text, Dataset};
use crate::diverseprompt::{llm_parse, FallbackParser, Normalizer, ParseMode, PromptRecord};
use crate::error::{Error, Result};
use crate::llm::Gateway;
use crate::model::{Entry, Model, Task};
use crate::raster::ImageBank;

/// Category word used when a prompt names no object.
pub const DEFAULT_CATEGORY: &str = "animal";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Parsed keypoint name; `None` for an unparsed prompt.
    pub keypoint: Option<String>,
    pub point: [f64; 2],
}

pub struct PromptContext<'a> {
    pub model: &'a Model,
    pub bank: &'a ImageBank,
    pub template: String,
    pub fallback: FallbackParser,
    pub normalizer: Normalizer,
    pub gateway: Option<&'a Gateway>,
}

impl PromptContext<'_> {
    fn detect_texts(&self, image: &str, texts: Vec<String>) -> Result<Vec<[f64; 2]>> {
        let task = Task {
            supports: Vec::new(),
            query: image.to_string(),
            entries: texts
                .into_iter()
                .map(|t| Entry {
                    support_points: Vec::new(),
                    texts: vec![t],
                    target: None,
                })
                .collect(),
            use_visual: false,
            use_text: true,
        };
        self.model.predict(&task, self.bank)
    }

    /// Zero-shot detection of named keypoints with the simple template.
    pub fn detect_simple(
        &self,
        image: &str,
        keypoints: &[String],
        object: Option<&str>,
    ) -> Result<Vec<Detection>> {
        let category = object.unwrap_or(DEFAULT_CATEGORY);
        let texts = keypoints
            .iter()
            .map(|k| keypoint_text(&self.template, k, category))
            .collect();
        Ok(keypoints
            .iter()
            .zip(self.detect_texts(image, texts)?)
            .map(|(k, point)| Detection {
                keypoint: Some(k.clone()),
                point,
            })
            .collect())
    }

    pub fn parse_then_detect(
        &self,
        text: &str,
        image: &str,
        mode: ParseMode,
    ) -> Result<Vec<Detection>> {
        let parsed = match mode {
            ParseMode::None => {
                let point = self.detect_texts(image, vec![text.to_string()])?[0];
                return Ok(vec![Detection {
                    keypoint: None,
                    point,
                }]);
            }
            ParseMode::Fallback => self.fallback.parse(text),
            ParseMode::Llm => {
                let gw = self
                    .gateway
                    .ok_or_else(|| Error::Config("llm parsing needs a gateway".into()))?;
                llm_parse(text, gw, &self.normalizer)
            }
        }
        .map_err(|e| Error::Parse(format!("{text:?}: {e}")))?;
        self.detect_simple(image, &parsed.keypoints, parsed.object.as_deref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub pck: f64,
    pub correct: usize,
    pub total: usize,
    /// Prompts whose parse failed; their keypoints count as misses.
    pub failures: usize,
}

/// PCK of each record's ground-truth keypoints. `mode = None` scores the
/// simple-prompt reference built from the ground-truth parse.
pub fn score_prompts(
    ctx: &PromptContext<'_>,
    ds: &Dataset,
    records: &[PromptRecord],
    mode: Option<ParseMode>,
    rho: f64,
) -> Result<PromptScore> {
    if records.is_empty() {
        return Err(Error::Evaluation("empty prompt set".into()));
    }
    let per: Vec<(usize, usize, bool)> = records
        .par_iter()
        .map(|r| {
            let inst = ds.instances.get(r.instance_id).ok_or_else(|| {
                Error::Evaluation(format!(
                    "prompt refers to missing instance {}",
                    r.instance_id
                ))
            })?;
            let dets = match mode {
                None => ctx.detect_simple(&inst.image_ref, &r.gt_keypoints, r.gt_object.as_deref()),
                Some(m) => ctx.parse_then_detect(&r.text, &inst.image_ref, m),
            };
            let dets = match dets {
                Ok(d) => d,
                Err(Error::Parse(_)) => return Ok((0, r.gt_keypoints.len(), true)),
                Err(e) => return Err(e),
            };
            let mut correct = 0;
            for name in &r.gt_keypoints {
                let id = ds.schema.index_of(name).ok_or_else(|| {
                    Error::Evaluation(format!("unknown ground-truth keypoint {name:?}"))
                })?;
                let pred = dets
                    .iter()
                    .find(|d| d.keypoint.as_deref().is_none_or(|k| k == name))
                    .map(|d| d.point);
                if let Some(p) = pred {
                    if pck_correct(p, inst.keypoints[id].point(), inst.bbox, rho) {
                        correct += 1;
                    }
                }
            }
            Ok((correct, r.gt_keypoints.len(), false))
        })
        .collect::<Result<_>>()?;
    let correct = per.iter().map(|p| p.0).sum();
    let total: usize = per.iter().map(|p| p.1).sum();
    if total == 0 {
        return Err(Error::Evaluation("no keypoints to score".into()));
    }
    Ok(PromptScore {
        pck: 100.0 * correct as f64 / total as f64,
        correct,
        total,
        failures: per.iter().filter(|p| p.2).count(),
    })
}
