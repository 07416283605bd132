//! Visual and textual keypoint prototypes.

use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};

pub const DEFAULT_VKR_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Textual,
    Fused,
}

/// Gaussian-pooled feature at one support keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Vkr {
    pub vector: Vec<f64>,
    /// (support index, keypoint id)
    pub source: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f64>,
    pub modality: Modality,
    pub keypoint_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub visual: Vec<Prototype>,
    pub textual: Vec<Prototype>,
    pub ordering: Vec<usize>,
}

impl PrototypeSet {
    pub fn n(&self) -> usize {
        self.ordering.len()
    }

    pub fn has_visual(&self) -> bool {
        !self.visual.is_empty()
    }

    pub fn has_textual(&self) -> bool {
        !self.textual.is_empty()
    }

    pub fn modalities(&self) -> usize {
        self.has_visual() as usize + self.has_textual() as usize
    }
}

/// Normalized Gaussian weights over an `l x l` grid for a pixel location `p`.
///
/// Cell `(i, j)` has its center at `(j + 0.5, i + 0.5)` in grid units and `p`
/// maps to `p / stride` without rounding. Weights are formed in log space so
/// that a vanishing `sigma` collapses onto the nearest cell instead of
/// underflowing to all zeros.
pub fn vkr_weights(l: usize, stride: f64, p: [f64; 2], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Argument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let extent = l as f64 * stride;
    if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] < extent && p[1] < extent) {
        return Err(Error::Domain(format!(
            "point ({}, {}) outside the {extent}x{extent} image",
            p[0], p[1]
        )));
    }
    let (gx, gy) = (p[0] / stride, p[1] / stride);
    let mut logw = Vec::with_capacity(l * l);
    for i in 0..l {
        for j in 0..l {
            let dx = j as f64 + 0.5 - gx;
            let dy = i as f64 + 0.5 - gy;
            logw.push(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        }
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logw.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

pub fn extract_vkr(x: &FeatureMap, p: [f64; 2], sigma: f64, source: (usize, usize)) -> Result<Vkr> {
    let w = vkr_weights(x.l, x.stride, p, sigma)?;
    let d = x.d();
    let mut vector = vec![0.0; d];
    for (c, &wc) in w.iter().enumerate() {
        for (v, g) in vector.iter_mut().zip(x.grid.row(c)) {
            *v += wc * g;
        }
    }
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite keypoint representation".into()));
    }
    Ok(Vkr { vector, source })
}

fn mean_of(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Argument("prototype from an empty list".into()))?;
    let d = first.len();
    let mut out = vec![0.0; d];
    for v in vectors {
        if v.len() != d {
            return Err(Error::Dimension(format!(
                "prototype inputs of length {d} and {}",
                v.len()
            )));
        }
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

pub fn build_vkp(vkrs: &[Vkr], keypoint_id: usize) -> Result<Prototype> {
    let refs: Vec<&[f64]> = vkrs.iter().map(|v| v.vector.as_slice()).collect();
    Ok(Prototype {
        vector: mean_of(&refs)?,
        modality: Modality::Visual,
        keypoint_id,
    })
}

pub fn build_tkp(texts: &[Vec<f64>], keypoint_id: usize) -> Result<Prototype> {
    let refs: Vec<&[f64]> = texts.iter().map(Vec::as_slice).collect();
    Ok(Prototype {
        vector: mean_of(&refs)?,
        modality: Modality::Textual,
        keypoint_id,
    })
}

pub fn assemble(visual: Vec<Prototype>, textual: Vec<Prototype>) -> Result<PrototypeSet> {
    let ids = |ps: &[Prototype]| ps.iter().map(|p| p.keypoint_id).collect::<Vec<_>>();
    let ordering = match (visual.is_empty(), textual.is_empty()) {
        (true, true) => return Err(Error::Argument("no prototypes in either modality".into())),
        (false, true) => ids(&visual),
        (true, false) => ids(&textual),
        (false, false) => {
            let (iv, it) = (ids(&visual), ids(&textual));
            if iv != it {
                return Err(Error::Ordering(format!(
                    "visual ids {iv:?} do not match textual ids {it:?}"
                )));
            }
            iv
        }
    };
    if visual.iter().any(|p| p.modality != Modality::Visual)
        || textual.iter().any(|p| p.modality != Modality::Textual)
    {
        return Err(Error::Argument(
            "prototype filed under the wrong modality".into(),
        ));
    }
    Ok(PrototypeSet {
        visual,
        textual,
        ordering,
    })
}
