//! Heatmap regression, prototype contrastive losses and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::detector::HeatmapGroup;
use crate::error::{Error, Result};
use crate::prototype::Prototype;
use crate::tape::{Tape, Var};
use crate::tensor::{cosine, Tensor};

/// How visual/textual prototype pairs are formed for the cross-modal term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VtPairing {
    /// Visual and textual prototypes of the same episode.
    #[default]
    WithinEpisode,
    /// Visual prototypes of one species against textual ones of the other.
    CrossSpecies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub vt_pairing: VtPairing,
    /// Adds a visual-visual cross-species contrastive term (weighted like `lambda2`).
    pub use_lvv: bool,
    /// Only `"mean"` is supported.
    pub mse_reduction: String,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.002,
            lambda3: 0.002,
            tau: 0.05,
            vt_pairing: VtPairing::WithinEpisode,
            use_lvv: false,
            mse_reduction: "mean".into(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "loss.tau must be positive, got {}",
                self.tau
            )));
        }
        for (k, v) in [
            ("loss.lambda1", self.lambda1),
            ("loss.lambda2", self.lambda2),
            ("loss.lambda3", self.lambda3),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{k} must be non-negative, got {v}")));
            }
        }
        if self.mse_reduction != "mean" {
            return Err(Error::Config(format!(
                "loss.mse_reduction {:?} is not supported (use \"mean\")",
                self.mse_reduction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Vec<Vec<f64>>,
}

fn stacked(group: &HeatmapGroup) -> Vec<f64> {
    group
        .maps
        .iter()
        .flat_map(|m| m.values.iter().copied())
        .collect()
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Mean over present modalities of the per-pixel, per-keypoint mean squared error.
pub fn heatmap_loss(
    hv: Option<&HeatmapGroup>,
    ht: Option<&HeatmapGroup>,
    gt: &HeatmapGroup,
) -> Result<f64> {
    let target = stacked(gt);
    let present: Vec<&HeatmapGroup> = [hv, ht].into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::Argument(
            "heatmap loss with no prediction group".into(),
        ));
    }
    let mut total = 0.0;
    for g in &present {
        let pred = stacked(g);
        if g.maps.len() != gt.maps.len() || pred.len() != target.len() {
            return Err(Error::Dimension(format!(
                "prediction of {} maps / {} values against {} / {}",
                g.maps.len(),
                pred.len(),
                gt.maps.len(),
                target.len()
            )));
        }
        total += mse(&pred, &target);
    }
    Ok(total / present.len() as f64)
}

/// Recorded counterpart of [`heatmap_loss`]: predictions and target are stacked maps.
pub fn heatmap_loss_var(tape: &mut Tape, preds: &[Var], gt: Var) -> Result<Var> {
    if preds.is_empty() {
        return Err(Error::Argument(
            "heatmap loss with no prediction group".into(),
        ));
    }
    let mut terms = Vec::with_capacity(preds.len());
    for &p in preds {
        let diff = tape.sub(p, gt)?;
        let sq = tape.square(diff);
        terms.push(tape.mean(sq));
    }
    tape.average(&terms)
}

fn rows_of(ps: &[Prototype]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = ps.iter().map(|p| p.vector.clone()).collect();
    Tensor::from_rows(&rows)
}

pub fn similarity_matrix(a: &[Prototype], b: &[Prototype]) -> Result<SimilarityMatrix> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!(
            "similarity between {} and {} prototypes",
            a.len(),
            b.len()
        )));
    }
    let mut values = Vec::with_capacity(a.len());
    for pa in a {
        let mut row = Vec::with_capacity(b.len());
        for pb in b {
            if pa.vector.len() != pb.vector.len() {
                return Err(Error::Dimension("prototype widths differ".into()));
            }
            let c = cosine(&pa.vector, &pb.vector)
                .ok_or_else(|| Error::Numeric("cosine of a zero-norm prototype".into()))?;
            row.push(c);
        }
        values.push(row);
    }
    Ok(SimilarityMatrix { values })
}

/// Symmetric contrastive loss between two aligned `[N, d]` prototype stacks,
/// with matching rows as positives.
pub fn contrastive_var(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::Dimension(format!(
            "contrastive sets {:?} and {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    let an = tape.normalize_rows(a)?;
    let bn = tape.normalize_rows(b)?;
    let bt = tape.transpose(bn)?;
    let j = tape.matmul(an, bt)?;
    let j = tape.scale(j, 1.0 / tau);
    let jt = tape.transpose(j)?;
    let mut dirs = Vec::with_capacity(2);
    for m in [j, jt] {
        let ls = tape.log_softmax_rows(m);
        let d = tape.diag(ls)?;
        let d = tape.mean(d);
        dirs.push(tape.scale(d, -1.0));
    }
    tape.average(&dirs)
}

/// Cross-modal form: the textual side is detached so only visual inputs receive gradient.
pub fn contrastive_vt_var(tape: &mut Tape, visual: Var, textual: Var, tau: f64) -> Result<Var> {
    let t = tape.detach(textual);
    contrastive_var(tape, visual, t, tau)
}

pub fn contrastive_tt(ts: &[Prototype], ts2: &[Prototype], tau: f64) -> Result<f64> {
    similarity_matrix(ts, ts2)?;
    let mut tape = Tape::new();
    let a = tape.constant(rows_of(ts)?);
    let b = tape.constant(rows_of(ts2)?);
    let l = contrastive_var(&mut tape, a, b, tau)?;
    Ok(tape.value(l).item())
}

pub fn contrastive_vt(visual: &[Prototype], textual: &[Prototype], tau: f64) -> Result<f64> {
    similarity_matrix(visual, textual)?;
    let mut tape = Tape::new();
    let a = tape.constant(rows_of(visual)?);
    let b = tape.constant(rows_of(textual)?);
    let l = contrastive_vt_var(&mut tape, a, b, tau)?;
    Ok(tape.value(l).item())
}

pub fn total_loss(lkp: f64, ltt: f64, lvt: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda1 * lkp + cfg.lambda2 * ltt + cfg.lambda3 * lvt
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Heatmap;
    use crate::prototype::Modality;
    use proptest::prelude::*;

    fn protos(rows: &[Vec<f64>]) -> Vec<Prototype> {
        rows.iter()
            .enumerate()
            .map(|(i, v)| Prototype {
                vector: v.clone(),
                modality: Modality::Textual,
                keypoint_id: i,
            })
            .collect()
    }

    fn group(vals: Vec<f64>, m: Modality) -> HeatmapGroup {
        HeatmapGroup::new(m, vec![Heatmap::new(vals, 4, 2).unwrap()]).unwrap()
    }

    #[test]
    fn heatmap_loss_examples() {
        let mut gt_vals = vec![0.0; 16];
        gt_vals[5] = 1.0;
        let gt = group(gt_vals.clone(), Modality::Visual);
        assert_eq!(heatmap_loss(Some(&gt), Some(&gt), &gt).unwrap(), 0.0);
        let zero = group(vec![0.0; 16], Modality::Visual);
        let both = heatmap_loss(Some(&zero), Some(&zero), &gt).unwrap();
        assert!((both - 0.0625).abs() < 1e-15);
        let half = group(vec![0.5; 16], Modality::Visual);
        let single = heatmap_loss(Some(&half), None, &gt).unwrap();
        let oracle = gt_vals.iter().map(|g| (0.5 - g).powi(2)).sum::<f64>() / 16.0;
        assert!((single - oracle).abs() < 1e-15);
        assert!(matches!(
            heatmap_loss(None, None, &gt),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn recorded_heatmap_loss_agrees() {
        let mut tape = Tape::new();
        let p1 = tape.constant(Tensor::vector(vec![0.0, 1.0, 2.0, 3.0]));
        let p2 = tape.constant(Tensor::vector(vec![1.0, 1.0, 1.0, 1.0]));
        let gt = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0, 0.0]));
        let l = heatmap_loss_var(&mut tape, &[p1, p2], gt).unwrap();
        assert!((tape.value(l).item() - (14.0 / 4.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn similarity_examples() {
        let e1 = protos(&[vec![1.0, 0.0]]);
        assert_eq!(similarity_matrix(&e1, &e1).unwrap().values, vec![vec![1.0]]);
        let basis = protos(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(
            similarity_matrix(&basis, &basis).unwrap().values,
            vec![vec![1.0, 0.0], vec![0.0, 1.0]]
        );
        let z = protos(&[vec![0.0, 0.0]]);
        assert!(matches!(similarity_matrix(&z, &e1), Err(Error::Numeric(_))));
        assert!(matches!(
            contrastive_tt(&z, &e1, 1.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn orthonormal_pair_value() {
        let basis = protos(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = contrastive_tt(&basis, &basis, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((l - (e / (e + 1.0)).ln().abs()).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
        let one = protos(&[vec![0.3, -2.0]]);
        assert_eq!(contrastive_tt(&one, &one, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        assert!((total_loss(0.5, 1.0, 2.0, &cfg) - 0.506).abs() < 1e-15);
        let zero = LossConfig {
            lambda2: 0.0,
            lambda3: 0.0,
            ..cfg.clone()
        };
        assert_eq!(total_loss(0.7, 3.0, 9.0, &zero), 0.7);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    fn vecs(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.1f64..2.0, 3), n).prop_map(|mut v| {
            for (i, row) in v.iter_mut().enumerate() {
                row[i % 3] += 1.0;
            }
            v
        })
    }

    proptest! {
        #[test]
        fn symmetric_and_scale_invariant(a in vecs(3), b in vecs(3), tau in 0.05f64..2.0, k in 0usize..3) {
            let (pa, pb) = (protos(&a), protos(&b));
            let ab = contrastive_tt(&pa, &pb, tau).unwrap();
            let ba = contrastive_tt(&pb, &pa, tau).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            let mut scaled = pa.clone();
            scaled[k].vector.iter_mut().for_each(|v| *v *= 3.7);
            prop_assert!((contrastive_tt(&scaled, &pb, tau).unwrap() - ab).abs() < 1e-6);
            prop_assert!((contrastive_vt(&pa, &pb, tau).unwrap() - ab).abs() < 1e-12);
        }

        #[test]
        fn total_is_linear(l1 in 0.0f64..5.0, l2 in 0.0f64..5.0, l3 in 0.0f64..5.0, s in 0.0f64..4.0) {
            let cfg = LossConfig::default();
            let t = total_loss(l1 * s, l2 * s, l3 * s, &cfg);
            prop_assert!((t - s * total_loss(l1, l2, l3, &cfg)).abs() < 1e-9);
        }

        #[test]
        fn cosines_stay_in_range(a in vecs(3), b in vecs(3)) {
            let m = similarity_matrix(&protos(&a), &protos(&b)).unwrap();
            for row in &m.values {
                for &v in row {
                    prop_assert!(v.abs() <= 1.0 + 1e-6);
                }
            }
        }
    }

    #[test]
    fn textual_side_receives_no_gradient() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(&[vec![1.0, 0.2], vec![0.1, 1.0]]).unwrap());
        let t = tape.constant(Tensor::from_rows(&[vec![0.9, 0.3], vec![-0.2, 1.1]]).unwrap());
        let l = contrastive_vt_var(&mut tape, v, t, 0.5).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(t).is_none());
        assert!(g.wrt(v).unwrap().norm() > 0.0);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let a = vec![0.8, -0.3, 0.5, 0.2, 1.1, -0.4, -0.6, 0.3, 0.9];
        let b = vec![0.5, 0.1, 0.7, -0.2, 0.9, 0.3, 0.4, -0.5, 1.2];
        let eval = |a: &[f64]| {
            let mut tape = Tape::new();
            let va = tape.constant(Tensor::matrix(3, 3, a.to_vec()).unwrap());
            let vb = tape.constant(Tensor::matrix(3, 3, b.clone()).unwrap());
            let l = contrastive_var(&mut tape, va, vb, 0.3).unwrap();
            let g = tape.backward(l).unwrap().wrt(va).unwrap().clone();
            (tape.value(l).item(), g)
        };
        let (_, g) = eval(&a);
        let h = 1e-6;
        for i in 0..a.len() {
            let mut up = a.clone();
            up[i] += h;
            let mut dn = a.clone();
            dn[i] -= h;
            let fd = (eval(&up).0 - eval(&dn).0) / (2.0 * h);
            assert!(
                (fd - g.data()[i]).abs() < 1e-6,
                "{i}: {fd} vs {}",
                g.data()[i]
            );
        }
    }
}
