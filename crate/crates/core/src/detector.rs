//! Prototype correlation, class-agnostic heatmap decoding, upsampling, fusion
//! and coordinate read-out.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{Conv3x3, ConvTranspose2x};
use crate::params::ParamStore;
use crate::prototype::{Modality, Prototype};
use crate::tape::{correlate_values, Tape, Var};
use crate::tensor::{bilinear_upsample2x, Grid, Tensor};

pub const DEFAULT_SIGMA_GT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentiveMap {
    /// `[l*l, d]`
    pub grid: Tensor,
    pub l: usize,
    pub keypoint_id: usize,
}

/// Square single-channel score map; `values` is row-major `side x side`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub side: usize,
    /// Upsampling factor relative to the feature grid.
    pub u: usize,
}

impl Heatmap {
    pub fn new(values: Vec<f64>, side: usize, u: usize) -> Result<Self> {
        if side == 0 || values.len() != side * side || u == 0 {
            return Err(Error::Dimension(format!(
                "heatmap of {} values with side {side}, u {u}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite heatmap".into()));
        }
        Ok(Self { values, side, u })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side + col]
    }

    pub fn transpose(&self) -> Heatmap {
        let s = self.side;
        let values = (0..s * s)
            .map(|k| self.values[(k % s) * s + k / s])
            .collect();
        Heatmap {
            values,
            side: s,
            u: self.u,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGroup {
    pub modality: Modality,
    pub maps: Vec<Heatmap>,
}

impl HeatmapGroup {
    pub fn new(modality: Modality, maps: Vec<Heatmap>) -> Result<Self> {
        if let Some(first) = maps.first() {
            if maps.iter().any(|m| m.side != first.side || m.u != first.u) {
                return Err(Error::Dimension(
                    "heatmaps of a group differ in shape".into(),
                ));
            }
        }
        Ok(Self { modality, maps })
    }

    /// Splits a stacked `[n*side*side, 1]` tensor into `n` maps.
    pub fn from_stacked(modality: Modality, t: &Tensor, side: usize, u: usize) -> Result<Self> {
        let per = side * side;
        if t.is_empty() || !t.len().is_multiple_of(per) {
            return Err(Error::Dimension(format!(
                "{} values do not split into {side}x{side} maps",
                t.len()
            )));
        }
        let maps = t
            .data()
            .chunks(per)
            .map(|c| Heatmap::new(c.to_vec(), side, u))
            .collect::<Result<Vec<_>>>()?;
        Self::new(modality, maps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    /// Spread in heatmap cells.
    pub sigma_gt: f64,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self {
            sigma_gt: DEFAULT_SIGMA_GT,
        }
    }
}

pub fn correlate(proto: &Prototype, xq: &FeatureMap) -> Result<AttentiveMap> {
    let p = Tensor::new(vec![1, proto.vector.len()], proto.vector.clone())?;
    Ok(AttentiveMap {
        grid: correlate_values(&xq.grid, &p)?,
        l: xq.l,
        keypoint_id: proto.keypoint_id,
    })
}

/// Two 3x3 convolution blocks `d -> hidden -> 1`, shared by every keypoint and modality.
#[derive(Debug, Clone, Copy)]
pub struct Decoder {
    c1: Conv3x3,
    c2: Conv3x3,
    d: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d: usize, hidden: usize) -> Self {
        Self {
            c1: Conv3x3::new(store, rng, "decoder.block1", "decoder", d, hidden, true),
            c2: Conv3x3::new(store, rng, "decoder.block2", "decoder", hidden, 1, true),
            d,
        }
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    /// `x` stacks any number of `grid`-shaped attentive maps; returns one score per cell.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, grid: Grid) -> Result<Var> {
        if tape.value(x).cols() != self.d {
            return Err(Error::Config(format!(
                "decoder built for {} channels, got {}",
                self.d,
                tape.value(x).cols()
            )));
        }
        let h = self.c1.forward(tape, store, x, grid)?;
        let h = tape.relu(h);
        self.c2.forward(tape, store, h, grid)
    }
}

pub fn decode(a: &AttentiveMap, dec: &Decoder, store: &ParamStore) -> Result<Heatmap> {
    let mut tape = Tape::new();
    let x = tape.constant(a.grid.clone());
    let y = dec.forward(&mut tape, store, x, Grid::square(a.l))?;
    Heatmap::new(tape.value(y).data().to_vec(), a.l, 1)
}

/// 2x heatmap upsampler.
#[derive(Debug, Clone, Copy)]
pub enum Upsampler {
    /// Transposed convolution initialized as bilinear interpolation.
    Learned(ConvTranspose2x),
    /// Fixed bilinear interpolation with edge clamping.
    Bilinear,
}

impl Upsampler {
    pub fn learned(store: &mut ParamStore) -> Self {
        Upsampler::Learned(ConvTranspose2x::bilinear(
            store,
            "upsampler",
            "upsampler",
            1,
        ))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, grid: Grid) -> Result<Var> {
        match self {
            Upsampler::Learned(c) => c.forward(tape, store, x, grid),
            Upsampler::Bilinear => {
                let v = tape.value(x);
                let mut out = Vec::with_capacity(v.len() * 4);
                for block in v.data().chunks(grid.cells()) {
                    out.extend(bilinear_upsample2x(block, grid));
                }
                let n = out.len();
                Ok(tape.constant(Tensor::new(vec![n, 1], out)?))
            }
        }
    }
}

pub fn upsample(h: &Heatmap, up: &Upsampler, store: &ParamStore) -> Result<Heatmap> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![h.values.len(), 1], h.values.clone())?);
    let y = up.forward(&mut tape, store, x, Grid::square(h.side))?;
    Heatmap::new(tape.value(y).data().to_vec(), 2 * h.side, 2 * h.u)
}

/// Elementwise mean of both groups, or passthrough when only one is present.
pub fn fuse(hv: Option<&HeatmapGroup>, ht: Option<&HeatmapGroup>) -> Result<HeatmapGroup> {
    match (hv, ht) {
        (None, None) => Err(Error::Argument("fusing two absent heatmap groups".into())),
        (Some(g), None) | (None, Some(g)) => Ok(g.clone()),
        (Some(v), Some(t)) => {
            if v.maps.len() != t.maps.len() {
                return Err(Error::Dimension(format!(
                    "fusing {} visual maps with {} textual maps",
                    v.maps.len(),
                    t.maps.len()
                )));
            }
            let maps = v
                .maps
                .iter()
                .zip(&t.maps)
                .map(|(a, b)| {
                    if a.side != b.side || a.u != b.u {
                        return Err(Error::Dimension(
                            "fusing heatmaps of different shape".into(),
                        ));
                    }
                    let values = a
                        .values
                        .iter()
                        .zip(&b.values)
                        .map(|(x, y)| (x + y) / 2.0)
                        .collect();
                    Heatmap::new(values, a.side, a.u)
                })
                .collect::<Result<Vec<_>>>()?;
            HeatmapGroup::new(Modality::Fused, maps)
        }
    }
}

/// Unnormalized Gaussian with peak 1 at the heatmap cell containing `p`.
/// `cell` is the heatmap cell size in pixels (feature stride divided by `u`).
pub fn gt_heatmap(
    p: [f64; 2],
    spec: GaussianSpec,
    side: usize,
    cell: f64,
    u: usize,
) -> Result<Heatmap> {
    if !(spec.sigma_gt > 0.0) {
        return Err(Error::Argument(format!(
            "sigma_gt must be positive, got {}",
            spec.sigma_gt
        )));
    }
    let extent = side as f64 * cell;
    if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] < extent && p[1] < extent) {
        return Err(Error::Domain(format!(
            "point ({}, {}) outside the {extent}x{extent} heatmap",
            p[0], p[1]
        )));
    }
    let (cx, cy) = ((p[0] / cell).floor(), (p[1] / cell).floor());
    let two_s2 = 2.0 * spec.sigma_gt * spec.sigma_gt;
    let mut values = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let r2 = (j as f64 - cx).powi(2) + (i as f64 - cy).powi(2);
            values.push((-r2 / two_s2).exp());
        }
    }
    Heatmap::new(values, side, u)
}

/// Arg-max cell center in pixels; ties go to the smallest row-major index.
/// `stride` is the feature-grid stride, so one heatmap cell spans `stride / u` pixels.
pub fn heatmap_to_coords(h: &Heatmap, stride: f64) -> [f64; 2] {
    let mut best = 0;
    for (k, &v) in h.values.iter().enumerate() {
        if v > h.values[best] {
            best = k;
        }
    }
    let cell = stride / h.u as f64;
    let (row, col) = (best / h.side, best % h.side);
    [(col as f64 + 0.5) * cell, (row as f64 + 0.5) * cell]
}

/// Writes a heatmap as a little-endian greyscale PFM float grid (top row first).
pub fn write_pfm(h: &Heatmap, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = format!("Pf\n{} {}\n-1.0\n", h.side, h.side).into_bytes();
    // PFM stores rows bottom to top
    for row in (0..h.side).rev() {
        for col in 0..h.side {
            buf.extend_from_slice(&(h.at(row, col) as f32).to_le_bytes());
        }
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Heatmap> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    let mut header = Vec::new();
    while header.len() < 3 {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::Parse(format!(
                "{}: truncated PFM header",
                path.display()
            )));
        }
        header.push(line.trim().to_string());
    }
    let bad = || Error::Parse(format!("{}: malformed PFM header", path.display()));
    if header[0] != "Pf" {
        return Err(bad());
    }
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let scale: f64 = header[2].parse().map_err(|_| bad())?;
    if dims.len() != 2 || dims[0] != dims[1] {
        return Err(bad());
    }
    let side = dims[0];
    let mut raw = vec![0u8; side * side * 4];
    r.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
    let mut values = vec![0.0; side * side];
    for (k, chunk) in raw.chunks(4).enumerate() {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        let (row, col) = (side - 1 - k / side, k % side);
        values[row * side + col] = v as f64;
    }
    Heatmap::new(values, side, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fmap() -> FeatureMap {
        let data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        FeatureMap::new(Tensor::new(vec![4, 2], data).unwrap(), 2, 1.0).unwrap()
    }

    fn proto(v: Vec<f64>) -> Prototype {
        Prototype {
            vector: v,
            modality: Modality::Visual,
            keypoint_id: 0,
        }
    }

    #[test]
    fn correlation_fixtures() {
        let x = fmap();
        assert_eq!(correlate(&proto(vec![1.0, 1.0]), &x).unwrap().grid, x.grid);
        assert!(correlate(&proto(vec![0.0, 0.0]), &x)
            .unwrap()
            .grid
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let a = correlate(&proto(vec![2.0, -1.0]), &x).unwrap();
        assert_eq!(
            a.grid.data(),
            &[2.0, -2.0, 6.0, -4.0, 10.0, -6.0, 14.0, -8.0]
        );
        assert!(correlate(&proto(vec![1.0]), &x).is_err());
    }

    #[test]
    fn correlation_is_linear_in_prototype() {
        let x = fmap();
        let (p1, p2) = (vec![0.3, -1.2], vec![2.0, 0.5]);
        let (a, b) = (1.7, -0.4);
        let mix: Vec<f64> = p1.iter().zip(&p2).map(|(u, v)| a * u + b * v).collect();
        let lhs = correlate(&proto(mix), &x).unwrap().grid;
        let r1 = correlate(&proto(p1), &x).unwrap().grid.scale(a);
        let r2 = correlate(&proto(p2), &x).unwrap().grid.scale(b);
        for (l, r) in lhs.data().iter().zip(r1.add(&r2).unwrap().data()) {
            assert!((l - r).abs() < 1e-6);
        }
    }

    #[test]
    fn decoder_is_shared_and_zero_preserving() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = Decoder::new(&mut store, &mut rng, 2, 2);
        let before = store.checksum("decoder");
        let x = fmap();
        let h1 = decode(
            &correlate(&proto(vec![1.0, 0.0]), &x).unwrap(),
            &dec,
            &store,
        )
        .unwrap();
        let h2 = decode(
            &correlate(&proto(vec![0.0, 1.0]), &x).unwrap(),
            &dec,
            &store,
        )
        .unwrap();
        assert_ne!(h1, h2);
        assert_eq!(before, store.checksum("decoder"));
        let zero = AttentiveMap {
            grid: Tensor::zeros(&[4, 2]),
            l: 2,
            keypoint_id: 0,
        };
        assert!(decode(&zero, &dec, &store)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 0.0));
        let wrong = AttentiveMap {
            grid: Tensor::zeros(&[4, 3]),
            l: 2,
            keypoint_id: 0,
        };
        assert!(matches!(
            decode(&wrong, &dec, &store),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn decoder_fixture_replay() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dec = Decoder::new(&mut store, &mut rng, 2, 1);
        let h = decode(
            &correlate(&proto(vec![0.5, -0.25]), &fmap()).unwrap(),
            &dec,
            &store,
        )
        .unwrap();
        let again = {
            let mut s = ParamStore::new();
            let mut r = ChaCha8Rng::seed_from_u64(42);
            let d = Decoder::new(&mut s, &mut r, 2, 1);
            decode(
                &correlate(&proto(vec![0.5, -0.25]), &fmap()).unwrap(),
                &d,
                &s,
            )
            .unwrap()
        };
        assert_eq!(h, again);
        assert_eq!(h.side, 2);
    }

    #[test]
    fn upsampling_shapes_and_constants() {
        let store = ParamStore::new();
        let h = Heatmap::new(vec![0.7; 144], 12, 1).unwrap();
        let up = upsample(&h, &Upsampler::Bilinear, &store).unwrap();
        assert_eq!((up.side, up.u), (24, 2));
        assert!(up.values.iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let mut store = ParamStore::new();
        let learned = Upsampler::learned(&mut store);
        let lu = upsample(&h, &learned, &store).unwrap();
        assert_eq!(lu.side, 24);
        // interior of a constant map is preserved by the bilinear initialization
        assert!((lu.at(10, 10) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn fusion_rules() {
        let g = |v: f64, m| {
            HeatmapGroup::new(m, vec![Heatmap::new(vec![v; 4], 2, 2).unwrap()]).unwrap()
        };
        let (hv, ht) = (g(0.2, Modality::Visual), g(0.6, Modality::Textual));
        let f = fuse(Some(&hv), Some(&ht)).unwrap();
        assert!((f.maps[0].values[0] - 0.4).abs() < 1e-12);
        assert_eq!(fuse(Some(&hv), None).unwrap(), hv);
        assert_eq!(fuse(None, Some(&ht)).unwrap(), ht);
        assert!(matches!(fuse(None, None), Err(Error::Argument(_))));
        let odd = HeatmapGroup::new(
            Modality::Textual,
            vec![
                Heatmap::new(vec![0.1; 4], 2, 2).unwrap(),
                Heatmap::new(vec![0.1; 4], 2, 2).unwrap(),
            ],
        )
        .unwrap();
        assert!(fuse(Some(&hv), Some(&odd)).is_err());
    }

    #[test]
    fn gt_heatmap_peak_symmetry_and_closed_form() {
        let spec = GaussianSpec { sigma_gt: 1.0 };
        let h = gt_heatmap([5.5, 5.5], spec, 11, 1.0, 1).unwrap();
        assert_eq!(h.at(5, 5), 1.0);
        assert_eq!(h, h.transpose());
        let off = gt_heatmap([2.2, 7.9], spec, 11, 1.0, 1).unwrap();
        for i in 0..11 {
            for j in 0..11 {
                let r2 = (j as f64 - 2.0).powi(2) + (i as f64 - 7.0).powi(2);
                assert!((off.at(i, j) - (-r2 / 2.0).exp()).abs() < 1e-6);
            }
        }
        assert!(matches!(
            gt_heatmap([11.0, 0.0], spec, 11, 1.0, 1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn coordinate_readout() {
        let mut v = vec![0.0; 16];
        v[6] = 3.0;
        let h = Heatmap::new(v, 4, 2).unwrap();
        // stride 4, u 2 -> 2 px cells; index 6 is row 1, col 2
        assert_eq!(heatmap_to_coords(&h, 4.0), [5.0, 3.0]);
        let flat = Heatmap::new(vec![1.0; 16], 4, 2).unwrap();
        assert_eq!(heatmap_to_coords(&flat, 4.0), [1.0, 1.0]);
    }

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.pfm");
        let h = Heatmap::new((0..9).map(|v| v as f64 * 0.5).collect(), 3, 1).unwrap();
        write_pfm(&h, &path).unwrap();
        assert_eq!(read_pfm(&path).unwrap(), h);
    }

    proptest::proptest! {
        #[test]
        fn gt_round_trip_within_a_cell(px in 0.0f64..47.99, py in 0.0f64..47.99) {
            let h = gt_heatmap([px, py], GaussianSpec::default(), 32, 1.5, 2).unwrap();
            let [x, y] = heatmap_to_coords(&h, 3.0);
            let diag = 1.5 * 2f64.sqrt();
            proptest::prop_assert!(((x - px).powi(2) + (y - py).powi(2)).sqrt() <= diag);
        }

        #[test]
        fn fusing_with_itself_is_identity(vals in proptest::collection::vec(-10.0f64..10.0, 9)) {
            let g = HeatmapGroup::new(Modality::Visual, vec![Heatmap::new(vals, 3, 1).unwrap()]).unwrap();
            let f = fuse(Some(&g), Some(&g)).unwrap();
            proptest::prop_assert_eq!(&f.maps, &g.maps);
        }
    }
}
