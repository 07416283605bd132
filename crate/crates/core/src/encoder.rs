//! Visual and text encoders, token projection and residual adapters.
//!
//! An image encoder is split into a frozen part (cacheable per image) and the
//! trainable last stages, followed by a frozen two-matrix projection
//! `X · W_v · W_o` into the joint space. Text encoders are frozen end to end.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{init_uniform, Conv3x3, Linear};
use crate::params::{ParamId, ParamStore};
use crate::raster::Raster;
use crate::tape::{Tape, Var};
use crate::tensor::{Grid, Tensor};

/// Spatial features of one image: `grid` is `[l*l, d]`, row-major over cells.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: Tensor,
    pub l: usize,
    /// Pixels per cell.
    pub stride: f64,
}

impl FeatureMap {
    pub fn new(grid: Tensor, l: usize, stride: f64) -> Result<Self> {
        if l < 2 || grid.shape().len() != 2 || grid.rows() != l * l {
            return Err(Error::Dimension(format!(
                "feature grid {:?} is not {l}x{l} cells",
                grid.shape()
            )));
        }
        if !grid.all_finite() {
            return Err(Error::Numeric("non-finite feature map".into()));
        }
        Ok(Self { grid, l, stride })
    }

    pub fn d(&self) -> usize {
        self.grid.cols()
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        self.grid.row(row * self.l + col)
    }

    pub fn geometry(&self) -> Grid {
        Grid::square(self.l)
    }
}

/// Token sequence `[m, d]` of one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextFeature {
    pub tokens: Tensor,
    pub eot_index: usize,
}

impl TextFeature {
    pub fn new(tokens: Tensor, eot_index: usize) -> Result<Self> {
        if tokens.shape().len() != 2 || eot_index >= tokens.rows() {
            return Err(Error::Dimension(format!(
                "end-of-text index {eot_index} for tokens {:?}",
                tokens.shape()
            )));
        }
        Ok(Self { tokens, eot_index })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionWeights {
    pub w_v: Tensor,
    pub w_o: Tensor,
}

/// `X · W_v · W_o`, reshaped to an `l x l` grid.
pub fn project_image_tokens(
    x: &Tensor,
    l: usize,
    stride: f64,
    w: &ProjectionWeights,
) -> Result<FeatureMap> {
    let grid = x.matmul(&w.w_v)?.matmul(&w.w_o)?;
    FeatureMap::new(grid, l, stride)
}

/// Selects the end-of-text token.
pub fn pool_text(t: &TextFeature) -> Vec<f64> {
    t.tokens.row(t.eot_index).to_vec()
}

/// `input + f(input)` with shape and finiteness checks.
pub fn residual(input: &Tensor, adapter_out: &Tensor) -> Result<Tensor> {
    if input.shape() != adapter_out.shape() {
        return Err(Error::Dimension(format!(
            "adapter output {:?} for input {:?}",
            adapter_out.shape(),
            input.shape()
        )));
    }
    if !adapter_out.all_finite() {
        return Err(Error::Numeric("non-finite adapter output".into()));
    }
    input.add(adapter_out)
}

/// Bottleneck refinement block applied residually to a feature grid.
#[derive(Debug, Clone, Copy)]
pub struct VisualAdapter {
    down: Linear,
    mid: Conv3x3,
    up: Linear,
}

impl VisualAdapter {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d: usize, bottleneck: usize) -> Self {
        let g = "adapter.visual";
        Self {
            down: Linear::new(
                store,
                rng,
                "adapter.visual.down",
                g,
                d,
                bottleneck,
                true,
                false,
            ),
            mid: Conv3x3::new(
                store,
                rng,
                "adapter.visual.mid",
                g,
                bottleneck,
                bottleneck,
                true,
            ),
            up: Linear::new(
                store,
                rng,
                "adapter.visual.up",
                g,
                bottleneck,
                d,
                true,
                true,
            ),
        }
    }

    /// `A_v(x)` without the residual. `x` may stack several grids of shape `grid`.
    pub fn delta(&self, tape: &mut Tape, store: &ParamStore, x: Var, grid: Grid) -> Result<Var> {
        let h = self.down.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = self.mid.forward(tape, store, h, grid)?;
        let h = tape.relu(h);
        self.up.forward(tape, store, h)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, grid: Grid) -> Result<Var> {
        let delta = self.delta(tape, store, x, grid)?;
        if !tape.value(delta).all_finite() {
            return Err(Error::Numeric("non-finite visual adapter output".into()));
        }
        tape.add(x, delta)
    }
}

/// One self-attention block applied residually to a token sequence:
/// `A_t(x) = attn(x) + mlp(x + attn(x))`.
#[derive(Debug, Clone, Copy)]
pub struct TextAdapter {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    m1: Linear,
    m2: Linear,
    d: usize,
}

impl TextAdapter {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d: usize, hidden: usize) -> Self {
        let g = "adapter.text";
        let mut lin = |name: &str, i, o, zero| {
            Linear::new(
                store,
                rng,
                &format!("adapter.text.{name}"),
                g,
                i,
                o,
                true,
                zero,
            )
        };
        Self {
            q: lin("q", d, d, false),
            k: lin("k", d, d, false),
            v: lin("v", d, d, false),
            o: lin("o", d, d, true),
            m1: lin("mlp1", d, hidden, false),
            m2: lin("mlp2", hidden, d, true),
            d,
        }
    }

    pub fn delta(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, 1.0 / (self.d as f64).sqrt());
        let a = tape.softmax_rows(s);
        let a = tape.matmul(a, v)?;
        let attn = self.o.forward(tape, store, a)?;
        let h = tape.add(x, attn)?;
        let h = self.m1.forward(tape, store, h)?;
        let h = tape.relu(h);
        let mlp = self.m2.forward(tape, store, h)?;
        tape.add(attn, mlp)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let delta = self.delta(tape, store, x)?;
        if !tape.value(delta).all_finite() {
            return Err(Error::Numeric("non-finite text adapter output".into()));
        }
        tape.add(x, delta)
    }
}

pub fn adapt_visual(x: &FeatureMap, a: &VisualAdapter, store: &ParamStore) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let v = tape.constant(x.grid.clone());
    let delta = a.delta(&mut tape, store, v, x.geometry())?;
    FeatureMap::new(residual(&x.grid, tape.value(delta))?, x.l, x.stride)
}

pub fn adapt_text(t: &TextFeature, a: &TextAdapter, store: &ParamStore) -> Result<TextFeature> {
    let mut tape = Tape::new();
    let v = tape.constant(t.tokens.clone());
    let delta = a.delta(&mut tape, store, v)?;
    TextFeature::new(residual(&t.tokens, tape.value(delta))?, t.eot_index)
}

/// Image side of the encoder plugin interface.
pub trait ImageEncoder: Send + Sync {
    /// Cells per side of the token grid.
    fn grid_size(&self) -> usize;
    fn stride(&self) -> f64;
    /// Square input resolution expected by [`ImageEncoder::frozen_tokens`].
    fn input_size(&self) -> usize;
    /// Output of the frozen stages; safe to cache per image.
    fn frozen_tokens(&self, store: &ParamStore, key: &str, image: &Raster) -> Result<Tensor>;
    /// Trainable stages on top of the frozen tokens, producing raw tokens `X`.
    fn stages(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var>;
    fn projection_ids(&self) -> (ParamId, ParamId);

    fn projection(&self, store: &ParamStore) -> ProjectionWeights {
        let (v, o) = self.projection_ids();
        ProjectionWeights {
            w_v: store.get(v).clone(),
            w_o: store.get(o).clone(),
        }
    }

    /// Raw tokens and projection weights for one image.
    fn encode_image(
        &self,
        store: &ParamStore,
        key: &str,
        image: &Raster,
    ) -> Result<(Tensor, ProjectionWeights)> {
        let frozen = self.frozen_tokens(store, key, image)?;
        let mut tape = Tape::new();
        let x = tape.constant(frozen);
        let x = self.stages(&mut tape, store, x)?;
        Ok((tape.value(x).clone(), self.projection(store)))
    }

    /// Projected (un-adapted) feature map.
    fn feature_map(&self, store: &ParamStore, key: &str, image: &Raster) -> Result<FeatureMap> {
        let (x, w) = self.encode_image(store, key, image)?;
        project_image_tokens(&x, self.grid_size(), self.stride(), &w)
    }
}

/// Text side of the encoder plugin interface; always frozen.
pub trait TextEncoder: Send + Sync {
    fn width(&self) -> usize;
    fn encode_text(&self, store: &ParamStore, text: &str) -> Result<TextFeature>;
}

/// Deterministic image encoder over raster patches, for tests and desk-scale runs.
#[derive(Debug, Clone)]
pub struct ToyImageEncoder {
    input: usize,
    patch: usize,
    stem: Linear,
    stage1: Linear,
    stage2: Conv3x3,
    stage3: Conv3x3,
    w_v: ParamId,
    w_o: ParamId,
}

impl ToyImageEncoder {
    /// Registers parameters: stem and first stage frozen, last two stages trainable.
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        input: usize,
        patch: usize,
        d_raw: usize,
        d: usize,
    ) -> Result<Self> {
        if patch == 0 || !input.is_multiple_of(patch) || input / patch < 2 {
            return Err(Error::Config(format!(
                "input size {input} is not a multiple of patch {patch} with at least 2 cells"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pin = 3 * patch * patch;
        let stem = Linear::new(
            store,
            &mut rng,
            "encoder.stem",
            "encoder.stem",
            pin,
            d_raw,
            false,
            false,
        );
        let stage1 = Linear::new(
            store,
            &mut rng,
            "encoder.stage1",
            "encoder.stage1",
            d_raw,
            d_raw,
            false,
            false,
        );
        let stage2 = Conv3x3::new(
            store,
            &mut rng,
            "encoder.stage2",
            "encoder.stage2",
            d_raw,
            d_raw,
            true,
        )
        .scaled(store, 0.5);
        let stage3 = Conv3x3::new(
            store,
            &mut rng,
            "encoder.stage3",
            "encoder.stage3",
            d_raw,
            d_raw,
            true,
        )
        .scaled(store, 0.5);
        let d_mid = d_raw;
        let w_v = init_uniform(&mut rng, &[d_raw, d_mid], d_raw, 3f64.sqrt());
        let w_o = init_uniform(&mut rng, &[d_mid, d], d_mid, 3f64.sqrt());
        let w_v = store.add("encoder.proj.w_v", "encoder.proj", w_v, false);
        let w_o = store.add("encoder.proj.w_o", "encoder.proj", w_o, false);
        Ok(Self {
            input,
            patch,
            stem,
            stage1,
            stage2,
            stage3,
            w_v,
            w_o,
        })
    }

    fn patches(&self, image: &Raster) -> Result<Tensor> {
        if image.width != self.input || image.height != self.input {
            return Err(Error::Dimension(format!(
                "image {}x{} for encoder input {}",
                image.width, image.height, self.input
            )));
        }
        let (p, l) = (self.patch, self.input / self.patch);
        let mut data = Vec::with_capacity(l * l * 3 * p * p);
        for gy in 0..l {
            for gx in 0..l {
                for y in gy * p..(gy + 1) * p {
                    for x in gx * p..(gx + 1) * p {
                        data.extend(image.get(x, y).iter().map(|&v| v as f64 / 255.0 - 0.5));
                    }
                }
            }
        }
        Tensor::new(vec![l * l, 3 * p * p], data)
    }
}

impl ImageEncoder for ToyImageEncoder {
    fn grid_size(&self) -> usize {
        self.input / self.patch
    }

    fn stride(&self) -> f64 {
        self.patch as f64
    }

    fn input_size(&self) -> usize {
        self.input
    }

    fn frozen_tokens(&self, store: &ParamStore, _key: &str, image: &Raster) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(self.patches(image)?);
        let h = self.stem.forward(&mut tape, store, x)?;
        let h = tape.relu(h);
        let r = self.stage1.forward(&mut tape, store, h)?;
        let r = tape.relu(r);
        let out = tape.add(h, r)?;
        Ok(tape.value(out).clone())
    }

    fn stages(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = Grid::square(self.grid_size());
        let mut h = x;
        for stage in [&self.stage2, &self.stage3] {
            let r = stage.forward(tape, store, h, g)?;
            let r = tape.relu(r);
            h = tape.add(h, r)?;
        }
        Ok(h)
    }

    fn projection_ids(&self) -> (ParamId, ParamId) {
        (self.w_v, self.w_o)
    }
}

/// Lowercased word tokens framed by start and end markers.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = vec!["<sot>".to_string()];
    out.extend(
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_string),
    );
    out.push("<eot>".to_string());
    out
}

/// Deterministic text encoder: hashed word embeddings, a positional table,
/// causal averaging and a fixed mixing matrix.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    seed: u64,
    d: usize,
    max_len: usize,
    pos: ParamId,
    w_ctx: ParamId,
}

impl ToyTextEncoder {
    pub fn new(store: &mut ParamStore, seed: u64, d: usize, max_len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47);
        let pos = init_uniform(&mut rng, &[max_len, d], 1, 0.3);
        let w_ctx = init_uniform(&mut rng, &[d, d], d, 3f64.sqrt());
        Self {
            seed,
            d,
            max_len,
            pos: store.add("text_encoder.pos", "text_encoder", pos, false),
            w_ctx: store.add("text_encoder.w_ctx", "text_encoder", w_ctx, false),
        }
    }

    fn embed(&self, word: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(word.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let b = 3f64.sqrt();
        (0..self.d).map(|_| rng.gen_range(-b..b)).collect()
    }
}

impl TextEncoder for ToyTextEncoder {
    fn width(&self) -> usize {
        self.d
    }

    fn encode_text(&self, store: &ParamStore, text: &str) -> Result<TextFeature> {
        let mut toks = tokenize(text);
        if toks.len() > self.max_len {
            let eot = toks.pop().expect("eot");
            toks.truncate(self.max_len - 1);
            toks.push(eot);
        }
        let pos = store.get(self.pos);
        let mut running = vec![0.0; self.d];
        let mut rows = Vec::with_capacity(toks.len() * self.d);
        for (i, t) in toks.iter().enumerate() {
            for ((r, e), p) in running.iter_mut().zip(self.embed(t)).zip(pos.row(i)) {
                *r += e + p;
            }
            rows.extend(running.iter().map(|v| v / (i + 1) as f64));
        }
        let m = toks.len();
        let tokens = Tensor::new(vec![m, self.d], rows)?.matmul(store.get(self.w_ctx))?;
        TextFeature::new(tokens, m - 1)
    }
}

/// Exported features of an external vision-language model, loaded from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecomputedBundle {
    pub input_size: usize,
    pub grid_size: usize,
    pub stride: f64,
    pub w_v: Vec<Vec<f64>>,
    pub w_o: Vec<Vec<f64>>,
    /// Raw token grids (`l*l` rows) keyed by image handle.
    pub images: HashMap<String, Vec<Vec<f64>>>,
    /// Already-projected text token sequences keyed by exact text.
    pub texts: HashMap<String, PrecomputedText>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecomputedText {
    pub tokens: Vec<Vec<f64>>,
    pub eot_index: usize,
}

/// Serves cached tokens of a pretrained encoder. Has no trainable stages.
#[derive(Debug, Clone)]
pub struct PrecomputedEncoder {
    bundle: std::sync::Arc<PrecomputedBundle>,
    w_v: ParamId,
    w_o: ParamId,
    d: usize,
}

impl PrecomputedEncoder {
    pub fn load(store: &mut ParamStore, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bundle: PrecomputedBundle = serde_json::from_str(&text)?;
        Self::from_bundle(store, bundle)
    }

    pub fn from_bundle(store: &mut ParamStore, bundle: PrecomputedBundle) -> Result<Self> {
        let w_v = Tensor::from_rows(&bundle.w_v)?;
        let w_o = Tensor::from_rows(&bundle.w_o)?;
        if w_v.cols() != w_o.rows() {
            return Err(Error::Dimension(format!(
                "projection shapes {:?} and {:?} do not compose",
                w_v.shape(),
                w_o.shape()
            )));
        }
        let d = w_o.cols();
        Ok(Self {
            bundle: std::sync::Arc::new(bundle),
            w_v: store.add("encoder.proj.w_v", "encoder.proj", w_v, false),
            w_o: store.add("encoder.proj.w_o", "encoder.proj", w_o, false),
            d,
        })
    }
}

impl ImageEncoder for PrecomputedEncoder {
    fn grid_size(&self) -> usize {
        self.bundle.grid_size
    }

    fn stride(&self) -> f64 {
        self.bundle.stride
    }

    fn input_size(&self) -> usize {
        self.bundle.input_size
    }

    fn frozen_tokens(&self, _store: &ParamStore, key: &str, _image: &Raster) -> Result<Tensor> {
        let rows =
            self.bundle.images.get(key).ok_or_else(|| {
                Error::Argument(format!("no precomputed tokens for image {key:?}"))
            })?;
        Tensor::from_rows(rows)
    }

    fn stages(&self, _tape: &mut Tape, _store: &ParamStore, x: Var) -> Result<Var> {
        Ok(x)
    }

    fn projection_ids(&self) -> (ParamId, ParamId) {
        (self.w_v, self.w_o)
    }
}

impl TextEncoder for PrecomputedEncoder {
    fn width(&self) -> usize {
        self.d
    }

    fn encode_text(&self, _store: &ParamStore, text: &str) -> Result<TextFeature> {
        let t =
            self.bundle.texts.get(text).ok_or_else(|| {
                Error::Argument(format!("no precomputed features for text {text:?}"))
            })?;
        TextFeature::new(Tensor::from_rows(&t.tokens)?, t.eot_index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        init_uniform(rng, shape, 1, 1.0)
    }

    #[test]
    fn identity_projection_is_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let w = ProjectionWeights {
            w_v: Tensor::identity(3),
            w_o: Tensor::identity(3),
        };
        assert_eq!(project_image_tokens(&x, 2, 1.0, &w).unwrap().grid, x);
    }

    #[test]
    fn projection_hand_example() {
        // a 1x1 grid is below the minimum, so check the matrix product directly
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let w_v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let out = x
            .matmul(&w_v)
            .unwrap()
            .matmul(&Tensor::identity(2))
            .unwrap();
        assert_eq!(out.data(), &[1.0, 4.0]);
        let w = ProjectionWeights {
            w_v: Tensor::identity(2),
            w_o: Tensor::identity(3),
        };
        assert!(matches!(
            project_image_tokens(&Tensor::zeros(&[4, 2]), 2, 1.0, &w),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn chained_projection_matches_fused() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[9, 5]);
        let w = ProjectionWeights {
            w_v: rand_tensor(&mut rng, &[5, 4]),
            w_o: rand_tensor(&mut rng, &[4, 6]),
        };
        let chained = project_image_tokens(&x, 3, 2.0, &w).unwrap();
        let fused = x.matmul(&w.w_v.matmul(&w.w_o).unwrap()).unwrap();
        for (a, b) in chained.grid.data().iter().zip(fused.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_initialized_adapters_are_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let va = VisualAdapter::new(&mut store, &mut rng, 6, 2);
        let ta = TextAdapter::new(&mut store, &mut rng, 6, 12);
        let fm = FeatureMap::new(rand_tensor(&mut rng, &[9, 6]), 3, 1.0).unwrap();
        assert_eq!(adapt_visual(&fm, &va, &store).unwrap(), fm);
        let tf = TextFeature::new(rand_tensor(&mut rng, &[4, 6]), 3).unwrap();
        assert_eq!(adapt_text(&tf, &ta, &store).unwrap(), tf);
    }

    #[test]
    fn constant_adapter_shifts_by_constant() {
        let x = Tensor::full(&[4, 3], 0.5);
        let out = residual(&x, &Tensor::full(&[4, 3], 2.0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));
        let bad = Tensor::new(vec![4, 3], vec![f64::NAN; 12]).unwrap();
        assert!(matches!(residual(&x, &bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_adapter_has_identity_jacobian() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let va = VisualAdapter::new(&mut store, &mut rng, 3, 2);
        let input = rand_tensor(&mut rng, &[4, 3]);
        for i in 0..input.len() {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let y = va.forward(&mut tape, &store, x, Grid::square(2)).unwrap();
            let mut sel = Tensor::zeros(&[4, 3]);
            sel.data_mut()[i] = 1.0;
            let sel = tape.constant(sel);
            let y = tape.mul(y, sel).unwrap();
            let y = tape.sum(y);
            let g = tape.backward(y).unwrap();
            let row = g.wrt(x).unwrap();
            for (j, &v) in row.data().iter().enumerate() {
                assert_eq!(v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn pooling_selects_end_token() {
        let t = TextFeature::new(Tensor::from_rows(&[vec![7.0, 8.0]]).unwrap(), 0).unwrap();
        assert_eq!(pool_text(&t), vec![7.0, 8.0]);
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64; 2]).collect();
        let t = TextFeature::new(Tensor::from_rows(&rows).unwrap(), 2).unwrap();
        assert_eq!(pool_text(&t), vec![2.0, 2.0]);
        assert!(TextFeature::new(Tensor::from_rows(&rows).unwrap(), 4).is_err());
    }

    #[test]
    fn adapt_then_pool_fixture() {
        // pins the documented order on a trained-looking (non-zero) adapter
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ta = TextAdapter::new(&mut store, &mut rng, 4, 8);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = init_uniform(&mut rng, &shape, 4, 0.5);
        }
        let enc = ToyTextEncoder::new(&mut store, 11, 4, 16);
        let tf = enc.encode_text(&store, "the nose of a cat").unwrap();
        let adapted = pool_text(&adapt_text(&tf, &ta, &store).unwrap());
        let pooled_first = pool_text(&tf);
        assert_ne!(adapted, pooled_first);
        let tf2 = enc.encode_text(&store, "the nose of a cat").unwrap();
        assert_eq!(pool_text(&adapt_text(&tf2, &ta, &store).unwrap()), adapted);
    }

    #[test]
    fn toy_encoders_are_deterministic_and_shaped() {
        let build = || {
            let mut store = ParamStore::new();
            let ie = ToyImageEncoder::new(&mut store, 5, 12, 3, 8, 6).unwrap();
            let te = ToyTextEncoder::new(&mut store, 5, 6, 16);
            (store, ie, te)
        };
        let (s1, ie1, te1) = build();
        let (s2, ie2, te2) = build();
        let img = Raster::filled(12, 12, [10, 200, 30]);
        let f1 = ie1.feature_map(&s1, "a", &img).unwrap();
        let f2 = ie2.feature_map(&s2, "a", &img).unwrap();
        assert_eq!(f1, f2);
        assert_eq!((f1.l, f1.d(), f1.stride), (4, 6, 3.0));
        let t = te1.encode_text(&s1, "Left eye").unwrap();
        assert_eq!(t.tokens.shape(), &[4, 6]);
        assert_eq!(t.eot_index, 3);
        assert_eq!(t, te2.encode_text(&s2, "left  EYE").unwrap());
        assert_ne!(
            pool_text(&t),
            pool_text(&te1.encode_text(&s1, "right eye").unwrap())
        );
        assert!(ie1
            .feature_map(&s1, "b", &Raster::filled(9, 9, [0; 3]))
            .is_err());
        assert_eq!(s1.trainable_count(), 2 * (9 * 8 * 8 + 8));
    }

    proptest! {
        #[test]
        fn projection_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[4, 3]);
            let y = rand_tensor(&mut rng, &[4, 3]);
            let w = ProjectionWeights { w_v: rand_tensor(&mut rng, &[3, 3]), w_o: rand_tensor(&mut rng, &[3, 2]) };
            let lhs = project_image_tokens(&x.scale(a).add(&y.scale(b)).unwrap(), 2, 1.0, &w).unwrap();
            let fx = project_image_tokens(&x, 2, 1.0, &w).unwrap();
            let fy = project_image_tokens(&y, 2, 1.0, &w).unwrap();
            let rhs = fx.grid.scale(a).add(&fy.grid.scale(b)).unwrap();
            for (l, r) in lhs.grid.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() <= 1e-6 * (1.0 + r.abs()));
            }
        }
    }
}
