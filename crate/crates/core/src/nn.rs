//! Parameterized building blocks recorded onto a [`Tape`].

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Grid, Tensor};

/// Uniform fan-in initialization, `U(-gain/sqrt(fan_in), gain/sqrt(fan_in))`.
pub fn init_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("init shape")
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// `zero_init` zeroes both weight and bias so the layer starts as the zero map.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: &str,
        din: usize,
        dout: usize,
        trainable: bool,
        zero_init: bool,
    ) -> Self {
        let w = if zero_init {
            Tensor::zeros(&[din, dout])
        } else {
            init_uniform(rng, &[din, dout], din, 3f64.sqrt())
        };
        let w = store.add(&format!("{name}.w"), group, w, trainable);
        let b = store.add(
            &format!("{name}.b"),
            group,
            Tensor::zeros(&[dout]),
            trainable,
        );
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv3x3 {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3x3 {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: &str,
        cin: usize,
        cout: usize,
        trainable: bool,
    ) -> Self {
        let w = init_uniform(rng, &[9 * cin, cout], 9 * cin, 3f64.sqrt());
        let w = store.add(&format!("{name}.w"), group, w, trainable);
        let b = store.add(
            &format!("{name}.b"),
            group,
            Tensor::zeros(&[cout]),
            trainable,
        );
        Self { w, b }
    }

    /// Multiplies the initial weights by `factor`.
    pub fn scaled(self, store: &mut ParamStore, factor: f64) -> Self {
        let w = store.get(self.w).scale(factor);
        *store.get_mut(self.w) = w;
        self
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, grid: Grid) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv3x3(x, w, b, grid)
    }
}

/// Stride-2 transposed convolution (4x4 kernel, padding 1).
#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose2x {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvTranspose2x {
    /// Initialized to the bilinear interpolation kernel on the channel diagonal.
    pub fn bilinear(store: &mut ParamStore, name: &str, group: &str, channels: usize) -> Self {
        let taps = [0.25, 0.75, 0.75, 0.25];
        let mut w = Tensor::zeros(&[16 * channels, channels]);
        for ky in 0..4 {
            for kx in 0..4 {
                for c in 0..channels {
                    let row = (ky * 4 + kx) * channels + c;
                    w.data_mut()[row * channels + c] = taps[ky] * taps[kx];
                }
            }
        }
        let w = store.add(&format!("{name}.w"), group, w, true);
        let b = store.add(
            &format!("{name}.b"),
            group,
            Tensor::zeros(&[channels]),
            true,
        );
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, grid: Grid) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv_transpose2x(x, w, b, grid)
    }
}
