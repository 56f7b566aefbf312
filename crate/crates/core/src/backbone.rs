//! Shared convolutional feature extractor for queries and keys.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{init_conv, normal, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Side of the square search-region crop fed to the network.
    pub input_size: usize,
    /// Output channels of each residual stage.
    pub widths: Vec<usize>,
    /// Stride of each stage's first convolution (1 or 2).
    pub strides: Vec<usize>,
    /// Channels of the query/key embedding.
    pub key_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { input_size: 256, widths: vec![8, 16, 32, 32], strides: vec![2, 2, 2, 2], key_channels: 64 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.widths.len() >= 2, "backbone needs at least two stages, got {}", self.widths.len());
        ensure!(self.widths.len() == self.strides.len(), "backbone widths and strides differ in length");
        ensure!(self.strides.iter().all(|s| *s == 1 || *s == 2), "backbone strides must be 1 or 2");
        ensure!(self.widths.iter().all(|w| *w > 0), "backbone widths must be positive");
        ensure!(self.key_channels >= 2, "key channels must be at least 2");
        ensure!(
            self.input_size % self.output_stride() == 0,
            "output stride {} does not divide input size {}",
            self.output_stride(),
            self.input_size
        );
        Ok(())
    }

    pub fn output_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn output_size(&self) -> usize {
        self.input_size / self.output_stride()
    }

    fn shallow_channels(&self) -> usize {
        self.key_channels / 2
    }

    fn deep_channels(&self) -> usize {
        self.key_channels - self.key_channels / 2
    }
}

pub fn init_params(params: &mut ParamSet, cfg: &BackboneConfig, rng: &mut impl Rng) {
    let mut cin = 3;
    for (i, &w) in cfg.widths.iter().enumerate() {
        init_conv(params, &format!("backbone.s{i}.down"), cin, w, 3, rng);
        init_conv(params, &format!("backbone.s{i}.res"), w, w, 3, rng);
        cin = w;
    }
    let n = cfg.widths.len();
    // Embedding projections start small so initial dot-product similarities stay O(1).
    let shallow = cfg.widths[n - 2];
    let deep = cfg.widths[n - 1];
    let std_s = 0.5 / ((shallow * 9) as f64).sqrt();
    let std_d = 0.5 / ((deep * 9) as f64).sqrt();
    params.insert("backbone.neck_shallow.w", normal(&[cfg.shallow_channels(), shallow, 3, 3], std_s, rng));
    params.insert("backbone.neck_shallow.b", Tensor::zeros(&[cfg.shallow_channels()]));
    params.insert("backbone.neck_deep.w", normal(&[cfg.deep_channels(), deep, 3, 3], std_d, rng));
    params.insert("backbone.neck_deep.b", Tensor::zeros(&[cfg.deep_channels()]));
}

pub(crate) fn conv(tape: &mut Tape, params: &ParamSet, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = params.get(&format!("{name}.w"))?;
    let pad = w.dim(2) / 2;
    let wv = tape.param(&format!("{name}.w"), w);
    let bv = tape.param(&format!("{name}.b"), params.get(&format!("{name}.b"))?);
    tape.conv2d(x, wv, Some(bv), stride, pad)
}

/// `[3, S, S]` normalized crop → `[key_channels, S/stride, S/stride]` embedding.
///
/// Each stage is `a = relu(conv_s(x))`, `y = relu(a + conv(a))`. The last two
/// stage outputs are projected (the shallower one strided to the deeper one's
/// resolution) and concatenated channel-wise.
pub fn extract(tape: &mut Tape, params: &ParamSet, cfg: &BackboneConfig, frame: Var) -> Result<Var> {
    let s = tape.shape(frame).to_vec();
    ensure!(
        s == [3, cfg.input_size, cfg.input_size],
        "backbone expects a [3, {0}, {0}] crop, got {1:?}",
        cfg.input_size,
        s
    );
    let mut x = frame;
    let mut outs = Vec::with_capacity(cfg.widths.len());
    for (i, &stride) in cfg.strides.iter().enumerate() {
        let a = conv(tape, params, &format!("backbone.s{i}.down"), x, stride)?;
        let a = tape.relu(a)?;
        let r = conv(tape, params, &format!("backbone.s{i}.res"), a, 1)?;
        let y = tape.add(a, r)?;
        x = tape.relu(y)?;
        outs.push(x);
    }
    let n = outs.len();
    let last_stride = cfg.strides[n - 1];
    let shallow = conv(tape, params, "backbone.neck_shallow", outs[n - 2], last_stride)?;
    let deep = conv(tape, params, "backbone.neck_deep", outs[n - 1], 1)?;
    tape.concat(&[shallow, deep], 0)
}
