//! Rewriting vector-input projection heads into map-input heads.
//!
//! A head trained on pooled vectors (`FC`, `BN`, `ReLU` in any order) is turned
//! into one that consumes feature maps: each FC becomes a 1×1 conv, vector BN
//! becomes map BN with the same statistics, and ReLU becomes channel-wise
//! ReLU. Pooling the adapted head's output then reproduces the original head
//! applied to the pooled input.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{self, BatchNormParams, BnLayout, BnMode, ConvParams, FcParams, RunningStats};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Vector,
    Map,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadLayer {
    Fc(FcParams),
    Bn(BatchNormParams),
    Relu,
    Conv1x1(ConvParams),
    CwRelu,
    /// A layer this crate does not know how to adapt, kept so it can be reported.
    Unsupported { name: String },
}

impl HeadLayer {
    pub fn name(&self) -> &str {
        match self {
            HeadLayer::Fc(_) => "fc",
            HeadLayer::Bn(_) => "bn",
            HeadLayer::Relu => "relu",
            HeadLayer::Conv1x1(_) => "conv1x1",
            HeadLayer::CwRelu => "cw_relu",
            HeadLayer::Unsupported { name } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub layers: Vec<HeadLayer>,
    pub input_kind: InputKind,
}

impl HeadSpec {
    pub fn new(layers: Vec<HeadLayer>, input_kind: InputKind) -> Result<Self> {
        let h = HeadSpec { layers, input_kind };
        h.validate()?;
        Ok(h)
    }

    /// Input channel count, or `None` for a head with no dimension-fixing layer.
    pub fn in_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            HeadLayer::Fc(fc) => Some(fc.in_features()),
            HeadLayer::Conv1x1(c) => Some(c.in_channels()),
            HeadLayer::Bn(bn) => Some(bn.channels()),
            _ => None,
        })
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            HeadLayer::Fc(fc) => Some(fc.out_features()),
            HeadLayer::Conv1x1(c) => Some(c.out_channels()),
            HeadLayer::Bn(bn) => Some(bn.channels()),
            _ => None,
        })
    }

    /// Dimension chaining and per-kind layer rules.
    pub fn validate(&self) -> Result<()> {
        let mut dim: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let bad_kind = match (self.input_kind, layer) {
                (_, HeadLayer::Unsupported { name }) => {
                    return Err(Error::UnsupportedLayer(format!("layer {i}: {name}")));
                }
                (InputKind::Vector, HeadLayer::Conv1x1(_) | HeadLayer::CwRelu) => true,
                (InputKind::Map, HeadLayer::Fc(_)) => true,
                _ => false,
            };
            if bad_kind {
                return Err(Error::UnsupportedLayer(format!(
                    "layer {i}: {} not allowed in a {:?} head",
                    layer.name(),
                    self.input_kind
                )));
            }
            let (inp, out) = match layer {
                HeadLayer::Fc(fc) => (Some(fc.in_features()), Some(fc.out_features())),
                HeadLayer::Conv1x1(c) => {
                    if c.kernel_size() != (1, 1) || c.stride != 1 || c.padding != 0 {
                        return Err(Error::UnsupportedLayer(format!("layer {i}: conv is not 1x1/stride 1/pad 0")));
                    }
                    (Some(c.in_channels()), Some(c.out_channels()))
                }
                HeadLayer::Bn(bn) => {
                    bn.validate()?;
                    let want = match self.input_kind {
                        InputKind::Vector => BnLayout::Vector,
                        InputKind::Map => BnLayout::Map,
                    };
                    if bn.layout != want {
                        return Err(Error::UnsupportedLayer(format!("layer {i}: bn layout does not match head kind")));
                    }
                    (Some(bn.channels()), Some(bn.channels()))
                }
                _ => (None, None),
            };
            if let (Some(d), Some(inp)) = (dim, inp) {
                if d != inp {
                    return Err(Error::mismatch("head layer chain", &[d], &[inp]));
                }
            }
            if out.is_some() {
                dim = out;
            }
        }
        Ok(())
    }

    /// Apply the head. Vector heads take `[N, C]`, map heads `[N, C, H, W]`.
    /// BN layers run in their stored mode without touching running statistics.
    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                HeadLayer::Fc(fc) => fc.forward(tape, h)?,
                HeadLayer::Conv1x1(c) => c.forward(tape, h)?,
                HeadLayer::Bn(bn) => {
                    let g = bn.gamma.as_ref().map(|g| tape.constant(g.cast()));
                    let b = bn.beta.as_ref().map(|b| tape.constant(b.cast()));
                    let stats = RunningStats {
                        mean: bn.running_mean.data(),
                        var: bn.running_var.data(),
                    };
                    layers::batchnorm(tape, h, g, b, stats, bn.eps, bn.mode, bn.layout)?.0
                }
                HeadLayer::Relu => tape.relu(h)?,
                HeadLayer::CwRelu => tape.cw_relu(h)?,
                HeadLayer::Unsupported { name } => return Err(Error::UnsupportedLayer(name.clone())),
            };
        }
        Ok(h)
    }

    /// Value-level forward in `f32`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Structure summary such as `Conv-BN-CW-ReLU-Conv`.
    pub fn structure(&self) -> String {
        let names: Vec<&str> = self
            .layers
            .iter()
            .map(|l| match l {
                HeadLayer::Fc(_) => "FC",
                HeadLayer::Bn(_) => "BN",
                HeadLayer::Relu => "ReLU",
                HeadLayer::Conv1x1(_) => "Conv",
                HeadLayer::CwRelu => "CW-ReLU",
                HeadLayer::Unsupported { name } => name.as_str(),
            })
            .collect();
        names.join("-")
    }
}

fn require_inference(bn: &BatchNormParams) -> Result<()> {
    if bn.mode != BnMode::Inference {
        return Err(Error::TrainModeBatchNorm("head adaptation"));
    }
    Ok(())
}

/// Fold an inference-mode BN into the preceding FC.
pub fn fuse_fc_bn(fc: &FcParams, bn: &BatchNormParams) -> Result<FcParams> {
    require_inference(bn)?;
    let (out, inp) = (fc.out_features(), fc.in_features());
    if bn.channels() != out {
        return Err(Error::mismatch("fuse_fc_bn", &[out], &[bn.channels()]));
    }
    let (scale, shift) = bn.inference_affine();
    let mut w = fc.weight.clone();
    for o in 0..out {
        for v in &mut w.data_mut()[o * inp..(o + 1) * inp] {
            *v = (*v as f64 * scale[o]) as f32;
        }
    }
    let b: Vec<f32> = (0..out)
        .map(|o| {
            let b0 = fc.bias.as_ref().map_or(0.0, |b| b.data()[o] as f64);
            (scale[o] * b0 + shift[o]) as f32
        })
        .collect();
    FcParams::new(w, Some(Tensor::new(&[out], b)?))
}

/// Fold an inference-mode BN into the preceding 1×1 conv.
pub fn fuse_conv_bn(conv: &ConvParams, bn: &BatchNormParams) -> Result<ConvParams> {
    let (out, inp) = (conv.out_channels(), conv.in_channels());
    let fc = FcParams::new(conv.kernel.clone().reshape(&[out, inp * conv.kernel_size().0 * conv.kernel_size().1])?, conv.bias.clone())?;
    let fused = fuse_fc_bn(&fc, bn)?;
    ConvParams::new(fused.weight.reshape(conv.kernel.shape())?, fused.bias, conv.stride, conv.padding)
}

/// `[out, in]` weights become a `[out, in, 1, 1]` kernel, stride 1, no padding.
pub fn fc_to_conv1x1(fc: &FcParams) -> ConvParams {
    let (out, inp) = (fc.out_features(), fc.in_features());
    ConvParams {
        kernel: fc.weight.clone().reshape(&[out, inp, 1, 1]).expect("same element count"),
        bias: fc.bias.clone(),
        stride: 1,
        padding: 0,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AdaptOptions {
    /// Remove a final BN without affine parameters before adapting.
    pub drop_trailing_affine_free_bn: bool,
    /// Keep plain ReLU instead of CW-ReLU. This breaks output invariance and
    /// exists only to compare against the correct rewrite.
    pub keep_relu: bool,
}

/// Remove a trailing affine-free BN, if present.
pub fn drop_trailing_affine_free_bn(h: &HeadSpec) -> HeadSpec {
    let mut out = h.clone();
    if let Some(HeadLayer::Bn(bn)) = out.layers.last() {
        if !bn.is_affine() {
            out.layers.pop();
        }
    }
    out
}

pub fn adapt_head(h: &HeadSpec, drop_trailing_affine_free_bn: bool) -> Result<HeadSpec> {
    adapt_head_with(
        h,
        AdaptOptions {
            drop_trailing_affine_free_bn,
            keep_relu: false,
        },
    )
}

pub fn adapt_head_with(h: &HeadSpec, opts: AdaptOptions) -> Result<HeadSpec> {
    if h.input_kind == InputKind::Map {
        return Err(Error::AlreadyAdapted);
    }
    h.validate()?;
    let src = if opts.drop_trailing_affine_free_bn {
        drop_trailing_affine_free_bn(h)
    } else {
        h.clone()
    };
    let mut layers = Vec::with_capacity(src.layers.len());
    for layer in src.layers {
        layers.push(match layer {
            HeadLayer::Fc(fc) => HeadLayer::Conv1x1(fc_to_conv1x1(&fc)),
            HeadLayer::Bn(mut bn) => {
                require_inference(&bn)?;
                bn.layout = BnLayout::Map;
                HeadLayer::Bn(bn)
            }
            HeadLayer::Relu if opts.keep_relu => HeadLayer::Relu,
            HeadLayer::Relu => HeadLayer::CwRelu,
            other => return Err(Error::UnsupportedLayer(String::from(other.name()))),
        });
    }
    HeadSpec::new(layers, InputKind::Map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub max_abs_dev: f64,
    pub pass: bool,
    pub trials: usize,
    pub spatial_size: usize,
    pub tol: f64,
}

impl core::fmt::Display for InvarianceReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        writeln!(f, "trials: {}", self.trials)?;
        writeln!(f, "spatial: {0}x{0}", self.spatial_size)?;
        writeln!(f, "max_abs_dev: {:.3e}", self.max_abs_dev)?;
        writeln!(f, "tol: {:.1e}", self.tol)?;
        write!(f, "result: {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

pub const DEFAULT_TRIALS: usize = 64;
pub const DEFAULT_SPATIAL: usize = 7;
pub const DEFAULT_TOL: f64 = 1e-5;

/// Compare `original(pool(x))` with `pool(adapted(x))` on `trials` standard
/// Gaussian maps of size `spatial_size × spatial_size`.
pub fn verify_invariance(
    original: &HeadSpec,
    adapted: &HeadSpec,
    trials: usize,
    spatial_size: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<InvarianceReport> {
    if original.input_kind != InputKind::Vector || adapted.input_kind != InputKind::Map {
        return Err(Error::arg("verify_invariance expects a vector head and a map head"));
    }
    if trials == 0 || spatial_size == 0 {
        return Err(Error::arg("verify_invariance needs trials and spatial size ≥ 1"));
    }
    let (ci, co) = (original.in_dim(), original.out_dim());
    if ci != adapted.in_dim() || co != adapted.out_dim() {
        return Err(Error::arg(format!(
            "head dims differ: original {:?}->{:?}, adapted {:?}->{:?}",
            ci,
            co,
            adapted.in_dim(),
            adapted.out_dim()
        )));
    }
    let c = ci.ok_or(Error::Degenerate("head has no dimensioned layer"))?;
    let x = Tensor::gaussian_from(&[trials, c, spatial_size, spatial_size], rng, 1.0)?;

    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x);
    let pooled = layers::global_avg_pool(&mut tape, xv)?;
    let lhs = original.forward(&mut tape, pooled)?;
    let mapped = adapted.forward(&mut tape, xv)?;
    let rhs = layers::global_avg_pool(&mut tape, mapped)?;
    let max_abs_dev = tape.value(lhs).max_abs_diff(tape.value(rhs));
    Ok(InvarianceReport {
        max_abs_dev,
        pass: max_abs_dev <= tol,
        trials,
        spatial_size,
        tol,
    })
}

/// A random inference-mode BN with `c` channels.
pub fn random_bn(c: usize, affine: bool, layout: BnLayout, rng: &mut Rng) -> Result<BatchNormParams> {
    let mut bn = BatchNormParams::identity(c, affine, layout)?;
    let draw = |rng: &mut Rng, lo: f64, hi: f64| -> Result<Tensor> {
        Tensor::new(&[c], (0..c).map(|_| rng.range_f64(lo, hi) as f32).collect())
    };
    bn.running_mean = Tensor::gaussian_from(&[c], rng, 0.5)?;
    bn.running_var = draw(rng, 0.25, 2.0)?;
    if affine {
        bn.gamma = Some(draw(rng, 0.5, 1.5)?);
        bn.beta = Some(Tensor::gaussian_from(&[c], rng, 0.5)?);
    }
    Ok(bn)
}

/// A random vector head from the FC / BN / ReLU grammar with
/// `1..=max_layers` layers, the first of which is an FC.
pub fn random_grammar_head(rng: &mut Rng, in_dim: usize, max_layers: usize, max_width: usize) -> Result<HeadSpec> {
    let n = rng.range_usize(1, max_layers.max(1) + 1);
    let mut dim = in_dim;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let pick = if i == 0 { 0 } else { rng.range_usize(0, 3) };
        out.push(match pick {
            0 => {
                let width = rng.range_usize(1, max_width + 1);
                let bias = rng.bernoulli(0.5);
                let mut fc = FcParams::kaiming(width, dim, bias, rng)?;
                if let Some(b) = &mut fc.bias {
                    *b = Tensor::gaussian_from(&[width], rng, 0.3)?;
                }
                dim = width;
                HeadLayer::Fc(fc)
            }
            1 => {
                let affine = rng.bernoulli(0.5);
                HeadLayer::Bn(random_bn(dim, affine, BnLayout::Vector, rng)?)
            }
            _ => HeadLayer::Relu,
        });
    }
    HeadSpec::new(out, InputKind::Vector)
}
