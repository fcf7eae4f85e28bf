//! Network layers built from tape ops.
//!
//! Two levels are exposed. Free functions (`conv2d`, `batchnorm`, `mhsa`, ...)
//! take tape variables and are what the model code composes. The `*Params`
//! structs own concrete tensors and bind them as constants; they are the unit
//! that head adaptation rewrites and what tests construct by hand.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ReduceOp, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const L2_EPS: f64 = 1e-12;

fn bind<S: Real>(tape: &mut Tape<S>, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.leaf(t.cast())
    } else {
        tape.constant(t.cast())
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    /// `[C_out, C_in, k_h, k_w]`
    pub kernel: Tensor,
    /// `[C_out]`
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        if kernel.rank() != 4 {
            return Err(Error::InvalidShape {
                shape: kernel.shape().to_vec(),
                reason: "conv kernel must be [C_out, C_in, k_h, k_w]",
            });
        }
        if stride == 0 {
            return Err(Error::arg("conv stride must be positive"));
        }
        if let Some(b) = &bias {
            if b.shape() != [kernel.shape()[0]] {
                return Err(Error::mismatch("conv bias", b.shape(), &kernel.shape()[..1]));
            }
        }
        Ok(ConvParams {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    /// Kaiming-normal kernel (`std = sqrt(2 / fan_in)`), zero bias.
    pub fn kaiming(cout: usize, cin: usize, k: usize, stride: usize, padding: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let std = libm_sqrt(2.0 / (cin * k * k) as f64);
        let kernel = Tensor::gaussian_from(&[cout, cin, k, k], rng, std)?;
        let bias = if bias { Some(Tensor::zeros(&[cout])?) } else { None };
        Self::new(kernel, bias, stride, padding)
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel.shape()[2], self.kernel.shape()[3])
    }

    /// `floor((H + 2·pad − k) / stride) + 1` per spatial axis.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_size();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if kh > ph || kw > pw {
            return Err(Error::arg("conv kernel larger than padded input"));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    pub fn bind<S: Real>(&self, tape: &mut Tape<S>, trainable: bool) -> (Var, Option<Var>) {
        let w = bind(tape, &self.kernel, trainable);
        let b = self.bias.as_ref().map(|b| bind(tape, b, trainable));
        (w, b)
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let (w, b) = self.bind(tape, false);
        conv2d(tape, x, w, b, self.stride, self.padding)
    }
}

pub fn conv2d<S: Real>(tape: &mut Tape<S>, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
    tape.conv2d(x, w, b, stride, padding)
}

// ---------------------------------------------------------------------------
// Fully connected

/// `y = x Wᵀ + b` on `[N, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcParams {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Option<Tensor>,
}

impl FcParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: weight.shape().to_vec(),
                reason: "fc weight must be [out, in]",
            });
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(Error::mismatch("fc bias", b.shape(), &weight.shape()[..1]));
            }
        }
        Ok(FcParams { weight, bias })
    }

    pub fn kaiming(out: usize, inp: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let std = libm_sqrt(2.0 / inp as f64);
        let weight = Tensor::gaussian_from(&[out, inp], rng, std)?;
        let bias = if bias { Some(Tensor::zeros(&[out])?) } else { None };
        Self::new(weight, bias)
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let w = bind(tape, &self.weight, false);
        let b = self.bias.as_ref().map(|b| bind(tape, b, false));
        fc(tape, x, w, b)
    }
}

pub fn fc<S: Real>(tape: &mut Tape<S>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let xs = tape.shape(x);
    let ws = tape.shape(w);
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::mismatch("fc", xs, ws));
    }
    let (n, out, inp) = (xs[0], ws[0], ws[1]);
    // Evaluated as a 1×1 conv so the two agree bit for bit.
    let x4 = tape.reshape(x, &[n, inp, 1, 1])?;
    let w4 = tape.reshape(w, &[out, inp, 1, 1])?;
    let y = tape.conv2d(x4, w4, b, 1, 0)?;
    tape.reshape(y, &[n, out])
}

// ---------------------------------------------------------------------------
// Batch normalization

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnLayout {
    /// `[N, C]`
    Vector,
    /// `[N, C, H, W]`
    Map,
}

impl BnLayout {
    fn rank(self) -> usize {
        match self {
            BnLayout::Vector => 2,
            BnLayout::Map => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    pub mode: BnMode,
    pub layout: BnLayout,
}

/// Batch statistics of one train-mode forward, for running-stat updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (`n − 1`) variance, the convention for running estimates.
    pub var: Vec<f64>,
}

impl BatchNormParams {
    /// Fresh layer: unit gamma, zero beta, zero mean, unit variance.
    pub fn identity(channels: usize, affine: bool, layout: BnLayout) -> Result<Self> {
        Ok(BatchNormParams {
            gamma: if affine { Some(Tensor::ones(&[channels])?) } else { None },
            beta: if affine { Some(Tensor::zeros(&[channels])?) } else { None },
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::ones(&[channels])?,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            mode: BnMode::Inference,
            layout,
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn is_affine(&self) -> bool {
        self.gamma.is_some() || self.beta.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for t in [Some(&self.running_var), self.gamma.as_ref(), self.beta.as_ref()].into_iter().flatten() {
            if t.shape() != [c] {
                return Err(Error::mismatch("batchnorm params", t.shape(), &[c]));
            }
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::arg("batchnorm running_var must be non-negative"));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` of the inference-mode map, including affine.
    pub fn inference_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels();
        let mut scale = Vec::with_capacity(c);
        let mut shift = Vec::with_capacity(c);
        for i in 0..c {
            let g = self.gamma.as_ref().map_or(1.0, |g| g.data()[i] as f64);
            let b = self.beta.as_ref().map_or(0.0, |b| b.data()[i] as f64);
            let inv = 1.0 / libm_sqrt(self.running_var.data()[i] as f64 + self.eps);
            scale.push(g * inv);
            shift.push(b - g * self.running_mean.data()[i] as f64 * inv);
        }
        (scale, shift)
    }

    /// Forward with the stored parameters as constants. In train mode the
    /// running statistics are updated with `momentum`.
    pub fn forward<S: Real>(&mut self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let gamma = self.gamma.as_ref().map(|g| bind(tape, g, false));
        let beta = self.beta.as_ref().map(|b| bind(tape, b, false));
        let running = RunningStats {
            mean: self.running_mean.data(),
            var: self.running_var.data(),
        };
        let (y, stats) = batchnorm(tape, x, gamma, beta, running, self.eps, self.mode, self.layout)?;
        if let Some(stats) = stats {
            update_running(&mut self.running_mean, &mut self.running_var, &stats, self.momentum);
        }
        Ok(y)
    }
}

pub fn update_running(mean: &mut Tensor, var: &mut Tensor, stats: &BatchStats, momentum: f64) {
    for (m, &b) in mean.data_mut().iter_mut().zip(&stats.mean) {
        *m = ((1.0 - momentum) * *m as f64 + momentum * b) as f32;
    }
    for (v, &b) in var.data_mut().iter_mut().zip(&stats.var) {
        *v = ((1.0 - momentum) * *v as f64 + momentum * b) as f32;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunningStats<'a> {
    pub mean: &'a [f32],
    pub var: &'a [f32],
}

/// Batch normalization over every axis except the channel axis 1.
///
/// Inference mode is the per-channel affine
/// `gamma·(x − running_mean)/sqrt(running_var + eps) + beta`. Train mode
/// normalizes with the biased batch variance and returns the batch statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm<S: Real>(
    tape: &mut Tape<S>,
    x: Var,
    gamma: Option<Var>,
    beta: Option<Var>,
    running: RunningStats<'_>,
    eps: f64,
    mode: BnMode,
    layout: BnLayout,
) -> Result<(Var, Option<BatchStats>)> {
    let shape = tape.shape(x).to_vec();
    let c = running.mean.len();
    if shape.len() != layout.rank() || shape[1] != c || running.var.len() != c {
        return Err(Error::mismatch("batchnorm", &shape, &[c]));
    }
    let (normed, stats) = match mode {
        BnMode::Train => {
            let y = tape.batch_normalize(x, eps)?;
            let (n, inner) = (shape[0], shape[2..].iter().product::<usize>());
            let s = crate::autodiff::kernels::batch_stats(tape.value(x).data(), n, c, inner);
            let count = s.count as f64;
            let unbiased = if s.count > 1 { count / (count - 1.0) } else { 1.0 };
            let stats = BatchStats {
                mean: s.mean,
                var: s.var.iter().map(|v| v * unbiased).collect(),
            };
            (y, Some(stats))
        }
        BnMode::Inference => {
            let inv: Vec<f64> = running.var.iter().map(|&v| 1.0 / libm_sqrt(v as f64 + eps)).collect();
            let scale = Tensor::<S>::new(&[c], inv.iter().map(|&v| S::from_f64(v)).collect())?;
            let shift = Tensor::<S>::new(
                &[c],
                running.mean.iter().zip(&inv).map(|(&m, &i)| S::from_f64(-(m as f64) * i)).collect(),
            )?;
            let scale = tape.constant(scale);
            let shift = tape.constant(shift);
            (tape.channel_affine(x, scale, shift)?, None)
        }
    };
    let y = match (gamma, beta) {
        (None, None) => normed,
        (g, b) => {
            let g = match g {
                Some(g) => g,
                None => tape.constant(Tensor::<S>::ones(&[c])?),
            };
            let b = match b {
                Some(b) => b,
                None => tape.constant(Tensor::<S>::zeros(&[c])?),
            };
            tape.channel_affine(normed, g, b)?
        }
    };
    Ok((y, stats))
}

// ---------------------------------------------------------------------------
// Activations, pooling, normalization, resampling

pub fn relu<S: Real>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    tape.relu(x)
}

/// Channel-wise ReLU: zero every `(n, c)` channel whose spatial mean is
/// negative; other channels pass through unchanged, negative pixels included.
pub fn cw_relu<S: Real>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    tape.cw_relu(x)
}

/// Spatial mean per channel, `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<S: Real>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    if tape.shape(x).len() != 4 {
        return Err(Error::InvalidShape {
            shape: tape.shape(x).to_vec(),
            reason: "global_avg_pool expects [N, C, H, W]",
        });
    }
    tape.reduce(ReduceOp::Mean, x, &[2, 3])
}

/// `v / max(‖v‖, eps)` along `axis`.
pub fn l2_normalize<S: Real>(tape: &mut Tape<S>, v: Var, axis: usize) -> Result<Var> {
    tape.l2_normalize(v, axis, L2_EPS)
}

/// Half-pixel-center bilinear resampling to `(h, w)`.
pub fn bilinear_resize<S: Real>(tape: &mut Tape<S>, t: Var, h: usize, w: usize) -> Result<Var> {
    tape.bilinear_resize(t, h, w)
}

/// Value-level bilinear resize, used for images and teacher maps.
pub fn resize_tensor(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if t.rank() != 4 || h == 0 || w == 0 {
        return Err(Error::arg("resize expects [N, C, H, W] and a positive target"));
    }
    let s = t.shape();
    let data = crate::autodiff::kernels::bilinear_forward(t.data(), s[0] * s[1], s[2], s[3], h, w);
    Tensor::new(&[s[0], s[1], h, w], data)
}

/// Value-level global average pool in `f64`, `[N, C, H, W] -> [N][C]`.
pub fn pool_tensor(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    if t.rank() != 4 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "expected [N, C, H, W]",
        });
    }
    let s = t.shape();
    let hw = s[2] * s[3];
    Ok((0..s[0])
        .map(|n| {
            (0..s[1])
                .map(|c| {
                    let off = (n * s[1] + c) * hw;
                    t.data()[off..off + hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64
                })
                .collect()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Multi-head self-attention

/// Self-attention over spatial positions. The q/k/v projections of all heads
/// are stored stacked in one 1×1 conv each (`heads·head_dim` output channels,
/// head `h` owning channels `h·head_dim..(h+1)·head_dim`); `out` maps the
/// concatenated heads back to the input channel count. No positional encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhsaParams {
    pub heads: usize,
    pub head_dim: usize,
    pub q: ConvParams,
    pub k: ConvParams,
    pub v: ConvParams,
    pub out: ConvParams,
}

impl MhsaParams {
    pub fn random(channels: usize, heads: usize, head_dim: usize, rng: &mut Rng) -> Result<Self> {
        let inner = heads * head_dim;
        let proj = |rng: &mut Rng, cout, cin| -> Result<ConvParams> {
            let std = libm_sqrt(1.0 / cin as f64);
            ConvParams::new(
                Tensor::gaussian_from(&[cout, cin, 1, 1], rng, std)?,
                Some(Tensor::zeros(&[cout])?),
                1,
                0,
            )
        };
        let p = MhsaParams {
            heads,
            head_dim,
            q: proj(rng, inner, channels)?,
            k: proj(rng, inner, channels)?,
            v: proj(rng, inner, channels)?,
            out: proj(rng, channels, inner)?,
        };
        p.validate(channels)?;
        Ok(p)
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let inner = self.heads * self.head_dim;
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::arg("mhsa needs at least one head of positive dim"));
        }
        for p in [&self.q, &self.k, &self.v] {
            if p.kernel.shape() != [inner, channels, 1, 1] {
                return Err(Error::mismatch("mhsa q/k/v", p.kernel.shape(), &[inner, channels, 1, 1]));
            }
        }
        if self.out.kernel.shape() != [channels, inner, 1, 1] {
            return Err(Error::mismatch("mhsa out", self.out.kernel.shape(), &[channels, inner, 1, 1]));
        }
        Ok(())
    }

    pub fn bind<S: Real>(&self, tape: &mut Tape<S>, trainable: bool) -> MhsaVars {
        let (q_w, q_b) = self.q.bind(tape, trainable);
        let (k_w, k_b) = self.k.bind(tape, trainable);
        let (v_w, v_b) = self.v.bind(tape, trainable);
        let (o_w, o_b) = self.out.bind(tape, trainable);
        MhsaVars {
            heads: self.heads,
            head_dim: self.head_dim,
            q: (q_w, q_b),
            k: (k_w, k_b),
            v: (v_w, v_b),
            out: (o_w, o_b),
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        self.validate(tape.shape(x).get(1).copied().unwrap_or(0))?;
        let vars = self.bind(tape, false);
        Ok(mhsa(tape, x, &vars)?.output)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MhsaVars {
    pub heads: usize,
    pub head_dim: usize,
    pub q: (Var, Option<Var>),
    pub k: (Var, Option<Var>),
    pub v: (Var, Option<Var>),
    pub out: (Var, Option<Var>),
}

pub struct MhsaOutput {
    pub output: Var,
    /// `[N·heads, L, L]`; row `i` holds query position `i`'s weights over keys.
    pub attention: Var,
}

pub fn mhsa<S: Real>(tape: &mut Tape<S>, x: Var, p: &MhsaVars) -> Result<MhsaOutput> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::InvalidShape {
            shape,
            reason: "mhsa expects [N, C, H, W]",
        });
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let l = h * w;
    let (heads, d) = (p.heads, p.head_dim);
    let split = |tape: &mut Tape<S>, (wv, bv): (Var, Option<Var>)| -> Result<Var> {
        let y = tape.conv2d(x, wv, bv, 1, 0)?;
        tape.reshape(y, &[n * heads, d, l])
    };
    let q = split(tape, p.q)?;
    let k = split(tape, p.k)?;
    let v = split(tape, p.v)?;
    let qt = tape.permute(q, &[0, 2, 1])?;
    let scores = tape.batch_matmul(qt, k)?;
    let scores = tape.scale(scores, 1.0 / libm_sqrt(d as f64))?;
    let attention = tape.softmax(scores)?;
    let at = tape.permute(attention, &[0, 2, 1])?;
    let o = tape.batch_matmul(v, at)?;
    let o = tape.reshape(o, &[n, heads * d, h, w])?;
    let output = tape.conv2d(o, p.out.0, p.out.1, 1, 0)?;
    Ok(MhsaOutput { output, attention })
}

#[inline]
fn libm_sqrt(v: f64) -> f64 {
    num_traits::Float::sqrt(v)
}
