//! Effective receptive field probe.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BackboneSpec, BnHyper, Ctx, Mode, ParamStore, StudentSpec};
use crate::rng::{tag, Rng};
use crate::tensor::Tensor;

/// Samples per forward pass.
const CHUNK: usize = 16;

/// Normalized input-gradient magnitude of one output pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ErfMap {
    /// `[H, W]`, non-negative, maximum 1 unless degenerate.
    pub values: Tensor,
    /// Probed output pixel `(y, x)`.
    pub center: (usize, usize),
    /// Input pixel under the probed output pixel, where radius windows are centered.
    pub input_center: (usize, usize),
    /// Output map size `(h, w)`.
    pub output_size: (usize, usize),
    /// Set when every gradient was zero.
    pub degenerate: bool,
}

impl ErfMap {
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values.at(&[y, x])
    }

    /// The four corner values, clockwise from top left.
    pub fn corners(&self) -> [f32; 4] {
        let (h, w) = (self.values.shape()[0], self.values.shape()[1]);
        [self.at(0, 0), self.at(0, w - 1), self.at(h - 1, w - 1), self.at(h - 1, 0)]
    }

    /// Bounding box `(y0, y1, x0, x1)` (inclusive) of the nonzero values.
    pub fn support(&self) -> Option<(usize, usize, usize, usize)> {
        let w = self.values.shape()[1];
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (i, &v) in self.values.data().iter().enumerate() {
            if v != 0.0 {
                let (y, x) = (i / w, i % w);
                bb = Some(match bb {
                    None => (y, y, x, x),
                    Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
                });
            }
        }
        bb
    }
}

/// ERF of the center output pixel of `forward`, a map from `[N, C, S, S]`
/// inputs to `[N, D, h, w]` outputs.
///
/// For each standard-Gaussian input the gradient of the sum over channels of
/// the center output pixel is taken with respect to the input; `|grad|` is
/// summed over input channels, averaged over samples and scaled to a maximum
/// of 1. For even output sizes the center is the lower of the two middle
/// indices.
pub fn compute_erf<F>(forward: F, in_channels: usize, input_size: usize, n_samples: usize, seed: u64) -> Result<ErfMap>
where
    F: Fn(&mut Tape<f32>, Var) -> Result<Var>,
{
    if n_samples == 0 || input_size == 0 || in_channels == 0 {
        return Err(Error::arg("erf probe needs a positive sample count, input size and channel count"));
    }
    let plane = input_size * input_size;
    let mut acc = vec![0.0f64; plane];
    let mut rng = Rng::stream(seed, tag::PROBE, &[]);
    let mut geometry = None;
    let mut done = 0;
    while done < n_samples {
        let n = CHUNK.min(n_samples - done);
        let x = Tensor::gaussian_from(&[n, in_channels, input_size, input_size], &mut rng, 1.0)?;
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(x);
        let y = forward(&mut tape, xv)?;
        let shape = tape.shape(y).to_vec();
        if shape.len() != 4 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::InvalidShape {
                shape,
                reason: "erf probe needs a model with a spatial output",
            });
        }
        let (oh, ow) = (shape[2], shape[3]);
        let (cy, cx) = ((oh - 1) / 2, (ow - 1) / 2);
        geometry = Some((oh, ow, cy, cx));
        let row = tape.narrow(y, 2, cy, 1)?;
        let pix = tape.narrow(row, 3, cx, 1)?;
        let target = tape.sum_all(pix)?;
        tape.backward(target)?;
        if let Some(g) = tape.grad(xv) {
            for sample in g.data().chunks(in_channels * plane) {
                for ch in sample.chunks(plane) {
                    for (a, &v) in acc.iter_mut().zip(ch) {
                        *a += (v as f64).abs();
                    }
                }
            }
        }
        done += n;
    }
    let (oh, ow, cy, cx) = geometry.expect("at least one chunk");
    let max = acc.iter().copied().fold(0.0f64, f64::max);
    let degenerate = max == 0.0;
    let values: Vec<f32> = acc.iter().map(|&a| if degenerate { 0.0 } else { (a / max) as f32 }).collect();
    Ok(ErfMap {
        values: Tensor::new(&[input_size, input_size], values)?,
        center: (cy, cx),
        input_center: (cy * input_size / oh, cx * input_size / ow),
        output_size: (oh, ow),
        degenerate,
    })
}

/// Smallest `r` such that the `(2r+1)²` window around the input center holds
/// at least `mass` of the total.
pub fn erf_radius(m: &ErfMap, mass: f64) -> Result<usize> {
    if m.degenerate {
        return Err(Error::Degenerate("erf map is all zero"));
    }
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::arg("mass must lie in (0, 1]"));
    }
    let (h, w) = (m.values.shape()[0], m.values.shape()[1]);
    let v = m.values.data();
    let total: f64 = v.iter().map(|&x| x as f64).sum();
    let (cy, cx) = m.input_center;
    let far = cy.max(h - 1 - cy).max(cx).max(w - 1 - cx);
    for r in 0..=far {
        let (y0, y1) = (cy.saturating_sub(r), (cy + r).min(h - 1));
        let (x0, x1) = (cx.saturating_sub(r), (cx + r).min(w - 1));
        let inside: f64 = (y0..=y1).map(|y| v[y * w + x0..=y * w + x1].iter().map(|&x| x as f64).sum::<f64>()).sum();
        if inside >= mass * total * (1.0 - 1e-12) {
            return Ok(r);
        }
    }
    Ok(far)
}

/// ERF of a backbone's output map, BN with running statistics.
pub fn backbone_erf(spec: &BackboneSpec, store: &ParamStore, prefix: &str, input_size: usize, n: usize, seed: u64) -> Result<ErfMap> {
    compute_erf(
        |tape, x| {
            let mut ctx = Ctx::new(store, Mode::Frozen, BnHyper::default());
            spec.forward(&mut ctx, tape, x, prefix)
        },
        spec.in_channels,
        input_size,
        n,
        seed,
    )
}

/// ERF of a student's loss-facing output (after the head and MHSA, if any).
pub fn student_erf(spec: &StudentSpec, store: &ParamStore, input_size: usize, n: usize, seed: u64) -> Result<ErfMap> {
    compute_erf(
        |tape, x| {
            let mut ctx = Ctx::new(store, Mode::Frozen, BnHyper::default());
            Ok(spec.forward(&mut ctx, tape, x)?.s_star)
        },
        spec.backbone.in_channels,
        input_size,
        n,
        seed,
    )
}
