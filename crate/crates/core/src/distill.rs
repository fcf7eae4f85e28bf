//! Contrastive distillation losses and the negative-sample queue.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ReduceOp, Tape, Var};
use crate::error::{Error, Result};
use crate::layers;
use crate::real::Real;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Memory queue

/// FIFO ring buffer of unit-norm vectors used as contrastive negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    buf: Vec<f32>,
    /// Slot the next push writes to.
    head: usize,
    len: usize,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("queue dim must be positive"));
        }
        Ok(MemoryQueue {
            capacity,
            dim,
            buf: alloc::vec![0.0; capacity * dim],
            head: 0,
            len: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Normalize `v` and append it, evicting the oldest entry when full.
    pub fn push_vector(&mut self, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::mismatch("queue push", &[v.len()], &[self.dim]));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        let norm = num_traits::Float::sqrt(v.iter().map(|&x| x as f64 * x as f64).sum::<f64>()).max(layers::L2_EPS);
        let slot = &mut self.buf[self.head * self.dim..(self.head + 1) * self.dim];
        for (dst, &x) in slot.iter_mut().zip(v) {
            *dst = (x as f64 / norm) as f32;
        }
        self.head = (self.head + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    /// Append each row of a `[N, D]` tensor.
    pub fn push_rows(&mut self, rows: &Tensor) -> Result<()> {
        if rows.rank() != 2 || rows.shape()[1] != self.dim {
            return Err(Error::mismatch("queue push", rows.shape(), &[self.dim]));
        }
        for r in rows.data().chunks(self.dim) {
            self.push_vector(r)?;
        }
        Ok(())
    }

    /// Pool each `[C, H, W]` sample of a `[N, C, H, W]` map and append it.
    pub fn push_maps(&mut self, t: &Tensor) -> Result<()> {
        if t.rank() != 4 || t.shape()[1] != self.dim {
            return Err(Error::mismatch("queue push", t.shape(), &[self.dim]));
        }
        for pooled in layers::pool_tensor(t)? {
            let v: Vec<f32> = pooled.iter().map(|&x| x as f32).collect();
            self.push_vector(&v)?;
        }
        Ok(())
    }

    /// Entry `i` in insertion order, oldest first.
    pub fn get(&self, i: usize) -> Option<&[f32]> {
        if i >= self.len {
            return None;
        }
        let start = (self.head + self.capacity - self.len) % self.capacity.max(1);
        let slot = (start + i) % self.capacity;
        Some(&self.buf[slot * self.dim..(slot + 1) * self.dim])
    }

    /// Rebuild a queue from a [`snapshot`](Self::snapshot). Rows are copied
    /// verbatim, not renormalized.
    pub fn restore(capacity: usize, dim: usize, rows: Option<&Tensor>) -> Result<Self> {
        let mut q = MemoryQueue::new(capacity, dim)?;
        let Some(rows) = rows else { return Ok(q) };
        if rows.rank() != 2 || rows.shape()[1] != dim || rows.shape()[0] > capacity {
            return Err(Error::mismatch("queue restore", rows.shape(), &[capacity, dim]));
        }
        let n = rows.shape()[0];
        q.buf[..n * dim].copy_from_slice(rows.data());
        q.len = n;
        q.head = if capacity == 0 { 0 } else { n % capacity };
        Ok(q)
    }

    /// All entries as `[len, D]`, oldest first, or `None` when empty.
    pub fn snapshot(&self) -> Option<Tensor> {
        if self.len == 0 {
            return None;
        }
        let mut data = Vec::with_capacity(self.len * self.dim);
        for i in 0..self.len {
            data.extend_from_slice(self.get(i).expect("in range"));
        }
        Some(Tensor::new(&[self.len, self.dim], data).expect("non-empty"))
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossLevel {
    Pixel,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnqueueViews {
    One,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub symmetric: bool,
    pub level: LossLevel,
    pub enqueue: EnqueueViews,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.2,
            symmetric: true,
            level: LossLevel::Pixel,
            enqueue: EnqueueViews::Both,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config {
            path: "loss.tau".into(),
            reason: alloc::format!("must be a positive number, got {tau}"),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// InfoNCE

/// `−log(exp(s·t/τ) / (exp(s·t/τ) + Σ_k exp(s·n_k/τ)))` for one vector triple.
pub fn pixel_infonce(s: &[f64], t: &[f64], negs: &[&[f64]], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let pos = dot(s, t) / tau;
    let logits: Vec<f64> = core::iter::once(pos).chain(negs.iter().map(|n| dot(s, n) / tau)).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + num_traits::Float::ln(logits.iter().map(|&l| num_traits::Float::exp(l - m)).sum::<f64>());
    Ok(lse - pos)
}

/// Per-row InfoNCE on the tape.
///
/// `s` and `t` are `[P, D]` rows, already normalized; `negs` is `[K, D]`.
/// Returns `[P]` losses. `t` and `negs` receive no gradient.
pub fn infonce_rows<S: Real>(tape: &mut Tape<S>, s: Var, t: Var, negs: Option<&Tensor>, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let ss = tape.shape(s).to_vec();
    if ss.len() != 2 || tape.shape(t) != ss.as_slice() {
        return Err(Error::mismatch("infonce", &ss, tape.shape(t)));
    }
    let p = ss[0];
    let t = tape.detach(t);
    let prod = tape.mul(s, t)?;
    let pos = tape.reduce(ReduceOp::Sum, prod, &[1])?;
    let pos = tape.reshape(pos, &[p, 1])?;
    // Logits are taken relative to the positive, so the positive column is 0
    // and the loss is logsumexp over [0, (s·n_k − s·t)/τ].
    let zero = tape.constant(Tensor::<S>::zeros(&[p, 1])?);
    let logits = match negs {
        Some(n) => {
            if n.rank() != 2 || n.shape()[1] != ss[1] {
                return Err(Error::mismatch("infonce negatives", n.shape(), &ss[1..]));
            }
            let k = n.shape()[0];
            let nt = tape.constant(transpose(n)?.cast());
            let neg = tape.matmul(s, nt)?;
            let ones = tape.constant(Tensor::<S>::ones(&[1, k])?);
            let pos_k = tape.matmul(pos, ones)?;
            let diff = tape.sub(neg, pos_k)?;
            let diff = tape.scale(diff, 1.0 / tau)?;
            tape.concat(&[zero, diff], 1)?
        }
        None => zero,
    };
    tape.logsumexp(logits)
}

fn transpose(t: &Tensor) -> Result<Tensor> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut data = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            data.push(t.data()[i * c + j]);
        }
    }
    Tensor::new(&[c, r], data)
}

/// `[N, D, H, W] -> [N·H·W, D]`, pixel rows in `(n, y, x)` order.
pub fn pixels_as_rows<S: Real>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            shape: s,
            reason: "expected [N, D, H, W]",
        });
    }
    let p = tape.permute(x, &[0, 2, 3, 1])?;
    tape.reshape(p, &[s[0] * s[2] * s[3], s[1]])
}

/// Mean per-pixel InfoNCE between the student map `s_star` and teacher map `t`.
///
/// The teacher is detached and, when its spatial size differs, bilinearly
/// resized to the student's. Both sides are normalized per pixel.
pub fn pcd_loss<S: Real>(tape: &mut Tape<S>, s_star: Var, t: Var, negs: Option<&Tensor>, tau: f64) -> Result<Var> {
    let (ss, ts) = (tape.shape(s_star).to_vec(), tape.shape(t).to_vec());
    if ss.len() != 4 || ts.len() != 4 || ss[0] != ts[0] || ss[1] != ts[1] {
        return Err(Error::mismatch("pcd_loss", &ss, &ts));
    }
    let mut t = tape.detach(t);
    if ts[2..] != ss[2..] {
        t = tape.bilinear_resize(t, ss[2], ss[3])?;
    }
    let tn = layers::l2_normalize(tape, t, 1)?;
    let sn = layers::l2_normalize(tape, s_star, 1)?;
    let sr = pixels_as_rows(tape, sn)?;
    let tr = pixels_as_rows(tape, tn)?;
    let per_pixel = infonce_rows(tape, sr, tr, negs, tau)?;
    tape.mean_all(per_pixel)
}

fn pooled_rows<S: Real>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    match tape.shape(x).len() {
        2 => Ok(x),
        4 => layers::global_avg_pool(tape, x),
        _ => Err(Error::InvalidShape {
            shape: tape.shape(x).to_vec(),
            reason: "expected [N, D] or [N, D, H, W]",
        }),
    }
}

/// Image-level InfoNCE: pool both sides, normalize, one term per sample.
/// Either input may be a map `[N, D, H, W]` or an already pooled `[N, D]`.
pub fn image_level_loss<S: Real>(tape: &mut Tape<S>, s_star: Var, t: Var, negs: Option<&Tensor>, tau: f64) -> Result<Var> {
    let t = tape.detach(t);
    let sp = pooled_rows(tape, s_star)?;
    let tp = pooled_rows(tape, t)?;
    let sn = layers::l2_normalize(tape, sp, 1)?;
    let tn = layers::l2_normalize(tape, tp, 1)?;
    let per_sample = infonce_rows(tape, sn, tn, negs, tau)?;
    tape.mean_all(per_sample)
}

pub fn level_loss<S: Real>(
    tape: &mut Tape<S>,
    level: LossLevel,
    s_star: Var,
    t: Var,
    negs: Option<&Tensor>,
    tau: f64,
) -> Result<Var> {
    match level {
        LossLevel::Pixel => pcd_loss(tape, s_star, t, negs, tau),
        LossLevel::Image => image_level_loss(tape, s_star, t, negs, tau),
    }
}

/// Mean of the per-view losses, all against the same negatives snapshot.
pub fn multi_view_loss<S: Real>(tape: &mut Tape<S>, views: &[(Var, Var)], negs: Option<&Tensor>, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::arg("at least one view is required"));
    }
    let mut total: Option<Var> = None;
    for &(s, t) in views {
        let l = level_loss(tape, cfg.level, s, t, negs, cfg.tau)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    tape.scale(total.expect("non-empty"), 1.0 / views.len() as f64)
}

// ---------------------------------------------------------------------------
// Gradient uniformity

#[derive(Debug, Clone, PartialEq)]
pub struct UniformityReport {
    /// Largest spread `max_i g − min_i g` over pixels, across samples and channels.
    pub max_pairwise_dev: f64,
    pub max_abs_grad: f64,
}

impl UniformityReport {
    pub fn relative(&self) -> f64 {
        if self.max_abs_grad == 0.0 {
            0.0
        } else {
            self.max_pairwise_dev / self.max_abs_grad
        }
    }
}

/// Gradient of the chosen loss with respect to every pixel of the student map
/// `s` (`[N, D, H, W]`), and how much it varies across pixel positions.
pub fn gradient_uniformity_check(level: LossLevel, s: &Tensor, t: &Tensor, negs: Option<&Tensor>, tau: f64) -> Result<UniformityReport> {
    let mut tape = Tape::<f32>::new();
    let sv = tape.leaf(s.clone());
    let tv = tape.constant(t.clone());
    let loss = level_loss(&mut tape, level, sv, tv, negs, tau)?;
    tape.backward(loss)?;
    let g = tape.grad(sv).cloned().unwrap_or_else(|| s.zeros_like());
    let sh = g.shape();
    let hw = sh[2] * sh[3];
    let mut max_pairwise_dev = 0.0f64;
    let mut max_abs_grad = 0.0f64;
    for chunk in g.data().chunks(hw) {
        let lo = chunk.iter().fold(f64::INFINITY, |a, &v| a.min(v as f64));
        let hi = chunk.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        max_pairwise_dev = max_pairwise_dev.max(hi - lo);
        max_abs_grad = chunk.iter().fold(max_abs_grad, |a, &v| a.max((v as f64).abs()));
    }
    Ok(UniformityReport {
        max_pairwise_dev,
        max_abs_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_single_negative() {
        let l = pixel_infonce(&[1.0, 0.0], &[1.0, 0.0], &[&[0.0, 1.0]], 0.2).unwrap();
        assert!((l - (1.0 + (-5.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn tau_must_be_positive() {
        assert!(pixel_infonce(&[1.0], &[1.0], &[], 0.0).is_err());
        assert!(pixel_infonce(&[1.0], &[1.0], &[], -1.0).is_err());
    }
}
