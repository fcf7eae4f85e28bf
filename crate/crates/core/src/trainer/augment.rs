use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One view distribution: square random crop, horizontal flip, brightness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewDist {
    /// Range of the crop area as a fraction of the image area.
    pub crop_scale: [f64; 2],
    pub flip_prob: f64,
    /// Brightness is scaled by a factor drawn from `[1 − b, 1 + b]`.
    pub brightness: f64,
}

impl ViewDist {
    pub const IDENTITY: ViewDist = ViewDist {
        crop_scale: [1.0, 1.0],
        flip_prob: 0.0,
        brightness: 0.0,
    };

    pub fn validate(&self, path: &str) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        let bad = |field: &str, reason: &str| Error::Config {
            path: alloc::format!("{path}.{field}"),
            reason: reason.into(),
        };
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(bad("crop_scale", "need 0 < lo <= hi"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(bad("flip_prob", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.brightness) {
            return Err(bad("brightness", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub view_a: ViewDist,
    pub view_b: ViewDist,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            view_a: ViewDist {
                crop_scale: [0.3, 1.0],
                flip_prob: 0.5,
                brightness: 0.4,
            },
            view_b: ViewDist {
                crop_scale: [0.3, 1.0],
                flip_prob: 0.5,
                brightness: 0.2,
            },
        }
    }
}

impl AugmentPolicy {
    pub const IDENTITY: AugmentPolicy = AugmentPolicy {
        view_a: ViewDist::IDENTITY,
        view_b: ViewDist::IDENTITY,
    };

    pub fn validate(&self) -> Result<()> {
        self.view_a.validate("augment.view_a")?;
        self.view_b.validate("augment.view_b")
    }
}

/// Bilinear resample of the square region `[top, top+side) × [left, left+side)`
/// of a `[C, H, W]` image to `out × out`. A full-image crop at the original
/// size reproduces the input exactly.
pub fn crop_resize(img: &Tensor, top: f64, left: f64, side: f64, out: usize) -> Result<Tensor> {
    if img.rank() != 3 || out == 0 {
        return Err(Error::arg("crop_resize expects [C, H, W] and a positive output size"));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let scale = side / out as f64;
    let coord = |o: usize, origin: f64, n: usize| {
        let p = (origin + (o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = Float::floor(p) as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let ys: Vec<_> = (0..out).map(|o| coord(o, top, h)).collect();
    let xs: Vec<_> = (0..out).map(|o| coord(o, left, w)).collect();
    let mut data = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let at = |y: usize, x: usize| plane[y * w + x] as f64;
                let top_row = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot_row = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data.push((top_row * (1.0 - fy) + bot_row * fy) as f32);
            }
        }
    }
    Tensor::new(&[c, out, out], data)
}

/// Mirror a `[C, H, W]` image left to right.
pub fn flip_horizontal(img: &Tensor) -> Result<Tensor> {
    if img.rank() != 3 {
        return Err(Error::arg("flip expects [C, H, W]"));
    }
    let w = img.shape()[2];
    let mut data = img.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(img.shape(), data)
}

/// One augmented view at `out × out`. Crops larger than the image are clamped
/// to the full image.
pub fn augment_view(img: &Tensor, dist: &ViewDist, out: usize, rng: &mut Rng) -> Result<Tensor> {
    if img.rank() != 3 {
        return Err(Error::arg("augment expects [C, H, W]"));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let short = h.min(w) as f64;
    let area = rng.range_f64(dist.crop_scale[0], dist.crop_scale[1]);
    let side = (Float::sqrt(area) * short).clamp(1.0, short);
    let top = rng.uniform_f64() * (h as f64 - side);
    let left = rng.uniform_f64() * (w as f64 - side);
    let mut v = crop_resize(img, top, left, side, out)?;
    if rng.bernoulli(dist.flip_prob) {
        v = flip_horizontal(&v)?;
    }
    let factor = rng.range_f64(1.0 - dist.brightness, 1.0 + dist.brightness);
    if factor != 1.0 {
        for x in v.data_mut() {
            *x = (*x as f64 * factor).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(v)
}

/// View `a` from the first distribution and view `b` from the second.
pub fn two_view(img: &Tensor, policy: &AugmentPolicy, out: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let a = augment_view(img, &policy.view_a, out, rng)?;
    let b = augment_view(img, &policy.view_b, out, rng)?;
    Ok((a, b))
}
