//! Procedural image dataset: colored shapes on smooth backgrounds.

use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers;
use crate::rng::{tag, Rng};
use crate::tensor::Tensor;

pub const MIN_IMAGE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Circle,
    Triangle,
}

/// One drawn shape, in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeMeta {
    pub kind: ShapeKind,
    pub color: [f32; 3],
    /// `(x, y)` of the center.
    pub center: [f64; 2],
    /// Half width and half height; circles and triangles use the first as radius.
    pub extent: [f64; 2],
    /// Rotation of triangles, radians.
    pub angle: f64,
}

impl ShapeMeta {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        match self.kind {
            ShapeKind::Rectangle => dx.abs() <= self.extent[0] && dy.abs() <= self.extent[1],
            ShapeKind::Circle => dx * dx + dy * dy <= self.extent[0] * self.extent[0],
            ShapeKind::Triangle => {
                let v = self.vertices();
                let side = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
                let (d0, d1, d2) = (side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }

    fn vertices(&self) -> [[f64; 2]; 3] {
        let r = self.extent[0];
        core::array::from_fn(|i| {
            let a = self.angle + i as f64 * 2.0 * core::f64::consts::PI / 3.0;
            [self.center[0] + r * Float::cos(a), self.center[1] + r * Float::sin(a)]
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageMeta {
    pub id: u64,
    /// In drawing order; later shapes cover earlier ones.
    pub shapes: Vec<ShapeMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub size: usize,
    pub seed: u64,
    /// `[3, size, size]` images with values in `[0, 1]`.
    pub images: Vec<Tensor>,
    pub meta: Vec<ImageMeta>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Rejects empty datasets and malformed images.
    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.meta.len() != self.images.len() {
            return Err(Error::arg("dataset metadata count differs from image count"));
        }
        for img in &self.images {
            if img.shape() != [3, self.size, self.size] {
                return Err(Error::mismatch("dataset image", img.shape(), &[3, self.size, self.size]));
            }
        }
        Ok(())
    }
}

/// Image `id` of the dataset seeded by `seed`; independent of the dataset size.
pub fn synth_image(id: u64, size: usize, seed: u64) -> Result<(Tensor, ImageMeta)> {
    if size < MIN_IMAGE_SIZE {
        return Err(Error::arg(alloc::format!("image size must be at least {MIN_IMAGE_SIZE}, got {size}")));
    }
    let mut rng = Rng::stream(seed, tag::DATA, &[id]);
    // low-frequency background: a coarse random grid, bilinearly upsampled
    let grid: Vec<f32> = (0..3 * 16).map(|_| rng.range_f64(0.15, 0.85) as f32).collect();
    let bg = layers::resize_tensor(&Tensor::new(&[1, 3, 4, 4], grid)?, size, size)?;
    let mut data = bg.into_data();

    let s = size as f64;
    let count = rng.range_usize(2, 6);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = [ShapeKind::Rectangle, ShapeKind::Circle, ShapeKind::Triangle][rng.range_usize(0, 3)];
        let color = [rng.uniform_f32(), rng.uniform_f32(), rng.uniform_f32()];
        let center = [rng.range_f64(0.15, 0.85) * s, rng.range_f64(0.15, 0.85) * s];
        let r = rng.range_f64(0.1, 0.3) * s;
        let extent = [r, r * rng.range_f64(0.6, 1.4)];
        let angle = rng.range_f64(0.0, 2.0 * core::f64::consts::PI);
        shapes.push(ShapeMeta {
            kind,
            color,
            center,
            extent,
            angle,
        });
    }
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if let Some(sh) = shapes.iter().rev().find(|sh| sh.contains(px, py)) {
                for c in 0..3 {
                    data[c * plane + y * size + x] = sh.color[c];
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((Tensor::new(&[3, size, size], data)?, ImageMeta { id, shapes }))
}

/// `n` procedurally generated images. `n = 0` yields an empty dataset, which
/// the training loops reject.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    let mut images = Vec::with_capacity(n);
    let mut meta = Vec::with_capacity(n);
    for id in 0..n as u64 {
        let (img, m) = synth_image(id, size, seed)?;
        images.push(img);
        meta.push(m);
    }
    if n == 0 && size < MIN_IMAGE_SIZE {
        return Err(Error::arg(alloc::format!("image size must be at least {MIN_IMAGE_SIZE}, got {size}")));
    }
    Ok(Dataset {
        size,
        seed,
        images,
        meta,
    })
}
