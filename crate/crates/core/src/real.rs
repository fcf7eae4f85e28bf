//! Element types the autodiff engine can run on.
//!
//! Model code always runs in `f32`. The engine is generic so the
//! finite-difference oracle can evaluate the very same graph in `f64`.

use core::fmt::Debug;

use num_traits::Float;

pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
