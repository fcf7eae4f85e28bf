use alloc::collections::BTreeMap;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LarsConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier on the trust ratio.
    pub trust_coefficient: f64,
    /// Biases and BN affine parameters skip the trust ratio as well as weight decay.
    pub exclude_from_adaptation: bool,
}

impl Default for LarsConfig {
    fn default() -> Self {
        LarsConfig {
            momentum: 0.9,
            weight_decay: 1e-5,
            trust_coefficient: 1.0,
            exclude_from_adaptation: true,
        }
    }
}

/// Momentum buffers by parameter path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LarsState {
    pub momentum: BTreeMap<String, Tensor>,
    pub step: usize,
}

/// Per-tensor trust ratio `η‖w‖/(‖g‖ + wd‖w‖)`, or 1 when either norm is zero.
pub fn trust_ratio(w_norm: f64, g_norm: f64, wd: f64, eta: f64) -> f64 {
    if w_norm > 0.0 && g_norm > 0.0 {
        eta * w_norm / (g_norm + wd * w_norm)
    } else {
        1.0
    }
}

/// One LARS update of every parameter that has a gradient.
///
/// `m ← μ·m + λ·lr·(g + wd·w)`, `w ← w − m`. Gradients are checked for
/// non-finite values before anything is modified.
pub fn lars_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut LarsState,
    lr: f64,
    cfg: &LarsConfig,
) -> Result<()> {
    for (path, g) in grads {
        let w = store.tensor(path)?;
        if w.shape() != g.shape() {
            return Err(Error::mismatch("lars gradient", w.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                what: alloc::format!("gradient of `{path}`"),
                step: state.step,
            });
        }
    }
    for (path, g) in grads {
        let kind = store.get(path).map(|p| p.kind).ok_or_else(|| Error::MissingParam(path.clone()))?;
        if !kind.is_trainable() {
            return Err(Error::arg(alloc::format!("`{path}` is not trainable")));
        }
        let excluded = kind.is_decay_excluded();
        let w = store.tensor_mut(path)?;
        let wd = if excluded { 0.0 } else { cfg.weight_decay };
        let lambda = if excluded && cfg.exclude_from_adaptation {
            1.0
        } else {
            trust_ratio(w.l2_norm(), g.l2_norm(), wd, cfg.trust_coefficient)
        };
        let m = state.momentum.entry(path.clone()).or_insert_with(|| w.zeros_like());
        for ((wi, mi), &gi) in w.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
            let upd = cfg.momentum * *mi as f64 + lambda * lr * (gi as f64 + wd * *wi as f64);
            *mi = upd as f32;
            *wi = (*wi as f64 - upd) as f32;
        }
    }
    state.step += 1;
    Ok(())
}

/// Whether weight decay applies to a parameter at `path`.
pub fn is_decayed(path: &str) -> bool {
    ParamKind::from_path(path).is_ok_and(|k| k.is_trainable() && !k.is_decay_excluded())
}
