//! Parameter storage and the desk-scale networks built on it.
//!
//! Every learned tensor lives in a [`ParamStore`] under a dotted path such as
//! `backbone.stages.1.blocks.0.conv1.weight`. A [`Ctx`] binds those tensors to
//! a tape for one forward pass, either as trainable leaves or as constants.

mod backbone;
mod checkpoint;
mod student;
mod teacher;

pub use backbone::{BackboneSpec, StageSpec};
pub use checkpoint::{norm_rescale_export, Checkpoint, CheckpointMeta, Entry, ModelKind, TrainState, FORMAT_VERSION, STATE_PREFIX};
pub use student::{HeadConfig, MhsaConfig, StudentOutput, StudentSpec};
pub use teacher::{head_from_store, head_into_store, HeadLayerKind, Teacher, TeacherHeadMode, TeacherSpec};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{self, BatchStats, BnLayout, BnMode, MhsaVars, RunningStats};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Conv kernel or FC weight matrix.
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Inferred from the last path component.
    pub fn from_path(path: &str) -> Result<Self> {
        let leaf = path.rsplit('.').next().unwrap_or(path);
        Ok(match leaf {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "gamma" => ParamKind::BnGamma,
            "beta" => ParamKind::BnBeta,
            "running_mean" => ParamKind::RunningMean,
            "running_var" => ParamKind::RunningVar,
            _ => return Err(Error::arg(format!("cannot infer parameter kind of `{path}`"))),
        })
    }

    pub fn suffix(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::BnGamma => "gamma",
            ParamKind::BnBeta => "beta",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Biases and BN affine parameters get no weight decay.
    pub fn is_decay_excluded(self) -> bool {
        matches!(self, ParamKind::Bias | ParamKind::BnGamma | ParamKind::BnBeta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named parameters, iterated in sorted path order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        let kind = ParamKind::from_path(&path)?;
        if self.params.contains_key(&path) {
            return Err(Error::arg(format!("duplicate parameter `{path}`")));
        }
        self.params.insert(path, Param { kind, value });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.params.get(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn tensor(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn tensor_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(path)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.values().filter(|p| p.kind.is_trainable()).map(|p| p.value.len()).sum()
    }

    /// Keep only paths under `prefix.`; returns how many were dropped.
    pub fn retain_prefix(&mut self, prefix: &str) -> usize {
        let before = self.params.len();
        let dotted = format!("{prefix}.");
        self.params.retain(|k, _| k.starts_with(&dotted));
        before - self.params.len()
    }

    /// Remove every path under `prefix.`; returns how many were dropped.
    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let before = self.params.len();
        let dotted = format!("{prefix}.");
        self.params.retain(|k, _| !k.starts_with(&dotted));
        before - self.params.len()
    }

    /// Subset under `prefix.`, with paths kept as they are.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = self.clone();
        out.retain_prefix(prefix);
        out
    }

    /// Add all of `other`; duplicate paths are an error.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (k, p) in other.params {
            if self.params.contains_key(&k) {
                return Err(Error::arg(format!("duplicate parameter `{k}`")));
            }
            self.params.insert(k, p);
        }
        Ok(())
    }

    /// FNV-1a over paths, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (k, p) in &self.params {
            eat(k.as_bytes());
            for &d in p.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Fold train-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)], momentum: f64) -> Result<()> {
        for (prefix, stats) in updates {
            let mean_path = join(prefix, "running_mean");
            let var_path = join(prefix, "running_var");
            let mut mean = self.tensor(&mean_path)?.clone();
            let mut var = self.tensor(&var_path)?.clone();
            layers::update_running(&mut mean, &mut var, stats, momentum);
            *self.tensor_mut(&mean_path)? = mean;
            *self.tensor_mut(&var_path)? = var;
        }
        Ok(())
    }

    // -- initializers ------------------------------------------------------

    pub fn init_conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize, bias: bool, rng: &mut Rng) -> Result<()> {
        let std = num_traits::Float::sqrt(2.0 / (cin * k * k) as f64);
        self.insert(join(prefix, "weight"), Tensor::gaussian_from(&[cout, cin, k, k], rng, std)?)?;
        if bias {
            self.insert(join(prefix, "bias"), Tensor::zeros(&[cout])?)?;
        }
        Ok(())
    }

    pub fn init_fc(&mut self, prefix: &str, out: usize, inp: usize, bias: bool, rng: &mut Rng) -> Result<()> {
        let std = num_traits::Float::sqrt(2.0 / inp as f64);
        self.insert(join(prefix, "weight"), Tensor::gaussian_from(&[out, inp], rng, std)?)?;
        if bias {
            self.insert(join(prefix, "bias"), Tensor::zeros(&[out])?)?;
        }
        Ok(())
    }

    pub fn init_bn(&mut self, prefix: &str, c: usize, affine: bool) -> Result<()> {
        if affine {
            self.insert(join(prefix, "gamma"), Tensor::ones(&[c])?)?;
            self.insert(join(prefix, "beta"), Tensor::zeros(&[c])?)?;
        }
        self.insert(join(prefix, "running_mean"), Tensor::zeros(&[c])?)?;
        self.insert(join(prefix, "running_var"), Tensor::ones(&[c])?)?;
        Ok(())
    }

    pub fn init_mhsa(&mut self, prefix: &str, channels: usize, heads: usize, head_dim: usize, rng: &mut Rng) -> Result<()> {
        let p = layers::MhsaParams::random(channels, heads, head_dim, rng)?;
        for (name, conv) in [("q", p.q), ("k", p.k), ("v", p.v), ("out", p.out)] {
            let sub = join(prefix, name);
            self.insert(join(&sub, "weight"), conv.kernel)?;
            if let Some(b) = conv.bias {
                self.insert(join(&sub, "bias"), b)?;
            }
        }
        Ok(())
    }
}

/// BN hyper-parameters shared by every BN layer of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnHyper {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnHyper {
    fn default() -> Self {
        BnHyper {
            eps: layers::BN_EPS,
            momentum: layers::BN_MOMENTUM,
        }
    }
}

/// How a forward pass binds parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Trainable leaves, BN with batch statistics.
    Train,
    /// Trainable leaves, BN with running statistics (gradient probes).
    EvalGrad,
    /// Constants only, BN with running statistics.
    Frozen,
}

/// Binding of a [`ParamStore`] to one tape.
pub struct Ctx<'s> {
    store: &'s ParamStore,
    mode: Mode,
    pub bn: BnHyper,
    vars: BTreeMap<String, Var>,
    bn_updates: Vec<(String, BatchStats)>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode, bn: BnHyper) -> Self {
        Ctx {
            store,
            mode,
            bn,
            vars: BTreeMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The tape variable for `path`, bound on first use.
    pub fn param<S: Real>(&mut self, tape: &mut Tape<S>, path: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(path) {
            return Ok(v);
        }
        let p = self.store.get(path).ok_or_else(|| Error::MissingParam(path.to_string()))?;
        let value = p.value.cast();
        let v = if self.mode != Mode::Frozen && p.kind.is_trainable() {
            tape.leaf(value)
        } else {
            tape.constant(value)
        };
        self.vars.insert(path.to_string(), v);
        Ok(v)
    }

    fn optional<S: Real>(&mut self, tape: &mut Tape<S>, path: &str) -> Result<Option<Var>> {
        if self.store.contains(path) {
            self.param(tape, path).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn conv<S: Real>(&mut self, tape: &mut Tape<S>, x: Var, prefix: &str, stride: usize, padding: usize) -> Result<Var> {
        let w = self.param(tape, &join(prefix, "weight"))?;
        let b = self.optional(tape, &join(prefix, "bias"))?;
        layers::conv2d(tape, x, w, b, stride, padding)
    }

    pub fn fc<S: Real>(&mut self, tape: &mut Tape<S>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(tape, &join(prefix, "weight"))?;
        let b = self.optional(tape, &join(prefix, "bias"))?;
        layers::fc(tape, x, w, b)
    }

    pub fn bn<S: Real>(&mut self, tape: &mut Tape<S>, x: Var, prefix: &str, layout: BnLayout) -> Result<Var> {
        let g = self.optional(tape, &join(prefix, "gamma"))?;
        let b = self.optional(tape, &join(prefix, "beta"))?;
        let mean = self.store.tensor(&join(prefix, "running_mean"))?;
        let var = self.store.tensor(&join(prefix, "running_var"))?;
        let mode = if self.mode == Mode::Train { BnMode::Train } else { BnMode::Inference };
        let running = RunningStats {
            mean: mean.data(),
            var: var.data(),
        };
        let (y, stats) = layers::batchnorm(tape, x, g, b, running, self.bn.eps, mode, layout)?;
        if let Some(stats) = stats {
            self.bn_updates.push((prefix.to_string(), stats));
        }
        Ok(y)
    }

    pub fn mhsa<S: Real>(&mut self, tape: &mut Tape<S>, x: Var, prefix: &str, heads: usize, head_dim: usize) -> Result<Var> {
        let mut pair = |name: &str| -> Result<(Var, Option<Var>)> {
            let sub = join(prefix, name);
            Ok((self.param(tape, &join(&sub, "weight"))?, self.optional(tape, &join(&sub, "bias"))?))
        };
        let vars = MhsaVars {
            heads,
            head_dim,
            q: pair("q")?,
            k: pair("k")?,
            v: pair("v")?,
            out: pair("out")?,
        };
        Ok(layers::mhsa(tape, x, &vars)?.output)
    }

    /// Bound variables by path.
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Gradients of every bound trainable parameter, after `backward`.
    /// Parameters the loss does not depend on get zeros.
    pub fn grads(&self, tape: &Tape<f32>) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, &v)| tape.requires_grad(v))
            .map(|(k, &v)| {
                let g = tape.grad(v).cloned().unwrap_or_else(|| tape.value(v).zeros_like());
                (k.clone(), g)
            })
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchStats)> {
        core::mem::take(&mut self.bn_updates)
    }
}

