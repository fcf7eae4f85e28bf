use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{BackboneSpec, BnHyper, Checkpoint, Ctx, Mode, ParamStore};
use crate::adaptor::{self, HeadLayer, HeadSpec, InputKind, InvarianceReport};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{self, BatchNormParams, BnLayout, BnMode, ConvParams, FcParams};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLayerKind {
    Fc,
    Bn,
    Relu,
    Conv1x1,
    CwRelu,
}

/// Teacher network used for pre-training: backbone, global pooling, and the
/// vector projection head FC–BN–ReLU–FC–BN, the last BN without affine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub backbone: BackboneSpec,
    pub head_hidden: usize,
    pub head_dim: usize,
}

impl TeacherSpec {
    pub fn head_layers() -> Vec<HeadLayerKind> {
        use HeadLayerKind::*;
        alloc::vec![Fc, Bn, Relu, Fc, Bn]
    }

    pub fn init(&self, rng: &mut Rng) -> Result<ParamStore> {
        if self.head_hidden == 0 || self.head_dim == 0 {
            return Err(Error::arg("teacher head sizes must be positive"));
        }
        let mut store = ParamStore::new();
        self.backbone.init(&mut store, "backbone", rng)?;
        store.init_fc("head.0", self.head_hidden, self.backbone.out_channels(), false, rng)?;
        store.init_bn("head.1", self.head_hidden, true)?;
        store.init_fc("head.3", self.head_dim, self.head_hidden, false, rng)?;
        store.init_bn("head.4", self.head_dim, false)?;
        Ok(store)
    }

    /// Backbone map and projected `[N, head_dim]` vectors.
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_>, tape: &mut Tape<S>, x: Var) -> Result<(Var, Var)> {
        let map = self.backbone.forward(ctx, tape, x, "backbone")?;
        let v = layers::global_avg_pool(tape, map)?;
        let v = ctx.fc(tape, v, "head.0")?;
        let v = ctx.bn(tape, v, "head.1", BnLayout::Vector)?;
        let v = tape.relu(v)?;
        let v = ctx.fc(tape, v, "head.3")?;
        let v = ctx.bn(tape, v, "head.4", BnLayout::Vector)?;
        Ok((map, v))
    }
}

/// Rebuild a head from `prefix.{i}.*` parameters and its layer kinds.
pub fn head_from_store(
    store: &ParamStore,
    prefix: &str,
    kinds: &[HeadLayerKind],
    input_kind: InputKind,
    bn: BnHyper,
) -> Result<HeadSpec> {
    let opt = |path: &str| store.get(path).map(|p| p.value.clone());
    let mut out = Vec::with_capacity(kinds.len());
    for (i, kind) in kinds.iter().enumerate() {
        let p = format!("{prefix}.{i}");
        out.push(match kind {
            HeadLayerKind::Fc => HeadLayer::Fc(FcParams::new(store.tensor(&format!("{p}.weight"))?.clone(), opt(&format!("{p}.bias")))?),
            HeadLayerKind::Conv1x1 => HeadLayer::Conv1x1(ConvParams::new(
                store.tensor(&format!("{p}.weight"))?.clone(),
                opt(&format!("{p}.bias")),
                1,
                0,
            )?),
            HeadLayerKind::Bn => HeadLayer::Bn(BatchNormParams {
                gamma: opt(&format!("{p}.gamma")),
                beta: opt(&format!("{p}.beta")),
                running_mean: store.tensor(&format!("{p}.running_mean"))?.clone(),
                running_var: store.tensor(&format!("{p}.running_var"))?.clone(),
                eps: bn.eps,
                momentum: bn.momentum,
                mode: BnMode::Inference,
                layout: match input_kind {
                    InputKind::Vector => BnLayout::Vector,
                    InputKind::Map => BnLayout::Map,
                },
            }),
            HeadLayerKind::Relu => HeadLayer::Relu,
            HeadLayerKind::CwRelu => HeadLayer::CwRelu,
        });
    }
    HeadSpec::new(out, input_kind)
}

/// Store a head under `prefix.{i}.*`; returns the parameters and layer kinds.
pub fn head_into_store(head: &HeadSpec, prefix: &str) -> Result<(ParamStore, Vec<HeadLayerKind>)> {
    let mut store = ParamStore::new();
    let mut kinds = Vec::with_capacity(head.layers.len());
    for (i, layer) in head.layers.iter().enumerate() {
        let p = format!("{prefix}.{i}");
        kinds.push(match layer {
            HeadLayer::Fc(fc) => {
                store.insert(format!("{p}.weight"), fc.weight.clone())?;
                if let Some(b) = &fc.bias {
                    store.insert(format!("{p}.bias"), b.clone())?;
                }
                HeadLayerKind::Fc
            }
            HeadLayer::Conv1x1(c) => {
                store.insert(format!("{p}.weight"), c.kernel.clone())?;
                if let Some(b) = &c.bias {
                    store.insert(format!("{p}.bias"), b.clone())?;
                }
                HeadLayerKind::Conv1x1
            }
            HeadLayer::Bn(bn) => {
                if let Some(g) = &bn.gamma {
                    store.insert(format!("{p}.gamma"), g.clone())?;
                }
                if let Some(b) = &bn.beta {
                    store.insert(format!("{p}.beta"), b.clone())?;
                }
                store.insert(format!("{p}.running_mean"), bn.running_mean.clone())?;
                store.insert(format!("{p}.running_var"), bn.running_var.clone())?;
                HeadLayerKind::Bn
            }
            HeadLayer::Relu => HeadLayerKind::Relu,
            HeadLayer::CwRelu => HeadLayerKind::CwRelu,
            HeadLayer::Unsupported { name } => return Err(Error::UnsupportedLayer(name.clone())),
        });
    }
    Ok((store, kinds))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherHeadMode {
    /// Projection head rewritten to consume maps.
    Adapted,
    /// Raw backbone maps, head discarded.
    BackboneOnly,
}

/// Frozen teacher used during distillation.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub backbone: BackboneSpec,
    /// `backbone.*` parameters.
    pub store: ParamStore,
    /// Map-kind head, absent in backbone-only mode.
    pub head: Option<HeadSpec>,
    pub bn: BnHyper,
    /// Result of the invariance check run during assembly, if one was run.
    pub invariance: Option<InvarianceReport>,
}

impl Teacher {
    /// Build from a checkpoint. A vector head is adapted and must pass the
    /// invariance check; a map head is taken as already adapted.
    pub fn assemble(
        ckpt: &Checkpoint,
        mode: TeacherHeadMode,
        drop_last_bn: bool,
        trials: usize,
        tol: f64,
        rng: &mut Rng,
    ) -> Result<Teacher> {
        let meta = &ckpt.meta;
        let all = ckpt.to_store()?;
        let store = all.subset("backbone");
        if store.is_empty() {
            return Err(Error::MissingParam("backbone.*".into()));
        }
        let mut teacher = Teacher {
            backbone: meta.backbone.clone(),
            store,
            head: None,
            bn: meta.bn,
            invariance: None,
        };
        if mode == TeacherHeadMode::BackboneOnly {
            return Ok(teacher);
        }
        let kind = meta.head_kind.ok_or(Error::MissingParam("head.*".into()))?;
        let head = head_from_store(&all, "head", &meta.head_layers, kind, meta.bn)?;
        teacher.head = Some(match kind {
            InputKind::Map => head,
            InputKind::Vector => {
                let original = if drop_last_bn {
                    adaptor::drop_trailing_affine_free_bn(&head)
                } else {
                    head.clone()
                };
                let adapted = adaptor::adapt_head(&head, drop_last_bn)?;
                let report = adaptor::verify_invariance(
                    &original,
                    &adapted,
                    trials,
                    adaptor::DEFAULT_SPATIAL,
                    tol,
                    rng,
                )?;
                if !report.pass {
                    return Err(Error::InvarianceFailed {
                        max_abs_dev: report.max_abs_dev,
                        tol,
                    });
                }
                teacher.invariance = Some(report);
                adapted
            }
        });
        Ok(teacher)
    }

    pub fn out_dim(&self) -> usize {
        self.head
            .as_ref()
            .and_then(HeadSpec::out_dim)
            .unwrap_or_else(|| self.backbone.out_channels())
    }

    /// Teacher map for a batch. Runs on a private constant-only tape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let mut ctx = Ctx::new(&self.store, Mode::Frozen, self.bn);
        let mut h = self.backbone.forward(&mut ctx, &mut tape, xv, "backbone")?;
        if let Some(head) = &self.head {
            h = head.forward(&mut tape, h)?;
        }
        debug_assert!(!tape.has_grad_state());
        Ok(tape.value(h).clone())
    }

    /// Hash over every teacher parameter, including the head.
    pub fn fingerprint(&self) -> u64 {
        let mut all = self.store.clone();
        if let Some(head) = &self.head {
            if let Ok((s, _)) = head_into_store(head, "head") {
                let _ = all.extend(s);
            }
        }
        all.fingerprint()
    }
}
