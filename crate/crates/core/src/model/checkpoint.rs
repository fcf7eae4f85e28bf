use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{BackboneSpec, BnHyper, HeadLayerKind, ParamKind, ParamStore, StudentSpec};
use crate::adaptor::InputKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Teacher,
    Student,
    /// Exported backbone, heads stripped.
    Backbone,
}

/// Optimizer/queue bookkeeping stored with a resumable student checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub step: u64,
    pub total_steps: u64,
    pub queue_head: usize,
    pub queue_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub head_kind: Option<InputKind>,
    #[serde(default)]
    pub head_layers: Vec<HeadLayerKind>,
    pub norm_rescale_anchor: Option<f64>,
    #[serde(default)]
    pub seed_lineage: Vec<u64>,
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub student: Option<StudentSpec>,
    pub bn: BnHyper,
    #[serde(default)]
    pub train_state: Option<TrainState>,
    #[serde(default)]
    pub invariance_max_abs_dev: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(model_kind: ModelKind, backbone: BackboneSpec, bn: BnHyper) -> Self {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            model_kind,
            head_kind: None,
            head_layers: Vec::new(),
            norm_rescale_anchor: None,
            seed_lineage: Vec::new(),
            backbone,
            student: None,
            bn,
            train_state: None,
            invariance_max_abs_dev: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub path: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub entries: Vec<Entry>,
}

/// Paths under this prefix hold training state rather than model parameters.
pub const STATE_PREFIX: &str = "state.";

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, entries: Vec<Entry>) -> Result<Self> {
        let c = Checkpoint { meta, entries };
        c.validate()?;
        Ok(c)
    }

    pub fn from_store(meta: CheckpointMeta, store: &ParamStore) -> Self {
        let entries = store
            .iter()
            .map(|(p, v)| Entry {
                path: p.into(),
                tensor: v.value.clone(),
            })
            .collect();
        Checkpoint { meta, entries }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::arg(format!("duplicate checkpoint path `{}`", e.path)));
            }
        }
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.path == path).map(|e| &e.tensor)
    }

    pub fn push(&mut self, path: impl Into<String>, tensor: Tensor) -> Result<()> {
        let path = path.into();
        if self.get(&path).is_some() {
            return Err(Error::arg(format!("duplicate checkpoint path `{path}`")));
        }
        self.entries.push(Entry { path, tensor });
        Ok(())
    }

    /// Model parameters, skipping training-state entries.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for e in self.entries.iter().filter(|e| !e.path.starts_with(STATE_PREFIX)) {
            store.insert(e.path.clone(), e.tensor.clone())?;
        }
        Ok(store)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.path.as_str())
    }
}

/// Strip everything outside `backbone.*` and multiply every backbone conv
/// kernel by `anchor`. BN parameters, BN statistics and biases are unchanged.
pub fn norm_rescale_export(store: &ParamStore, meta: &CheckpointMeta, anchor: f64) -> Result<Checkpoint> {
    if !(anchor > 0.0) || !anchor.is_finite() {
        return Err(Error::Config {
            path: "export.anchor".into(),
            reason: format!("must be a positive number, got {anchor}"),
        });
    }
    let mut backbone = store.subset("backbone");
    let paths: Vec<String> = backbone.paths().map(String::from).collect();
    let a = anchor as f32;
    for p in paths {
        let is_kernel = backbone.get(&p).is_some_and(|v| v.kind == ParamKind::Weight && v.value.rank() == 4);
        if is_kernel {
            let t = backbone.tensor_mut(&p)?;
            for v in t.data_mut() {
                *v *= a;
            }
        }
    }
    let mut m = meta.clone();
    m.model_kind = ModelKind::Backbone;
    m.head_kind = None;
    m.head_layers.clear();
    m.norm_rescale_anchor = Some(anchor);
    m.train_state = None;
    m.invariance_max_abs_dev = None;
    Ok(Checkpoint::from_store(m, &backbone))
}
