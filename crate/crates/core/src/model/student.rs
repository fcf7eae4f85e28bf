use alloc::format;

use serde::{Deserialize, Serialize};

use super::{BackboneSpec, Ctx, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::BnLayout;
use crate::real::Real;
use crate::rng::Rng;

/// Projection head: `blocks` consecutive MLPs on maps, each
/// Conv1x1(in→hidden)–BN–ReLU–Conv1x1(hidden→dim).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub dim: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
}

fn default_blocks() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MhsaConfig {
    pub heads: usize,
    pub head_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSpec {
    pub backbone: BackboneSpec,
    pub head: HeadConfig,
    pub mhsa: Option<MhsaConfig>,
}

pub struct StudentOutput {
    /// Backbone map.
    pub s: Var,
    /// Head (and MHSA) output used by the loss.
    pub s_star: Var,
}

impl StudentSpec {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.head.hidden == 0 || self.head.dim == 0 || self.head.blocks == 0 {
            return Err(Error::arg("student head sizes must be positive"));
        }
        if let Some(m) = self.mhsa {
            if m.heads == 0 || m.head_dim == 0 {
                return Err(Error::arg("mhsa heads and head_dim must be positive"));
            }
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        self.head.dim
    }

    pub fn init(&self, rng: &mut Rng) -> Result<ParamStore> {
        self.validate()?;
        let mut store = ParamStore::new();
        self.backbone.init(&mut store, "backbone", rng)?;
        let mut cin = self.backbone.out_channels();
        for i in 0..self.head.blocks {
            let p = format!("head.mlp{i}");
            store.init_conv(&format!("{p}.conv1"), self.head.hidden, cin, 1, false, rng)?;
            store.init_bn(&format!("{p}.bn"), self.head.hidden, true)?;
            store.init_conv(&format!("{p}.conv2"), self.head.dim, self.head.hidden, 1, true, rng)?;
            cin = self.head.dim;
        }
        if let Some(m) = self.mhsa {
            store.init_mhsa("mhsa", self.head.dim, m.heads, m.head_dim, rng)?;
        }
        Ok(store)
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_>, tape: &mut Tape<S>, x: Var) -> Result<StudentOutput> {
        let s = self.backbone.forward(ctx, tape, x, "backbone")?;
        let mut h = s;
        for i in 0..self.head.blocks {
            let p = format!("head.mlp{i}");
            h = ctx.conv(tape, h, &format!("{p}.conv1"), 1, 0)?;
            h = ctx.bn(tape, h, &format!("{p}.bn"), BnLayout::Map)?;
            h = tape.relu(h)?;
            h = ctx.conv(tape, h, &format!("{p}.conv2"), 1, 0)?;
        }
        if let Some(m) = self.mhsa {
            h = ctx.mhsa(tape, h, "mhsa", m.heads, m.head_dim)?;
        }
        Ok(StudentOutput { s, s_star: h })
    }
}
