use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{join, Ctx, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::BnLayout;
use crate::real::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    /// Stride of the first block in the stage.
    pub stride: usize,
}

/// Stem (3×3 conv, BN, ReLU) followed by stages of basic residual blocks.
/// Each block is conv3×3–BN–ReLU–conv3×3–BN plus a shortcut (identity, or a
/// 1×1 conv + BN when the shape changes), then ReLU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
}

#[derive(Debug, Clone, Copy)]
struct BlockGeom {
    cin: usize,
    cout: usize,
    stride: usize,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 {
            return Err(Error::arg("backbone channel counts must be positive"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 || s.stride == 0 {
                return Err(Error::arg(format!("backbone stage {i}: blocks, channels and stride must be positive")));
            }
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.channels)
    }

    pub fn output_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    fn blocks(&self) -> Vec<(usize, usize, BlockGeom)> {
        let mut out = vec![];
        let mut cin = self.stem_channels;
        for (si, s) in self.stages.iter().enumerate() {
            for bi in 0..s.blocks {
                let stride = if bi == 0 { s.stride } else { 1 };
                out.push((si, bi, BlockGeom { cin, cout: s.channels, stride }));
                cin = s.channels;
            }
        }
        out
    }

    /// Spatial size of the output map for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let stride = self.output_stride();
        if h < stride || w < stride {
            return Err(Error::arg(format!("input {h}x{w} is smaller than the backbone output stride {stride}")));
        }
        let (mut h, mut w) = (h, w);
        for (_, _, g) in self.blocks() {
            h = (h - 1) / g.stride + 1;
            w = (w - 1) / g.stride + 1;
        }
        Ok((h, w))
    }

    /// Radius of the theoretical receptive field of one output pixel, in input pixels.
    pub fn receptive_radius(&self) -> usize {
        let (mut r, mut jump) = (1, 1);
        for (_, _, g) in self.blocks() {
            r += jump;
            jump *= g.stride;
            r += jump;
        }
        r
    }

    /// Kaiming-normal (fan-in) conv kernels; BN gamma 1, beta 0.
    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<()> {
        self.validate()?;
        let stem = join(prefix, "stem");
        store.init_conv(&join(&stem, "conv"), self.stem_channels, self.in_channels, 3, false, rng)?;
        store.init_bn(&join(&stem, "bn"), self.stem_channels, true)?;
        for (si, bi, g) in self.blocks() {
            let p = format!("{prefix}.stages.{si}.blocks.{bi}");
            store.init_conv(&join(&p, "conv1"), g.cout, g.cin, 3, false, rng)?;
            store.init_bn(&join(&p, "bn1"), g.cout, true)?;
            store.init_conv(&join(&p, "conv2"), g.cout, g.cout, 3, false, rng)?;
            store.init_bn(&join(&p, "bn2"), g.cout, true)?;
            if g.stride != 1 || g.cin != g.cout {
                store.init_conv(&join(&p, "shortcut.conv"), g.cout, g.cin, 1, false, rng)?;
                store.init_bn(&join(&p, "shortcut.bn"), g.cout, true)?;
            }
        }
        Ok(())
    }

    /// `[N, C_in, H, W] -> [N, C_out, H/s, W/s]`; no pooling.
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_>, tape: &mut Tape<S>, x: Var, prefix: &str) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::mismatch("backbone input", &shape, &[self.in_channels]));
        }
        self.output_size(shape[2], shape[3])?;
        let stem = join(prefix, "stem");
        let h = ctx.conv(tape, x, &join(&stem, "conv"), 1, 1)?;
        let h = ctx.bn(tape, h, &join(&stem, "bn"), BnLayout::Map)?;
        let mut h = tape.relu(h)?;
        for (si, bi, g) in self.blocks() {
            let p = format!("{prefix}.stages.{si}.blocks.{bi}");
            let y = ctx.conv(tape, h, &join(&p, "conv1"), g.stride, 1)?;
            let y = ctx.bn(tape, y, &join(&p, "bn1"), BnLayout::Map)?;
            let y = tape.relu(y)?;
            let y = ctx.conv(tape, y, &join(&p, "conv2"), 1, 1)?;
            let y = ctx.bn(tape, y, &join(&p, "bn2"), BnLayout::Map)?;
            let short = if g.stride != 1 || g.cin != g.cout {
                let s = ctx.conv(tape, h, &join(&p, "shortcut.conv"), g.stride, 0)?;
                ctx.bn(tape, s, &join(&p, "shortcut.bn"), BnLayout::Map)?
            } else {
                h
            };
            let sum = tape.add(y, short)?;
            h = tape.relu(sum)?;
        }
        Ok(h)
    }
}
