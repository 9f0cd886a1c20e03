//! Frozen residual feature extractor.

use pyrad_tensor::{Activation, Element, Graph, Var};

use crate::config::{BackboneConfig, PoolSpec};
use crate::error::Result;
use crate::layers::{bn_act, BatchNorm, Builder, Conv2d, Mode};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn forward<T: Element>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, store, x)?;
        let y = bn_act(g, store, &self.bn1, y, Mode::Eval, Activation::Relu)?;
        let y = self.conv2.forward(g, store, y)?;
        let y = self.bn2.forward(g, store, y, Mode::Eval)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(g, store, x)?;
                bn.forward(g, store, s, Mode::Eval)?
            }
            None => x,
        };
        let sum = g.add(y, skip)?;
        Ok(g.relu(sum))
    }
}

/// Stem, optional max pool and residual stages up to the configured cut.
/// Parameter names follow the usual ResNet layout under `backbone.`
/// (`backbone.conv1.weight`, `backbone.layer2.0.downsample.1.running_var`).
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv2d,
    stem_bn: BatchNorm,
    pool: Option<PoolSpec>,
    blocks: Vec<BasicBlock>,
}

pub const BACKBONE_PREFIX: &str = "backbone.";

impl Backbone {
    /// `kept` residual stages are built; `with_pool` controls the max pool
    /// (absent for a `stem` cut).
    pub(crate) fn build<T: Element>(b: &mut Builder<'_, T>, cfg: &BackboneConfig, with_pool: bool, kept: usize) -> Result<Self> {
        let stem = b.conv("backbone.conv1", 3, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride, cfg.stem_pad, false)?;
        let stem_bn = b.batch_norm("backbone.bn1", cfg.stem_channels)?;
        let mut blocks = Vec::new();
        let mut cin = cfg.stem_channels;
        for (si, stage) in cfg.stages.iter().take(kept).enumerate() {
            for bi in 0..stage.blocks {
                let p = format!("backbone.layer{}.{bi}", si + 1);
                let stride = if bi == 0 { stage.stride } else { 1 };
                let c = stage.channels;
                let downsample = if stride != 1 || cin != c {
                    Some((
                        b.conv(&format!("{p}.downsample.0"), cin, c, 1, stride, 0, false)?,
                        b.batch_norm(&format!("{p}.downsample.1"), c)?,
                    ))
                } else {
                    None
                };
                blocks.push(BasicBlock {
                    conv1: b.conv(&format!("{p}.conv1"), cin, c, 3, stride, 1, false)?,
                    bn1: b.batch_norm(&format!("{p}.bn1"), c)?,
                    conv2: b.conv(&format!("{p}.conv2"), c, c, 3, 1, 1, false)?,
                    bn2: b.batch_norm(&format!("{p}.bn2"), c)?,
                    downsample,
                });
                cin = c;
            }
        }
        Ok(Self {
            stem,
            stem_bn,
            pool: if with_pool { cfg.pool } else { None },
            blocks,
        })
    }

    /// Always runs batch norm in eval mode.
    pub(crate) fn forward<T: Element>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.stem.forward(g, store, x)?;
        let mut y = bn_act(g, store, &self.stem_bn, y, Mode::Eval, Activation::Relu)?;
        if let Some(p) = self.pool {
            y = g.max_pool2d(y, p.kernel, p.stride, p.pad)?;
        }
        for block in &self.blocks {
            y = block.forward(g, store, y)?;
        }
        Ok(y)
    }
}
