use crate::error::Result;
use crate::graph::{Graph, Padding, Var};

use super::blocks::{Gate, MsBlock, SopBlock};
use super::params::{Binding, ConvSpec, ConvUnit, Initializer, ParamSet};

/// Multi-scale block, then second-order pooling, then ReLU. A downsampling
/// layer appends a stride-2 3x3 convolution (and ReLU) that also changes
/// the channel count to the next stage width.
#[derive(Clone, Debug)]
pub struct MsSopLayer {
    pub ms: MsBlock,
    pub sop: SopBlock,
    pub downsample: Option<ConvUnit>,
}

pub struct LayerSpec {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    /// Output channels of the stride-2 transition, when downsampling.
    pub downsample_to: Option<usize>,
    pub bias: bool,
    pub normalize_covariance: bool,
}

impl MsSopLayer {
    pub fn new(
        ps: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        spec: &LayerSpec,
    ) -> Result<Self> {
        let ms = MsBlock::new(ps, init, &format!("{name}.ms"), spec.depth, spec.bias)?;
        let sop = SopBlock::new(
            ps,
            init,
            &format!("{name}.sop"),
            (spec.height, spec.width, spec.depth),
            spec.bias,
            spec.normalize_covariance,
        );
        let downsample = spec.downsample_to.map(|dout| {
            ConvUnit::new(
                ps,
                init,
                &format!("{name}.down"),
                ConvSpec {
                    kh: 3,
                    kw: 3,
                    din: spec.depth,
                    dout,
                    stride: 2,
                    padding: Padding::Same,
                    bias: spec.bias,
                },
            )
        });
        Ok(Self {
            ms,
            sop,
            downsample,
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var, gate: Gate) -> Result<Var> {
        let y = self.ms.forward(g, b, x)?;
        let z = self.sop.forward(g, b, y, gate)?;
        let z = g.relu(z);
        match &self.downsample {
            Some(conv) => {
                let d = conv.apply(g, b, z)?;
                Ok(g.relu(d))
            }
            None => Ok(z),
        }
    }
}

/// Output spatial size of a layer: `ceil(n / 2)` when downsampling.
pub fn downsampled(n: usize) -> usize {
    n.div_ceil(2)
}
