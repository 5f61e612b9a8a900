//! The multi-scale block and the second-order pooling attention block.

use crate::error::{Error, Result};
use crate::graph::{Graph, Padding, Var};
use crate::tensor::Tensor;

use super::params::{Binding, ConvSpec, ConvUnit, Initializer, ParamSet};

/// Hierarchical split convolution over four channel slices:
/// `Y1 = X1`, `Y2 = C1 * X2`, `Y3 = C2 * (X3 + Y2)`, `Y4 = C3 * (X4 + Y3)`,
/// output `concat(Y1..Y4)`. All convolutions are 3x3, "same", stride 1.
#[derive(Clone, Debug)]
pub struct MsBlock {
    pub depth: usize,
    pub convs: [ConvUnit; 3],
}

impl MsBlock {
    pub fn new(
        ps: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        depth: usize,
        bias: bool,
    ) -> Result<Self> {
        if depth == 0 || !depth.is_multiple_of(4) {
            return Err(Error::shape(format!(
                "multi-scale block needs a channel count divisible by 4, got {depth}"
            )));
        }
        let slice = depth / 4;
        let mut conv = |j: usize| {
            ConvUnit::new(
                ps,
                init,
                &format!("{name}.c{j}"),
                ConvSpec {
                    kh: 3,
                    kw: 3,
                    din: slice,
                    dout: slice,
                    stride: 1,
                    padding: Padding::Same,
                    bias,
                },
            )
        };
        let convs = [conv(1), conv(2), conv(3)];
        Ok(Self { depth, convs })
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        let (_, _, d) = g.value(x).hwd()?;
        if d != self.depth {
            return Err(Error::shape(format!(
                "multi-scale block built for {} channels, got {d}",
                self.depth
            )));
        }
        let xs = g.split_channels(x, 4)?;
        let y2 = self.convs[0].apply(g, b, xs[1])?;
        let s3 = g.add(xs[2], y2)?;
        let y3 = self.convs[1].apply(g, b, s3)?;
        let s4 = g.add(xs[3], y3)?;
        let y4 = self.convs[2].apply(g, b, s4)?;
        g.concat_channels(&[xs[0], y2, y3, y4])
    }
}

/// Reduction target for an axis of length `n`: `n / 4`, at least 1.
pub fn reduced(n: usize) -> usize {
    (n / 4).max(1)
}

/// Gate applied to the raw attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Sigmoid,
    /// Test hook: replaces every attention weight by exactly 1.
    Bypass,
}

/// One attention pass: 1x1 reduction to `c'` channels, channel covariance,
/// a `1 x c'` convolution with `4c'` kernels over the `1 x c' x c'`
/// covariance map, and a 1x1 expansion back to `c` weights.
#[derive(Clone, Debug)]
pub struct SopPass {
    pub channels: usize,
    pub reduced: usize,
    pub reduce: ConvUnit,
    pub row: ConvUnit,
    pub expand: ConvUnit,
}

impl SopPass {
    fn new(
        ps: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        bias: bool,
    ) -> Self {
        let r = reduced(channels);
        let reduce = ConvUnit::new(
            ps,
            init,
            &format!("{name}.reduce"),
            ConvSpec {
                kh: 1,
                kw: 1,
                din: channels,
                dout: r,
                stride: 1,
                padding: Padding::Valid,
                bias,
            },
        );
        let row = ConvUnit::new(
            ps,
            init,
            &format!("{name}.row"),
            ConvSpec {
                kh: 1,
                kw: r,
                din: r,
                dout: 4 * r,
                stride: 1,
                padding: Padding::Valid,
                bias,
            },
        );
        let expand = ConvUnit::new(
            ps,
            init,
            &format!("{name}.expand"),
            ConvSpec {
                kh: 1,
                kw: 1,
                din: 4 * r,
                dout: channels,
                stride: 1,
                padding: Padding::Valid,
                bias,
            },
        );
        Self {
            channels,
            reduced: r,
            reduce,
            row,
            expand,
        }
    }

    /// Ungated weights (length `channels`) for a map whose last axis is the
    /// attended axis.
    fn logits(&self, g: &mut Graph, b: &Binding, t: Var, normalize: bool) -> Result<Var> {
        let r = self.reduce.apply(g, b, t)?;
        let cov = g.covariance(r, normalize)?;
        let cov = g.reshape(cov, &[1, self.reduced, self.reduced])?;
        let e = self.row.apply(g, b, cov)?;
        let w = self.expand.apply(g, b, e)?;
        g.reshape(w, &[self.channels])
    }
}

#[derive(Clone, Debug)]
pub struct SopBlock {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub normalize_covariance: bool,
    pub channel_pass: SopPass,
    pub height_pass: SopPass,
    pub width_pass: SopPass,
}

/// Attention weights over channels, rows and columns.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub depth: Var,
    pub height: Var,
    pub width: Var,
}

impl SopBlock {
    /// The three passes get independent parameters.
    pub fn new(
        ps: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        (height, width, depth): (usize, usize, usize),
        bias: bool,
        normalize_covariance: bool,
    ) -> Self {
        Self {
            height,
            width,
            depth,
            normalize_covariance,
            channel_pass: SopPass::new(ps, init, &format!("{name}.d"), depth, bias),
            height_pass: SopPass::new(ps, init, &format!("{name}.h"), height, bias),
            width_pass: SopPass::new(ps, init, &format!("{name}.w"), width, bias),
        }
    }

    fn check(&self, g: &Graph, x: Var) -> Result<()> {
        let dims = g.value(x).hwd()?;
        if dims != (self.height, self.width, self.depth) {
            return Err(Error::config(
                "sop",
                format!(
                    "block configured for {}x{}x{}, input is {}x{}x{}",
                    self.height, self.width, self.depth, dims.0, dims.1, dims.2
                ),
            ));
        }
        Ok(())
    }

    /// `w_d` from `X`, `w_h` from `X_h[k,j,i] = X[i,j,k]` and `w_w` from
    /// `X_w[i,k,j] = X[i,j,k]`.
    pub fn attention_weights(
        &self,
        g: &mut Graph,
        b: &Binding,
        x: Var,
        gate: Gate,
    ) -> Result<AttentionWeights> {
        self.check(g, x)?;
        let xh = g.permute(x, &[2, 1, 0])?;
        let xw = g.permute(x, &[0, 2, 1])?;
        self.weights_from(g, b, x, xh, xw, gate)
    }

    fn weights_from(
        &self,
        g: &mut Graph,
        b: &Binding,
        x: Var,
        xh: Var,
        xw: Var,
        gate: Gate,
    ) -> Result<AttentionWeights> {
        if gate == Gate::Bypass {
            let mut ones = |n: usize| g.constant(Tensor::full(&[n], 1.0));
            return Ok(AttentionWeights {
                depth: ones(self.depth),
                height: ones(self.height),
                width: ones(self.width),
            });
        }
        let n = self.normalize_covariance;
        let wd = self.channel_pass.logits(g, b, x, n)?;
        let wh = self.height_pass.logits(g, b, xh, n)?;
        let ww = self.width_pass.logits(g, b, xw, n)?;
        Ok(AttentionWeights {
            depth: g.sigmoid(wd),
            height: g.sigmoid(wh),
            width: g.sigmoid(ww),
        })
    }

    /// `Z = Z_d + Z_h^T + Z_w^T` with `Z_d = w_d[k] X`, `Z_h = w_h[i] X_h`
    /// and `Z_w = w_w[j] X_w`.
    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var, gate: Gate) -> Result<Var> {
        self.check(g, x)?;
        let xh = g.permute(x, &[2, 1, 0])?;
        let xw = g.permute(x, &[0, 2, 1])?;
        let w = self.weights_from(g, b, x, xh, xw, gate)?;
        let zd = g.scale_axis(x, w.depth, 2)?;
        let zh = g.scale_axis(xh, w.height, 2)?;
        let zh_t = g.permute(zh, &[2, 1, 0])?;
        let zw = g.scale_axis(xw, w.width, 2)?;
        let zw_t = g.permute(zw, &[0, 2, 1])?;
        let z = g.add(zd, zh_t)?;
        g.add(z, zw_t)
    }
}

/// Unnormalised channel covariance `(X - mean)(X - mean)^T` of an
/// `H x W x D'` map viewed as a `D' x (H W)` matrix.
pub fn channel_covariance(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let c = g.covariance(v, false)?;
    Ok(g.value(c).clone())
}
