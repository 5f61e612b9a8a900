use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Padding, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors. The insertion order is the checkpoint
/// order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, keeping names; shapes must match.
    pub fn load(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (name, (old, new)) in self.names.iter().zip(self.tensors.iter().zip(&tensors)) {
            if old.shape() != new.shape() {
                return Err(Error::shape(format!(
                    "parameter `{name}` has shape {:?}, got {:?}",
                    old.shape(),
                    new.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Inserts every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        Binding(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }
}

/// Graph handles of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Binding(Vec<Var>);

impl Binding {
    #[cfg(test)]
    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Seeded fan-in scaled uniform initialiser. Samples are drawn as `f32` so
/// that freshly built models survive a 32-bit checkpoint unchanged.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`, i.e. unit variance times
    /// `1 / fan_in`.
    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt() as f32;
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound) as f64)
    }
}

/// A convolution whose kernel and bias live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    pub din: usize,
    pub dout: usize,
    pub stride: usize,
    pub padding: Padding,
    pub bias: bool,
}

impl ConvUnit {
    pub fn new(ps: &mut ParamSet, init: &mut Initializer, name: &str, spec: ConvSpec) -> Self {
        let fan_in = spec.kh * spec.kw * spec.din;
        let kernel = ps.add(
            format!("{name}.kernel"),
            init.uniform(&[spec.kh, spec.kw, spec.din, spec.dout], fan_in),
        );
        let bias = spec
            .bias
            .then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[spec.dout])));
        Self {
            kernel,
            bias,
            stride: spec.stride,
            padding: spec.padding,
        }
    }

    pub fn apply(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            b.var(self.kernel),
            self.bias.map(|id| b.var(id)),
            self.stride,
            self.padding,
        )
    }
}
