use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softmax, Graph, Padding, Var};
use crate::tensor::Tensor;

use super::blocks::Gate;
use super::layer::{downsampled, LayerSpec, MsSopLayer};
use super::params::{Binding, ConvSpec, ConvUnit, Initializer, ParamSet};

/// Network architecture. The reference configuration is 16 layers in four
/// stages of widths 16/32/64/128 on a 224x224x3 input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub stage_widths: Vec<usize>,
    pub layers_per_stage: usize,
    pub num_classes: usize,
    pub bias: bool,
    pub normalize_covariance: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            input_channels: 3,
            stage_widths: vec![16, 32, 64, 128],
            layers_per_stage: 4,
            num_classes: 3,
            bias: true,
            normalize_covariance: false,
        }
    }
}

impl ClassifierConfig {
    pub fn num_layers(&self) -> usize {
        self.stage_widths.len() * self.layers_per_stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::config("input_size", "must be positive"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels", "must be positive"));
        }
        if self.stage_widths.is_empty() {
            return Err(Error::config("stage_widths", "needs at least one stage"));
        }
        if let Some(w) = self.stage_widths.iter().find(|&&w| w == 0 || w % 4 != 0) {
            return Err(Error::config(
                "stage_widths",
                format!("width {w} is not a positive multiple of 4"),
            ));
        }
        if self.layers_per_stage == 0 {
            return Err(Error::config("layers_per_stage", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "needs at least 2 classes"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MsSopClassifier {
    config: ClassifierConfig,
    seed: u64,
    params: ParamSet,
    stem: ConvUnit,
    layers: Vec<MsSopLayer>,
    head: ConvUnit,
}

/// Output of one forward/backward pass on a single image.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub loss: f64,
    pub probs: Vec<f64>,
    pub grads: Vec<Tensor>,
}

impl MsSopClassifier {
    /// Stem 3x3 convolution to the first stage width, the MS-SoP layers
    /// (stride-2 transition at every stage boundary), global average
    /// pooling and a fully connected head.
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mut init = Initializer::new(seed);
        let stem = ConvUnit::new(
            &mut ps,
            &mut init,
            "stem",
            ConvSpec {
                kh: 3,
                kw: 3,
                din: config.input_channels,
                dout: config.stage_widths[0],
                stride: 1,
                padding: Padding::Same,
                bias: config.bias,
            },
        );
        let (mut h, mut w) = (config.input_size, config.input_size);
        let mut layers = Vec::with_capacity(config.num_layers());
        let stages = config.stage_widths.len();
        for (s, &width) in config.stage_widths.iter().enumerate() {
            for l in 0..config.layers_per_stage {
                let boundary = l + 1 == config.layers_per_stage && s + 1 < stages;
                let spec = LayerSpec {
                    height: h,
                    width: w,
                    depth: width,
                    downsample_to: boundary.then(|| config.stage_widths[s + 1]),
                    bias: config.bias,
                    normalize_covariance: config.normalize_covariance,
                };
                layers.push(MsSopLayer::new(
                    &mut ps,
                    &mut init,
                    &format!("layer{}", layers.len()),
                    &spec,
                )?);
                if boundary {
                    h = downsampled(h);
                    w = downsampled(w);
                }
            }
        }
        let last = *config.stage_widths.last().expect("validated");
        let head = ConvUnit::new(
            &mut ps,
            &mut init,
            "head",
            ConvSpec {
                kh: 1,
                kw: 1,
                din: last,
                dout: config.num_classes,
                stride: 1,
                padding: Padding::Valid,
                bias: true,
            },
        );
        Ok(Self {
            config,
            seed,
            params: ps,
            stem,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn layers(&self) -> &[MsSopLayer] {
        &self.layers
    }

    /// Zeroes the classification head.
    pub fn zero_head(&mut self) {
        self.params.get_mut(self.head.kernel).data_mut().fill(0.0);
        if let Some(b) = self.head.bias {
            self.params.get_mut(b).data_mut().fill(0.0);
        }
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let (h, w, d) = image.hwd()?;
        if d != self.config.input_channels {
            return Err(Error::shape(format!(
                "classifier expects {} channels, got {d}",
                self.config.input_channels
            )));
        }
        let s = self.config.input_size;
        if (h, w) != (s, s) {
            return Err(Error::shape(format!(
                "classifier expects a {s}x{s} input, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Class logits for an `input_size x input_size x input_channels` image.
    pub fn forward(&self, g: &mut Graph, b: &Binding, image: Var, gate: Gate) -> Result<Var> {
        self.check_input(g.value(image))?;
        let x = self.stem.apply(g, b, image)?;
        let mut x = g.relu(x);
        for layer in &self.layers {
            x = layer.forward(g, b, x, gate)?;
        }
        let pooled = g.global_avg_pool(x)?;
        let d = g.value(pooled).numel();
        let pooled = g.reshape(pooled, &[1, 1, d])?;
        let logits = self.head.apply(g, b, pooled)?;
        g.reshape(logits, &[self.config.num_classes])
    }

    pub fn predict_proba(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.check_input(image)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let x = g.constant(image.clone());
        let logits = self.forward(&mut g, &b, x, Gate::Sigmoid)?;
        Ok(softmax(g.value(logits).data()))
    }

    /// Cross-entropy loss and parameter gradients for one labelled image.
    pub fn loss_and_grad(&self, image: &Tensor, target: usize) -> Result<SampleGrad> {
        self.check_input(image)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let x = g.constant(image.clone());
        let logits = self.forward(&mut g, &b, x, Gate::Sigmoid)?;
        let probs = softmax(g.value(logits).data());
        let loss = g.softmax_cross_entropy(logits, target)?;
        let mut grads = g.backward(loss)?;
        let grads = b
            .vars()
            .iter()
            .map(|&v| grads.take(v).expect("every parameter has a gradient"))
            .collect();
        Ok(SampleGrad {
            loss: g.value(loss).data()[0],
            probs,
            grads,
        })
    }
}
