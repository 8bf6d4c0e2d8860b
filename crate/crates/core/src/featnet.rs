//! Multilayer perceptron feature extractor.

use crate::error::{Error, Result};
use crate::numcore::{ParamId, Rng, Tape, Tensor, Var};

/// Default hidden widths and output width for flat inputs.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
pub const DEFAULT_FEATURE_DIM: usize = 16;

/// Affine map `x W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[1, output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub fn forward_tracked(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        let h = tape.matmul(x, params[0])?;
        tape.add(h, params[1])
    }
}

/// Rows of extracted features, one per input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch(pub Tensor);

impl FeatureBatch {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::shape("feature batch", features.shape(), &[0, 0]));
        }
        Ok(FeatureBatch(features))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

/// ReLU MLP; the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet {
    layer_dims: Vec<usize>,
    layers: Vec<Linear>,
}

impl FeatureNet {
    /// He-scaled Gaussian weights, zero biases.
    pub fn init(layer_dims: &[usize], rng: &mut Rng) -> Result<Self> {
        validate_dims(layer_dims)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.normal() * std).collect();
                Linear {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("sized above"),
                    bias: Tensor::zeros(&[1, fan_out]),
                }
            })
            .collect();
        Ok(FeatureNet {
            layer_dims: layer_dims.to_vec(),
            layers,
        })
    }

    /// Default architecture `input_dim → 64 → 64 → 16`.
    pub fn default_dims(input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(DEFAULT_HIDDEN);
        dims.push(DEFAULT_FEATURE_DIM);
        dims
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Config("a network needs at least one layer".into()))?;
        let mut dims = vec![first.input_dim()];
        for l in &layers {
            if l.input_dim() != *dims.last().unwrap() {
                return Err(Error::shape("layer chain", &[*dims.last().unwrap()], l.weight.shape()));
            }
            if l.bias.shape() != [1, l.output_dim()] {
                return Err(Error::shape("bias", l.bias.shape(), &[1, l.output_dim()]));
            }
            dims.push(l.output_dim());
        }
        Ok(FeatureNet {
            layer_dims: dims,
            layers,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Weights and biases interleaved: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Puts every parameter on the tape as `ParamId(offset + i)`.
    pub fn register(&self, tape: &mut Tape, offset: usize) -> Vec<Var> {
        self.params()
            .into_iter()
            .enumerate()
            .map(|(i, p)| tape.param(ParamId(offset + i), p.clone()))
            .collect()
    }

    fn check_input(&self, inputs: &Tensor) -> Result<()> {
        if inputs.shape().len() != 2 || inputs.cols() != self.input_dim() {
            return Err(Error::shape("extract", inputs.shape(), &[0, self.input_dim()]));
        }
        Ok(())
    }

    /// Applies the network row-wise without recording gradients.
    pub fn extract(&self, inputs: &Tensor) -> Result<FeatureBatch> {
        self.check_input(inputs)?;
        let mut h = inputs.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i != last {
                h = h.relu();
            }
        }
        FeatureBatch::new(h)
    }

    /// Same map as [`extract`](Self::extract), recorded on `tape` against
    /// the handles returned by [`register`](Self::register).
    pub fn extract_tracked(&self, tape: &mut Tape, params: &[Var], inputs: Var) -> Result<Var> {
        self.check_input(tape.value(inputs))?;
        if params.len() != 2 * self.layers.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter handles, got {}",
                2 * self.layers.len(),
                params.len()
            )));
        }
        let mut h = inputs;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_tracked(tape, h, &params[2 * i..2 * i + 2])?;
            if i != last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "need input and output dims, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Config(format!("layer dims must be positive: {dims:?}")));
    }
    Ok(())
}
