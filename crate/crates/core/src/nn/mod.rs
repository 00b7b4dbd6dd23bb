//! Layers, optimizer, schedules and checkpoints.

mod adam;
pub mod checkpoint;
mod schedule;

pub use adam::Adam;
pub use schedule::{should_stop, LrSchedule};

use crate::error::{Error, Result};
use crate::rng::{uniform, Rng64};
use crate::tensor::{Tape, Tensor, Var};

/// Fully connected layer `y = x·Wᵀ + b` with `W: [out×in]`, `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    /// Uniform initialization in ±1/√fan_in for both weight and bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut Rng64) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut weight = Tensor::zeros(&[outputs, inputs]);
        weight.data_mut().iter_mut().for_each(|w| *w = uniform(rng, -bound, bound));
        let mut bias = Tensor::zeros(&[outputs]);
        bias.data_mut().iter_mut().for_each(|b| *b = uniform(rng, -bound, bound));
        LinearLayer { weight, bias }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::shape(
                "linear",
                format!("weight {:?} and bias {:?} disagree", weight.shape(), bias.shape()),
            ));
        }
        Ok(LinearLayer { weight, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<LinearLayer>,
    activations: Vec<Activation>,
}

impl Mlp {
    /// ReLU after every hidden layer, identity on the output layer.
    pub fn new(dims: &[usize], rng: &mut Rng64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Contract(format!("invalid layer sizes {dims:?}")));
        }
        let layers: Vec<LinearLayer> = dims.windows(2).map(|w| LinearLayer::init(w[0], w[1], rng)).collect();
        let mut activations = vec![Activation::Relu; layers.len()];
        *activations.last_mut().expect("at least one layer") = Activation::Identity;
        Ok(Mlp { layers, activations })
    }

    pub fn from_layers(layers: Vec<LinearLayer>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() || layers.len() != activations.len() {
            return Err(Error::Contract("one activation per layer required".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(
                    "mlp",
                    format!("layer emits {} but next expects {}", pair[0].outputs(), pair[1].inputs()),
                ));
            }
        }
        Ok(Mlp { layers, activations })
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LinearLayer] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    /// Number of tensors in [`Mlp::parameters`].
    pub fn param_count(&self) -> usize {
        2 * self.layers.len()
    }

    /// `[w0, b0, w1, b1, …]`
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn named_parameters(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("{prefix}.{i}.weight"), &l.weight), (format!("{prefix}.{i}.bias"), &l.bias)])
            .collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.parameters().into_iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Forward pass with parameters supplied as tape variables, in the order of
    /// [`Mlp::parameters`].
    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        if params.len() != self.param_count() {
            return Err(Error::Contract(format!(
                "mlp expects {} parameter tensors, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!("input {shape:?} does not match input size {}", self.input_dim()),
            ));
        }
        let mut h = x;
        for (i, act) in self.activations.iter().enumerate() {
            let w = params[2 * i];
            let b = params[2 * i + 1];
            h = h.matmul(w.transpose()?)?.add(b)?;
            if *act == Activation::Relu {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    /// Inference-only forward pass.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params: Vec<Var> = self.parameters().into_iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(x.clone());
        Ok(self.forward(&params, x)?.value())
    }
}
