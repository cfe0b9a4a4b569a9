use rand::Rng;

use super::{Graph, Result, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Hidden activation used by every learned block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

pub const ACTIVATION: Activation = Activation::Relu;

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl LinearLayer {
    /// Uniform(-√(1/in), √(1/in)) for weights and biases.
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / input.max(1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let weight = Tensor::new(&[output, input], draw(output * input)).expect("shape");
        let bias = Tensor::vector(draw(output));
        Self { weight, bias }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(&[output, input]), bias: Tensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLinear {
        let (weight, bias) = if trainable {
            (g.param(&self.weight), g.param(&self.bias))
        } else {
            (g.constant(self.weight.clone()), g.constant(self.bias.clone()))
        };
        BoundLinear { weight, bias }
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormLayer {
    pub gain: Tensor,
    pub shift: Tensor,
    pub epsilon: f64,
}

impl LayerNormLayer {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Tensor::new(&[dim], vec![1.0; dim]).expect("rank-1"),
            shift: Tensor::new(&[dim], vec![0.0; dim]).expect("rank-1"),
            epsilon: LAYER_NORM_EPS,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLayerNorm {
        let (gain, shift) = if trainable {
            (g.param(&self.gain), g.param(&self.shift))
        } else {
            (g.constant(self.gain.clone()), g.constant(self.shift.clone()))
        };
        BoundLayerNorm { gain, shift, epsilon: self.epsilon }
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.gain, &self.shift]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.gain, &mut self.shift]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayerNorm {
    pub gain: Var,
    pub shift: Var,
    pub epsilon: f64,
}

impl BoundLayerNorm {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.shift, self.epsilon)
    }
}

/// Two linear layers with the hidden activation between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub first: LinearLayer,
    pub second: LinearLayer,
}

impl Mlp {
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self { first: LinearLayer::init(input, hidden, rng), second: LinearLayer::init(hidden, output, rng) }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self { first: LinearLayer::zeros(input, hidden), second: LinearLayer::zeros(hidden, output) }
    }

    pub fn input_dim(&self) -> usize {
        self.first.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.second.output_dim()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        BoundMlp { first: self.first.bind(g, trainable), second: self.second.bind(g, trainable) }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.first.tensors().into_iter().chain(self.second.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.first.tensors_mut().into_iter().chain(self.second.tensors_mut()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMlp {
    pub first: BoundLinear,
    pub second: BoundLinear,
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = ACTIVATION.apply(g, h);
        self.second.forward(g, h)
    }
}
