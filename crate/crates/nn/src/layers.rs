//! Parameterised building blocks assembled on top of [`Graph`] operations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::param::Parameter;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Anything that owns learnable parameters, in a stable declaration order.
pub trait Module {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu(slope) => g.leaky_relu(x, slope),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Convolution with `[k, k, c_in, c_out]` kernels, bias and same-style padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
}

impl Conv2d {
    /// He-normal initialised kernels and zero bias.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (k * k * c_in) as f64).sqrt();
        Self::from_weight(name, Tensor::randn(&[k, k, c_in, c_out], std, rng), stride)
    }

    pub fn from_weight(name: &str, weight: Tensor, stride: usize) -> Self {
        let c_out = weight.shape()[3];
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.kernel_size() / 2)
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Instance normalisation with a learned per-channel affine transform.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl InstanceNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.instance_norm(x, NORM_EPS)?;
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.channel_affine(n, gamma, beta)
    }
}

impl Module for InstanceNorm {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// conv, optional instance norm, activation.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: Option<InstanceNorm>,
    pub act: Activation,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        norm: bool,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), c_in, c_out, k, stride, rng),
            norm: norm.then(|| InstanceNorm::new(&format!("{name}.norm"), c_out)),
            act,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(g, x)?;
        if let Some(norm) = &self.norm {
            y = norm.forward(g, y)?;
        }
        Ok(self.act.apply(g, y))
    }
}

impl Module for ConvBlock {
    fn params(&self) -> Vec<&Parameter> {
        let mut p = self.conv.params();
        if let Some(n) = &self.norm {
            p.extend(n.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.conv.params_mut();
        if let Some(n) = &mut self.norm {
            p.extend(n.params_mut());
        }
        p
    }
}

/// `x + f(x)` with `f` = conv, norm, relu, conv, norm.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub first: ConvBlock,
    pub second: ConvBlock,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, k: usize, rng: &mut R) -> Self {
        Self {
            first: ConvBlock::new(&format!("{name}.0"), channels, channels, k, 1, true, Activation::Relu, rng),
            second: ConvBlock::new(&format!("{name}.1"), channels, channels, k, 1, true, Activation::None, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.first.conv.in_channels()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = g.shape(x).get(2).copied().unwrap_or(0);
        if c != self.channels() {
            return Err(NnError::Shape(format!(
                "residual block: skip path has {c} channels but trunk expects {}",
                self.channels()
            )));
        }
        let h = self.first.forward(g, x)?;
        let h = self.second.forward(g, h)?;
        g.add(x, h)
    }
}

impl Module for ResidualBlock {
    fn params(&self) -> Vec<&Parameter> {
        let mut p = self.first.params();
        p.extend(self.second.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.first.params_mut();
        p.extend(self.second.params_mut());
        p
    }
}

/// Nearest-neighbour 2x resize followed by a stride-1 conv block.
#[derive(Clone, Debug)]
pub struct UpsampleBlock {
    pub block: ConvBlock,
}

impl UpsampleBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        Self { block: ConvBlock::new(name, c_in, c_out, k, 1, true, Activation::Relu, rng) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let up = g.upsample_nearest(x, 2)?;
        self.block.forward(g, up)
    }
}

impl Module for UpsampleBlock {
    fn params(&self) -> Vec<&Parameter> {
        self.block.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.block.params_mut()
    }
}

/// Fully connected layer on rank-1 tensors: `W x + b` with `W` of shape `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let std = (1.0 / n_in as f64).sqrt();
        Self {
            weight: Parameter::new(format!("{name}.weight"), Tensor::randn(&[n_out, n_in], std, rng)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[n_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matvec(w, x)?;
        g.add(y, b)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl<M: Module> Module for Vec<M> {
    fn params(&self) -> Vec<&Parameter> {
        self.iter().flat_map(Module::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.iter_mut().flat_map(Module::params_mut).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_residual_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut block = ResidualBlock::new("rb", 2, 3, &mut rng);
        for p in block.params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let input = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let y = block.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn residual_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = ResidualBlock::new("rb", 2, 3, &mut rng);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[4, 4, 3]));
        assert!(block.forward(&mut g, x).is_err());
    }

    #[test]
    fn upsample_doubles_spatial_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = UpsampleBlock::new("up", 3, 5, 3, &mut rng);
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(&[2, 2, 3], 1.0, &mut rng));
        let y = block.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[4, 4, 5]);
    }

    #[test]
    fn nearest_resize_preserves_constants() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[3, 2, 2], 0.25));
        let y = g.upsample_nearest(x, 2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));
        assert_eq!(g.shape(y), &[6, 4, 2]);
    }
}
