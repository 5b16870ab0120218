//! Parameterised layers shared by the backbone, mask detector and verifier.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Padding, Tape, Tensor, Var};

/// He-style fan-in scaled uniform initialisation: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
}

impl ConvLayer {
    pub fn init(ksize: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        ConvLayer {
            kernel: he_uniform(&[ksize, ksize, cin, cout], ksize * ksize * cin, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn bind(&self, tape: &mut Tape) -> ConvVars {
        ConvVars {
            kernel: tape.leaf(&self.kernel),
            bias: tape.leaf(&self.bias),
        }
    }

    pub(crate) fn params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        out.push((format!("{prefix}.kernel"), &mut self.kernel));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }

    pub(crate) fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.kernel"), &self.kernel));
        out.push((format!("{prefix}.bias"), &self.bias));
    }
}

impl ConvVars {
    pub fn apply(&self, tape: &mut Tape, x: Var, padding: Padding, stride: usize) -> Result<Var> {
        tape.conv2d(x, self.kernel, self.bias, padding, stride)
    }

    pub(crate) fn push_vars(&self, out: &mut Vec<Var>) {
        out.push(self.kernel);
        out.push(self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weights: Var,
    pub bias: Var,
}

impl DenseLayer {
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        DenseLayer {
            weights: he_uniform(&[inputs, outputs], inputs, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> DenseVars {
        DenseVars {
            weights: tape.leaf(&self.weights),
            bias: tape.leaf(&self.bias),
        }
    }

    pub(crate) fn params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        out.push((format!("{prefix}.weights"), &mut self.weights));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }

    pub(crate) fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weights"), &self.weights));
        out.push((format!("{prefix}.bias"), &self.bias));
    }
}

impl DenseVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.dense(x, self.weights, self.bias)
    }

    pub(crate) fn push_vars(&self, out: &mut Vec<Var>) {
        out.push(self.weights);
        out.push(self.bias);
    }
}
