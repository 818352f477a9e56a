//! Parameterized layers. Layers hold only [`ParamId`]s and hyperparameters,
//! so one layer definition serves every scalar type.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::kernels::PadMode;
use crate::params::{ParamBuilder, ParamId};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl Conv2d {
    /// He-initialized convolution with "same" padding for odd kernels.
    pub fn new<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let (weight, bias) = pb.scope(name, |pb| {
            let w = pb.normal("weight", &[out_channels, in_channels, kernel, kernel], (2.0 / fan_in).sqrt());
            let b = pb.zeros("bias", &[out_channels]);
            (w, b)
        });
        Conv2d {
            weight,
            bias: Some(bias),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            mode: PadMode::Zero,
        }
    }

    /// 1×1 projection with a small initial scale.
    pub fn pointwise<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        Self::new(pb, name, in_channels, out_channels, 1, 1)
    }

    pub fn with_mode(mut self, mode: PadMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad, self.mode)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// `y = x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, inp: usize, out: usize) -> Self {
        let (weight, bias) = pb.scope(name, |pb| {
            let w = pb.normal("weight", &[inp, out], (1.0 / inp as f64).sqrt());
            let b = pb.zeros("bias", &[out]);
            (w, b)
        });
        Linear { weight, bias, in_features: inp, out_features: out }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        let y = g.matmul(x, g.param(self.weight));
        g.add_row(y, g.param(self.bias))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, dim: usize) -> Self {
        let (gamma, beta) = pb.scope(name, |pb| (pb.constant("gamma", &[dim], 1.0), pb.zeros("beta", &[dim])));
        LayerNorm { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        g.layer_norm(x, g.param(self.gamma), g.param(self.beta), self.eps)
    }
}
