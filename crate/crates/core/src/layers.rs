//! Parameterized wrappers around the tape primitives.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Binding, ConvSpec, Float, Graph, ParamId, ParamStore, Var};

pub const IN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, bias: bool, rng: &mut R) -> Self {
        let fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
        let weight = store.add_he_uniform(format!("{name}.weight"), &spec.weight_shape(), fan_in, rng);
        let bias = bias.then(|| store.add_const(format!("{name}.bias"), &[spec.out_channels], 0.0));
        Self { spec, weight, bias }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), &self.spec)
    }
}

/// Stride-`s` transposed convolution with `[C_in, C_out, k, k]` weights.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub stride: usize,
    pub padding: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        // each output pixel receives about in*k*k/(s*s) taps
        let fan_in = (in_channels * kernel * kernel / (stride * stride)).max(1);
        let weight = store.add_he_uniform(format!("{name}.weight"), &[in_channels, out_channels, kernel, kernel], fan_in, rng);
        let bias = store.add_const(format!("{name}.bias"), &[out_channels], 0.0);
        Self {
            stride,
            padding,
            weight,
            bias,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        g.conv_transpose2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), &[channels], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[channels], 0.0),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        g.instance_norm(x, p.var(self.gamma), p.var(self.beta), T::from_f64(IN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_he_uniform(format!("{name}.weight"), &[outputs, inputs], inputs, rng),
            bias: store.add_const(format!("{name}.bias"), &[outputs], 0.0),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        g.dense(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

/// conv → instance norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    pub conv: Conv2d,
    pub norm: InstanceNorm,
}

impl ConvNormRelu {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), spec, true, rng),
            norm: InstanceNorm::new(store, &format!("{name}.norm"), spec.out_channels),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        let y = self.norm.forward(g, p, y)?;
        Ok(g.relu(y))
    }
}
