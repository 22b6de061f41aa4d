//! Parameterised layers over the autograd graph.

use rand::Rng;

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

/// Uniform `±1/sqrt(fan_in)` initialisation.
pub fn uniform_init<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).unwrap()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn same(cin: usize, cout: usize, kernel: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel,
            stride: 1,
            pad: kernel / 2,
            bias: true,
        }
    }

    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self::same(cin, cout, 1)
    }

    pub fn strided(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel,
            stride,
            pad,
            bias: true,
        }
    }
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Self {
        let fan_in = spec.cin * spec.kernel * spec.kernel;
        let w = uniform_init(
            rng,
            &[spec.cout, spec.cin, spec.kernel, spec.kernel],
            fan_in,
        );
        let b = spec.bias.then(|| uniform_init(rng, &[spec.cout], fan_in));
        Self::with_values(store, name, group, spec, w, b)
    }

    /// All weights and bias zero.
    pub fn zeros(store: &mut ParamStore, name: &str, group: ParamGroup, spec: ConvSpec) -> Self {
        let w = Tensor::zeros(&[spec.cout, spec.cin, spec.kernel, spec.kernel]);
        let b = spec.bias.then(|| Tensor::zeros(&[spec.cout]));
        Self::with_values(store, name, group, spec, w, b)
    }

    fn with_values(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        spec: ConvSpec,
        w: Tensor,
        b: Option<Tensor>,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, w);
        let bias = b.map(|b| store.add(format!("{name}.bias"), group, b));
        Conv2d {
            weight,
            bias,
            in_channels: spec.cin,
            out_channels: spec.cout,
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.pad,
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Per-channel 3×3 (or `k×k`) convolution with bias.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl DepthwiseConv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            group,
            uniform_init(rng, &[channels, 1, kernel, kernel], fan_in),
        );
        let bias = store.add(
            format!("{name}.bias"),
            group,
            uniform_init(rng, &[channels], fan_in),
        );
        DepthwiseConv {
            weight,
            bias,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.depthwise_conv2d(x, w, b, self.pad)
    }
}

/// Layer normalisation across channels.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, channels: usize) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            Tensor::full(&[channels], 1.0),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[channels]));
        ChannelNorm { weight, bias }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.layer_norm_channels(x, w, b, 1e-5)
    }
}
