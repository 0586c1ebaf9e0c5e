//! Parameterised layers and the two shuffle blocks built from them.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ConvSpec, Scalar, Shape, Tape, Tensor, Var};

mod dense;
mod dgsm;
mod dgst;
mod head;
mod spp;
pub mod gradcheck;

pub use dense::{DenseStage, ElanNeckBlock, ResBlock};
pub use dgsm::{DgsmBlock, DgsmConfig, DgsmStage};
pub use dgst::{sinusoidal_2d, DgstBlock, DgstConfig};
pub use head::DetectHead;
pub use spp::Spp;

pub use crate::tensor::kernels::LEAKY_SLOPE;

/// A named, shareable parameter buffer.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar = f32> {
    pub id: usize,
    pub name: String,
    pub value: Arc<Tensor<T>>,
    /// Running statistics are parameters for storage and counting, but take
    /// no gradient.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn var(&self, tape: &mut Tape<T>) -> Var<T> {
        tape.param_leaf(self.id, Arc::clone(&self.value), self.trainable)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }
}

/// Deterministic parameter factory: ids in creation order, values from a
/// seeded stream.
pub struct Init {
    rng: ChaCha8Rng,
    next_id: usize,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 0,
        }
    }

    fn make<T: Scalar>(&mut self, name: String, value: Tensor<T>, trainable: bool) -> Param<T> {
        let id = self.next_id;
        self.next_id += 1;
        Param {
            id,
            name,
            value: Arc::new(value),
            trainable,
        }
    }

    /// `U(-1/√fan_in, 1/√fan_in)`.
    pub fn uniform<T: Scalar>(&mut self, name: String, shape: Shape, fan_in: usize) -> Param<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        self.make(name, value, true)
    }

    pub fn constant<T: Scalar>(&mut self, name: String, shape: Shape, v: f64, trainable: bool) -> Param<T> {
        self.make(name, Tensor::full(shape, T::of(v)), trainable)
    }
}

/// Common surface of every layer and block.
pub trait Module<T: Scalar> {
    fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>>;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    /// Parameter count from the layer's configuration (closed form).
    fn param_count(&self) -> usize;

    fn out_shape(&self, input: Shape) -> Shape;

    /// Multiply-accumulates of one forward pass.
    fn macs(&self, input: Shape) -> u64;

    /// Parameter count by enumerating allocated buffers.
    fn allocated_params(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |p| total += p.len());
        total
    }
}

/// Convolution with optional bias and no normalization.
#[derive(Clone, Debug)]
pub struct Conv<T: Scalar = f32> {
    pub spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Conv<T> {
    pub fn new(init: &mut Init, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_channels / spec.groups * spec.kernel * spec.kernel;
        let weight = init.uniform(format!("{name}.weight"), spec.weight_shape(), fan_in);
        let bias = spec
            .has_bias
            .then(|| init.uniform(format!("{name}.bias"), Shape::channels(spec.out_channels), fan_in));
        Ok(Self { spec, weight, bias })
    }

    fn is_depthwise(&self) -> bool {
        let s = &self.spec;
        s.kernel == 3 && s.groups == s.in_channels && s.in_channels == s.out_channels
    }
}

impl<T: Scalar> Module<T> for Conv<T> {
    fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = self.weight.var(tape);
        let b = self.bias.as_ref().map(|b| b.var(tape));
        if self.is_depthwise() {
            tape.depthwise_conv(x, &w, b.as_ref(), self.spec.stride)
        } else {
            tape.conv2d(x, &w, b.as_ref(), self.spec)
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    fn out_shape(&self, input: Shape) -> Shape {
        self.spec.out_shape(input)
    }

    fn macs(&self, input: Shape) -> u64 {
        self.spec.macs(input)
    }
}

/// Batchnorm with learnable scale/shift and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<T: Scalar = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub mean: Param<T>,
    pub var: Param<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        let s = Shape::channels(channels);
        Self {
            gamma: init.constant(format!("{name}.gamma"), s, 1.0, true),
            beta: init.constant(format!("{name}.beta"), s, 0.0, true),
            mean: init.constant(format!("{name}.running_mean"), s, 0.0, false),
            var: init.constant(format!("{name}.running_var"), s, 1.0, false),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let (g, b) = (self.gamma.var(tape), self.beta.var(tape));
        let (m, v) = (self.mean.var(tape), self.var.var(tape));
        tape.batchnorm(x, &g, &b, &m, &v, Some((self.mean.id, self.var.id)))
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.mean);
        f(&self.var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.mean);
        f(&mut self.var);
    }

    fn param_count(&self) -> usize {
        4 * self.channels()
    }

    fn out_shape(&self, input: Shape) -> Shape {
        input
    }

    fn macs(&self, _input: Shape) -> u64 {
        0
    }
}

/// Convolution (no bias) → batchnorm → optional leaky ReLU. A 3×3 conv with
/// `groups == in == out` runs on the depthwise fast path.
#[derive(Clone, Debug)]
pub struct ConvBnAct<T: Scalar = f32> {
    pub conv: Conv<T>,
    pub bn: BatchNorm<T>,
    pub act: bool,
}

impl<T: Scalar> ConvBnAct<T> {
    pub fn new(init: &mut Init, name: &str, spec: ConvSpec) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(init, &format!("{name}.conv"), spec.bias(false))?,
            bn: BatchNorm::new(init, &format!("{name}.bn"), spec.out_channels),
            act: true,
        })
    }

    /// 3×3 depthwise conv + BN, no activation.
    pub fn depthwise(init: &mut Init, name: &str, channels: usize, stride: usize) -> Result<Self> {
        let spec = ConvSpec::new(channels, channels, 3).groups(channels).stride(stride);
        let mut layer = Self::new(init, name, spec)?;
        layer.act = false;
        Ok(layer)
    }

    pub fn pointwise(init: &mut Init, name: &str, cin: usize, cout: usize, groups: usize) -> Result<Self> {
        Self::new(init, name, ConvSpec::new(cin, cout, 1).groups(groups))
    }
}

impl<T: Scalar> Module<T> for ConvBnAct<T> {
    fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, &y)?;
        if self.act {
            tape.leaky_relu(&y)
        } else {
            Ok(y)
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }

    fn param_count(&self) -> usize {
        self.conv.spec.param_count() + 4 * self.conv.spec.out_channels
    }

    fn out_shape(&self, input: Shape) -> Shape {
        self.conv.out_shape(input)
    }

    fn macs(&self, input: Shape) -> u64 {
        self.conv.macs(input)
    }
}

/// Layer norm across channels.
#[derive(Clone, Debug)]
pub struct LayerNorm<T: Scalar = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        let s = Shape::channels(channels);
        Self {
            gamma: init.constant(format!("{name}.gamma"), s, 1.0, true),
            beta: init.constant(format!("{name}.beta"), s, 0.0, true),
        }
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let (g, b) = (self.gamma.var(tape), self.beta.var(tape));
        tape.layernorm_channels(x, &g, &b)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn param_count(&self) -> usize {
        2 * self.gamma.shape().c
    }

    fn out_shape(&self, input: Shape) -> Shape {
        input
    }

    fn macs(&self, _input: Shape) -> u64 {
        0
    }
}

/// Visit helpers for composite modules.
macro_rules! visit_all {
    ($self:ident, $f:ident, $method:ident; $($field:ident),+) => {
        $( $self.$field.$method($f); )+
    };
}
pub(crate) use visit_all;
