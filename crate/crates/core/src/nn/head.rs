//! Detection head: one 1×1 conv producing raw per-anchor predictions.

use super::{Conv, Init, Module, Param};
use crate::error::Result;
use crate::tensor::{ConvSpec, Scalar, Shape, Tape, Var};

#[derive(Clone, Debug)]
pub struct DetectHead<T: Scalar = f32> {
    pub conv: Conv<T>,
    pub num_anchors: usize,
    pub num_classes: usize,
}

impl<T: Scalar> DetectHead<T> {
    pub fn new(init: &mut Init, name: &str, in_channels: usize, num_anchors: usize, num_classes: usize) -> Result<Self> {
        let out = num_anchors * (5 + num_classes);
        Ok(Self {
            conv: Conv::new(init, &format!("{name}.conv"), ConvSpec::new(in_channels, out, 1).bias(true))?,
            num_anchors,
            num_classes,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.num_anchors * (5 + self.num_classes)
    }
}

impl<T: Scalar> Module<T> for DetectHead<T> {
    fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        self.conv.forward(tape, x)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
    }

    fn param_count(&self) -> usize {
        self.conv.param_count()
    }

    fn out_shape(&self, input: Shape) -> Shape {
        self.conv.out_shape(input)
    }

    fn macs(&self, input: Shape) -> u64 {
        self.conv.macs(input)
    }
}
