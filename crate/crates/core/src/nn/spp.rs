//! Spatial pyramid pooling: parallel stride-1 max pools fused by a 1×1 conv.

use super::{ConvBnAct, Init, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tape, Var};

pub const SPP_KERNELS: [usize; 3] = [5, 9, 13];

#[derive(Clone, Debug)]
pub struct Spp<T: Scalar = f32> {
    pub fuse: ConvBnAct<T>,
}

impl<T: Scalar> Spp<T> {
    /// `concat(x, pool5, pool9, pool13)` → 1×1 conv back to `channels`.
    pub fn new(init: &mut Init, name: &str, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            fuse: ConvBnAct::pointwise(init, &format!("{name}.fuse"), 4 * channels, channels, groups)?,
        })
    }

    fn channels(&self) -> usize {
        self.fuse.conv.spec.out_channels
    }
}

impl<T: Scalar> Module<T> for Spp<T> {
    fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().c != self.channels() {
            return Err(Error::shape("spp", self.channels(), x.shape()));
        }
        let mut parts = vec![x.clone()];
        for k in SPP_KERNELS {
            parts.push(tape.maxpool(x, k, 1)?);
        }
        let refs: Vec<&Var<T>> = parts.iter().collect();
        let y = tape.concat(&refs)?;
        self.fuse.forward(tape, &y)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.fuse.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fuse.visit_mut(f);
    }

    fn param_count(&self) -> usize {
        self.fuse.param_count()
    }

    fn out_shape(&self, input: Shape) -> Shape {
        input
    }

    fn macs(&self, input: Shape) -> u64 {
        self.fuse.macs(Shape { c: 4 * input.c, ..input })
    }
}
