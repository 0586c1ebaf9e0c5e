//! Dense conv blocks for the comparison variants.

use super::{visit_all, ConvBnAct, Init, Module, Param};
use crate::error::{ensure_divisible, Error, Result};
use crate::tensor::{ConvSpec, Scalar, Shape, Tape, Var};

/// `x + conv3×3(conv1×1(x))` with a `c/2` bottleneck.
#[derive(Clone, Debug)]
pub struct ResBlock<T: Scalar = f32> {
    pub cv1: ConvBnAct<T>,
    pub cv2: ConvBnAct<T>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        ensure_divisible("res_block", "channels", channels, 2)?;
        let h = channels / 2;
        Ok(Self {
            cv1: ConvBnAct::new(init, &format!("{name}.cv1"), ConvSpec::new(channels, h, 1))?,
            cv2: ConvBnAct::new(init, &format!("{name}.cv2"), ConvSpec::new(h, channels, 3))?,
        })
    }
}

impl<T: Scalar> Module<T> for ResBlock<T> {
    fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.cv1.forward(tape, x)?;
        let y = self.cv2.forward(tape, &y)?;
        tape.add(x, &y)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        visit_all!(self, f, visit; cv1, cv2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        visit_all!(self, f, visit_mut; cv1, cv2);
    }

    fn param_count(&self) -> usize {
        self.cv1.param_count() + self.cv2.param_count()
    }

    fn out_shape(&self, input: Shape) -> Shape {
        input
    }

    fn macs(&self, input: Shape) -> u64 {
        self.cv1.macs(input) + self.cv2.macs(self.cv1.out_shape(input))
    }
}

/// 3×3 entry conv (optionally strided) followed by residual blocks.
#[derive(Clone, Debug)]
pub struct DenseStage<T: Scalar = f32> {
    pub entry: ConvBnAct<T>,
    pub blocks: Vec<ResBlock<T>>,
}

impl<T: Scalar> DenseStage<T> {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, n_blocks: usize, stride: usize) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::invalid("dense_stage", "n_blocks must be >= 1"));
        }
        let entry = ConvBnAct::new(init, &format!("{name}.entry"), ConvSpec::new(cin, cout, 3).stride(stride))?;
        let blocks = (0..n_blocks)
            .map(|i| ResBlock::new(init, &format!("{name}.block{i}"), cout))
            .collect::<Result<_>>()?;
        Ok(Self { entry, blocks })
    }
}

impl<T: Scalar> Module<T> for DenseStage<T> {
    fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut y = self.entry.forward(tape, x)?;
        for b in &self.blocks {
            y = b.forward(tape, &y)?;
        }
        Ok(y)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.entry.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.entry.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }

    fn param_count(&self) -> usize {
        self.entry.param_count() + self.blocks.iter().map(Module::param_count).sum::<usize>()
    }

    fn out_shape(&self, input: Shape) -> Shape {
        self.entry.out_shape(input)
    }

    fn macs(&self, input: Shape) -> u64 {
        let s = self.entry.out_shape(input);
        self.entry.macs(input) + self.blocks.iter().map(|b| b.macs(s)).sum::<u64>()
    }
}

/// Layer-aggregation block: two 1×1 branches, the second extended by two
/// 3×3 convs, all four outputs concatenated and fused by a 1×1 conv.
#[derive(Clone, Debug)]
pub struct ElanNeckBlock<T: Scalar = f32> {
    pub cv1: ConvBnAct<T>,
    pub cv2: ConvBnAct<T>,
    pub cv3: ConvBnAct<T>,
    pub cv4: ConvBnAct<T>,
    pub fuse: ConvBnAct<T>,
}

impl<T: Scalar> ElanNeckBlock<T> {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize) -> Result<Self> {
        ensure_divisible("elan", "out channels", cout, 4)?;
        let h = cout / 4;
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            cv1: ConvBnAct::new(init, &n("cv1"), ConvSpec::new(cin, h, 1))?,
            cv2: ConvBnAct::new(init, &n("cv2"), ConvSpec::new(cin, h, 1))?,
            cv3: ConvBnAct::new(init, &n("cv3"), ConvSpec::new(h, h, 3))?,
            cv4: ConvBnAct::new(init, &n("cv4"), ConvSpec::new(h, h, 3))?,
            fuse: ConvBnAct::new(init, &n("fuse"), ConvSpec::new(4 * h, cout, 1))?,
        })
    }
}

impl<T: Scalar> Module<T> for ElanNeckBlock<T> {
    fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let a = self.cv1.forward(tape, x)?;
        let b = self.cv2.forward(tape, x)?;
        let c = self.cv3.forward(tape, &b)?;
        let d = self.cv4.forward(tape, &c)?;
        let y = tape.concat(&[&a, &b, &c, &d])?;
        self.fuse.forward(tape, &y)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        visit_all!(self, f, visit; cv1, cv2, cv3, cv4, fuse);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        visit_all!(self, f, visit_mut; cv1, cv2, cv3, cv4, fuse);
    }

    fn param_count(&self) -> usize {
        [&self.cv1, &self.cv2, &self.cv3, &self.cv4, &self.fuse]
            .iter()
            .map(|l| l.param_count())
            .sum()
    }

    fn out_shape(&self, input: Shape) -> Shape {
        self.fuse.out_shape(input)
    }

    fn macs(&self, input: Shape) -> u64 {
        let h = self.cv1.out_shape(input);
        self.cv1.macs(input)
            + self.cv2.macs(input)
            + self.cv3.macs(h)
            + self.cv4.macs(h)
            + self.fuse.macs(Shape { c: 4 * h.c, ..h })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn shapes_and_counts() {
        let mut init = Init::new(0);
        let stage = DenseStage::<f32>::new(&mut init, "s", 16, 32, 2, 2).unwrap();
        let elan = ElanNeckBlock::<f32>::new(&mut init, "e", 32, 24).unwrap();
        assert_eq!(stage.param_count(), stage.allocated_params());
        assert_eq!(elan.param_count(), elan.allocated_params());
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::from_fn(Shape::new(1, 16, 8, 8), |i| (i % 9) as f32 * 0.1));
        let y = stage.forward(&mut tape, &x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 32, 4, 4));
        let z = elan.forward(&mut tape, &y).unwrap();
        assert_eq!(z.shape(), Shape::new(1, 24, 4, 4));
        assert_eq!(elan.out_shape(y.shape()), z.shape());
    }
}
