//! Backbone shuffle block: grouped pointwise convs around a depthwise conv,
//! a split skip branch, and a two-way channel shuffle.

use super::{ConvBnAct, Init, Module, Param};
use crate::error::{ensure_divisible, Error, Result};
use crate::tensor::{Scalar, Shape, Tape, Var};

/// One backbone stage: `n_blocks` blocks producing `channels` outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DgsmConfig {
    pub channels: usize,
    pub n_blocks: usize,
    /// Entry block runs at stride 2.
    pub downsample: bool,
    /// Group count of the pointwise convs.
    pub pw_groups: usize,
}

impl DgsmConfig {
    pub fn new(channels: usize, n_blocks: usize) -> Self {
        Self {
            channels,
            n_blocks,
            downsample: true,
            pw_groups: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "dgsm";
        ensure_divisible(OP, "channels", self.channels, 4)?;
        if self.n_blocks == 0 {
            return Err(Error::invalid(OP, "n_blocks must be >= 1"));
        }
        if self.pw_groups == 0 {
            return Err(Error::invalid(OP, "pw_groups must be >= 1"));
        }
        ensure_divisible(OP, "channels / 2", self.channels / 2, self.pw_groups)
    }
}

/// Either the shape-preserving block or the two-branch entry block.
#[derive(Clone, Debug)]
pub enum DgsmBlock<T: Scalar = f32> {
    /// Split in half; one half passes through, the other goes
    /// pw(g) → dw3×3 → pw(g); concat; shuffle(2).
    Basic {
        pw1: ConvBnAct<T>,
        dw: ConvBnAct<T>,
        pw2: ConvBnAct<T>,
    },
    /// Both branches see the full input; spatial stride applied in the
    /// depthwise convs; each branch yields `channels / 2`.
    Entry {
        a_dw: ConvBnAct<T>,
        a_pw: ConvBnAct<T>,
        b_pw1: ConvBnAct<T>,
        b_dw: ConvBnAct<T>,
        b_pw2: ConvBnAct<T>,
    },
}

impl<T: Scalar> DgsmBlock<T> {
    pub fn basic(init: &mut Init, name: &str, channels: usize, pw_groups: usize) -> Result<Self> {
        ensure_divisible("dgsm", "channels", channels, 4)?;
        let h = channels / 2;
        Ok(Self::Basic {
            pw1: ConvBnAct::pointwise(init, &format!("{name}.pw1"), h, h, pw_groups)?,
            dw: ConvBnAct::depthwise(init, &format!("{name}.dw"), h, 1)?,
            pw2: ConvBnAct::pointwise(init, &format!("{name}.pw2"), h, h, pw_groups)?,
        })
    }

    pub fn entry(
        init: &mut Init,
        name: &str,
        in_channels: usize,
        channels: usize,
        stride: usize,
        pw_groups: usize,
    ) -> Result<Self> {
        ensure_divisible("dgsm", "channels", channels, 4)?;
        let h = channels / 2;
        Ok(Self::Entry {
            a_dw: ConvBnAct::depthwise(init, &format!("{name}.a_dw"), in_channels, stride)?,
            a_pw: ConvBnAct::pointwise(init, &format!("{name}.a_pw"), in_channels, h, 1)?,
            b_pw1: ConvBnAct::pointwise(init, &format!("{name}.b_pw1"), in_channels, h, pw_groups)?,
            b_dw: ConvBnAct::depthwise(init, &format!("{name}.b_dw"), h, stride)?,
            b_pw2: ConvBnAct::pointwise(init, &format!("{name}.b_pw2"), h, h, pw_groups)?,
        })
    }

    pub fn stride(&self) -> usize {
        match self {
            Self::Basic { .. } => 1,
            Self::Entry { a_dw, .. } => a_dw.conv.spec.stride,
        }
    }

    fn out_channels(&self) -> usize {
        match self {
            Self::Basic { pw1, .. } => 2 * pw1.conv.spec.in_channels,
            Self::Entry { a_pw, .. } => 2 * a_pw.conv.spec.out_channels,
        }
    }
}

impl<T: Scalar> Module<T> for DgsmBlock<T> {
    fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let merged = match self {
            Self::Basic { pw1, dw, pw2 } => {
                let c = x.shape().c;
                if c != 2 * pw1.conv.spec.in_channels {
                    return Err(Error::shape("dgsm", 2 * pw1.conv.spec.in_channels, x.shape()));
                }
                let halves = tape.channel_split(x, &[c / 2, c / 2])?;
                let b = pw1.forward(tape, &halves[1])?;
                let b = dw.forward(tape, &b)?;
                let b = pw2.forward(tape, &b)?;
                tape.concat(&[&halves[0], &b])?
            }
            Self::Entry {
                a_dw,
                a_pw,
                b_pw1,
                b_dw,
                b_pw2,
            } => {
                let a = a_dw.forward(tape, x)?;
                let a = a_pw.forward(tape, &a)?;
                let b = b_pw1.forward(tape, x)?;
                let b = b_dw.forward(tape, &b)?;
                let b = b_pw2.forward(tape, &b)?;
                tape.concat(&[&a, &b])?
            }
        };
        tape.channel_shuffle(&merged, 2)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            Self::Basic { pw1, dw, pw2 } => {
                pw1.visit(f);
                dw.visit(f);
                pw2.visit(f);
            }
            Self::Entry {
                a_dw,
                a_pw,
                b_pw1,
                b_dw,
                b_pw2,
            } => {
                for l in [a_dw, a_pw, b_pw1, b_dw, b_pw2] {
                    l.visit(f);
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Self::Basic { pw1, dw, pw2 } => {
                pw1.visit_mut(f);
                dw.visit_mut(f);
                pw2.visit_mut(f);
            }
            Self::Entry {
                a_dw,
                a_pw,
                b_pw1,
                b_dw,
                b_pw2,
            } => {
                for l in [a_dw, a_pw, b_pw1, b_dw, b_pw2] {
                    l.visit_mut(f);
                }
            }
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Self::Basic { pw1, dw, pw2 } => pw1.param_count() + dw.param_count() + pw2.param_count(),
            Self::Entry {
                a_dw,
                a_pw,
                b_pw1,
                b_dw,
                b_pw2,
            } => [a_dw, a_pw, b_pw1, b_dw, b_pw2].iter().map(|l| l.param_count()).sum(),
        }
    }

    fn out_shape(&self, input: Shape) -> Shape {
        let s = self.stride();
        Shape::new(input.n, self.out_channels(), input.h.div_ceil(s), input.w.div_ceil(s))
    }

    fn macs(&self, input: Shape) -> u64 {
        match self {
            Self::Basic { pw1, dw, pw2 } => {
                let half = Shape::new(input.n, input.c / 2, input.h, input.w);
                pw1.macs(half) + dw.macs(half) + pw2.macs(half)
            }
            Self::Entry {
                a_dw,
                a_pw,
                b_pw1,
                b_dw,
                b_pw2,
            } => {
                let a = a_dw.out_shape(input);
                let b1 = b_pw1.out_shape(input);
                let b2 = b_dw.out_shape(b1);
                a_dw.macs(input) + a_pw.macs(a) + b_pw1.macs(input) + b_dw.macs(b1) + b_pw2.macs(b2)
            }
        }
    }
}

/// Entry block followed by `n_blocks − 1` shape-preserving blocks.
#[derive(Clone, Debug)]
pub struct DgsmStage<T: Scalar = f32> {
    pub config: DgsmConfig,
    pub blocks: Vec<DgsmBlock<T>>,
}

impl<T: Scalar> DgsmStage<T> {
    pub fn new(init: &mut Init, name: &str, in_channels: usize, config: DgsmConfig) -> Result<Self> {
        config.validate()?;
        let stride = if config.downsample { 2 } else { 1 };
        let mut blocks = vec![DgsmBlock::entry(
            init,
            &format!("{name}.block0"),
            in_channels,
            config.channels,
            stride,
            config.pw_groups,
        )?];
        for i in 1..config.n_blocks {
            blocks.push(DgsmBlock::basic(
                init,
                &format!("{name}.block{i}"),
                config.channels,
                config.pw_groups,
            )?);
        }
        Ok(Self { config, blocks })
    }
}

impl<T: Scalar> Module<T> for DgsmStage<T> {
    fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward(tape, &y)?;
        }
        Ok(y)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for b in &self.blocks {
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }

    fn param_count(&self) -> usize {
        self.blocks.iter().map(Module::param_count).sum()
    }

    fn out_shape(&self, input: Shape) -> Shape {
        self.blocks.iter().fold(input, |s, b| b.out_shape(s))
    }

    fn macs(&self, input: Shape) -> u64 {
        let mut s = input;
        let mut total = 0;
        for b in &self.blocks {
            total += b.macs(s);
            s = b.out_shape(s);
        }
        total
    }
}
