//! Neck shuffle-transformer block: a 3:1 channel split between a grouped
//! conv path and a conv-projected self-attention path.

use super::{visit_all, Conv, ConvBnAct, Init, LayerNorm, Module, Param};
use crate::error::{ensure_divisible, Error, Result};
use crate::tensor::kernels;
use crate::tensor::{ConvSpec, Scalar, Shape, Tape, Tensor, Var};

/// Width of one attention head.
pub const HEAD_DIM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DgstConfig {
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pw_groups: usize,
    /// Add the fixed 2D sinusoidal encoding before attention.
    pub pos_encoding: bool,
}

impl DgstConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            heads: (channels / 4 / HEAD_DIM).max(1),
            mlp_ratio: 2,
            pw_groups: 2,
            pos_encoding: true,
        }
    }

    pub fn attn_channels(&self) -> usize {
        self.channels / 4
    }

    pub fn conv_channels(&self) -> usize {
        self.channels - self.attn_channels()
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "dgst";
        ensure_divisible(OP, "channels", self.channels, 4)?;
        if self.channels == 0 || self.heads == 0 || self.mlp_ratio == 0 || self.pw_groups == 0 {
            return Err(Error::invalid(OP, "channels, heads, mlp_ratio and pw_groups must be positive"));
        }
        // The conv path is shuffled in two groups.
        ensure_divisible(OP, "conv-path channels", self.conv_channels(), 2)?;
        ensure_divisible(OP, "conv-path channels", self.conv_channels(), self.pw_groups)?;
        ensure_divisible(OP, "attention channels", self.attn_channels(), self.heads)
    }
}

/// Fixed 2D sinusoidal encoding of shape `(1, channels, h, w)`: the first
/// half of the channels encodes the row, the second half the column.
pub fn sinusoidal_2d<T: Scalar>(channels: usize, h: usize, w: usize) -> Tensor<T> {
    let row = channels / 2;
    let col = channels - row;
    let enc = |k: usize, width: usize, pos: usize| {
        let i = (k / 2) as f64;
        let freq = 10000f64.powf(-2.0 * i / width.max(1) as f64);
        let a = pos as f64 * freq;
        if k % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    Tensor::from_fn(Shape::new(1, channels, h, w), |idx| {
        let c = idx / (h * w);
        let y = idx / w % h;
        let x = idx % w;
        T::of(if c < row { enc(c, row, y) } else { enc(c - row, col, x) })
    })
}

#[derive(Clone, Debug)]
pub struct DgstBlock<T: Scalar = f32> {
    pub config: DgstConfig,
    pub pw1: ConvBnAct<T>,
    pub dw: ConvBnAct<T>,
    pub pw2: ConvBnAct<T>,
    pub norm1: LayerNorm<T>,
    pub q: Conv<T>,
    pub k: Conv<T>,
    pub v: Conv<T>,
    pub proj: Conv<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Conv<T>,
    pub fc2: Conv<T>,
}

impl<T: Scalar> DgstBlock<T> {
    pub fn new(init: &mut Init, name: &str, config: DgstConfig) -> Result<Self> {
        config.validate()?;
        let (c, a, g) = (config.conv_channels(), config.attn_channels(), config.pw_groups);
        let hidden = a * config.mlp_ratio;
        let lin = |init: &mut Init, n: &str, i: usize, o: usize| {
            Conv::new(init, &format!("{name}.{n}"), ConvSpec::new(i, o, 1).bias(true))
        };
        Ok(Self {
            config,
            pw1: ConvBnAct::pointwise(init, &format!("{name}.pw1"), c, c, g)?,
            dw: ConvBnAct::depthwise(init, &format!("{name}.dw"), c, 1)?,
            pw2: ConvBnAct::pointwise(init, &format!("{name}.pw2"), c, c, g)?,
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), a),
            q: lin(init, "q", a, a)?,
            k: lin(init, "k", a, a)?,
            v: lin(init, "v", a, a)?,
            proj: lin(init, "proj", a, a)?,
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), a),
            fc1: lin(init, "fc1", a, hidden)?,
            fc2: lin(init, "fc2", hidden, a)?,
        })
    }

    pub fn conv_path(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.pw1.forward(tape, x)?;
        let y = self.dw.forward(tape, &y)?;
        let y = self.pw2.forward(tape, &y)?;
        tape.channel_shuffle(&y, 2)
    }

    /// Pre-norm transformer over the `h·w` positions of the attention slice.
    pub fn attention_path(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        let t = if self.config.pos_encoding {
            let pe = sinusoidal_2d::<T>(s.c, s.h, s.w);
            let pe = Tensor::from_fn(s, |i| pe.data()[i % pe.len()]);
            let pe = tape.constant(pe);
            tape.add(x, &pe)?
        } else {
            x.clone()
        };
        let n = self.norm1.forward(tape, &t)?;
        let (q, k, v) = (self.q.forward(tape, &n)?, self.k.forward(tape, &n)?, self.v.forward(tape, &n)?);
        let att = tape.attention(&q, &k, &v, self.config.heads)?;
        let att = self.proj.forward(tape, &att)?;
        let t = tape.add(&t, &att)?;
        let n = self.norm2.forward(tape, &t)?;
        let m = self.fc1.forward(tape, &n)?;
        let m = tape.silu(&m)?;
        let m = self.fc2.forward(tape, &m)?;
        tape.add(&t, &m)
    }

    /// Softmax weights of the attention path for the attention slice `x`,
    /// laid out `[n][head][query][key]`.
    pub fn attention_weights(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::inference();
        let s = x.shape();
        let mut t = x.clone();
        if self.config.pos_encoding {
            let pe = sinusoidal_2d::<T>(s.c, s.h, s.w);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = *v + pe.data()[i % pe.len()];
            }
        }
        let t = tape.constant(t);
        let n = self.norm1.forward(&mut tape, &t)?;
        let (q, k, v) = (self.q.forward(&mut tape, &n)?, self.k.forward(&mut tape, &n)?, self.v.forward(&mut tape, &n)?);
        Ok(kernels::attention(q.value(), k.value(), v.value(), self.config.heads).1)
    }

    fn attn_param_count(&self) -> usize {
        let a = self.config.attn_channels();
        let hidden = a * self.config.mlp_ratio;
        4 * a + 4 * (a * a + a) + (a * hidden + hidden) + (hidden * a + a)
    }
}

impl<T: Scalar> Module<T> for DgstBlock<T> {
    fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().c != self.config.channels {
            return Err(Error::shape("dgst", self.config.channels, x.shape()));
        }
        let parts = tape.channel_split(x, &[self.config.conv_channels(), self.config.attn_channels()])?;
        let c = self.conv_path(tape, &parts[0])?;
        let a = self.attention_path(tape, &parts[1])?;
        let y = tape.concat(&[&c, &a])?;
        let y = tape.channel_shuffle(&y, 4)?;
        tape.add(&y, x)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        visit_all!(self, f, visit; pw1, dw, pw2, norm1, q, k, v, proj, norm2, fc1, fc2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        visit_all!(self, f, visit_mut; pw1, dw, pw2, norm1, q, k, v, proj, norm2, fc1, fc2);
    }

    fn param_count(&self) -> usize {
        let c = self.config.conv_channels();
        let pw = c * c / self.config.pw_groups + 4 * c;
        2 * pw + 9 * c + 4 * c + self.attn_param_count()
    }

    fn out_shape(&self, input: Shape) -> Shape {
        input
    }

    fn macs(&self, input: Shape) -> u64 {
        let conv = Shape { c: self.config.conv_channels(), ..input };
        let attn = Shape { c: self.config.attn_channels(), ..input };
        let hidden = Shape { c: attn.c * self.config.mlp_ratio, ..input };
        let l = input.plane() as u64;
        let projections = self.q.macs(attn) + self.k.macs(attn) + self.v.macs(attn) + self.proj.macs(attn);
        self.pw1.macs(conv)
            + self.dw.macs(conv)
            + self.pw2.macs(conv)
            + projections
            + 2 * l * l * attn.c as u64 * input.n as u64
            + self.fc1.macs(attn)
            + self.fc2.macs(hidden)
    }
}
