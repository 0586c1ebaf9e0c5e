//! Differentiable ops. Each validates shapes, runs the forward kernel and
//! records a closure computing input gradients.

use std::sync::Arc;

use super::kernels as k;
use super::tape::{BnUpdate, ParamId};
use super::{ConvSpec, Mode, Scalar, Shape, Tape, Tensor, Var};
use crate::error::{ensure_divisible, Error, Result};

fn expect_shape(op: &'static str, expected: Shape, got: Shape) -> Result<()> {
    if expected != got {
        return Err(Error::shape(op, expected, got));
    }
    Ok(())
}

fn channel_vec<T: Scalar>(op: &'static str, v: &Var<T>, c: usize) -> Result<()> {
    expect_shape(op, Shape::channels(c), v.shape())
}

fn map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same size")
}

impl<T: Scalar> Tape<T> {
    /// Grouped "same" convolution; weight `(out, in/g, k, k)`, optional bias `(1, out, 1, 1)`.
    pub fn conv2d(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, spec: ConvSpec) -> Result<Var<T>> {
        const OP: &str = "conv2d";
        spec.validate()?;
        if x.shape().c != spec.in_channels {
            return Err(Error::shape(OP, format!("{} input channels", spec.in_channels), x.shape()));
        }
        expect_shape(OP, spec.weight_shape(), w.shape())?;
        match (b, spec.has_bias) {
            (Some(b), true) => channel_vec(OP, b, spec.out_channels)?,
            (None, false) => {}
            _ => return Err(Error::invalid(OP, "bias presence does not match spec")),
        }
        let out = k::conv2d(x.value(), w.value(), b.map(|b| b.value()), &spec);
        let (xv, wv) = (x.shared(), w.shared());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record(OP, &inputs, out, move |dy, needs| {
            let g = k::conv2d_backward(&xv, &wv, &spec, dy, needs[0]);
            let mut r = vec![needs[0].then_some(g.dx), needs[1].then_some(g.dw)];
            if spec.has_bias {
                r.push(g.db);
            }
            r
        })
    }

    /// 3×3 per-channel convolution; weight `(c, 1, 3, 3)`.
    pub fn depthwise_conv(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, stride: usize) -> Result<Var<T>> {
        const OP: &str = "depthwise_conv";
        let c = x.shape().c;
        expect_shape(OP, Shape::new(c, 1, 3, 3), w.shape())?;
        if !matches!(stride, 1 | 2) {
            return Err(Error::invalid(OP, format!("stride {stride} not in {{1, 2}}")));
        }
        if let Some(b) = b {
            channel_vec(OP, b, c)?;
        }
        let out = k::depthwise(x.value(), w.value(), b.map(|b| b.value()), stride);
        let (xv, wv) = (x.shared(), w.shared());
        let has_bias = b.is_some();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record(OP, &inputs, out, move |dy, needs| {
            let g = k::depthwise_backward(&xv, &wv, stride, has_bias, dy, needs[0]);
            let mut r = vec![needs[0].then_some(g.dx), needs[1].then_some(g.dw)];
            if has_bias {
                r.push(g.db);
            }
            r
        })
    }

    /// Output channel `j` takes input channel `perm[j]`.
    pub fn permute_channels(&mut self, x: &Var<T>, perm: Vec<usize>) -> Result<Var<T>> {
        const OP: &str = "permute_channels";
        let s = x.shape();
        let mut seen = vec![false; s.c];
        if perm.len() != s.c || !perm.iter().all(|&p| p < s.c && !std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(OP, format!("not a permutation of {} channels", s.c)));
        }
        let out = Tensor::new(s, k::permute_channels(x.value().data(), s, &perm))?;
        self.record(OP, &[x], out, move |dy, _| {
            vec![Some(k::permute_channels(dy, s, &k::invert_perm(&perm)))]
        })
    }

    /// ShuffleNet channel shuffle: reshape `(g, c/g)`, transpose, flatten.
    pub fn channel_shuffle(&mut self, x: &Var<T>, groups: usize) -> Result<Var<T>> {
        ensure_divisible("channel_shuffle", "channels", x.shape().c, groups)?;
        self.permute_channels(x, k::shuffle_perm(x.shape().c, groups))
    }

    /// Channels `[start, start + len)`.
    pub fn narrow_channels(&mut self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        const OP: &str = "narrow_channels";
        let s = x.shape();
        if len == 0 || start + len > s.c {
            return Err(Error::invalid(OP, format!("range {start}..{} outside {} channels", start + len, s.c)));
        }
        let out_shape = Shape::new(s.n, len, s.h, s.w);
        let out = Tensor::new(out_shape, k::narrow_channels(x.value().data(), s, start, len))?;
        self.record(OP, &[x], out, move |dy, _| {
            let plane = s.plane();
            let mut dx = vec![T::zero(); s.numel()];
            for n in 0..s.n {
                let dst = (n * s.c + start) * plane;
                let src = n * len * plane;
                dx[dst..dst + len * plane].copy_from_slice(&dy[src..src + len * plane]);
            }
            vec![Some(dx)]
        })
    }

    /// Contiguous channel slices of the given sizes.
    pub fn channel_split(&mut self, x: &Var<T>, sizes: &[usize]) -> Result<Vec<Var<T>>> {
        let total: usize = sizes.iter().sum();
        if total != x.shape().c {
            return Err(Error::shape("channel_split", x.shape().c, format!("sizes summing to {total}")));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.narrow_channels(x, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    pub fn concat(&mut self, parts: &[&Var<T>]) -> Result<Var<T>> {
        const OP: &str = "concat";
        let first = parts.first().ok_or_else(|| Error::invalid(OP, "no inputs"))?.shape();
        for p in parts {
            let s = p.shape();
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape(OP, first, s));
            }
        }
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let out = k::concat_channels(&values);
        let out_shape = out.shape();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape().c).collect();
        self.record(OP, parts, out, move |dy, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let g = need.then(|| k::narrow_channels(dy, out_shape, start, len));
                    start += len;
                    g
                })
                .collect()
        })
    }

    /// Batchnorm. In [`Mode::Eval`] uses `mean`/`var`; in [`Mode::Train`]
    /// uses batch statistics and, when `running` names the stat parameters,
    /// queues a running-stat update.
    pub fn batchnorm(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        mean: &Var<T>,
        var: &Var<T>,
        running: Option<(ParamId, ParamId)>,
    ) -> Result<Var<T>> {
        const OP: &str = "batchnorm";
        let s = x.shape();
        for v in [gamma, beta, mean, var] {
            channel_vec(OP, v, s.c)?;
        }
        match self.mode() {
            Mode::Eval => {
                let (g, b, m, v) = (gamma.value().data(), beta.value().data(), mean.value().data(), var.value().data());
                let out = k::batchnorm_eval(x.value(), g, b, m, v);
                let (xv, gv, mv, vv) = (x.shared(), gamma.shared(), mean.shared(), var.shared());
                self.record(OP, &[x, gamma, beta], out, move |dy, needs| {
                    let eps = T::of(k::BN_EPS);
                    let plane = s.plane();
                    let mut dx = vec![T::zero(); if needs[0] { s.numel() } else { 0 }];
                    let mut dg = vec![T::zero(); s.c];
                    let mut db = vec![T::zero(); s.c];
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let inv = T::one() / (vv.data()[c] + eps).sqrt();
                            let scale = gv.data()[c] * inv;
                            let start = (n * s.c + c) * plane;
                            for i in start..start + plane {
                                let xh = (xv.data()[i] - mv.data()[c]) * inv;
                                dg[c] = dg[c] + dy[i] * xh;
                                db[c] = db[c] + dy[i];
                                if needs[0] {
                                    dx[i] = dy[i] * scale;
                                }
                            }
                        }
                    }
                    vec![needs[0].then_some(dx), Some(dg), Some(db)]
                })
            }
            Mode::Train => {
                let count = s.n * s.plane();
                if count < 2 {
                    return Err(Error::invalid(OP, "training mode needs more than one value per channel"));
                }
                let bn = k::batchnorm_train(x.value(), gamma.value().data(), beta.value().data());
                if let Some((mean_param, var_param)) = running {
                    let unbias = T::of(count as f64 / (count - 1) as f64);
                    self.bn_updates.push(BnUpdate {
                        mean_param,
                        var_param,
                        batch_mean: bn.mean.clone(),
                        batch_var: bn.var.iter().map(|&v| v * unbias).collect(),
                    });
                }
                let gv = gamma.shared();
                let (xhat, inv_std) = (bn.xhat, bn.inv_std);
                self.record(OP, &[x, gamma, beta], bn.out, move |dy, needs| {
                    let (dx, dg, db) = k::batchnorm_train_backward(s, &xhat, &inv_std, gv.data(), dy);
                    vec![needs[0].then_some(dx), Some(dg), Some(db)]
                })
            }
        }
    }

    /// Layer norm across channels at every spatial position.
    pub fn layernorm_channels(&mut self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Result<Var<T>> {
        const OP: &str = "layernorm_channels";
        let s = x.shape();
        channel_vec(OP, gamma, s.c)?;
        channel_vec(OP, beta, s.c)?;
        let ln = k::layernorm_channels(x.value(), gamma.value().data(), beta.value().data());
        let gv = gamma.shared();
        let (xhat, inv_std) = (ln.xhat, ln.inv_std);
        self.record(OP, &[x, gamma, beta], ln.out, move |dy, needs| {
            let (dx, dg, db) = k::layernorm_channels_backward(s, &xhat, &inv_std, gv.data(), dy);
            vec![needs[0].then_some(dx), needs[1].then_some(dg), needs[2].then_some(db)]
        })
    }

    pub fn leaky_relu(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.note_kinks(x.value().data());
        let out = map(x.value(), k::leaky_relu);
        let xv = x.shared();
        self.record("leaky_relu", &[x], out, move |dy, _| {
            vec![Some(xv.data().iter().zip(dy).map(|(&v, &g)| g * k::leaky_relu_grad(v)).collect())]
        })
    }

    pub fn sigmoid(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let out = map(x.value(), k::sigmoid);
        let yv = Arc::new(out.clone());
        self.record("sigmoid", &[x], out, move |dy, _| {
            vec![Some(yv.data().iter().zip(dy).map(|(&y, &g)| g * y * (T::one() - y)).collect())]
        })
    }

    pub fn silu(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let out = map(x.value(), k::silu);
        let xv = x.shared();
        self.record("silu", &[x], out, move |dy, _| {
            vec![Some(xv.data().iter().zip(dy).map(|(&v, &g)| g * k::silu_grad(v)).collect())]
        })
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        expect_shape("add", a.shape(), b.shape())?;
        let data = a.value().data().iter().zip(b.value().data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(a.shape(), data)?;
        self.record("add", &[a, b], out, move |dy, needs| {
            vec![needs[0].then(|| dy.to_vec()), needs[1].then(|| dy.to_vec())]
        })
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        expect_shape("mul", a.shape(), b.shape())?;
        let data = a.value().data().iter().zip(b.value().data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(a.shape(), data)?;
        let (av, bv) = (a.shared(), b.shared());
        self.record("mul", &[a, b], out, move |dy, needs| {
            let prod = |o: &Tensor<T>| dy.iter().zip(o.data()).map(|(&g, &v)| g * v).collect();
            vec![needs[0].then(|| prod(&bv)), needs[1].then(|| prod(&av))]
        })
    }

    /// Sum of all elements as a `(1,1,1,1)` scalar.
    pub fn sum(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let total: T = x.value().data().iter().copied().sum();
        let len = x.value().len();
        self.record("sum", &[x], Tensor::scalar(total), move |dy, _| vec![Some(vec![dy[0]; len])])
    }

    pub fn mean(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let len = x.value().len();
        let inv = T::of(1.0 / len as f64);
        let total: T = x.value().data().iter().copied().sum();
        self.record("mean", &[x], Tensor::scalar(total * inv), move |dy, _| vec![Some(vec![dy[0] * inv; len])])
    }

    /// Max pool with "same" padding.
    pub fn maxpool(&mut self, x: &Var<T>, kernel: usize, stride: usize) -> Result<Var<T>> {
        const OP: &str = "maxpool";
        if kernel == 0 || stride == 0 || kernel % 2 == 0 {
            return Err(Error::invalid(OP, format!("kernel {kernel} must be odd and stride {stride} positive")));
        }
        let (out, arg) = k::maxpool(x.value(), kernel, stride);
        let len = x.value().len();
        self.record(OP, &[x], out, move |dy, _| {
            let mut dx = vec![T::zero(); len];
            for (&i, &g) in arg.iter().zip(dy) {
                dx[i] = dx[i] + g;
            }
            vec![Some(dx)]
        })
    }

    pub fn upsample_nearest(&mut self, x: &Var<T>, factor: usize) -> Result<Var<T>> {
        if factor == 0 {
            return Err(Error::invalid("upsample_nearest", "factor must be positive"));
        }
        let out = k::upsample_nearest(x.value(), factor);
        let s = x.shape();
        self.record("upsample_nearest", &[x], out, move |dy, _| {
            vec![Some(k::upsample_nearest_backward(s, factor, dy))]
        })
    }

    /// Softmax over the last (width) axis.
    pub fn softmax_lastdim(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        let mut data = x.value().data().to_vec();
        k::softmax_rows(&mut data, s.w);
        let out = Tensor::new(s, data)?;
        let yv = Arc::new(out.clone());
        self.record("softmax_lastdim", &[x], out, move |dy, _| {
            vec![Some(k::softmax_rows_backward(yv.data(), dy, s.w))]
        })
    }

    /// Multi-head self-attention with spatial positions as tokens.
    pub fn attention(&mut self, q: &Var<T>, key: &Var<T>, v: &Var<T>, heads: usize) -> Result<Var<T>> {
        const OP: &str = "attention";
        expect_shape(OP, q.shape(), key.shape())?;
        expect_shape(OP, q.shape(), v.shape())?;
        if heads == 0 {
            return Err(Error::invalid(OP, "heads must be positive"));
        }
        ensure_divisible(OP, "channels", q.shape().c, heads)?;
        let (out, probs) = k::attention(q.value(), key.value(), v.value(), heads);
        let (qv, kv, vv) = (q.shared(), key.shared(), v.shared());
        self.record(OP, &[q, key, v], out, move |dy, needs| {
            let g = k::attention_backward(&qv, &kv, &vv, heads, &probs, dy);
            vec![needs[0].then_some(g.dq), needs[1].then_some(g.dk), needs[2].then_some(g.dv)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn leaky_relu_negative() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::new(Shape::scalar(), vec![-1.0]).unwrap());
        let y = tape.leaky_relu(&x).unwrap();
        assert!((y.value().data()[0] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(t(Shape::new(1, 2, 2, 2), (0..8).map(|i| i as f64).collect()));
        let s = tape.sum(&x).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&x).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(t(Shape::new(1, 1, 2, 2), vec![3.0; 4]));
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.sum(&sq).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&x).unwrap(), &[6.0; 4]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(t(Shape::new(1, 1, 2, 2), vec![1.0; 4]));
        let y = tape.sigmoid(&x).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::NonScalar(_))));
        let s = tape.sum(&y).unwrap();
        tape.backward(&s).unwrap();
        assert!(matches!(tape.backward(&s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn upsample_replicates() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(t(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.upsample_nearest(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(
            y.value().data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::full(Shape::new(1, 1, 1, 4), 2.5));
        let y = tape.softmax_lastdim(&x).unwrap();
        assert_eq!(y.value().data(), &[0.25; 4]);
    }

    #[test]
    fn shuffle_examples() {
        let mut tape = Tape::<f64>::inference();
        let ids = |c: usize| t(Shape::new(1, c, 1, 1), (0..c).map(|i| i as f64).collect());
        let x = tape.constant(ids(4));
        assert_eq!(tape.channel_shuffle(&x, 2).unwrap().value().data(), &[0.0, 2.0, 1.0, 3.0]);
        assert_eq!(tape.channel_shuffle(&x, 1).unwrap().value().data(), &[0.0, 1.0, 2.0, 3.0]);
        let x = tape.constant(ids(6));
        assert_eq!(
            tape.channel_shuffle(&x, 3).unwrap().value().data(),
            &[0.0, 2.0, 4.0, 1.0, 3.0, 5.0]
        );
        assert!(tape.channel_shuffle(&x, 4).is_err());
    }

    #[test]
    fn split_sizes() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::zeros(Shape::new(2, 8, 3, 3)));
        let parts = tape.channel_split(&x, &[6, 2]).unwrap();
        assert_eq!(parts[0].shape().c, 6);
        assert_eq!(parts[1].shape().c, 2);
        let halves = tape.channel_split(&x, &[4, 4]).unwrap();
        assert_eq!(halves.len(), 2);
        assert!(tape.channel_split(&x, &[4, 3]).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::<f32>::inference();
        let a = tape.constant(Tensor::full(Shape::scalar(), f32::MAX));
        assert!(matches!(tape.add(&a, &a), Err(Error::NonFinite { op: "add" })));
    }

    #[test]
    fn depthwise_zero_weights() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::from_fn(Shape::new(1, 3, 4, 4), |i| i as f32));
        let w = tape.constant(Tensor::zeros(Shape::new(3, 1, 3, 3)));
        let y = tape.depthwise_conv(&x, &w, None, 1).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_eval_identity_stats() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_fn(Shape::new(1, 2, 2, 2), |i| i as f64));
        let ones = tape.constant(Tensor::full(Shape::channels(2), 1.0));
        let zeros = tape.constant(Tensor::zeros(Shape::channels(2)));
        let y = tape.batchnorm(&x, &ones, &zeros, &zeros, &ones, None).unwrap();
        for (a, b) in y.value().data().iter().zip(x.value().data()) {
            assert!((a - b / (1.0 + k::BN_EPS).sqrt()).abs() < 1e-12);
        }
    }
}
