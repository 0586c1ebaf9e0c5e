//! Central-difference gradient checking.
//!
//! The engine is generic over its scalar, so checks run the exact same code
//! in `f64`: at `h = 1e-4` an `f32` central difference carries noise of order
//! `1e-3`, which would swamp the tolerances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ConvSpec, Mode, Shape, Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-4;
/// Tolerance for single ops.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for composite blocks and losses.
pub const BLOCK_TOLERANCE: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// One row of a gradient-check table.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coords: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Scalar objective over a set of differentiable inputs.
pub type Objective<'a> = dyn Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>> + 'a;

fn eval(mode: Mode, inputs: &[Tensor<f64>], f: &Objective) -> Result<f64> {
    let mut tape = Tape::<f64>::new(mode);
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(out.value().data()[0])
}

/// Worst relative error between tape gradients and central differences
/// over every element of every input. Returns `None` when the point sits
/// within `10·h` of a leaky-ReLU kink.
pub fn check_inputs(inputs: &[Tensor<f64>], mode: Mode, h: f64, f: &Objective) -> Result<Option<f64>> {
    let mut tape = Tape::<f64>::new(mode);
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.kink_margin() < 10.0 * h {
        return Ok(None);
    }
    let grads = tape.backward(&out)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval(mode, &probe, f)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval(mode, &probe, f)?;
            probe[i].data_mut()[j] = orig;
            worst = worst.max(rel_err(a, (plus - minus) / (2.0 * h)));
        }
    }
    Ok(Some(worst))
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output element carries weight.
pub fn project(tape: &mut Tape<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a9e);
    let r = Tensor::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0));
    let r = tape.constant(r);
    let prod = tape.mul(y, &r)?;
    tape.sum(&prod)
}

pub fn uniform(shape: Shape, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero by `margin`.
pub fn away_from_zero(shape: Shape, rng: &mut ChaCha8Rng, margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced `0.05` apart in random order (no pooling ties).
pub fn distinct(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let mut vals: Vec<f64> = (0..shape.numel()).map(|i| i as f64 * 0.05 - 1.0).collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).expect("numel")
}

struct OpCase {
    name: &'static str,
    mode: Mode,
    inputs: Vec<Tensor<f64>>,
    f: Box<Objective<'static>>,
}

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut cases = Vec::new();
    let mut case = |name, mode, inputs, f: Box<Objective<'static>>| cases.push(OpCase { name, mode, inputs, f });

    let s = seed;
    let x = uniform(Shape::new(1, 4, 5, 5), rng, -1.0, 1.0);
    let w = uniform(Shape::new(6, 4, 3, 3), rng, -0.5, 0.5);
    let b = uniform(Shape::channels(6), rng, -0.5, 0.5);
    case("conv2d k3 g1 bias", Mode::Eval, vec![x, w, b], Box::new(move |t, v| {
        let y = t.conv2d(&v[0], &v[1], Some(&v[2]), ConvSpec::new(4, 6, 3).bias(true))?;
        project(t, &y, s)
    }));
    let x = uniform(Shape::new(1, 4, 6, 6), rng, -1.0, 1.0);
    let w = uniform(Shape::new(4, 2, 3, 3), rng, -0.5, 0.5);
    case("conv2d k3 g2 s2", Mode::Eval, vec![x, w], Box::new(move |t, v| {
        let y = t.conv2d(&v[0], &v[1], None, ConvSpec::new(4, 4, 3).groups(2).stride(2))?;
        project(t, &y, s)
    }));
    let x = uniform(Shape::new(2, 4, 3, 3), rng, -1.0, 1.0);
    let w = uniform(Shape::new(6, 2, 1, 1), rng, -0.5, 0.5);
    case("conv2d k1 g2", Mode::Eval, vec![x, w], Box::new(move |t, v| {
        let y = t.conv2d(&v[0], &v[1], None, ConvSpec::new(4, 6, 1).groups(2))?;
        project(t, &y, s)
    }));
    for stride in [1usize, 2] {
        let x = uniform(Shape::new(1, 3, 5, 5), rng, -1.0, 1.0);
        let w = uniform(Shape::new(3, 1, 3, 3), rng, -0.5, 0.5);
        let b = uniform(Shape::channels(3), rng, -0.5, 0.5);
        let name = if stride == 1 { "depthwise_conv s1" } else { "depthwise_conv s2" };
        case(name, Mode::Eval, vec![x, w, b], Box::new(move |t, v| {
            let y = t.depthwise_conv(&v[0], &v[1], Some(&v[2]), stride)?;
            project(t, &y, s)
        }));
    }
    let x = uniform(Shape::new(2, 6, 2, 2), rng, -1.0, 1.0);
    case("channel_shuffle", Mode::Eval, vec![x], Box::new(move |t, v| {
        let y = t.channel_shuffle(&v[0], 3)?;
        project(t, &y, s)
    }));
    let x = uniform(Shape::new(2, 8, 2, 2), rng, -1.0, 1.0);
    case("channel_split", Mode::Eval, vec![x], Box::new(move |t, v| {
        let parts = t.channel_split(&v[0], &[6, 2])?;
        let a = project(t, &parts[0], s)?;
        let b = project(t, &parts[1], s + 1)?;
        t.add(&a, &b)
    }));
    let a = uniform(Shape::new(2, 3, 2, 2), rng, -1.0, 1.0);
    let b = uniform(Shape::new(2, 5, 2, 2), rng, -1.0, 1.0);
    case("concat", Mode::Eval, vec![a, b], Box::new(move |t, v| {
        let y = t.concat(&[&v[0], &v[1]])?;
        project(t, &y, s)
    }));
    for mode in [Mode::Eval, Mode::Train] {
        let x = uniform(Shape::new(2, 3, 3, 3), rng, -1.0, 1.0);
        let g = uniform(Shape::channels(3), rng, 0.5, 1.5);
        let b = uniform(Shape::channels(3), rng, -0.5, 0.5);
        let mean = uniform(Shape::channels(3), rng, -0.2, 0.2);
        let var = uniform(Shape::channels(3), rng, 0.5, 1.5);
        let name = if mode == Mode::Eval { "batchnorm eval" } else { "batchnorm train" };
        case(name, mode, vec![x, g, b], Box::new(move |t, v| {
            let m = t.constant(mean.clone());
            let vv = t.constant(var.clone());
            let y = t.batchnorm(&v[0], &v[1], &v[2], &m, &vv, None)?;
            project(t, &y, s)
        }));
    }
    let x = uniform(Shape::new(2, 5, 2, 3), rng, -1.0, 1.0);
    let g = uniform(Shape::channels(5), rng, 0.5, 1.5);
    let b = uniform(Shape::channels(5), rng, -0.5, 0.5);
    case("layernorm_channels", Mode::Eval, vec![x, g, b], Box::new(move |t, v| {
        let y = t.layernorm_channels(&v[0], &v[1], &v[2])?;
        project(t, &y, s)
    }));
    let x = away_from_zero(Shape::new(1, 3, 3, 3), rng, 10.0 * DEFAULT_STEP);
    case("leaky_relu", Mode::Eval, vec![x], Box::new(move |t, v| {
        let y = t.leaky_relu(&v[0])?;
        project(t, &y, s)
    }));
    let x = uniform(Shape::new(1, 3, 3, 3), rng, -3.0, 3.0);
    case("sigmoid", Mode::Eval, vec![x.clone()], Box::new(move |t, v| {
        let y = t.sigmoid(&v[0])?;
        project(t, &y, s)
    }));
    case("silu", Mode::Eval, vec![x], Box::new(move |t, v| {
        let y = t.silu(&v[0])?;
        project(t, &y, s)
    }));
    let a = uniform(Shape::new(1, 2, 3, 3), rng, -1.0, 1.0);
    let b = uniform(Shape::new(1, 2, 3, 3), rng, -1.0, 1.0);
    case("add", Mode::Eval, vec![a.clone(), b.clone()], Box::new(move |t, v| {
        let y = t.add(&v[0], &v[1])?;
        project(t, &y, s)
    }));
    case("mul", Mode::Eval, vec![a, b], Box::new(move |t, v| {
        let y = t.mul(&v[0], &v[1])?;
        project(t, &y, s)
    }));
    for (kernel, stride) in [(3usize, 1usize), (5, 1), (3, 2)] {
        let x = distinct(Shape::new(1, 2, 5, 5), rng);
        let name = match (kernel, stride) {
            (3, 1) => "maxpool k3 s1",
            (5, 1) => "maxpool k5 s1",
            _ => "maxpool k3 s2",
        };
        case(name, Mode::Eval, vec![x], Box::new(move |t, v| {
            let y = t.maxpool(&v[0], kernel, stride)?;
            project(t, &y, s)
        }));
    }
    let x = uniform(Shape::new(1, 2, 2, 3), rng, -1.0, 1.0);
    case("upsample_nearest", Mode::Eval, vec![x], Box::new(move |t, v| {
        let y = t.upsample_nearest(&v[0], 2)?;
        project(t, &y, s)
    }));
    let x = uniform(Shape::new(1, 2, 3, 4), rng, -2.0, 2.0);
    case("softmax_lastdim", Mode::Eval, vec![x], Box::new(move |t, v| {
        let y = t.softmax_lastdim(&v[0])?;
        project(t, &y, s)
    }));
    let q = uniform(Shape::new(2, 4, 2, 3), rng, -1.0, 1.0);
    let kk = uniform(Shape::new(2, 4, 2, 3), rng, -1.0, 1.0);
    let vv = uniform(Shape::new(2, 4, 2, 3), rng, -1.0, 1.0);
    case("attention", Mode::Eval, vec![q, kk, vv], Box::new(move |t, v| {
        let y = t.attention(&v[0], &v[1], &v[2], 2)?;
        project(t, &y, s)
    }));
    let x = uniform(Shape::new(1, 2, 2, 2), rng, -1.0, 1.0);
    case("sum/mean", Mode::Eval, vec![x], Box::new(move |t, v| {
        let sq = t.mul(&v[0], &v[0])?;
        let a = t.sum(&sq)?;
        let b = t.mean(&v[0])?;
        t.add(&a, &b)
    }));
    cases
}

/// Gradient check of every differentiable op at points drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<GradcheckReport>> {
    op_cases(seed)
        .into_iter()
        .map(|c| {
            let err = check_inputs(&c.inputs, c.mode, DEFAULT_STEP, &*c.f)?
                .expect("op inputs are drawn away from kinks");
            Ok(GradcheckReport {
                name: c.name.to_string(),
                max_rel_err: err,
                tolerance: OP_TOLERANCE,
                coords: c.inputs.iter().map(Tensor::len).sum(),
            })
        })
        .collect()
}
