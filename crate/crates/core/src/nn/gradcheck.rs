//! Finite-difference checks of whole blocks, covering the block input and
//! every trainable parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DgsmBlock, DgstBlock, DgstConfig, Init, Module};
use crate::error::{Error, Result};
use crate::tensor::gradcheck::{project, rel_err, uniform, GradcheckReport, BLOCK_TOLERANCE, DEFAULT_STEP};
use crate::tensor::{Mode, Shape, Tape, Tensor};

/// Attempts per seed before giving up on finding a point clear of kinks.
const MAX_RESAMPLES: u64 = 64;

fn objective<M: Module<f64>>(m: &M, x: &Tensor<f64>, mode: Mode, seed: u64) -> Result<f64> {
    let mut tape = Tape::new(mode);
    let xv = tape.constant(x.clone());
    let y = m.forward(&mut tape, &xv)?;
    Ok(project(&mut tape, &y, seed)?.value().data()[0])
}

fn perturb<M: Module<f64>>(m: &mut M, id: usize, j: usize, delta: f64) {
    m.visit_mut(&mut |p| {
        if p.id == id {
            let d = &mut p.tensor_mut().data_mut()[j];
            *d += delta;
        }
    });
}

/// Worst relative error over the input and all trainable parameters of `m`,
/// with the objective `Σ m(x) ⊙ r`. `None` when the point is within `10·h`
/// of a leaky-ReLU kink. Returns the error and the number of coordinates.
pub fn check_module<M: Module<f64>>(
    m: &mut M,
    x: &Tensor<f64>,
    mode: Mode,
    h: f64,
    seed: u64,
) -> Result<Option<(f64, usize)>> {
    let mut tape = Tape::new(mode);
    let xv = tape.leaf(x.clone());
    let y = m.forward(&mut tape, &xv)?;
    let out = project(&mut tape, &y, seed)?;
    if tape.kink_margin() < 10.0 * h {
        return Ok(None);
    }
    let grads = tape.backward(&out)?;
    let mut worst = 0.0f64;
    let mut coords = 0;

    let gx = grads.wrt(&xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
    let mut probe = x.clone();
    for (j, &a) in gx.iter().enumerate() {
        let orig = x.data()[j];
        probe.data_mut()[j] = orig + h;
        let plus = objective(m, &probe, mode, seed)?;
        probe.data_mut()[j] = orig - h;
        let minus = objective(m, &probe, mode, seed)?;
        probe.data_mut()[j] = orig;
        worst = worst.max(rel_err(a, (plus - minus) / (2.0 * h)));
        coords += 1;
    }

    let mut params = Vec::new();
    m.visit(&mut |p| {
        if p.trainable {
            params.push((p.id, p.len()));
        }
    });
    for (id, len) in params {
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len]);
        for (j, &a) in analytic.iter().enumerate() {
            perturb(m, id, j, h);
            let plus = objective(m, x, mode, seed)?;
            perturb(m, id, j, -2.0 * h);
            let minus = objective(m, x, mode, seed)?;
            perturb(m, id, j, h);
            worst = worst.max(rel_err(a, (plus - minus) / (2.0 * h)));
            coords += 1;
        }
    }
    Ok(Some((worst, coords)))
}

/// Spread batchnorm statistics and affine terms away from their defaults so
/// the check exercises them.
fn randomize_norms<M: Module<f64>>(m: &mut M, rng: &mut ChaCha8Rng) {
    m.visit_mut(&mut |p| {
        let (lo, hi) = if p.name.ends_with("running_var") || p.name.ends_with("gamma") {
            (0.5, 1.5)
        } else if p.name.ends_with("running_mean") || p.name.ends_with("beta") {
            (-0.2, 0.2)
        } else {
            return;
        };
        for v in p.tensor_mut().data_mut() {
            *v = rng.random_range(lo..hi);
        }
    });
}

type Builder = fn(&mut Init) -> Result<Box<dyn CheckedBlock>>;

trait CheckedBlock {
    fn check(&mut self, x: &Tensor<f64>, mode: Mode, seed: u64) -> Result<Option<(f64, usize)>>;
    fn randomize(&mut self, rng: &mut ChaCha8Rng);
}

impl<M: Module<f64>> CheckedBlock for M {
    fn check(&mut self, x: &Tensor<f64>, mode: Mode, seed: u64) -> Result<Option<(f64, usize)>> {
        check_module(self, x, mode, DEFAULT_STEP, seed)
    }

    fn randomize(&mut self, rng: &mut ChaCha8Rng) {
        randomize_norms(self, rng);
    }
}

struct BlockCase {
    name: &'static str,
    mode: Mode,
    input: Shape,
    build: Builder,
}

fn block_cases() -> Vec<BlockCase> {
    vec![
        BlockCase {
            name: "dgsm block s1",
            mode: Mode::Eval,
            input: Shape::new(1, 8, 4, 4),
            build: |init| Ok(Box::new(DgsmBlock::<f64>::basic(init, "dgsm", 8, 2)?)),
        },
        BlockCase {
            name: "dgsm block s2 (train bn)",
            mode: Mode::Train,
            input: Shape::new(2, 4, 5, 5),
            build: |init| Ok(Box::new(DgsmBlock::<f64>::entry(init, "dgsm", 4, 8, 2, 2)?)),
        },
        BlockCase {
            name: "dgst block",
            mode: Mode::Eval,
            input: Shape::new(1, 16, 3, 3),
            build: |init| Ok(Box::new(DgstBlock::<f64>::new(init, "dgst", DgstConfig::new(16))?)),
        },
    ]
}

/// Gradient check of the DGSM and DGST blocks at a point drawn from `seed`.
/// Points landing near an activation kink are redrawn.
pub fn block_suite(seed: u64) -> Result<Vec<GradcheckReport>> {
    block_cases()
        .into_iter()
        .map(|case| {
            for attempt in 0..MAX_RESAMPLES {
                let sub = seed.wrapping_mul(MAX_RESAMPLES).wrapping_add(attempt);
                let mut rng = ChaCha8Rng::seed_from_u64(sub);
                let mut init = Init::new(sub);
                let mut block = (case.build)(&mut init)?;
                block.randomize(&mut rng);
                let x = uniform(case.input, &mut rng, -1.0, 1.0);
                if let Some((err, coords)) = block.check(&x, case.mode, sub)? {
                    return Ok(GradcheckReport {
                        name: case.name.to_string(),
                        max_rel_err: err,
                        tolerance: BLOCK_TOLERANCE,
                        coords,
                    });
                }
            }
            Err(Error::invalid(case.name, "no kink-free point found"))
        })
        .collect()
}
