use std::collections::HashMap;

use super::{assign_targets, compute_loss, LossBreakdown};
use crate::detect::{GroundTruth, HeadSpec};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Mode, Scalar, Shape, Tape, Tensor};

/// Running-statistics momentum of training-mode batchnorm.
pub const BN_MOMENTUM: f64 = 0.03;
/// Total loss above which training is aborted.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

/// Image at the network input size with its boxes in input pixels.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub gts: Vec<GroundTruth>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Images per step; the whole set when it is at least the dataset size.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 8,
            seed: 7,
        }
    }
}

/// Plain SGD with heavy-ball momentum: `v ← μv + g`, `θ ← θ − lr·v`.
#[derive(Debug, Default)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<usize, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// Apply one update to every trainable parameter with a gradient.
    pub fn step<T: Scalar>(&mut self, model: &mut Model<T>, grads: &HashMap<usize, Vec<T>>) {
        let (lr, mu) = (self.lr, self.momentum);
        let velocity = &mut self.velocity;
        model.visit_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            let Some(g) = grads.get(&p.id) else { return };
            let v = velocity.entry(p.id).or_insert_with(|| vec![0.0; g.len()]);
            for ((w, vi), gi) in p.tensor_mut().data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi.f64();
                *w = T::of(w.f64() - lr * *vi);
            }
        });
    }
}

/// Stack `(1, 3, H, W)` images into one batch.
pub fn stack(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("stack", "empty batch"))?
        .shape();
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for img in images {
        if img.shape() != first || first.n != 1 {
            return Err(Error::shape("stack", first, img.shape()));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(Shape { n: images.len(), ..first }, data)
}

/// Batch index lists for each step: the whole set in order when it fits in
/// one batch, otherwise consecutive slices of a per-epoch seeded shuffle.
fn schedule(n: usize, cfg: &TrainConfig) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let bs = cfg.batch_size.max(1);
    if bs >= n {
        return vec![(0..n).collect(); cfg.steps];
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = Vec::new();
    while out.len() < cfg.steps {
        if order.len() < bs {
            let mut epoch: Vec<usize> = (0..n).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        out.push(order.drain(..bs).collect());
    }
    out
}

/// Forward, loss and backward for one batch; returns the loss and the
/// gradient of every trainable parameter.
pub fn train_step(
    model: &mut Model<f32>,
    batch: &[&TrainSample],
) -> Result<(LossBreakdown, HashMap<usize, Vec<f32>>)> {
    let images: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.image).collect();
    let x = stack(&images)?;
    let heads = HeadSpec::from_config(&model.config);
    let grids: Vec<(usize, usize)> = model.output_shapes(x.shape()).iter().map(|s| (s.h, s.w)).collect();
    let gts: Vec<Vec<GroundTruth>> = batch.iter().map(|s| s.gts.clone()).collect();
    let targets = assign_targets(&gts, &heads, &grids)?;

    let mut tape = Tape::new(Mode::Train);
    let xv = tape.constant(x);
    let outputs = model.forward(&mut tape, &xv)?;
    let (total, breakdown) = compute_loss(&mut tape, &outputs, &targets, &heads, model.config.loss)?;
    let grads = tape.backward(&total)?;
    let grads: HashMap<usize, Vec<f32>> = grads.params().map(|(id, g)| (id, g.to_vec())).collect();

    let updates: HashMap<usize, (Vec<f32>, bool)> = tape
        .take_bn_updates()
        .into_iter()
        .flat_map(|u| [(u.mean_param, (u.batch_mean, true)), (u.var_param, (u.batch_var, false))])
        .collect();
    model.visit_mut(&mut |p| {
        if let Some((batch, _)) = updates.get(&p.id) {
            for (r, b) in p.tensor_mut().data_mut().iter_mut().zip(batch) {
                *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * *b as f64) as f32;
            }
        }
    });
    Ok((breakdown, grads))
}

/// Train for `cfg.steps` SGD steps and return the per-step loss, measured on
/// the forward pass before each update. Bitwise reproducible for a fixed
/// seed. `on_step` sees each step index and its loss as they complete.
pub fn train_tiny(
    model: &mut Model<f32>,
    data: &[TrainSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<Vec<LossBreakdown>> {
    if data.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut curve = Vec::with_capacity(cfg.steps);
    for (step, idx) in schedule(data.len(), cfg).into_iter().enumerate() {
        let batch: Vec<&TrainSample> = idx.iter().map(|&i| &data[i]).collect();
        let (loss, grads) = train_step(model, &batch)?;
        if !(loss.total <= DIVERGENCE_LIMIT) {
            return Err(Error::Diverged {
                step: step + 1,
                total: loss.total,
            });
        }
        sgd.step(model, &grads);
        on_step(step + 1, &loss);
        curve.push(loss);
    }
    Ok(curve)
}
