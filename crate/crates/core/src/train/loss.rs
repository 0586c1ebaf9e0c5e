use super::Target;
use crate::detect::{ciou, Dual, HeadSpec, Real, BOX_FIELDS};
use crate::error::{Error, Result};
use crate::model::LossWeights;
use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};

/// The three loss components and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown {
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `total = λ_box·box + λ_obj·obj + λ_cls·cls`, summed in that order.
    pub fn combine(box_loss: f64, obj_loss: f64, cls_loss: f64, w: LossWeights) -> Self {
        Self {
            box_loss,
            obj_loss,
            cls_loss,
            total: w.box_ * box_loss + w.obj * obj_loss + w.cls * cls_loss,
        }
    }

    /// Header of the loss-curve table.
    pub const HEADER: &'static str = "step box obj cls total";

    /// One loss-curve line: `step box obj cls total`.
    pub fn line(&self, step: usize) -> String {
        format!(
            "{step} {:.6e} {:.6e} {:.6e} {:.6e}",
            self.box_loss, self.obj_loss, self.cls_loss, self.total
        )
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Binary cross-entropy on a logit, and its derivative.
fn bce(x: f64, t: f64) -> (f64, f64) {
    (x.max(0.0) - x * t + (-x.abs()).exp().ln_1p(), sigmoid(x) - t)
}

/// Predicted `[x1, y1, x2, y2]` as duals in `(tx, ty, tw, th)`.
fn pred_box(t: [f64; 4], gx: usize, gy: usize, anchor: [f64; 2], stride: f64) -> [Dual; 4] {
    let axis = |tc: f64, ts: f64, cell: usize, prior: f64, ic: usize, is: usize| {
        let (sc, ss) = (sigmoid(tc), sigmoid(ts));
        let mut c = Dual::cst((2.0 * sc - 0.5 + cell as f64) * stride);
        c.d[ic] = 2.0 * sc * (1.0 - sc) * stride;
        let mut size = Dual::cst((2.0 * ss).powi(2) * prior);
        size.d[is] = 8.0 * ss * ss * (1.0 - ss) * prior;
        let half = size / Dual::cst(2.0);
        (c - half, c + half)
    };
    let (x1, x2) = axis(t[0], t[2], gx, anchor[0], 0, 2);
    let (y1, y2) = axis(t[1], t[3], gy, anchor[1], 1, 3);
    [x1, y1, x2, y2]
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    for (name, v) in [("box", b.box_loss), ("obj", b.obj_loss), ("cls", b.cls_loss), ("total", b.total)] {
        if !v.is_finite() {
            return Err(Error::LossNotFinite {
                component: name,
                box_loss: b.box_loss,
                obj_loss: b.obj_loss,
                cls_loss: b.cls_loss,
            });
        }
    }
    Ok(())
}

fn validate(raw: &[Shape], targets: &[Target], heads: &[HeadSpec]) -> Result<()> {
    if raw.len() != heads.len() || raw.is_empty() {
        return Err(Error::invalid("loss", format!("{} outputs for {} heads", raw.len(), heads.len())));
    }
    for (s, h) in raw.iter().zip(heads) {
        if s.c != h.channels() || s.n != raw[0].n {
            return Err(Error::shape("loss", format!("(n, {}, gh, gw)", h.channels()), s));
        }
    }
    for t in targets {
        let ok = t.head < heads.len()
            && t.image < raw[0].n
            && t.anchor < 3
            && t.gx < raw[t.head].w
            && t.gy < raw[t.head].h
            && t.class_id < heads[t.head].num_classes;
        if !ok {
            return Err(Error::invalid("loss", format!("target {t:?} outside the head outputs")));
        }
    }
    Ok(())
}

/// Loss components and their gradients with respect to each raw head output.
///
/// * box: mean over targets of `1 − CIoU(decoded prediction, ground truth)`
/// * obj: mean BCE over every cell and anchor, target 1 at assigned cells
/// * cls: mean BCE over the class logits of assigned cells
pub fn loss_and_grads<T: Scalar>(
    raw: &[&Tensor<T>],
    targets: &[Target],
    heads: &[HeadSpec],
    weights: LossWeights,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let shapes: Vec<Shape> = raw.iter().map(|r| r.shape()).collect();
    validate(&shapes, targets, heads)?;
    let mut grads: Vec<Vec<f64>> = shapes.iter().map(|s| vec![0.0; s.numel()]).collect();
    let index = |t: &Target, k: usize| {
        let fields = BOX_FIELDS + heads[t.head].num_classes;
        shapes[t.head].index(t.image, t.anchor * fields + k, t.gy, t.gx)
    };

    let mut positive: Vec<Vec<bool>> = shapes.iter().map(|s| vec![false; s.numel()]).collect();
    for t in targets {
        positive[t.head][index(t, 4)] = true;
    }
    let cells: usize = shapes.iter().map(|s| s.n * 3 * s.h * s.w).sum();
    let mut obj = 0.0;
    for (h, s) in shapes.iter().enumerate() {
        let fields = BOX_FIELDS + heads[h].num_classes;
        let data = raw[h].data();
        for n in 0..s.n {
            for a in 0..3 {
                let base = s.index(n, a * fields + 4, 0, 0);
                for i in base..base + s.plane() {
                    let target = if positive[h][i] { 1.0 } else { 0.0 };
                    let (l, g) = bce(data[i].f64(), target);
                    obj += l;
                    grads[h][i] = weights.obj * g / cells as f64;
                }
            }
        }
    }
    obj /= cells as f64;

    let (mut box_sum, mut cls_sum) = (0.0, 0.0);
    let m = targets.len() as f64;
    for t in targets {
        let head = &heads[t.head];
        let at = |k: usize| raw[t.head].data()[index(t, k)].f64();
        let pred = pred_box(
            [at(0), at(1), at(2), at(3)],
            t.gx,
            t.gy,
            head.anchors[t.anchor],
            head.stride as f64,
        );
        let c = ciou(pred, t.bbox.to_array().map(Dual::cst));
        box_sum += 1.0 - c.val();
        for k in 0..4 {
            grads[t.head][index(t, k)] -= weights.box_ * c.d[k] / m;
        }
        let per = m * head.num_classes as f64;
        for class in 0..head.num_classes {
            let k = BOX_FIELDS + class;
            let (l, g) = bce(at(k), if class == t.class_id { 1.0 } else { 0.0 });
            cls_sum += l;
            grads[t.head][index(t, k)] += weights.cls * g / per;
        }
    }
    let (box_loss, cls_loss) = if targets.is_empty() {
        (0.0, 0.0)
    } else {
        let nc = heads[0].num_classes as f64;
        (box_sum / m, cls_sum / (m * nc))
    };
    let breakdown = LossBreakdown::combine(box_loss, obj, cls_loss, weights);
    check_finite(&breakdown)?;
    Ok((breakdown, grads))
}

/// Record the weighted loss on `tape` as a scalar depending on every head
/// output.
pub fn compute_loss<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &[Var<T>],
    targets: &[Target],
    heads: &[HeadSpec],
    weights: LossWeights,
) -> Result<(Var<T>, LossBreakdown)> {
    let raw: Vec<&Tensor<T>> = outputs.iter().map(Var::value).collect();
    let (breakdown, grads) = loss_and_grads(&raw, targets, heads, weights)?;
    let inputs: Vec<&Var<T>> = outputs.iter().collect();
    let total = tape.custom("loss", &inputs, Tensor::scalar(T::of(breakdown.total)), move |g, needs| {
        let g = g[0].f64();
        grads
            .into_iter()
            .zip(needs)
            .map(|(gr, &need)| need.then(|| gr.into_iter().map(|v| T::of(v * g)).collect()))
            .collect()
    })?;
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{BBox, GroundTruth};
    use crate::model::ModelConfig;
    use crate::train::assign_targets;

    fn setup() -> (Vec<HeadSpec>, Vec<Tensor<f64>>) {
        let cfg = ModelConfig {
            input_size: [64, 64],
            ..ModelConfig::default()
        };
        let heads = HeadSpec::from_config(&cfg);
        let raw = vec![Tensor::zeros(Shape::new(1, 21, 4, 4)), Tensor::zeros(Shape::new(1, 21, 2, 2))];
        (heads, raw)
    }

    #[test]
    fn no_targets_is_pure_background() {
        let (heads, raw) = setup();
        let refs: Vec<_> = raw.iter().collect();
        let (b, _) = loss_and_grads(&refs, &[], &heads, LossWeights::UNIT).unwrap();
        assert_eq!((b.box_loss, b.cls_loss), (0.0, 0.0));
        assert!((b.obj_loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(b.total, b.obj_loss);
    }

    #[test]
    fn perfect_prediction_has_zero_box_loss() {
        let (heads, raw) = setup();
        // Zero logits predict the prior centered half a stride into the cell.
        let gt = GroundTruth {
            bbox: BBox::from_cxcywh(24.0, 24.0, 30.0, 61.0),
            class_id: 0,
        };
        let targets = assign_targets(&[vec![gt]], &heads, &[(4, 4), (2, 2)]).unwrap();
        let refs: Vec<_> = raw.iter().collect();
        let (b, _) = loss_and_grads(&refs, &targets, &heads, LossWeights::default()).unwrap();
        assert!(b.box_loss.abs() < 1e-12, "{}", b.box_loss);
        assert!((b.cls_loss - std::f64::consts::LN_2).abs() < 1e-15);
        let w = LossWeights::default();
        assert_eq!(b.total, w.box_ * b.box_loss + w.obj * b.obj_loss + w.cls * b.cls_loss);
    }

    #[test]
    fn non_finite_logits_abort_with_diagnostics() {
        let (heads, mut raw) = setup();
        raw[0].data_mut()[4 * 16] = f64::NAN;
        let refs: Vec<_> = raw.iter().collect();
        let err = loss_and_grads(&refs, &[], &heads, LossWeights::UNIT).unwrap_err();
        assert!(matches!(err, Error::LossNotFinite { component: "obj", .. }), "{err}");
        assert!(err.is_numeric());
    }
}
