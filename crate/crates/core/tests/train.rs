use dgs_core::data::{make_synthetic, Sample};
use dgs_core::detect::{iou, BBox, GroundTruth, HeadSpec};
use dgs_core::model::{LossWeights, Model, ModelConfig};
use dgs_core::tensor::gradcheck::{check_inputs, uniform};
use dgs_core::train::*;
use dgs_core::{ConvSpec, Error, Mode, Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_gt(rng: &mut ChaCha8Rng, extent: f64) -> GroundTruth {
    let (w, h) = (rng.random_range(4.0..400.0), rng.random_range(4.0..400.0));
    let (cx, cy) = (rng.random_range(0.0..extent), rng.random_range(0.0..extent));
    GroundTruth {
        bbox: BBox::from_cxcywh(cx, cy, w, h),
        class_id: rng.random_range(0..2),
    }
}

/// Every (head, anchor) scored with the general IoU on boxes placed at the
/// origin; first maximum wins.
fn oracle_assign(gt: &GroundTruth, heads: &[HeadSpec], grids: &[(usize, usize)]) -> (usize, usize, usize, usize) {
    let (w, h) = (gt.bbox.width(), gt.bbox.height());
    let gt_box = BBox::from_cxcywh(0.0, 0.0, w, h);
    let mut scores = Vec::new();
    for (hi, head) in heads.iter().enumerate() {
        for (ai, a) in head.anchors.iter().enumerate() {
            scores.push((hi, ai, iou(&gt_box, &BBox::from_cxcywh(0.0, 0.0, a[0], a[1]))));
        }
    }
    let max = scores.iter().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max);
    let &(hi, ai, _) = scores.iter().find(|s| s.2 == max).unwrap();
    let stride = heads[hi].stride as f64;
    let (cx, cy) = gt.bbox.center();
    let (gh, gw) = grids[hi];
    let gx = ((cx / stride) as usize).min(gw - 1);
    let gy = ((cy / stride) as usize).min(gh - 1);
    (hi, ai, gx, gy)
}

#[test]
fn assignment_equals_exhaustive_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (cfg, grids) in [
        (ModelConfig::default(), vec![(40, 40), (20, 20)]),
        (ModelConfig::default().with_three_heads(), vec![(80, 80), (40, 40), (20, 20)]),
    ] {
        let heads = HeadSpec::from_config(&cfg);
        for _ in 0..200 {
            let gts: Vec<Vec<GroundTruth>> = (0..3)
                .map(|_| (0..rng.random_range(0..5)).map(|_| random_gt(&mut rng, 640.0)).collect())
                .collect();
            let targets = assign_targets(&gts, &heads, &grids).unwrap();
            let flat: Vec<(usize, &GroundTruth)> =
                gts.iter().enumerate().flat_map(|(i, g)| g.iter().map(move |gt| (i, gt))).collect();
            assert_eq!(targets.len(), flat.len());
            for (t, (image, gt)) in targets.iter().zip(flat) {
                assert_eq!((t.head, t.anchor, t.gx, t.gy), oracle_assign(gt, &heads, &grids));
                assert_eq!((t.image, t.class_id, t.bbox), (image, gt.class_id, gt.bbox));
            }
        }
    }
}

fn toy_setup() -> (Vec<HeadSpec>, Vec<Target>, Vec<Shape>) {
    let cfg = ModelConfig {
        input_size: [64, 64],
        ..ModelConfig::default()
    };
    let heads = HeadSpec::from_config(&cfg);
    let gts = vec![
        vec![GroundTruth {
            bbox: BBox::new(10.0, 12.0, 40.0, 70.0),
            class_id: 1,
        }],
        vec![GroundTruth {
            bbox: BBox::new(5.0, 20.0, 60.0, 60.0),
            class_id: 0,
        }],
    ];
    let grids = [(4, 4), (2, 2)];
    let targets = assign_targets(&gts, &heads, &grids).unwrap();
    (heads, targets, vec![Shape::new(2, 21, 4, 4), Shape::new(2, 21, 2, 2)])
}

fn component_weights() -> [(&'static str, LossWeights); 4] {
    let w = |b, o, c| LossWeights { box_: b, obj: o, cls: c };
    [
        ("box", w(1.0, 0.0, 0.0)),
        ("obj", w(0.0, 1.0, 0.0)),
        ("cls", w(0.0, 0.0, 1.0)),
        ("total", LossWeights::default()),
    ]
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let (heads, targets, shapes) = toy_setup();
    assert_eq!(targets.len(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raw: Vec<Tensor<f64>> = shapes.iter().map(|&s| uniform(s, &mut rng, -2.0, 2.0)).collect();
    for (name, weights) in component_weights() {
        let f = |tape: &mut Tape<f64>, v: &[Var<f64>]| {
            compute_loss(tape, v, &targets, &heads, weights).map(|(l, _)| l)
        };
        let err = check_inputs(&raw, Mode::Eval, 1e-4, &f).unwrap().unwrap();
        assert!(err <= 1e-3, "{name}: {err}");
    }
}

#[test]
fn loss_gradient_reaches_head_parameters() {
    let (heads, targets, shapes) = toy_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let feats: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| uniform(Shape::new(s.n, 8, s.h, s.w), &mut rng, -1.0, 1.0))
        .collect();
    let spec = ConvSpec::new(8, 21, 1).bias(true);
    let mut params = Vec::new();
    for _ in &shapes {
        params.push(uniform(spec.weight_shape(), &mut rng, -0.5, 0.5));
        params.push(uniform(Shape::new(1, 21, 1, 1), &mut rng, -0.5, 0.5));
    }
    for (name, weights) in component_weights() {
        let f = |tape: &mut Tape<f64>, p: &[Var<f64>]| {
            let mut outs = Vec::new();
            for (i, x) in feats.iter().enumerate() {
                let x = tape.constant(x.clone());
                outs.push(tape.conv2d(&x, &p[2 * i], Some(&p[2 * i + 1]), spec)?);
            }
            compute_loss(tape, &outs, &targets, &heads, weights).map(|(l, _)| l)
        };
        let err = check_inputs(&params, Mode::Eval, 1e-4, &f).unwrap().unwrap();
        assert!(err <= 1e-3, "{name}: {err}");
    }
}

#[test]
fn loss_components_respect_bounds_and_weighting() {
    let (heads, targets, shapes) = toy_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let raw: Vec<Tensor<f32>> = shapes
            .iter()
            .map(|&s| Tensor::from_fn(s, |_| rng.random_range(-6.0f32..6.0)))
            .collect();
        let refs: Vec<&Tensor<f32>> = raw.iter().collect();
        let w = LossWeights {
            box_: rng.random_range(0.0..2.0),
            obj: rng.random_range(0.0..2.0),
            cls: rng.random_range(0.0..2.0),
        };
        let (b, _) = loss_and_grads(&refs, &targets, &heads, w).unwrap();
        assert!((0.0..=2.0).contains(&b.box_loss), "{b:?}");
        assert!(b.obj_loss >= 0.0 && b.cls_loss >= 0.0, "{b:?}");
        assert_eq!(b.total, w.box_ * b.box_loss + w.obj * b.obj_loss + w.cls * b.cls_loss);
    }
}

/// `(box, obj, cls, printed total, decimals of the total)`.
const LOSS_TABLE: [(f64, f64, f64, f64, i32); 4] = [
    (0.02671, 0.03225, 0.00129, 0.06025, 5),
    (0.02589, 0.02889, 0.001067, 0.05585, 5),
    (0.02423, 0.02788, 0.0006791, 0.05278, 5),
    (0.02381, 0.01283, 0.0008498, 0.0375, 4),
];

#[test]
fn table_loss_rows_sum_to_their_totals() {
    for (b, o, c, total, digits) in LOSS_TABLE {
        let sum = LossBreakdown::combine(b, o, c, LossWeights::UNIT).total;
        let unit = 10f64.powi(-digits);
        assert!((sum - total).abs() <= unit + 1e-12, "{b} + {o} + {c} = {sum}, printed {total}");
    }
}

fn tiny_data(size: usize, n: usize) -> Vec<TrainSample> {
    make_synthetic(n, size, 3)
        .into_iter()
        .map(|(image, labels)| {
            let s = Sample {
                image,
                labels,
                path: "synthetic".into(),
            };
            s.to_train(size, size).unwrap().0
        })
        .collect()
}

fn tiny_model(size: usize) -> Model<f32> {
    let cfg = ModelConfig {
        input_size: [size, size],
        ..ModelConfig::default()
    };
    Model::build(&cfg, 5).unwrap()
}

#[test]
fn zero_learning_rate_gives_a_flat_curve() {
    let data = tiny_data(64, 3);
    let mut model = tiny_model(64);
    let cfg = TrainConfig {
        steps: 4,
        lr: 0.0,
        ..TrainConfig::default()
    };
    let curve = train_tiny(&mut model, &data, &cfg, |_, _| {}).unwrap();
    assert_eq!(curve.len(), 4);
    assert!(curve.iter().all(|l| l == &curve[0]), "{curve:?}");
}

#[test]
fn same_seed_reproduces_the_curve_bitwise() {
    let data = tiny_data(64, 5);
    let cfg = TrainConfig {
        steps: 5,
        batch_size: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = tiny_model(64);
        let curve = train_tiny(&mut model, &data, &cfg, |_, _| {}).unwrap();
        (curve, model.to_checkpoint_bytes())
    };
    let (a, wa) = run();
    let (b, wb) = run();
    let bits = |c: &[LossBreakdown]| -> Vec<u64> { c.iter().map(|l| l.total.to_bits()).collect() };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a, b);
    assert!(wa == wb, "weights differ after identical runs");
}

#[test]
fn training_learns_and_reports_each_step() {
    let data = tiny_data(64, 4);
    let mut model = tiny_model(64);
    let cfg = TrainConfig {
        steps: 20,
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    let curve = train_tiny(&mut model, &data, &cfg, |s, l| seen.push((s, *l))).unwrap();
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), (1..=20).collect::<Vec<_>>());
    assert!(curve.last().unwrap().total < curve[0].total / 2.0, "{:?}", curve.last());
}

#[test]
fn huge_learning_rate_is_a_numeric_failure() {
    let data = tiny_data(64, 2);
    let mut model = tiny_model(64);
    let cfg = TrainConfig {
        steps: 30,
        lr: 1e6,
        ..TrainConfig::default()
    };
    let err = train_tiny(&mut model, &data, &cfg, |_, _| {}).unwrap_err();
    assert!(err.is_numeric(), "{err}");
}

#[test]
fn empty_dataset_is_rejected() {
    let mut model = tiny_model(64);
    let err = train_tiny(&mut model, &[], &TrainConfig::default(), |_, _| {}).unwrap_err();
    assert!(matches!(err, Error::Dataset(_)));
    assert!(!err.is_numeric());
}
