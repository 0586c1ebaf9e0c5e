use dgs_core::detect::*;
use dgs_core::model::{ANCHORS_S16, ANCHORS_S32};
use dgs_core::{Shape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let (x, y) = (rng.random_range(0.0..extent), rng.random_range(0.0..extent));
    let (w, h) = (rng.random_range(1.0..extent / 2.0), rng.random_range(1.0..extent / 2.0));
    BBox::new(x, y, x + w, y + h)
}

/// Repeatedly take the best remaining candidate and delete everything of its
/// class that overlaps it.
fn brute_force_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
    let mut out = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for i in 1..alive.len() {
            let (a, b) = (&alive[i], &alive[best]);
            let better = a.1.score > b.1.score
                || (a.1.score == b.1.score && (a.1.class_id < b.1.class_id || (a.1.class_id == b.1.class_id && a.0 < b.0)));
            if better {
                best = i;
            }
        }
        let (_, top) = alive.remove(best);
        alive.retain(|(_, d)| d.class_id != top.class_id || iou(&d.bbox, &top.bbox) < thr);
        out.push(top);
    }
    out
}

fn random_dets(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            bbox: random_box(rng, 100.0),
            class_id: rng.random_range(0..3),
            // Coarse scores so ties are common.
            score: rng.random_range(0..20) as f64 / 20.0,
        })
        .collect()
}

#[test]
fn nms_equals_brute_force_on_1000_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        let n = rng.random_range(0..=64);
        let dets = random_dets(&mut rng, n);
        let thr = [0.3, 0.45, 0.6][case % 3];
        let fast = nms(&dets, thr);
        assert_eq!(fast, brute_force_nms(&dets, thr), "case {case}");
        for (i, a) in fast.iter().enumerate() {
            for b in &fast[i + 1..] {
                assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) < thr);
            }
        }
        assert!(fast.windows(2).all(|w| w[0].score >= w[1].score));
    }
}

/// Decode written directly from the formulas, looping anchors outermost.
fn straight_line_decode(raw: &Tensor<f32>, stride: f64, anchors: &[[f64; 2]; 3], nc: usize, conf: f64) -> Vec<Detection> {
    let s = raw.shape();
    let sig = |v: f32| 1.0 / (1.0 + (-(v as f64)).exp());
    let mut out = Vec::new();
    for a in 0..3 {
        for y in 0..s.h {
            for x in 0..s.w {
                let ch = |k: usize| raw.at(0, a * (5 + nc) + k, y, x);
                let bx = (2.0 * sig(ch(0)) - 0.5 + x as f64) * stride;
                let by = (2.0 * sig(ch(1)) - 0.5 + y as f64) * stride;
                let bw = (2.0 * sig(ch(2))) * (2.0 * sig(ch(2))) * anchors[a][0];
                let bh = (2.0 * sig(ch(3))) * (2.0 * sig(ch(3))) * anchors[a][1];
                let mut cls = 0;
                for c in 1..nc {
                    if sig(ch(5 + c)) > sig(ch(5 + cls)) {
                        cls = c;
                    }
                }
                let score = sig(ch(4)) * sig(ch(5 + cls));
                let (iw, ih) = (s.w as f64 * stride, s.h as f64 * stride);
                let b = BBox::new(
                    (bx - bw / 2.0).clamp(0.0, iw),
                    (by - bh / 2.0).clamp(0.0, ih),
                    (bx + bw / 2.0).clamp(0.0, iw),
                    (by + bh / 2.0).clamp(0.0, ih),
                );
                if score >= conf && b.x2 > b.x1 && b.y2 > b.y1 {
                    out.push(Detection { bbox: b, class_id: cls, score });
                }
            }
        }
    }
    out
}

fn key(d: &Detection) -> [u64; 6] {
    let b = d.bbox;
    [d.class_id as u64, d.score.to_bits(), b.x1.to_bits(), b.y1.to_bits(), b.x2.to_bits(), b.y2.to_bits()]
}

#[test]
fn decode_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (i, (stride, anchors, nc)) in [(16usize, ANCHORS_S16, 2usize), (32, ANCHORS_S32, 3), (32, ANCHORS_S32, 1)]
        .into_iter()
        .enumerate()
    {
        let raw = Tensor::from_fn(Shape::new(1, 3 * (5 + nc), 5, 7), |_| rng.random_range(-4.0f32..4.0));
        let head = HeadSpec { stride, anchors, num_classes: nc };
        let conf = [0.0, 0.1, 0.25][i];
        let mut ours = decode(&raw, &head, conf).unwrap().remove(0);
        let mut oracle = straight_line_decode(&raw, stride as f64, &anchors, nc, conf);
        assert!(!oracle.is_empty());
        ours.sort_by_key(key);
        oracle.sort_by_key(key);
        assert_eq!(ours.len(), oracle.len());
        for (a, b) in ours.iter().zip(&oracle) {
            assert_eq!(a.class_id, b.class_id);
            assert!((a.score - b.score).abs() <= 1e-12);
            for (x, y) in a.bbox.to_array().iter().zip(b.bbox.to_array()) {
                assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
            }
        }
    }
}

fn random_eval_set(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>) {
    let images = rng.random_range(1..5);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let g: Vec<GroundTruth> = (0..rng.random_range(0..6))
            .map(|_| GroundTruth { bbox: random_box(rng, 100.0), class_id: rng.random_range(0..3) })
            .collect();
        let mut p = Vec::new();
        for gt in &g {
            if rng.random_bool(0.7) {
                let j = |rng: &mut ChaCha8Rng| rng.random_range(-3.0..3.0);
                let b = gt.bbox;
                p.push(Detection {
                    bbox: BBox::new(b.x1 + j(rng), b.y1 + j(rng), b.x2 + j(rng), b.y2 + j(rng)),
                    class_id: gt.class_id,
                    score: rng.random_range(0.01..1.0),
                });
            }
        }
        let extra = rng.random_range(0..6);
        p.extend(random_dets(rng, extra).into_iter().map(|mut d| {
            d.score = d.score.max(0.01);
            d
        }));
        preds.push(p);
        gts.push(g);
    }
    (preds, gts)
}

#[test]
fn evaluate_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let t = coco_thresholds();
    for case in 0..300 {
        let (preds, gts) = random_eval_set(&mut rng);
        let base = evaluate(&preds, &gts, 3, &t).unwrap();
        for v in [base.precision, base.recall, base.map50, base.map5095, base.f1] {
            assert!((0.0..=1.0).contains(&v), "case {case}: {base:?}");
        }
        assert!(base.map5095 <= base.map50, "case {case}: {base:?}");
        assert_eq!(base.f1, f1(base.precision, base.recall));

        let mut shuffled = preds.clone();
        for p in &mut shuffled {
            p.shuffle(&mut rng);
        }
        assert_eq!(evaluate(&shuffled, &gts, 3, &t).unwrap(), base, "permutation, case {case}");

        let mut rescaled = preds.clone();
        for d in rescaled.iter_mut().flatten() {
            d.score = d.score.powi(3) * 0.5;
        }
        let r = evaluate(&rescaled, &gts, 3, &t).unwrap();
        assert_eq!((r.map50, r.map5095), (base.map50, base.map5095), "monotone rescale, case {case}");
    }
}

#[test]
fn ap_matches_brute_force_envelope() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(1..12);
        let tps: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let npos = tps.iter().filter(|&&t| t).count() + rng.random_range(0..3);
        // Integrate the envelope over recall, step by step.
        let mut prev_r = 0.0;
        let mut area = 0.0;
        let mut tp = 0;
        for i in 0..n {
            tp += tps[i] as usize;
            let r = if npos == 0 { 0.0 } else { tp as f64 / npos as f64 };
            let mut env = 0.0f64;
            let mut tpj = tp;
            for j in i..n {
                if j > i {
                    tpj += tps[j] as usize;
                }
                env = env.max(tpj as f64 / (j + 1) as f64);
            }
            area += (r - prev_r) * env;
            prev_r = r;
        }
        assert!((average_precision(&tps, npos) - area).abs() < 1e-12);
    }
}

#[test]
fn f1_reproduces_table_rows() {
    for (p, r, want) in [(0.885, 0.805, 0.8431), (0.895, 0.794, 0.8415), (0.887, 0.806, 0.8446), (0.908, 0.796, 0.8483)] {
        let got = f1(p, r);
        assert!((got - want).abs() <= 5e-5, "f1({p}, {r}) = {got}, want {want}");
    }
    assert_eq!(f1(1.0, 1.0), 1.0);
    assert_eq!(f1(0.0, 0.0), 0.0);
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(
        a in (0.0..50.0f64, 0.0..50.0f64, 0.1..50.0f64, 0.1..50.0f64),
        b in (0.0..50.0f64, 0.0..50.0f64, 0.1..50.0f64, 0.1..50.0f64),
    ) {
        let a = BBox::new(a.0, a.1, a.0 + a.2, a.1 + a.3);
        let b = BBox::new(b.0, b.1, b.0 + b.2, b.1 + b.3);
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        let c = ciou_boxes(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!(c <= v + 1e-12);
    }
}
