//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use dgs_core::data::{make_synthetic, Sample};
use dgs_core::detect::*;
use dgs_core::model::{load_checkpoint, save_checkpoint, LossWeights, Model, ModelConfig};
use dgs_core::nn::gradcheck::block_suite;
use dgs_core::nn::{DgstBlock, DgstConfig, Init, Module};
use dgs_core::pipeline::{bench, bench_image, BenchReport, Detector};
use dgs_core::tensor::gradcheck::op_suite;
use dgs_core::train::{assign_targets, train_tiny, LossBreakdown, TrainConfig, TrainSample};
use dgs_core::{ConvSpec, Shape, Tape, Tensor};
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// 1 ------------------------------------------------------------------------

fn f1_identity() -> Check {
    let rows = [
        ("YOLOv7-tiny", 0.885, 0.805, 0.8431),
        ("DGSM", 0.895, 0.794, 0.8415),
        ("DGST", 0.887, 0.806, 0.8446),
        ("DGST+DGSM", 0.908, 0.796, 0.8483),
    ];
    let mut out = Vec::new();
    for (name, p, r, want) in rows {
        let got = f1(p, r);
        ensure((got - want).abs() <= 5e-5, || format!("{name}: f1({p}, {r}) = {got:.6}, printed {want}"))?;
        out.push(format!("{name} {got:.5}"));
    }
    Ok(out.join(", "))
}

// 2 ------------------------------------------------------------------------

fn loss_sum_identity() -> Check {
    let rows = [
        ("DGSM", 0.02671, 0.03225, 0.00129, 0.06025, 5),
        ("DGST", 0.02589, 0.02889, 0.001067, 0.05585, 5),
        ("DGST+DGSM", 0.02423, 0.02788, 0.0006791, 0.05278, 5),
        ("YOLOv7-tiny", 0.02381, 0.01283, 0.0008498, 0.0375, 4),
    ];
    let mut out = Vec::new();
    for (name, b, o, c, total, digits) in rows {
        let sum = LossBreakdown::combine(b, o, c, LossWeights::UNIT).total;
        let unit = 10f64.powi(-digits);
        ensure((sum - total).abs() <= unit + 1e-12, || format!("{name}: sum {sum} vs printed {total}"))?;
        out.push(format!("{name} {sum:.7} vs {total}"));
    }
    Ok(out.join(", "))
}

// 3 ------------------------------------------------------------------------

fn parameter_accounting() -> Check {
    let model = Model::<f32>::build(&ModelConfig::default(), 0).map_err(err)?;
    for (name, layer) in model.layers() {
        let (analytic, allocated) = (layer.param_count(), layer.allocated_params());
        ensure(analytic == allocated, || format!("{name}: analytic {analytic} vs allocated {allocated}"))?;
    }
    let total = model.count_params();
    ensure(total == model.allocated_params(), || "model total differs from enumeration".into())?;
    let bytes = model.to_checkpoint_bytes();
    let manifest = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let blob_elems = (bytes.len() - 16 - manifest) / 4;
    ensure(blob_elems == total, || format!("checkpoint holds {blob_elems} floats, count {total}"))?;
    let reference = 2.02e6;
    let delta = (total as f64 - reference) / reference;
    ensure(delta.abs() <= 0.20, || format!("{total} params is {:+.1}% from 2.02M", delta * 100.0))?;
    Ok(format!(
        "{} layers exact; total {total} = {:.3}M, {:+.2}% vs 2.02M; checkpoint {blob_elems} floats",
        model.layers().count(),
        total as f64 / 1e6,
        delta * 100.0
    ))
}

// 4 ------------------------------------------------------------------------

fn gradient_correctness() -> Check {
    let (mut worst_op, mut worst_block) = (("", 0.0f64), ("", 0.0f64));
    let mut checks = 0;
    for seed in 0..20 {
        for r in op_suite(seed).map_err(err)?.into_iter().chain(block_suite(seed).map_err(err)?) {
            checks += 1;
            ensure(r.passed(), || {
                format!("seed {seed}: {} rel err {:.3e} > {:.0e}", r.name, r.max_rel_err, r.tolerance)
            })?;
            let slot = if r.tolerance < 1e-3 { &mut worst_op } else { &mut worst_block };
            if r.max_rel_err >= slot.1 {
                *slot = (if r.tolerance < 1e-3 { "op" } else { "block" }, r.max_rel_err);
            }
        }
    }
    Ok(format!(
        "{checks} checks over 20 seeds; worst op {:.2e} (<= 1e-4), worst block {:.2e} (<= 1e-3)",
        worst_op.1, worst_block.1
    ))
}

// 5 ------------------------------------------------------------------------

fn naive_conv(x: &Tensor<f32>, w: &Tensor<f32>, b: &[f32], spec: ConvSpec) -> Vec<f64> {
    let s = x.shape();
    let (k, st, pad) = (spec.kernel, spec.stride, spec.kernel / 2);
    let (oh, ow) = (s.h.div_ceil(st), s.w.div_ceil(st));
    let (icg, ocg) = (spec.in_channels / spec.groups, spec.out_channels / spec.groups);
    let mut out = Vec::with_capacity(s.n * spec.out_channels * oh * ow);
    for n in 0..s.n {
        for o in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o] as f64;
                    for ic in 0..icg {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * st + ky) as isize - pad as isize;
                                let ix = (ox * st + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && iy < s.h as isize && ix < s.w as isize {
                                    let xv = x.at(n, (o / ocg) * icg + ic, iy as usize, ix as usize);
                                    let wv = w.data()[((o * icg + ic) * k + ky) * k + kx];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn brute_force_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
    let mut out = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for i in 1..alive.len() {
            let (a, b) = (&alive[i], &alive[best]);
            let key = |(i, d): &(usize, Detection)| (-d.score, d.class_id, *i);
            if key(a).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Less) {
                best = i;
            }
        }
        let (_, top) = alive.remove(best);
        alive.retain(|(_, d)| d.class_id != top.class_id || iou(&d.bbox, &top.bbox) < thr);
        out.push(top);
    }
    out
}

fn oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_conv = 0.0f64;
    for case in 0..40 {
        let groups = [1, 2, 4][case % 3];
        let (cin, cout) = (groups * rng.random_range(1..5), groups * rng.random_range(1..5));
        let spec = ConvSpec::new(cin, cout, [1, 3][case % 2]).stride(1 + case % 2).groups(groups).bias(true);
        let x = Tensor::from_fn(Shape::new(2, cin, 7, 6), |_| rng.random_range(-1.0f32..1.0));
        let w = Tensor::from_fn(spec.weight_shape(), |_| rng.random_range(-1.0f32..1.0));
        let b = Tensor::from_fn(Shape::new(1, cout, 1, 1), |_| rng.random_range(-1.0f32..1.0));
        let mut tape = Tape::inference();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(&xv, &wv, Some(&bv), spec).map_err(err)?;
        let oracle = naive_conv(&x, &w, b.data(), spec);
        for (a, o) in y.value().data().iter().zip(&oracle) {
            worst_conv = worst_conv.max((*a as f64 - o).abs());
        }
    }
    ensure(worst_conv <= 1e-5, || format!("conv2d differs from naive loops by {worst_conv:.2e}"))?;

    for case in 0..1000 {
        let n = rng.random_range(0..=64);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
                Detection {
                    bbox: BBox::new(x, y, x + rng.random_range(1.0..50.0), y + rng.random_range(1.0..50.0)),
                    class_id: rng.random_range(0..3),
                    score: rng.random_range(0..20) as f64 / 20.0,
                }
            })
            .collect();
        let thr = [0.3, 0.45, 0.6][case % 3];
        ensure(nms(&dets, thr) == brute_force_nms(&dets, thr), || format!("NMS case {case} differs"))?;
    }

    let mut assigned = 0;
    for cfg in [ModelConfig::default(), ModelConfig::default().with_three_heads()] {
        let heads = HeadSpec::from_config(&cfg);
        let grids: Vec<(usize, usize)> = heads.iter().map(|h| (640 / h.stride, 640 / h.stride)).collect();
        for _ in 0..500 {
            let (w, h) = (rng.random_range(2.0..500.0), rng.random_range(2.0..500.0));
            let gt = GroundTruth {
                bbox: BBox::from_cxcywh(rng.random_range(0.0..640.0), rng.random_range(0.0..640.0), w, h),
                class_id: 0,
            };
            let t = assign_targets(&[vec![gt]], &heads, &grids).map_err(err)?[0];
            let mut best = (0, 0, f64::NEG_INFINITY);
            for (hi, head) in heads.iter().enumerate() {
                for (ai, a) in head.anchors.iter().enumerate() {
                    let v = iou(&BBox::from_cxcywh(0.0, 0.0, w, h), &BBox::from_cxcywh(0.0, 0.0, a[0], a[1]));
                    if v > best.2 {
                        best = (hi, ai, v);
                    }
                }
            }
            let stride = heads[best.0].stride as f64;
            let (cx, cy) = gt.bbox.center();
            let n = grids[best.0].0;
            let cell = |c: f64| ((c / stride) as usize).min(n - 1);
            let want = (best.0, best.1, cell(cx), cell(cy));
            ensure((t.head, t.anchor, t.gx, t.gy) == want, || format!("assignment {t:?} vs oracle {want:?}"))?;
            assigned += 1;
        }
    }

    let exact = average_precision_exact(&[true, false, true], 2);
    let five_sixths = BigRational::new(5.into(), 6.into());
    ensure(exact == five_sixths, || format!("AP = {exact}, expected 5/6"))?;
    let gt = |x: f64| GroundTruth {
        bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
        class_id: 0,
    };
    let pred = |x: f64, score: f64| Detection {
        bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
        class_id: 0,
        score,
    };
    let report = evaluate(
        &[vec![pred(0.0, 0.9), pred(100.0, 0.8), pred(50.0, 0.7)]],
        &[vec![gt(0.0), gt(50.0)]],
        1,
        &[0.5],
    )
    .map_err(err)?;
    ensure(report.map50 == 5.0 / 6.0, || format!("mAP@.5 = {}", report.map50))?;

    Ok(format!(
        "conv max |diff| {worst_conv:.1e} (40 specs); NMS 1000/1000 exact; assignment {assigned}/{assigned}; AP = {exact}"
    ))
}

// 6 ------------------------------------------------------------------------

fn permute_positions(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let l = t.shape().plane();
    Tensor::from_fn(t.shape(), |i| t.data()[(i / l) * l + perm[i % l]])
}

fn equivariance_gap(pos_encoding: bool, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut init = Init::new(4);
    let cfg = DgstConfig {
        pos_encoding,
        ..DgstConfig::new(64)
    };
    let block = DgstBlock::<f64>::new(&mut init, "dgst", cfg).map_err(err)?;
    let s = Shape::new(2, 16, 4, 5);
    let x = Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0));
    let mut perm: Vec<usize> = (0..s.plane()).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), rng);
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let y = block.attention_path(&mut tape, &xv).map_err(err)?;
    let xp = tape.constant(permute_positions(&x, &perm));
    let yp = block.attention_path(&mut tape, &xp).map_err(err)?;
    Ok(permute_positions(y.value(), &perm)
        .data()
        .iter()
        .zip(yp.value().data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

fn invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut pairs = 0;
    for c in 1..=64usize {
        for g in (1..=c).filter(|g| c % g == 0) {
            let x = Tensor::from_fn(Shape::new(1, c, 2, 2), |i| i as f32);
            let mut tape = Tape::inference();
            let xv = tape.constant(x.clone());
            let once = tape.channel_shuffle(&xv, g).map_err(err)?;
            let back = tape.channel_shuffle(&once, c / g).map_err(err)?;
            ensure(back.value().bitwise_eq(&x), || format!("shuffle({g}) then shuffle({}) on c={c}", c / g))?;
            pairs += 1;
        }
    }

    for _ in 0..100 {
        let parts: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(1..6)).collect();
        let c: usize = parts.iter().sum();
        let x = Tensor::from_fn(Shape::new(2, c, 3, 2), |_| rng.random_range(-5.0f32..5.0));
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let split = tape.channel_split(&xv, &parts).map_err(err)?;
        let refs: Vec<_> = split.iter().collect();
        let joined = tape.concat(&refs).map_err(err)?;
        ensure(joined.value().bitwise_eq(&x), || format!("split/concat {parts:?}"))?;
    }

    let plain = equivariance_gap(false, &mut rng)?;
    ensure(plain < 1e-12, || format!("attention without encoding not equivariant: {plain:.2e}"))?;
    let encoded = equivariance_gap(true, &mut rng)?;
    ensure(encoded > 1e-3, || format!("encoding did not break equivariance: {encoded:.2e}"))?;

    let cfg = ModelConfig {
        input_size: [64, 64],
        ..ModelConfig::default()
    };
    let model = Model::<f32>::build(&cfg, 17).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("m.dgsd");
    save_checkpoint(&model, &path).map_err(err)?;
    let loaded = load_checkpoint(&path).map_err(err)?;
    let x = Tensor::from_fn(Shape::new(1, 3, 64, 64), |_| rng.random_range(0.0f32..1.0));
    let (a, b) = (model.predict(&x).map_err(err)?, loaded.predict(&x).map_err(err)?);
    ensure(a.iter().zip(&b).all(|(p, q)| p.bitwise_eq(q)), || "checkpoint forward differs".into())?;
    ensure(model.to_checkpoint_bytes() == loaded.to_checkpoint_bytes(), || "checkpoint bytes differ".into())?;

    Ok(format!(
        "{pairs} shuffle inverse pairs, 100 split/concat round trips bitwise; attention gap {plain:.1e} without \
         encoding, {encoded:.2e} with; checkpoint round trip bitwise"
    ))
}

// 7 ------------------------------------------------------------------------

const TRAIN_SIZE: usize = 128;

fn learning_sanity() -> Check {
    let samples: Vec<Sample> = make_synthetic(8, TRAIN_SIZE, 7)
        .into_iter()
        .map(|(image, labels)| Sample {
            image,
            labels,
            path: "synthetic".into(),
        })
        .collect();
    let data: Vec<TrainSample> = samples
        .iter()
        .map(|s| s.to_train(TRAIN_SIZE, TRAIN_SIZE).map(|t| t.0))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let cfg = ModelConfig {
        input_size: [TRAIN_SIZE, TRAIN_SIZE],
        ..ModelConfig::default()
    };
    let tc = TrainConfig::default();
    let run = || -> Result<(Vec<LossBreakdown>, Model<f32>), String> {
        let mut model = Model::<f32>::build(&cfg, tc.seed).map_err(err)?;
        let curve = train_tiny(&mut model, &data, &tc, |_, _| {}).map_err(err)?;
        Ok((curve, model))
    };
    let start = Instant::now();
    let (curve, model) = run()?;
    let one_run = start.elapsed();
    let (first, last) = (curve[0].total, curve[curve.len() - 1].total);
    let ratio = first / last;
    ensure(ratio >= 10.0, || format!("total loss {first:.4e} -> {last:.4e} is only {ratio:.1}x"))?;

    let (again, model2) = run()?;
    let bits = |c: &[LossBreakdown]| -> Vec<[u64; 4]> {
        c.iter()
            .map(|l| [l.box_loss, l.obj_loss, l.cls_loss, l.total].map(f64::to_bits))
            .collect()
    };
    ensure(bits(&curve) == bits(&again), || "second run with the same seed gave a different curve".into())?;
    ensure(model.to_checkpoint_bytes() == model2.to_checkpoint_bytes(), || "weights differ between runs".into())?;

    let detector = Detector::new(&model);
    let (mut recovered, mut total) = (0, 0);
    for s in &samples {
        let dets = detector.detect(&s.image).map_err(err)?;
        for gt in s.ground_truth() {
            total += 1;
            let best = dets
                .iter()
                .filter(|d| iou(&d.bbox, &gt.bbox) >= 0.5)
                .max_by(|a, b| a.score.total_cmp(&b.score));
            if best.is_some_and(|d| d.class_id == gt.class_id) {
                recovered += 1;
            }
        }
    }
    ensure(recovered * 2 > total, || format!("inference recovers only {recovered}/{total} training boxes"))?;

    Ok(format!(
        "{} steps at {TRAIN_SIZE}px: total {first:.4e} -> {last:.4e} ({ratio:.1}x) in {:.0}s; rerun bitwise equal; \
         inference recovers {recovered}/{total} training boxes with their class",
        curve.len(),
        one_run.as_secs_f64()
    ))
}

// 8 ------------------------------------------------------------------------

fn efficiency_ordering() -> Check {
    let image = bench_image(640);
    let mut rows: Vec<(&str, BenchReport)> = Vec::new();
    for (name, preset) in [("DGST+DGSM", "default"), ("DGSM-only", "dgsm-only"), ("3-head baseline", "baseline")] {
        let model = Model::<f32>::build(&ModelConfig::preset(preset).map_err(err)?, 0).map_err(err)?;
        let detector = Detector::new(&model).with_input_size(640).map_err(err)?;
        let r = bench(&detector, &image, 5, 1).map_err(err)?;
        ensure(r.total_ms == r.interface_ms + r.nms_ms, || format!("{name}: total is not the sum"))?;
        rows.push((name, r));
    }
    let describe = || {
        rows.iter()
            .map(|(n, r)| format!("{n} {:.2}M {:.0}ms", r.params_m, r.total_ms))
            .collect::<Vec<_>>()
            .join(" < ")
    };
    for w in rows.windows(2) {
        ensure(w[0].1.total_ms < w[1].1.total_ms, || format!("time not ordered: {}", describe()))?;
        ensure(w[0].1.params_m < w[1].1.params_m, || format!("params not ordered: {}", describe()))?;
    }
    Ok(describe())
}

// --------------------------------------------------------------------------

fn main() {
    let criteria: [(u8, &str, fn() -> Check); 8] = [
        (1, "F1 identity", f1_identity),
        (2, "loss-sum identity", loss_sum_identity),
        (3, "parameter accounting", parameter_accounting),
        (4, "gradient correctness", gradient_correctness),
        (5, "oracle equivalence", oracle_equivalence),
        (6, "permutation/identity invariants", invariants),
        (7, "learning sanity", learning_sanity),
        (8, "efficiency ordering", efficiency_ordering),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!(
        "EXCLUDED 9 absolute P/R/mAP of the comparison table: needs the private dataset and full-scale training; \
         metric correctness is covered by 1 and 5"
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
