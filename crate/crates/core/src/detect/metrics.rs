use std::cmp::Ordering;

use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use super::{iou, BBox, Detection};
use crate::error::{Error, Result};

/// Labelled box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// One row of the detection-performance table.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map5095: f64,
    pub f1: f64,
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Exact fraction `num / den` with small integer parts.
#[derive(Clone, Copy, Debug)]
struct Frac {
    num: u64,
    den: u64,
}

impl Frac {
    fn cmp(&self, o: &Frac) -> Ordering {
        (self.num as u128 * o.den as u128).cmp(&(o.num as u128 * self.den as u128))
    }

    fn big(self) -> BigRational {
        BigRational::new(self.num.into(), self.den.into())
    }
}

/// All-point interpolated AP of a ranked TP/FP sequence against `npos`
/// positives, as an exact rational: `(1/npos) Σ_{i TP} max_{j≥i} prec_j`.
pub fn average_precision_exact(ranked_tp: &[bool], npos: usize) -> BigRational {
    if npos == 0 {
        return BigRational::zero();
    }
    let mut tp = 0u64;
    let precision: Vec<Frac> = ranked_tp
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += hit as u64;
            Frac {
                num: tp,
                den: i as u64 + 1,
            }
        })
        .collect();
    let mut sum = BigRational::zero();
    let mut envelope = Frac { num: 0, den: 1 };
    for (p, &hit) in precision.iter().zip(ranked_tp).rev() {
        if p.cmp(&envelope) == Ordering::Greater {
            envelope = *p;
        }
        if hit {
            sum += envelope.big();
        }
    }
    sum / BigRational::from_integer((npos as u64).into())
}

/// [`average_precision_exact`] rounded to `f64`.
pub fn average_precision(ranked_tp: &[bool], npos: usize) -> f64 {
    to_f64(&average_precision_exact(ranked_tp, npos))
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(0.0)
}

/// Canonical order of an image's predictions: score descending, then class,
/// then coordinates. Makes evaluation independent of input order.
fn canonical(preds: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&i, &j| {
        let (a, b) = (&preds[i], &preds[j]);
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then_with(|| {
                a.bbox
                    .to_array()
                    .iter()
                    .zip(b.bbox.to_array())
                    .map(|(x, y)| x.total_cmp(&y))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
    });
    idx
}

/// Greedy matching within one image at IoU threshold `t`, in canonical order.
fn match_image(preds: &[Detection], order: &[usize], gts: &[GroundTruth], t: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    order
        .iter()
        .map(|&i| {
            let p = &preds[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.class_id != p.class_id {
                    continue;
                }
                let v = iou(&p.bbox, &gt.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, v)) if v >= t => {
                    taken[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// A prediction after matching: `(score, image, canonical rank, class, tp)`.
type Record = (f64, usize, usize, usize, bool);

fn ranked(mut records: Vec<Record>) -> Vec<Record> {
    records.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    records
}

fn records_at(preds: &[Vec<Detection>], orders: &[Vec<usize>], gts: &[Vec<GroundTruth>], t: f64) -> Vec<Record> {
    let mut records = Vec::new();
    for (img, ((p, order), g)) in preds.iter().zip(orders).zip(gts).enumerate() {
        for (rank, (&i, tp)) in order.iter().zip(match_image(p, order, g, t)).enumerate() {
            records.push((p[i].score, img, rank, p[i].class_id, tp));
        }
    }
    ranked(records)
}

/// Mean over classes that have ground truth of the per-class AP.
fn mean_ap(records: &[Record], npos: &[usize]) -> BigRational {
    let classes: Vec<usize> = (0..npos.len()).filter(|&c| npos[c] > 0).collect();
    if classes.is_empty() {
        return BigRational::zero();
    }
    let mut sum = BigRational::zero();
    for &c in &classes {
        let tps: Vec<bool> = records.iter().filter(|r| r.3 == c).map(|r| r.4).collect();
        sum += average_precision_exact(&tps, npos[c]);
    }
    sum / BigRational::from_integer((classes.len() as u64).into())
}

/// Precision and recall pooled over classes at the distinct-score cut that
/// maximises F1 (highest cut on ties). `(0, 0)` when no cut has F1 > 0.
fn best_operating_point(records: &[Record], total_pos: usize) -> (f64, f64) {
    let (mut tp, mut best) = (0usize, (0.0, 0.0, 0.0));
    for (i, r) in records.iter().enumerate() {
        tp += r.4 as usize;
        if records.get(i + 1).is_some_and(|n| n.0 == r.0) {
            continue;
        }
        let p = tp as f64 / (i + 1) as f64;
        let rc = if total_pos == 0 { 0.0 } else { tp as f64 / total_pos as f64 };
        let f = f1(p, rc);
        if f > best.0 {
            best = (f, p, rc);
        }
    }
    (best.1, best.2)
}

/// Match predictions to ground truth per image and threshold, then report
/// precision/recall at the F1-maximising confidence (IoU 0.5), mAP@.5 and the
/// mean of mAP over `thresholds`. Classes without ground truth are excluded
/// from the class mean.
pub fn evaluate(
    preds: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
    thresholds: &[f64],
) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} prediction lists for {} images", preds.len(), gts.len()),
        ));
    }
    if thresholds.is_empty() {
        return Err(Error::invalid("evaluate", "no IoU thresholds"));
    }
    let class_ids = preds.iter().flatten().map(|d| d.class_id);
    let gt_ids = gts.iter().flatten().map(|g| g.class_id);
    if let Some(class_id) = class_ids.chain(gt_ids).find(|&c| c >= num_classes) {
        return Err(Error::ClassOutOfRange { class_id, num_classes });
    }
    let mut npos = vec![0usize; num_classes];
    for g in gts.iter().flatten() {
        npos[g.class_id] += 1;
    }
    let orders: Vec<Vec<usize>> = preds.iter().map(|p| canonical(p)).collect();

    let at50 = records_at(preds, &orders, gts, 0.5);
    let map50 = mean_ap(&at50, &npos);
    let mut sum = BigRational::zero();
    for &t in thresholds {
        sum += if t == 0.5 {
            map50.clone()
        } else {
            mean_ap(&records_at(preds, &orders, gts, t), &npos)
        };
    }
    let map5095 = sum / BigRational::from_integer((thresholds.len() as u64).into());
    let (precision, recall) = best_operating_point(&at50, npos.iter().sum());
    Ok(MetricsReport {
        precision,
        recall,
        map50: to_f64(&map50),
        map5095: to_f64(&map5095),
        f1: f1(precision, recall),
    })
}
