use std::cmp::Ordering;

use super::{iou, Detection};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.45;
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;

/// Score descending, then class id ascending.
pub(crate) fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then(a.class_id.cmp(&b.class_id))
}

/// Class-wise greedy suppression. Candidates are visited by descending score
/// (ties: smaller class id, then input order); a box is kept iff its IoU with
/// every kept box of its class is below `iou_threshold`. Output is in visit
/// order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| rank(&dets[i], &dets[j]));
    let num_classes = dets.iter().map(|d| d.class_id + 1).max().unwrap_or(0);
    let mut kept_by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    let mut out = Vec::new();
    for i in order {
        let d = &dets[i];
        let kept = &mut kept_by_class[d.class_id];
        if kept.iter().all(|&k| iou(&dets[k].bbox, &d.bbox) < iou_threshold) {
            kept.push(i);
            out.push(*d);
        }
    }
    out
}
