use crate::detect::{BBox, GroundTruth, HeadSpec};
use crate::error::{Error, Result};

/// A ground-truth box bound to one head, anchor and grid cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub image: usize,
    pub head: usize,
    pub anchor: usize,
    pub gx: usize,
    pub gy: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

/// IoU of two boxes sharing a center.
pub fn centered_iou(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = a[0].min(b[0]) * a[1].min(b[1]);
    inter / (a[0] * a[1] + b[0] * b[1] - inter)
}

/// Assign every ground truth to the `(head, anchor)` whose prior, centered on
/// the box, has the highest IoU with it (first in head-then-anchor order on
/// ties), and to the cell `floor(center / stride)` of that head. `grids` holds
/// `(gh, gw)` per head; centers on the far image edge go to the last cell.
pub fn assign_targets(gts: &[Vec<GroundTruth>], heads: &[HeadSpec], grids: &[(usize, usize)]) -> Result<Vec<Target>> {
    if heads.len() != grids.len() || heads.is_empty() {
        return Err(Error::invalid(
            "assign_targets",
            format!("{} heads with {} grids", heads.len(), grids.len()),
        ));
    }
    let mut out = Vec::new();
    for (image, boxes) in gts.iter().enumerate() {
        for gt in boxes {
            let b = gt.bbox;
            let (w, h) = (b.width(), b.height());
            if !(w > 0.0 && h > 0.0 && b.is_valid()) {
                return Err(Error::invalid(
                    "assign_targets",
                    format!("ground truth {:?} in image {image} has non-positive size", b.to_array()),
                ));
            }
            let mut best = (0, 0, f64::NEG_INFINITY);
            for (hi, head) in heads.iter().enumerate() {
                for (ai, &anchor) in head.anchors.iter().enumerate() {
                    let v = centered_iou([w, h], anchor);
                    if v > best.2 {
                        best = (hi, ai, v);
                    }
                }
            }
            let (head, anchor, _) = best;
            let stride = heads[head].stride as f64;
            let (gh, gw) = grids[head];
            let (cx, cy) = b.center();
            let cell = |c: f64, n: usize| ((c / stride).floor().max(0.0) as usize).min(n - 1);
            out.push(Target {
                image,
                head,
                anchor,
                gx: cell(cx, gw),
                gy: cell(cy, gh),
                class_id: gt.class_id,
                bbox: b,
            });
        }
    }
    Ok(out)
}
