use super::BBox;
use crate::error::{Error, Result};
use crate::model::{Anchors, ModelConfig};
use crate::tensor::{Scalar, Tensor};

/// Outputs per anchor before the class logits: `tx ty tw th obj`.
pub const BOX_FIELDS: usize = 5;

/// Decoded box with its class and confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Geometry of one detection head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadSpec {
    pub stride: usize,
    pub anchors: Anchors,
    pub num_classes: usize,
}

impl HeadSpec {
    pub fn from_config(cfg: &ModelConfig) -> Vec<Self> {
        cfg.strides
            .iter()
            .zip(&cfg.anchors)
            .map(|(&stride, &anchors)| Self {
                stride,
                anchors,
                num_classes: cfg.num_classes,
            })
            .collect()
    }

    pub fn channels(&self) -> usize {
        self.anchors.len() * (BOX_FIELDS + self.num_classes)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Box of one cell/anchor prediction, before clipping.
pub fn decode_box(t: [f64; 4], cell: (usize, usize), anchor: [f64; 2], stride: usize) -> BBox {
    let s = stride as f64;
    let cx = (2.0 * sigmoid(t[0]) - 0.5 + cell.0 as f64) * s;
    let cy = (2.0 * sigmoid(t[1]) - 0.5 + cell.1 as f64) * s;
    let w = (2.0 * sigmoid(t[2])).powi(2) * anchor[0];
    let h = (2.0 * sigmoid(t[3])).powi(2) * anchor[1];
    BBox::from_cxcywh(cx, cy, w, h)
}

/// Decode one head output `(n, 3·(5+nc), gh, gw)` into detections per
/// batch image, keeping `score ≥ conf_threshold`. Boxes are clipped to the
/// network input `(gw·stride, gh·stride)`; boxes that collapse are dropped.
/// Order within an image: row, column, anchor.
pub fn decode<T: Scalar>(raw: &Tensor<T>, head: &HeadSpec, conf_threshold: f64) -> Result<Vec<Vec<Detection>>> {
    let s = raw.shape();
    if s.c != head.channels() {
        return Err(Error::shape(
            "decode",
            format!("{} channels (3 anchors × (5 + {}))", head.channels(), head.num_classes),
            s,
        ));
    }
    let fields = BOX_FIELDS + head.num_classes;
    let (width, height) = ((s.w * head.stride) as f64, (s.h * head.stride) as f64);
    let mut out = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let mut dets = Vec::new();
        for gy in 0..s.h {
            for gx in 0..s.w {
                for (a, &anchor) in head.anchors.iter().enumerate() {
                    let get = |k: usize| raw.at(n, a * fields + k, gy, gx).f64();
                    let obj = sigmoid(get(4));
                    let (mut class_id, mut best) = (0, f64::NEG_INFINITY);
                    for c in 0..head.num_classes {
                        let p = sigmoid(get(BOX_FIELDS + c));
                        if p > best {
                            (class_id, best) = (c, p);
                        }
                    }
                    let score = obj * best;
                    if !(score >= conf_threshold) {
                        continue;
                    }
                    let bbox = decode_box([get(0), get(1), get(2), get(3)], (gx, gy), anchor, head.stride)
                        .clip(width, height);
                    if bbox.is_valid() {
                        dets.push(Detection { bbox, class_id, score });
                    }
                }
            }
        }
        out.push(dets);
    }
    Ok(out)
}

/// Decode every head and concatenate per image, heads in order.
pub fn decode_all<T: Scalar>(
    outputs: &[Tensor<T>],
    heads: &[HeadSpec],
    conf_threshold: f64,
) -> Result<Vec<Vec<Detection>>> {
    if outputs.len() != heads.len() {
        return Err(Error::invalid(
            "decode",
            format!("{} head outputs for {} heads", outputs.len(), heads.len()),
        ));
    }
    let mut merged: Vec<Vec<Detection>> = Vec::new();
    for (raw, head) in outputs.iter().zip(heads) {
        let per_image = decode(raw, head, conf_threshold)?;
        if merged.is_empty() {
            merged = per_image;
        } else {
            for (m, d) in merged.iter_mut().zip(per_image) {
                m.extend(d);
            }
        }
    }
    Ok(merged)
}
