use std::fmt::Write;

use crate::detect::{BBox, GroundTruth};
use crate::error::{Error, Result};

/// One annotation: class and normalized center/size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Label {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Label {
    /// Box in pixels of a `width × height` image.
    pub fn to_pixels(&self, width: f64, height: f64) -> BBox {
        BBox::from_cxcywh(self.cx * width, self.cy * height, self.w * width, self.h * height)
    }

    pub fn to_ground_truth(&self, width: f64, height: f64) -> GroundTruth {
        GroundTruth {
            bbox: self.to_pixels(width, height),
            class_id: self.class_id,
        }
    }

    /// Label for a pixel box, clipped to the image.
    pub fn from_pixels(b: &BBox, class_id: usize, width: f64, height: f64) -> Self {
        let b = b.clip(width, height);
        let (cx, cy) = b.center();
        Self {
            class_id,
            cx: cx / width,
            cy: cy / height,
            w: b.width() / width,
            h: b.height() / height,
        }
    }
}

/// Parse `class cx cy w h` lines. Blank lines are skipped; `source` names the
/// file in errors.
pub fn parse_labels(text: &str, source: &str) -> Result<Vec<Label>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Label {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields `class cx cy w h`, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("class id `{}` is not a non-negative integer", fields[0])))?;
        let mut v = [0.0f64; 4];
        for (k, (slot, tok)) in v.iter_mut().zip(&fields[1..]).enumerate() {
            *slot = tok
                .parse()
                .map_err(|_| err(format!("field {} `{tok}` is not a number", k + 2)))?;
        }
        let names = ["cx", "cy", "w", "h"];
        for (k, &x) in v.iter().enumerate() {
            if !(0.0..=1.0).contains(&x) {
                return Err(err(format!("{} = {x} is outside [0, 1]", names[k])));
            }
        }
        if v[2] <= 0.0 || v[3] <= 0.0 {
            return Err(err("w and h must be positive".into()));
        }
        out.push(Label {
            class_id,
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        });
    }
    Ok(out)
}

/// Inverse of [`parse_labels`]: shortest round-tripping decimals.
pub fn serialize_labels(labels: &[Label]) -> String {
    let mut s = String::new();
    for l in labels {
        writeln!(s, "{} {} {} {} {}", l.class_id, l.cx, l.cy, l.w, l.h).expect("writing to a String");
    }
    s
}
