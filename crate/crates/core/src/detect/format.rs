use super::{Detection, MetricsReport};

/// `v` with `digits` significant digits, trailing zeros kept.
pub fn sig(v: f64, digits: usize) -> String {
    let digits = digits.max(1);
    if v == 0.0 || !v.is_finite() {
        return format!("{:.*}", digits - 1, v);
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = |e: i32| (digits as i32 - 1 - e).max(0) as usize;
    let s = format!("{:.*}", decimals(exp), v);
    // Rounding may carry into a new leading digit (9.9996 -> 10.000).
    let rounded: f64 = s.parse().unwrap_or(v);
    if rounded != 0.0 && rounded.abs().log10().floor() as i32 > exp {
        format!("{:.*}", decimals(exp + 1), v)
    } else {
        s
    }
}

/// `class_id score x1 y1 x2 y2`, floats with 6 significant digits.
pub fn detection_line(d: &Detection) -> String {
    let b = d.bbox;
    format!(
        "{} {} {} {} {} {}",
        d.class_id,
        sig(d.score, 6),
        sig(b.x1, 6),
        sig(b.y1, 6),
        sig(b.x2, 6),
        sig(b.y2, 6)
    )
}

impl MetricsReport {
    /// Header matching [`MetricsReport::row`].
    pub const HEADER: &'static str = "P R mAP@.5 mAP@.5:.95 F1";

    /// `P R mAP@.5 mAP@.5:.95 F1` with 4 significant digits.
    pub fn row(&self) -> String {
        [self.precision, self.recall, self.map50, self.map5095, self.f1]
            .map(|v| sig(v, 4))
            .join(" ")
    }
}
