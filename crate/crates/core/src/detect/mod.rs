//! Box decoding, suppression and detection metrics.

mod boxes;
mod decode;
mod format;
mod metrics;
mod nms;

pub use boxes::{ciou, ciou_boxes, iou, BBox, Dual, Real, CIOU_EPS};
pub use decode::{decode, decode_all, decode_box, sigmoid, Detection, HeadSpec, BOX_FIELDS};
pub use format::{detection_line, sig};
pub use metrics::{average_precision, average_precision_exact, coco_thresholds, evaluate, f1, GroundTruth, MetricsReport};
pub use nms::{nms, DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD};
