use std::time::{Duration, Instant};

use crate::data::{letterbox, make_synthetic, Sample};
use crate::detect::{
    decode_all, evaluate, nms, Detection, HeadSpec, MetricsReport, DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Wall-clock split of one detection.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    /// Letterbox and forward pass.
    pub interface: Duration,
    /// Decode, NMS and mapping back to image pixels.
    pub post: Duration,
}

/// End-to-end inference on original images.
#[derive(Clone, Debug)]
pub struct Detector<'a> {
    model: &'a Model<f32>,
    heads: Vec<HeadSpec>,
    input_w: usize,
    input_h: usize,
    pub conf: f64,
    pub iou: f64,
}

impl<'a> Detector<'a> {
    /// Network input from the model config, default thresholds.
    pub fn new(model: &'a Model<f32>) -> Self {
        let [h, w] = model.config.input_size;
        Self {
            model,
            heads: HeadSpec::from_config(&model.config),
            input_w: w,
            input_h: h,
            conf: DEFAULT_CONF_THRESHOLD,
            iou: DEFAULT_IOU_THRESHOLD,
        }
    }

    /// Square network input of `size` pixels.
    pub fn with_input_size(mut self, size: usize) -> Result<Self> {
        if size == 0 || size % 32 != 0 {
            return Err(Error::invalid("detector", format!("input size {size} must be a positive multiple of 32")));
        }
        self.input_w = size;
        self.input_h = size;
        Ok(self)
    }

    pub fn with_thresholds(mut self, conf: f64, iou: f64) -> Self {
        self.conf = conf;
        self.iou = iou;
        self
    }

    pub fn model(&self) -> &Model<f32> {
        self.model
    }

    /// Detections in the pixel space of `image` (`(1, 3, H, W)`).
    pub fn detect(&self, image: &Tensor<f32>) -> Result<Vec<Detection>> {
        Ok(self.detect_timed(image)?.0)
    }

    pub fn detect_timed(&self, image: &Tensor<f32>) -> Result<(Vec<Detection>, Timing)> {
        let start = Instant::now();
        let (input, lb) = letterbox(image, self.input_w, self.input_h)?;
        let outputs = self.model.predict(&input)?;
        let mid = Instant::now();
        let candidates = decode_all(&outputs, &self.heads, self.conf)?.remove(0);
        let kept: Vec<Detection> = nms(&candidates, self.iou)
            .into_iter()
            .map(|d| Detection {
                bbox: lb.inverse(&d.bbox),
                ..d
            })
            .filter(|d| d.bbox.is_valid())
            .collect();
        let end = Instant::now();
        Ok((
            kept,
            Timing {
                interface: mid - start,
                post: end - mid,
            },
        ))
    }

    /// Metrics over labelled samples, boxes compared in original pixels.
    pub fn evaluate(&self, samples: &[Sample], thresholds: &[f64]) -> Result<MetricsReport> {
        let mut preds = Vec::with_capacity(samples.len());
        let mut gts = Vec::with_capacity(samples.len());
        for s in samples {
            preds.push(self.detect(&s.image)?);
            gts.push(s.ground_truth());
        }
        evaluate(&preds, &gts, self.model.config.num_classes, thresholds)
    }
}

/// One row of the efficiency table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchReport {
    pub params_m: f64,
    pub interface_ms: f64,
    pub nms_ms: f64,
    /// `interface_ms + nms_ms`.
    pub total_ms: f64,
}

impl BenchReport {
    pub const HEADER: &'static str = "Params(M) Interface(ms) NMS(ms) Total(ms)";

    pub fn row(&self) -> String {
        format!(
            "{:.2} {:.2} {:.2} {:.2}",
            self.params_m, self.interface_ms, self.nms_ms, self.total_ms
        )
    }
}

/// Mean timings over `runs` detections of `image` after `warmup` untimed ones.
pub fn bench(detector: &Detector, image: &Tensor<f32>, runs: usize, warmup: usize) -> Result<BenchReport> {
    if runs == 0 {
        return Err(Error::invalid("bench", "runs must be at least 1"));
    }
    for _ in 0..warmup {
        detector.detect(image)?;
    }
    let (mut interface, mut post) = (Duration::ZERO, Duration::ZERO);
    for _ in 0..runs {
        let (_, t) = detector.detect_timed(image)?;
        interface += t.interface;
        post += t.post;
    }
    let ms = |d: Duration| d.as_secs_f64() * 1e3 / runs as f64;
    let (interface_ms, nms_ms) = (ms(interface), ms(post));
    Ok(BenchReport {
        params_m: detector.model().count_params() as f64 / 1e6,
        interface_ms,
        nms_ms,
        total_ms: interface_ms + nms_ms,
    })
}

/// Fixed synthetic `size × size` image used for timing.
pub fn bench_image(size: usize) -> Tensor<f32> {
    make_synthetic(1, size, 0).remove(0).0
}
