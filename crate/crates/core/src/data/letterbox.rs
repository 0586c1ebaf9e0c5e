use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Gray used for padding.
pub const PAD_VALUE: f32 = 114.0 / 255.0;

/// How an image was placed into the network input: `x' = x·scale + pad_x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: usize,
    pub pad_y: usize,
    /// Size of the resized content.
    pub new_w: usize,
    pub new_h: usize,
    pub src_w: usize,
    pub src_h: usize,
}

impl Letterbox {
    /// Transform for a `src_w × src_h` image into `target_w × target_h`.
    pub fn new(src_w: usize, src_h: usize, target_w: usize, target_h: usize) -> Self {
        let scale = (target_w as f64 / src_w as f64).min(target_h as f64 / src_h as f64);
        let new_w = ((src_w as f64 * scale).round() as usize).clamp(1, target_w);
        let new_h = ((src_h as f64 * scale).round() as usize).clamp(1, target_h);
        Self {
            scale,
            pad_x: (target_w - new_w) / 2,
            pad_y: (target_h - new_h) / 2,
            new_w,
            new_h,
            src_w,
            src_h,
        }
    }

    /// Original image pixels to network input pixels.
    pub fn forward(&self, b: &BBox) -> BBox {
        let (s, px, py) = (self.scale, self.pad_x as f64, self.pad_y as f64);
        BBox::new(b.x1 * s + px, b.y1 * s + py, b.x2 * s + px, b.y2 * s + py)
    }

    /// Network input pixels back to original pixels, clipped to the image.
    pub fn inverse(&self, b: &BBox) -> BBox {
        let (s, px, py) = (self.scale, self.pad_x as f64, self.pad_y as f64);
        BBox::new((b.x1 - px) / s, (b.y1 - py) / s, (b.x2 - px) / s, (b.y2 - py) / s)
            .clip(self.src_w as f64, self.src_h as f64)
    }
}

/// Aspect-preserving nearest-neighbour resize into `target_w × target_h`,
/// centered on a gray canvas.
pub fn letterbox(img: &Tensor<f32>, target_w: usize, target_h: usize) -> Result<(Tensor<f32>, Letterbox)> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 || s.h == 0 || s.w == 0 {
        return Err(Error::shape("letterbox", "(1, 3, H, W)", s));
    }
    if target_w == 0 || target_h == 0 {
        return Err(Error::invalid("letterbox", "empty target"));
    }
    let lb = Letterbox::new(s.w, s.h, target_w, target_h);
    let src_x: Vec<usize> = (0..lb.new_w)
        .map(|x| (((x as f64 + 0.5) * s.w as f64 / lb.new_w as f64) as usize).min(s.w - 1))
        .collect();
    let src_y: Vec<usize> = (0..lb.new_h)
        .map(|y| (((y as f64 + 0.5) * s.h as f64 / lb.new_h as f64) as usize).min(s.h - 1))
        .collect();
    let mut out = Tensor::full(Shape::new(1, 3, target_h, target_w), PAD_VALUE);
    let data = out.data_mut();
    for c in 0..3 {
        let src = img.plane(0, c);
        for (y, &sy) in src_y.iter().enumerate() {
            let row = (c * target_h + y + lb.pad_y) * target_w + lb.pad_x;
            for (x, &sx) in src_x.iter().enumerate() {
                data[row + x] = src[sy * s.w + sx];
            }
        }
    }
    Ok((out, lb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_input_of_target_size_is_identity() {
        let img = Tensor::from_fn(Shape::new(1, 3, 8, 8), |i| i as f32 / 192.0);
        let (out, lb) = letterbox(&img, 8, 8).unwrap();
        assert!(out.bitwise_eq(&img));
        assert_eq!((lb.scale, lb.pad_x, lb.pad_y), (1.0, 0, 0));
    }

    #[test]
    fn wide_image_gets_vertical_bars() {
        let lb = Letterbox::new(1280, 640, 640, 640);
        assert_eq!((lb.scale, lb.new_w, lb.new_h, lb.pad_x, lb.pad_y), (0.5, 640, 320, 0, 160));
        let img = Tensor::full(Shape::new(1, 3, 4, 8), 1.0);
        let (out, _) = letterbox(&img, 4, 4).unwrap();
        let plane = out.plane(0, 0);
        assert_eq!(&plane[..4], &[PAD_VALUE; 4]);
        assert_eq!(&plane[4..12], &[1.0; 8]);
        assert_eq!(&plane[12..], &[PAD_VALUE; 4]);
    }

    #[test]
    fn box_round_trip() {
        let lb = Letterbox::new(1280, 640, 640, 640);
        let b = BBox::new(100.0, 50.0, 900.0, 600.0);
        assert_eq!(lb.inverse(&lb.forward(&b)), b);
    }
}
