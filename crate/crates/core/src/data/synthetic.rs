use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{save_ppm, serialize_labels, Label};
use crate::detect::{iou, BBox};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Fill colour per class.
pub const CLASS_COLORS: [[f32; 3]; 2] = [[0.9, 0.15, 0.15], [0.15, 0.35, 0.95]];

/// `size × size` dark noise with one or two non-overlapping solid rectangles,
/// coloured by class.
pub fn synthetic_sample(rng: &mut ChaCha8Rng, size: usize) -> (Tensor<f32>, Vec<Label>) {
    let mut img = Tensor::from_fn(Shape::new(1, 3, size, size), |_| rng.random_range(0.0..0.25f32));
    let count = rng.random_range(1..=2);
    let mut boxes: Vec<BBox> = Vec::new();
    let mut labels = Vec::new();
    let (lo, hi) = ((size / 4).max(1), (size * 11 / 20).max(2));
    for _ in 0..20 {
        if boxes.len() == count {
            break;
        }
        let (w, h) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        let (x, y) = (rng.random_range(0..=size - w), rng.random_range(0..=size - h));
        let b = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
        if boxes.iter().any(|o| iou(o, &b) > 0.0) {
            continue;
        }
        let class_id = rng.random_range(0..CLASS_COLORS.len());
        let data = img.data_mut();
        for (c, &v) in CLASS_COLORS[class_id].iter().enumerate() {
            for yy in y..y + h {
                let row = (c * size + yy) * size;
                data[row + x..row + x + w].fill(v);
            }
        }
        boxes.push(b);
        labels.push(Label::from_pixels(&b, class_id, size as f64, size as f64));
    }
    (img, labels)
}

pub fn make_synthetic(n: usize, size: usize, seed: u64) -> Vec<(Tensor<f32>, Vec<Label>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synthetic_sample(&mut rng, size)).collect()
}

/// Write `images/NNNN.ppm` and `labels/NNNN.txt` under `dir`.
pub fn write_synthetic(dir: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    if size < 8 {
        return Err(Error::invalid("make_synthetic", "image size must be at least 8"));
    }
    for sub in ["images", "labels"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let mut paths = Vec::new();
    for (i, (img, labels)) in make_synthetic(n, size, seed).into_iter().enumerate() {
        let path = dir.join("images").join(format!("{i:04}.ppm"));
        save_ppm(&img, &path)?;
        let lp = dir.join("labels").join(format!("{i:04}.txt"));
        std::fs::write(&lp, serialize_labels(&labels)).map_err(|e| Error::io(format!("writing {}", lp.display()), e))?;
        paths.push(path);
    }
    Ok(paths)
}
