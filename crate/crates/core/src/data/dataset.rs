use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{letterbox, load_image, parse_labels, split_dataset, Label, Letterbox};
use crate::detect::GroundTruth;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::TrainSample;

/// Image file extensions recognised under `images/`.
pub const IMAGE_EXTENSIONS: [&str; 2] = ["ppm", "dgsi"];

/// An image with its annotations.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub labels: Vec<Label>,
    pub path: PathBuf,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s.w, s.h)
    }

    /// Ground truth in original image pixels.
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        let (w, h) = self.size();
        self.labels.iter().map(|l| l.to_ground_truth(w as f64, h as f64)).collect()
    }

    /// Letterboxed to the network input, boxes mapped accordingly.
    pub fn to_train(&self, input_w: usize, input_h: usize) -> Result<(TrainSample, Letterbox)> {
        let (image, lb) = letterbox(&self.image, input_w, input_h)?;
        let gts = self
            .ground_truth()
            .into_iter()
            .map(|g| GroundTruth {
                bbox: lb.forward(&g.bbox),
                class_id: g.class_id,
            })
            .collect();
        Ok((TrainSample { image, gts }, lb))
    }
}

/// Partition selected from a dataset directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Dataset(format!("unknown split `{other}` (all, train, val, test)"))),
        }
    }
}

/// Image files under `dir/images`, sorted by path.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let images = dir.join("images");
    let entries = std::fs::read_dir(&images).map_err(|e| Error::io(format!("listing {}", images.display()), e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("listing {}", images.display()), e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
        if IMAGE_EXTENSIONS.contains(&ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// `dir/labels/<stem>.txt` for an image path.
pub fn label_path(dir: &Path, image: &Path) -> PathBuf {
    let stem = image.file_stem().unwrap_or_default();
    dir.join("labels").join(stem).with_extension("txt")
}

/// Load one image and its labels; a missing label file means no objects.
pub fn load_sample(dir: &Path, image: &Path, num_classes: usize) -> Result<Sample> {
    let lp = label_path(dir, image);
    let labels = match std::fs::read_to_string(&lp) {
        Ok(text) => parse_labels(&text, &lp.display().to_string())?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(format!("reading {}", lp.display()), e)),
    };
    if let Some(l) = labels.iter().find(|l| l.class_id >= num_classes) {
        return Err(Error::Dataset(format!(
            "{}: class id {} outside 0..{num_classes}",
            lp.display(),
            l.class_id
        )));
    }
    Ok(Sample {
        image: load_image(image)?,
        labels,
        path: image.to_path_buf(),
    })
}

/// Image paths of one partition; the split is taken over the sorted list.
pub fn select_split(paths: &[PathBuf], split: Split, seed: u64) -> Result<Vec<PathBuf>> {
    if split == Split::All {
        return Ok(paths.to_vec());
    }
    let (train, val, test) = split_dataset(paths, seed)?;
    Ok(match split {
        Split::Train => train,
        Split::Val => val,
        _ => test,
    })
}

/// Load a partition of the dataset at `dir`, in path order.
pub fn load_dataset(dir: &Path, split: Split, seed: u64, num_classes: usize) -> Result<Vec<Sample>> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Dataset(format!("no images under {}", dir.join("images").display())));
    }
    let mut chosen = select_split(&paths, split, seed)?;
    chosen.sort();
    chosen.iter().map(|p| load_sample(dir, p, num_classes)).collect()
}
