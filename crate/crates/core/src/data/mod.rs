//! Labels, image files, letterboxing, dataset layout and splitting.

mod dataset;
mod image;
mod labels;
mod letterbox;
mod split;
mod synthetic;

pub use dataset::{label_path, list_images, load_dataset, load_sample, select_split, Sample, Split, IMAGE_EXTENSIONS};
pub use image::{decode_image, draw_box, encode_ppm, encode_raw, load_image, save_ppm, save_raw, RAW_MAGIC};
pub use labels::{parse_labels, serialize_labels, Label};
pub use letterbox::{letterbox, Letterbox, PAD_VALUE};
pub use split::{split_dataset, split_sizes};
pub use synthetic::{make_synthetic, synthetic_sample, write_synthetic, CLASS_COLORS};
