//! Dataset generation, on-disk layout, box extraction and the resize
//! pipeline between original and model resolution.

mod dataset;
mod mask;
pub mod pnm;
mod preprocess;
mod synth;

pub(crate) use dataset::fnv1a;

pub use dataset::{
    load_sample, load_samples, split_dataset, DatasetManifest, ManifestEntry, SegmentationSample,
    Split, FORMAT_VERSION, MANIFEST_FILE,
};
pub use mask::{extract_box, BinaryMask};
pub use preprocess::{downsample_gt, normalize, resize_for_model, scale_box};
pub use synth::{
    generate_synthetic_dataset, render_image, synthetic_sample, CenterProfile, SyntheticImage, MAX_AREA_FRACTION,
    MIN_AREA_FRACTION,
};
