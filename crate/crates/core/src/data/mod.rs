//! Volume I/O, preprocessing and its inverse, augmentation and synthetic phantoms.

pub mod augment;
pub mod dataset;
pub mod phantom;
pub mod preprocess;
pub mod volume;

pub use augment::{augment, AugmentPolicy, Augmentation};
pub use dataset::{
    generate_dataset, load_split, prepare_case, Manifest, ManifestCase, PreparedCase, Split,
};
pub use phantom::{default_profiles, generate_phantom, HuProfile};
pub use preprocess::{
    compute_roi, postprocess, preprocess, window_and_scale, Preprocessed, Roi, TransformRecord,
};
pub use volume::{read_volume, write_volume, Dtype, Rvol, VolumeCase, Voxels};
