//! Synthetic structured-parts world and its CNN teacher.

pub mod dataset;
pub mod gradcam;
pub mod image;
pub mod render;
pub mod spec;
pub mod teacher;

pub use dataset::{load_dataset, load_image, save_dataset, save_image};
pub use gradcam::{grad_attention, AttentionMap};
pub use image::{mask_image, occlude_region, Image, MaskedImage, PixelBox};
pub use render::{generate_dataset, generate_range, mean_pixel, render_image, LabeledImage, PartPlacement};
pub use spec::{ClassSpec, Glyph, PartSpec, Pose, WorldSpec};
pub use teacher::{argmax, train_teacher, TeacherArch, TeacherModel, TeacherTrainConfig};
